//! Exact analytic quantities on a tabular instance: regularized optima,
//! objective values, suboptimality gaps, coverage coefficients, rating
//! errors, and the theoretical rate diagnostics.

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::math::{
    chi2_divergence, kl_divergence, phi, phi_inverse, DivergenceKind, NeumaierSum, PromptDist,
    RewardTable, SoftmaxPolicy,
};

const SHIFT_TOL: f64 = 1e-12;
const SHIFT_MAX_ITERS: usize = 200;

/// Regularized optimum together with its per-prompt normalizing shift.
#[derive(Debug, Clone)]
pub struct OptimalSolution {
    pub policy: SoftmaxPolicy,
    /// Per-prompt shift zeta(x); for the KL kind this is log Z(x).
    pub shift: Vec<f64>,
    /// Largest |sum_a pi_ref phi^{-1}(r/beta - zeta) - 1| over prompts.
    pub residual: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("beta must be > 0, got {beta}")))
    }
}

fn check_table(r: &RewardTable, reference: &SoftmaxPolicy) -> Result<()> {
    if r.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "reward table {:?} vs policy {:?}",
            r.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

/// Maximizer of <pi, r> - beta D(pi, pi_ref) with the divergence given by `kind`.
pub fn optimal_policy(
    r: &RewardTable,
    beta: f64,
    reference: &SoftmaxPolicy,
    nu: &PromptDist,
    kind: DivergenceKind,
) -> Result<SoftmaxPolicy> {
    Ok(solve_optimal_policy(r, beta, reference, nu, kind)?.policy)
}

/// [`optimal_policy`] with the solver diagnostics.
pub fn solve_optimal_policy(
    r: &RewardTable,
    beta: f64,
    reference: &SoftmaxPolicy,
    nu: &PromptDist,
    kind: DivergenceKind,
) -> Result<OptimalSolution> {
    check_beta(beta)?;
    check_table(r, reference)?;
    kind.validate()?;
    let (np, k) = reference.shape();
    if nu.num_prompts() != np {
        return Err(Error::Dimension(format!(
            "prompt distribution over {} prompts vs policy over {np}",
            nu.num_prompts()
        )));
    }
    let log_ref = reference.log_probs();
    let gamma = kind.gamma();
    let mut logits = vec![0.0; np * k];
    let mut shift = vec![0.0; np];
    let mut residual: f64 = 0.0;
    for x in 0..np {
        let v: Vec<f64> = r.row(x).iter().map(|ri| ri / beta).collect();
        let lref = &log_ref[x * k..(x + 1) * k];
        if gamma == 0.0 {
            let s: Vec<f64> = lref.iter().zip(&v).map(|(l, vi)| l + vi).collect();
            let lz = crate::math::log_sum_exp(&s);
            for a in 0..k {
                logits[x * k + a] = s[a] - lz;
            }
            shift[x] = lz;
            continue;
        }
        let pref: Vec<f64> = lref.iter().map(|l| l.exp()).collect();
        let (zeta, rho, res) = solve_shift(&v, &pref, kind)?;
        let total: f64 = pref.iter().zip(&rho).map(|(p, q)| p * q).sum();
        for a in 0..k {
            logits[x * k + a] = lref[a] + rho[a].ln() - total.ln();
        }
        shift[x] = zeta;
        residual = residual.max(res);
    }
    let mut policy = SoftmaxPolicy::from_flat(logits, np, k)?;
    policy.recenter();
    Ok(OptimalSolution {
        policy,
        shift,
        residual,
    })
}

/// Finds zeta with sum_a pref_a phi^{-1}(v_a - zeta) = 1; h is decreasing in
/// zeta, and at zeta = v_a - gamma the a-th ratio equals 1, which brackets
/// the root between min(v) - gamma and max(v) - gamma.
fn solve_shift(v: &[f64], pref: &[f64], kind: DivergenceKind) -> Result<(f64, Vec<f64>, f64)> {
    let gamma = kind.gamma();
    let eval = |zeta: f64| -> Result<(f64, f64, Vec<f64>)> {
        let rho = v
            .iter()
            .map(|vi| phi_inverse(vi - zeta, kind))
            .collect::<Result<Vec<f64>>>()?;
        let h: NeumaierSum = pref.iter().zip(&rho).map(|(p, q)| p * q).collect();
        let dh: f64 = -pref
            .iter()
            .zip(&rho)
            .map(|(p, q)| p * q / (gamma * q + 1.0))
            .sum::<f64>();
        Ok((h.value() - 1.0, dh, rho))
    };
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (vmin - gamma, vmax - gamma);
    let mut zeta = 0.5 * (lo + hi);
    for _ in 0..SHIFT_MAX_ITERS {
        let (h, dh, rho) = eval(zeta)?;
        if h.abs() <= SHIFT_TOL {
            return Ok((zeta, rho, h.abs()));
        }
        if h > 0.0 {
            lo = zeta;
        } else {
            hi = zeta;
        }
        let newton = zeta - h / dh;
        zeta = if newton > lo && newton < hi && dh < 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * zeta.abs().max(1.0) {
            let (h, _, rho) = eval(zeta)?;
            if h.abs() <= SHIFT_TOL {
                return Ok((zeta, rho, h.abs()));
            }
            break;
        }
    }
    Err(Error::Numeric(format!(
        "normalizing shift did not converge within {SHIFT_MAX_ITERS} iterations"
    )))
}

/// nu0-weighted expected reward <pi, r>.
pub fn expected_reward(policy: &SoftmaxPolicy, r: &RewardTable, nu: &PromptDist) -> Result<f64> {
    check_table(r, policy)?;
    crate::math::check_prompts(policy, nu)?;
    let (np, _) = policy.shape();
    let total: NeumaierSum = (0..np)
        .flat_map(|x| {
            let w = nu.weight(x);
            let probs = policy.prob_row(x);
            let row = r.row(x);
            probs
                .into_iter()
                .zip(row.iter())
                .map(move |(p, ri)| w * p * ri)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(total.value())
}

/// Regularized objective <pi, r> - beta KL(pi, ref) - beta gamma chi2(pi, ref).
pub fn objective_j_beta(
    policy: &SoftmaxPolicy,
    r: &RewardTable,
    beta: f64,
    reference: &SoftmaxPolicy,
    nu: &PromptDist,
    kind: DivergenceKind,
) -> Result<f64> {
    check_beta(beta)?;
    kind.validate()?;
    let reward = expected_reward(policy, r, nu)?;
    let kl = kl_divergence(policy, reference, nu)?;
    let gamma = kind.gamma();
    let chi = if gamma > 0.0 {
        chi2_divergence(policy, reference, nu)?
    } else {
        0.0
    };
    Ok(reward - beta * kl - beta * gamma * chi)
}

/// J(pi*) - J(policy) for the KL-regularized objective at `beta_eff`.
pub fn suboptimality_gap(policy: &SoftmaxPolicy, env: &Environment, beta_eff: f64) -> Result<f64> {
    suboptimality_gap_with(policy, env, beta_eff, DivergenceKind::Kl)
}

/// [`suboptimality_gap`] under an arbitrary regularizer.
pub fn suboptimality_gap_with(
    policy: &SoftmaxPolicy,
    env: &Environment,
    beta_eff: f64,
    kind: DivergenceKind,
) -> Result<f64> {
    policy.check_same_shape(env.pi_ref())?;
    let star = optimal_policy(env.r_star(), beta_eff, env.pi_ref(), env.nu0(), kind)?;
    let j = |p: &SoftmaxPolicy| objective_j_beta(p, env.r_star(), beta_eff, env.pi_ref(), env.nu0(), kind);
    Ok(j(&star)? - j(policy)?)
}

/// Coverage sum_x nu0(x) sum_a pi(a|x)^2 / pi_data(a|x).
pub fn concentrability(pi: &SoftmaxPolicy, env: &Environment) -> Result<f64> {
    pi.check_same_shape(env.pi_data())?;
    let (np, _) = pi.shape();
    let total: NeumaierSum = (0..np)
        .flat_map(|x| {
            let w = env.nu0().weight(x);
            let p = pi.prob_row(x);
            let d = env.pi_data().prob_row(x);
            p.into_iter()
                .zip(d)
                .map(move |(pa, da)| w * pa * pa / da)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(total.value())
}

/// Coverage of the KL optimum at `beta_eff`.
pub fn c_star(env: &Environment, beta_eff: f64) -> Result<f64> {
    let star = optimal_policy(env.r_star(), beta_eff, env.pi_ref(), env.nu0(), DivergenceKind::Kl)?;
    concentrability(&star, env)
}

/// Largest coverage over a finite proxy of the policy class.
pub fn c_max(policies: &[SoftmaxPolicy], env: &Environment) -> Result<f64> {
    if policies.is_empty() {
        return Err(Error::Argument("c_max needs at least one policy".into()));
    }
    policies
        .iter()
        .map(|p| concentrability(p, env))
        .try_fold(f64::NEG_INFINITY, |m, c| Ok(m.max(c?)))
}

/// E over x ~ nu0, a, a' ~ pi_data of (gap_{r*} - gap_hat)^2 with the
/// estimated gap given as a function of (x, a, a').
pub fn err_rating_with<F>(gap_hat: F, env: &Environment) -> f64
where
    F: Fn(usize, usize, usize) -> f64,
{
    let (np, k) = (env.num_prompts(), env.num_responses());
    let mut total = NeumaierSum::default();
    for x in 0..np {
        let w = env.nu0().weight(x);
        if w == 0.0 {
            continue;
        }
        let d = env.pi_data().prob_row(x);
        for a in 0..k {
            for b in 0..k {
                let e = env.r_star().gap(x, a, b) - gap_hat(x, a, b);
                total.add(w * d[a] * d[b] * e * e);
            }
        }
    }
    total.value()
}

/// Rating error of a tabular estimate.
pub fn err_rating(r_hat: &RewardTable, env: &Environment) -> Result<f64> {
    if r_hat.shape() != env.r_star().shape() {
        return Err(Error::Dimension(format!(
            "rating table {:?} vs environment {:?}",
            r_hat.shape(),
            env.r_star().shape()
        )));
    }
    Ok(err_rating_with(|x, a, b| r_hat.gap(x, a, b), env))
}

/// Implicit reward beta phi(pi/pi_ref), equal to the reward that makes
/// `policy` optimal up to a per-prompt constant.
pub fn implicit_reward(
    policy: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    beta: f64,
    kind: DivergenceKind,
) -> Result<RewardTable> {
    check_beta(beta)?;
    policy.check_same_shape(reference)?;
    let (np, k) = policy.shape();
    let lp = policy.log_probs();
    let lr = reference.log_probs();
    let values = lp
        .iter()
        .zip(&lr)
        .map(|(p, q)| {
            if kind.gamma() == 0.0 {
                Ok(beta * (p - q))
            } else {
                Ok(beta * phi((p - q).exp(), kind)?)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    RewardTable::from_values(values, np, k)
}

fn default_c() -> f64 {
    32.0
}
fn default_delta() -> f64 {
    0.1
}
fn default_class_size() -> f64 {
    100.0
}
fn default_bound_beta() -> f64 {
    0.1
}

/// Constants of the rate diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Surrogate for |Pi| inside log(|Pi|/delta).
    #[serde(default = "default_class_size")]
    pub policy_class_size: f64,
    pub r_max: f64,
    pub n: usize,
    /// Ranking regularization used in the beta1 prescription.
    #[serde(default = "default_bound_beta")]
    pub beta: f64,
}

impl BoundParams {
    pub fn new(r_max: f64, n: usize) -> Self {
        Self {
            c: default_c(),
            delta: default_delta(),
            policy_class_size: default_class_size(),
            r_max,
            n,
            beta: default_bound_beta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must be > 0, got {v}")))
            }
        };
        pos(self.c, "c")?;
        pos(self.policy_class_size, "policy_class_size")?;
        pos(self.r_max, "r_max")?;
        pos(self.beta, "beta")?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Argument(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.n == 0 {
            return Err(Error::Argument("n must be positive".into()));
        }
        Ok(())
    }

    fn log_term(&self) -> f64 {
        (self.policy_class_size / self.delta).ln()
    }

    /// c R^2 e^{4R} log(|Pi|/delta) / N.
    pub fn err_dpo(&self) -> f64 {
        let r = self.r_max;
        self.c * r * r * (4.0 * r).exp() * self.log_term() / self.n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub err_dpo: f64,
    pub rdpo_bound: f64,
    pub mlrdpo_bound: f64,
    pub beta1_theorem1: f64,
}

/// Diagnostic rates with big-O constants set to one.
pub fn rate_bounds(params: &BoundParams, err_rating_value: f64, variance: f64, c_conc: f64) -> Result<RateBounds> {
    params.validate()?;
    for (v, name) in [
        (err_rating_value, "err_rating"),
        (variance, "variance"),
        (c_conc, "concentrability"),
    ] {
        if !(v >= 0.0) || v.is_nan() {
            return Err(Error::Argument(format!("{name} must be >= 0, got {v}")));
        }
    }
    let err_dpo = params.err_dpo();
    let r = params.r_max;
    let ml_scale = (r.exp() * r * r).min(r * r + variance);
    Ok(RateBounds {
        err_dpo,
        rdpo_bound: (c_conc * err_dpo.min(err_rating_value)).sqrt(),
        mlrdpo_bound: (c_conc * ml_scale * params.log_term() / params.n as f64).sqrt(),
        beta1_theorem1: params.beta * err_rating_value / err_dpo,
    })
}

/// Outcome of the error-decomposition inequality check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub alpha: f64,
    pub err_out: f64,
    pub err_hat: f64,
    pub err_bar: f64,
    /// 2(1-alpha)^2 Err(r_out) + 2 alpha^2 Err(r_hat).
    pub young_rhs: f64,
    pub young_slack: f64,
    pub young_holds: bool,
    /// Harmonic form 2 (1/Err_DPO + 1/Err(r_hat))^{-1}.
    pub lemma_bound: f64,
    /// Whether Err(r_out) <= Err_DPO, the event under which the lemma applies.
    pub lemma_applicable: bool,
    pub lemma_holds: Option<bool>,
}

/// Evaluates both sides of the decomposition for r_bar = (1-alpha) r_out + alpha r_hat.
pub fn error_decomposition_check(
    env: &Environment,
    r_out: &RewardTable,
    r_hat: &RewardTable,
    err_dpo: f64,
) -> Result<DecompositionReport> {
    if !(err_dpo > 0.0 && err_dpo.is_finite()) {
        return Err(Error::Argument(format!("err_dpo must be > 0, got {err_dpo}")));
    }
    let err_out = err_rating(r_out, env)?;
    let err_hat = err_rating(r_hat, env)?;
    let alpha = 1.0 / (1.0 + err_hat / err_dpo);
    let err_bar = err_rating_with(
        |x, a, b| (1.0 - alpha) * r_out.gap(x, a, b) + alpha * r_hat.gap(x, a, b),
        env,
    );
    let young_rhs = 2.0 * (1.0 - alpha).powi(2) * err_out + 2.0 * alpha * alpha * err_hat;
    let young_slack = young_rhs - err_bar;
    // the inequality is exact in reals; allow only summation rounding
    let young_holds = young_slack >= -1e-12 * young_rhs.max(f64::MIN_POSITIVE);
    let lemma_bound = if err_hat == 0.0 {
        0.0
    } else {
        2.0 * err_dpo * err_hat / (err_dpo + err_hat)
    };
    let lemma_applicable = err_out <= err_dpo;
    let lemma_holds = lemma_applicable.then_some(err_bar <= lemma_bound * (1.0 + 1e-12));
    Ok(DecompositionReport {
        alpha,
        err_out,
        err_hat,
        err_bar,
        young_rhs,
        young_slack,
        young_holds,
        lemma_bound,
        lemma_applicable,
        lemma_holds,
    })
}
