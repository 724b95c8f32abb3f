//! Ranking and rating alignment losses over tabular softmax policies, with
//! exact gradients with respect to the policy logits.
//!
//! Every loss is a sum of per-comparison terms. A [`Term`] carries the
//! prompt, the ordered response pair (chosen first), a weight, and the rating
//! gap when one is observed. Empirical losses use unit weights; the
//! population loss enumerates every (prompt, pair, label) triple with its
//! exact probability, so both paths share the same term arithmetic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{Dataset, Environment, RatingModel};
use crate::error::{Error, Result};
use crate::math::{
    log_sigmoid_unchecked, sigmoid_unchecked, DivergenceKind, NeumaierSum, RewardTable,
    SoftmaxPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    Dpo,
    Ipo,
    Rdpo,
    Ripo,
    Ddpo,
    Mlrdpo,
    Rpo,
    RdpoPenalized,
    RdpoHetero,
    MlrdpoHetero,
}

impl Family {
    pub const ALL: [Family; 10] = [
        Family::Dpo,
        Family::Ipo,
        Family::Rdpo,
        Family::Ripo,
        Family::Ddpo,
        Family::Mlrdpo,
        Family::Rpo,
        Family::RdpoPenalized,
        Family::RdpoHetero,
        Family::MlrdpoHetero,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Dpo => "DPO",
            Family::Ipo => "IPO",
            Family::Rdpo => "RDPO",
            Family::Ripo => "RIPO",
            Family::Ddpo => "DDPO",
            Family::Mlrdpo => "MLRDPO",
            Family::Rpo => "RPO",
            Family::RdpoPenalized => "RDPO_PENALIZED",
            Family::RdpoHetero => "RDPO_HETERO",
            Family::MlrdpoHetero => "MLRDPO_HETERO",
        }
    }

    /// Families whose loss mixes the policy margin with beta/beta1 times the
    /// rating gap; their solutions are evaluated at the effective
    /// regularization beta*beta1/(beta+beta1).
    pub fn is_rdpo_like(&self) -> bool {
        matches!(
            self,
            Family::Rdpo | Family::Ripo | Family::RdpoPenalized | Family::RdpoHetero
        )
    }

    /// Families that need a rating gap on every example.
    pub fn requires_all_ratings(&self) -> bool {
        matches!(
            self,
            Family::Rdpo | Family::Ripo | Family::Ddpo | Family::Rpo | Family::RdpoPenalized
        )
    }

    pub fn uses_ratings(&self) -> bool {
        !matches!(self, Family::Dpo | Family::Ipo)
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Family::Ipo | Family::Ripo | Family::Ddpo)
    }

    fn uses_beta1(&self) -> bool {
        self.is_rdpo_like()
    }

    fn uses_variance(&self) -> bool {
        matches!(self, Family::Mlrdpo)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_beta() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.1
}
fn default_variance() -> f64 {
    0.01
}
fn default_delta_max() -> f64 {
    2.0
}

/// Loss family and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub family: Family,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default)]
    pub divergence: DivergenceKind,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
}

impl AlgorithmSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            beta: default_beta(),
            beta1: default_beta1(),
            variance: default_variance(),
            divergence: DivergenceKind::Kl,
            lambda1: 0.0,
            lambda2: 0.0,
            delta_max: default_delta_max(),
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_beta1(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }

    pub fn with_variance(mut self, variance: f64) -> Self {
        self.variance = variance;
        self
    }

    pub fn with_divergence(mut self, divergence: DivergenceKind) -> Self {
        self.divergence = divergence;
        self
    }

    pub fn with_penalties(mut self, lambda1: f64, lambda2: f64, delta_max: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self.delta_max = delta_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must be > 0, got {v}")))
            }
        };
        positive(self.beta, "beta")?;
        if self.family.uses_beta1() {
            positive(self.beta1, "beta1")?;
        }
        if self.family.uses_variance() {
            positive(self.variance, "variance")?;
        }
        if self.family == Family::RdpoPenalized {
            positive(self.delta_max, "delta_max")?;
        }
        for (v, name) in [(self.lambda1, "lambda1"), (self.lambda2, "lambda2")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be >= 0, got {v}")));
            }
        }
        self.divergence.validate()
    }

    /// Regularization strength at which this family's output is judged.
    pub fn beta_eff(&self) -> f64 {
        if self.family.is_rdpo_like() {
            self.beta * self.beta1 / (self.beta + self.beta1)
        } else {
            self.beta
        }
    }

    /// Short human-readable label, e.g. `RDPO(beta=0.1,beta1=0.025)`.
    pub fn label(&self) -> String {
        let mut parts = vec![format!("beta={}", self.beta)];
        if self.family.uses_beta1() {
            parts.push(format!("beta1={}", self.beta1));
        }
        if self.family.uses_variance() {
            parts.push(format!("V={}", self.variance));
        }
        if self.family == Family::RdpoPenalized {
            parts.push(format!("l1={},l2={},dmax={}", self.lambda1, self.lambda2, self.delta_max));
        }
        if self.divergence.gamma() > 0.0 {
            parts.push(format!("gamma={}", self.divergence.gamma()));
        }
        format!("{}({})", self.family, parts.join(","))
    }
}

/// One comparison's contribution to a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
    pub weight: f64,
    /// Contributes the ranking part (false only for rating-only data).
    pub ranked: bool,
    /// Mean of the rating gap, if rated.
    pub gap: Option<f64>,
    /// Variance of the rating gap around `gap` (population mode only).
    pub gap_var: f64,
}

#[derive(Clone, Copy)]
struct Margin {
    delta: f64,
    w_chosen: f64,
    w_rejected: f64,
}

struct LogRatios {
    log_ratio: Vec<f64>,
    probs: Vec<f64>,
    k: usize,
    gamma: f64,
}

impl LogRatios {
    fn new(policy: &SoftmaxPolicy, reference: &SoftmaxPolicy, kind: DivergenceKind) -> Self {
        let lp = policy.log_probs();
        let lr = reference.log_probs();
        Self {
            log_ratio: lp.iter().zip(&lr).map(|(p, r)| p - r).collect(),
            probs: lp.iter().map(|v| v.exp()).collect(),
            k: policy.shape().1,
            gamma: kind.gamma(),
        }
    }

    fn margin(&self, x: usize, a: usize, b: usize) -> Margin {
        let (la, lb) = (self.log_ratio[x * self.k + a], self.log_ratio[x * self.k + b]);
        if self.gamma == 0.0 {
            return Margin {
                delta: la - lb,
                w_chosen: 1.0,
                w_rejected: 1.0,
            };
        }
        let (ra, rb) = (la.exp(), lb.exp());
        Margin {
            delta: self.gamma * (ra - rb) + (la - lb),
            w_chosen: 1.0 + self.gamma * ra,
            w_rejected: 1.0 + self.gamma * rb,
        }
    }
}

/// Generalized log-ratio gap phi(pi/pi_ref)(x,a) - phi(pi/pi_ref)(x,b).
pub fn delta_theta(
    policy: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    x: usize,
    a: usize,
    b: usize,
    kind: DivergenceKind,
) -> Result<f64> {
    policy.check_same_shape(reference)?;
    let (np, nr) = policy.shape();
    if x >= np || a >= nr || b >= nr {
        return Err(Error::Dimension(format!(
            "index ({x}, {a}, {b}) outside a {np}x{nr} policy"
        )));
    }
    kind.validate()?;
    Ok(LogRatios::new(policy, reference, kind).margin(x, a, b).delta)
}

fn bern_kl_logits(u: f64, v: f64) -> f64 {
    let (su, sn) = (sigmoid_unchecked(u), sigmoid_unchecked(-u));
    let kl = su * (log_sigmoid_unchecked(u) - log_sigmoid_unchecked(v))
        + sn * (log_sigmoid_unchecked(-u) - log_sigmoid_unchecked(-v));
    kl.max(0.0)
}

fn require_gap(spec: &AlgorithmSpec, t: &Term) -> f64 {
    t.gap.unwrap_or_else(|| panic!("{} term without rating gap", spec.family))
}

/// Per-term loss value and its derivative with respect to the margin.
fn term_loss(spec: &AlgorithmSpec, delta: f64, t: &Term) -> (f64, f64) {
    let b = spec.beta;
    let ranking = |t: &Term| -> (f64, f64) {
        if t.ranked {
            let m = b * delta;
            (-log_sigmoid_unchecked(m), -b * sigmoid_unchecked(-m))
        } else {
            (0.0, 0.0)
        }
    };
    match spec.family {
        Family::Dpo => ranking(t),
        Family::Ipo => {
            let u = delta - 1.0 / (2.0 * b);
            (u * u, 2.0 * u)
        }
        Family::Rdpo | Family::RdpoHetero | Family::RdpoPenalized => {
            let g = require_gap(spec, t);
            let m = b * delta - (b / spec.beta1) * g;
            let mut value = -log_sigmoid_unchecked(m);
            let mut slope = -b * sigmoid_unchecked(-m);
            if spec.family == Family::RdpoPenalized {
                let s = delta - g / spec.beta1;
                let upper = s - spec.delta_max;
                let lower = -s - spec.delta_max;
                if upper > 0.0 {
                    value += spec.lambda1 * upper;
                    slope += spec.lambda1;
                }
                if lower > 0.0 {
                    value += spec.lambda2 * lower;
                    slope -= spec.lambda2;
                }
            }
            (value, slope)
        }
        Family::Ripo => {
            let g = require_gap(spec, t);
            let c = b / spec.beta1;
            let u = b * delta - c * g - 0.5;
            (u * u + c * c * t.gap_var, 2.0 * b * u)
        }
        Family::Ddpo => {
            let g = require_gap(spec, t);
            let u = g - b * delta;
            (u * u + t.gap_var, -2.0 * b * u)
        }
        Family::Mlrdpo | Family::MlrdpoHetero => {
            let (mut value, mut slope) = ranking(t);
            if let Some(g) = t.gap {
                let scale = if spec.family == Family::Mlrdpo {
                    1.0 / (2.0 * spec.variance)
                } else {
                    1.0
                };
                let u = g - b * delta;
                value += scale * (u * u + t.gap_var);
                slope += scale * (-2.0 * b * u);
            }
            (value, slope)
        }
        Family::Rpo => {
            let v = require_gap(spec, t);
            let u = delta;
            (
                bern_kl_logits(u, v),
                sigmoid_unchecked(u) * sigmoid_unchecked(-u) * (u - v),
            )
        }
    }
}

/// A loss bound to its comparison terms.
#[derive(Debug, Clone)]
pub struct Objective {
    spec: AlgorithmSpec,
    terms: Vec<Term>,
    /// Trainer rescaling: dataset size for empirical losses, 1 for population.
    normalizer: f64,
}

impl Objective {
    /// Empirical loss over one dataset. Hetero families read the ranking part
    /// from every example and the rating part from the rated ones.
    pub fn empirical(spec: &AlgorithmSpec, env: &Environment, ds: &Dataset) -> Result<Self> {
        spec.validate()?;
        ds.validate(env)?;
        let terms = match spec.family {
            Family::RdpoHetero => {
                let fitted = fit_rating_lsq(&ds.rated_subset(), env)?;
                terms_with_table(ds, &fitted)
            }
            _ => {
                if spec.family.requires_all_ratings() {
                    if let Some(i) = ds.examples.iter().position(|e| e.rating_gap.is_none()) {
                        return Err(Error::Data(format!(
                            "{} requires a rating gap on every example: missing rating at example {i}",
                            spec.family
                        )));
                    }
                }
                ds.examples
                    .iter()
                    .map(|e| Term {
                        prompt: e.prompt,
                        chosen: e.chosen,
                        rejected: e.rejected,
                        weight: 1.0,
                        ranked: true,
                        gap: e.rating_gap,
                        gap_var: 0.0,
                    })
                    .collect()
            }
        };
        Ok(Self {
            spec: spec.clone(),
            terms,
            normalizer: ds.len().max(1) as f64,
        })
    }

    /// Loss over separate ranking and rating datasets (hetero families only).
    pub fn hetero(
        spec: &AlgorithmSpec,
        env: &Environment,
        ds_rank: &Dataset,
        ds_rated: &Dataset,
    ) -> Result<Self> {
        spec.validate()?;
        ds_rank.validate(env)?;
        ds_rated.validate(env)?;
        let rated = ds_rated.rated_subset();
        let terms = match spec.family {
            Family::RdpoHetero => terms_with_table(ds_rank, &fit_rating_lsq(&rated, env)?),
            Family::MlrdpoHetero => {
                let rank = ds_rank.examples.iter().map(|e| Term {
                    prompt: e.prompt,
                    chosen: e.chosen,
                    rejected: e.rejected,
                    weight: 1.0,
                    ranked: true,
                    gap: None,
                    gap_var: 0.0,
                });
                let rate = rated.examples.iter().map(|e| Term {
                    prompt: e.prompt,
                    chosen: e.chosen,
                    rejected: e.rejected,
                    weight: 1.0,
                    ranked: false,
                    gap: e.rating_gap,
                    gap_var: 0.0,
                });
                rank.chain(rate).collect()
            }
            other => {
                return Err(Error::Argument(format!(
                    "{other} is not a heterogeneous-data family"
                )))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            terms,
            normalizer: ds_rank.len().max(rated.len()).max(1) as f64,
        })
    }

    /// Exact expectation of the per-example loss under
    /// nu0 x pi_data x pi_data x Bradley-Terry x rating law.
    pub fn population(spec: &AlgorithmSpec, env: &Environment, rating: &RatingModel) -> Result<Self> {
        spec.validate()?;
        rating.validate(env)?;
        let noise = match spec.family {
            // an infinite-sample least-squares fit recovers the mean gaps
            Family::RdpoHetero => 0.0,
            _ => rating.noise_variance(),
        };
        if noise > 0.0
            && matches!(spec.family, Family::Rdpo | Family::RdpoPenalized | Family::Rpo)
        {
            return Err(Error::Unsupported(format!(
                "{} has no closed-form expectation under Gaussian rating noise",
                spec.family
            )));
        }
        let (np, nr) = (env.num_prompts(), env.num_responses());
        let r = env.r_star();
        let mut terms = Vec::with_capacity(np * nr * nr * 2);
        for x in 0..np {
            let wx = env.nu0().weight(x);
            if wx == 0.0 {
                continue;
            }
            let pd = env.pi_data().prob_row(x);
            for a in 0..nr {
                for b in 0..nr {
                    let w = wx * pd[a] * pd[b];
                    let p = sigmoid_unchecked(r.gap(x, a, b));
                    for (chosen, rejected, pw) in [(a, b, p), (b, a, 1.0 - p)] {
                        terms.push(Term {
                            prompt: x,
                            chosen,
                            rejected,
                            weight: w * pw,
                            ranked: true,
                            gap: Some(rating.mean_gap(env, x, chosen, rejected)),
                            gap_var: noise,
                        });
                    }
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            terms,
            normalizer: 1.0,
        })
    }

    pub fn spec(&self) -> &AlgorithmSpec {
        &self.spec
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    fn check(&self, policy: &SoftmaxPolicy, env: &Environment) -> Result<()> {
        policy.check_same_shape(env.pi_ref())
    }

    pub fn value(&self, policy: &SoftmaxPolicy, env: &Environment) -> Result<f64> {
        self.check(policy, env)?;
        let ratios = LogRatios::new(policy, env.pi_ref(), self.spec.divergence);
        let total: NeumaierSum = self
            .terms
            .iter()
            .map(|t| {
                let m = ratios.margin(t.prompt, t.chosen, t.rejected);
                t.weight * term_loss(&self.spec, m.delta, t).0
            })
            .collect();
        Ok(total.value())
    }

    /// Loss and its gradient over the logits (flat, prompt-major).
    pub fn value_and_grad(&self, policy: &SoftmaxPolicy, env: &Environment) -> Result<(f64, Vec<f64>)> {
        self.check(policy, env)?;
        let (np, k) = policy.shape();
        let ratios = LogRatios::new(policy, env.pi_ref(), self.spec.divergence);
        let mut total = NeumaierSum::default();
        let mut direct = vec![0.0; np * k];
        let mut shared = vec![0.0; np];
        for t in &self.terms {
            let m = ratios.margin(t.prompt, t.chosen, t.rejected);
            let (v, slope) = term_loss(&self.spec, m.delta, t);
            total.add(t.weight * v);
            let d = t.weight * slope;
            if d == 0.0 {
                continue;
            }
            // d delta / d logit_c = w_a (1[c=a] - pi_c) - w_b (1[c=b] - pi_c)
            direct[t.prompt * k + t.chosen] += d * m.w_chosen;
            direct[t.prompt * k + t.rejected] -= d * m.w_rejected;
            shared[t.prompt] += d * (m.w_chosen - m.w_rejected);
        }
        let grad = direct
            .iter()
            .enumerate()
            .map(|(i, g)| g - ratios.probs[i] * shared[i / k])
            .collect();
        Ok((total.value(), grad))
    }

    /// Largest |log-sigmoid argument| and smallest distance of a penalty
    /// argument to its hinge, for choosing gradient-check tolerances.
    pub fn nonsmooth_proximity(&self, policy: &SoftmaxPolicy, env: &Environment) -> Result<(f64, f64)> {
        self.check(policy, env)?;
        let ratios = LogRatios::new(policy, env.pi_ref(), self.spec.divergence);
        let s = &self.spec;
        let mut max_margin: f64 = 0.0;
        let mut min_kink = f64::INFINITY;
        for t in &self.terms {
            let d = ratios.margin(t.prompt, t.chosen, t.rejected).delta;
            let m = match (s.family, t.gap) {
                (Family::Rdpo | Family::RdpoHetero | Family::RdpoPenalized, Some(g)) => {
                    s.beta * d - s.beta / s.beta1 * g
                }
                (Family::Rpo, _) => d,
                _ => s.beta * d,
            };
            max_margin = max_margin.max(m.abs());
            if s.family == Family::RdpoPenalized {
                if let Some(g) = t.gap {
                    let u = d - g / s.beta1;
                    min_kink = min_kink.min((u - s.delta_max).abs()).min((u + s.delta_max).abs());
                }
            }
        }
        Ok((max_margin, min_kink))
    }
}

fn terms_with_table(ds: &Dataset, table: &RewardTable) -> Vec<Term> {
    ds.examples
        .iter()
        .map(|e| Term {
            prompt: e.prompt,
            chosen: e.chosen,
            rejected: e.rejected,
            weight: 1.0,
            ranked: true,
            gap: Some(table.gap(e.prompt, e.chosen, e.rejected)),
            gap_var: 0.0,
        })
        .collect()
}

/// Summed loss of `spec` on `ds`.
pub fn loss(spec: &AlgorithmSpec, policy: &SoftmaxPolicy, env: &Environment, ds: &Dataset) -> Result<f64> {
    Objective::empirical(spec, env, ds)?.value(policy, env)
}

/// Gradient of [`loss`] with respect to every logit (flat, prompt-major).
pub fn grad_loss(
    spec: &AlgorithmSpec,
    policy: &SoftmaxPolicy,
    env: &Environment,
    ds: &Dataset,
) -> Result<Vec<f64>> {
    Ok(Objective::empirical(spec, env, ds)?.value_and_grad(policy, env)?.1)
}

/// Loss over separate ranking and rating datasets.
pub fn loss_hetero(
    spec: &AlgorithmSpec,
    policy: &SoftmaxPolicy,
    env: &Environment,
    ds_rank: &Dataset,
    ds_rated: &Dataset,
) -> Result<f64> {
    Objective::hetero(spec, env, ds_rank, ds_rated)?.value(policy, env)
}

/// Expected per-example loss under the data-generating law.
pub fn population_loss(
    spec: &AlgorithmSpec,
    policy: &SoftmaxPolicy,
    env: &Environment,
    rating: &RatingModel,
) -> Result<f64> {
    Objective::population(spec, env, rating)?.value(policy, env)
}

/// Least-squares tabular reward from rated comparisons.
///
/// Minimizes sum_i (r(x,chosen) - r(x,rejected) - gap_i)^2. Per prompt this
/// is a graph-Laplacian system; the minimum-norm solution has zero mean on
/// every connected component, so each prompt's rewards average to zero and
/// responses never compared get reward 0.
pub fn fit_rating_lsq(ds_rated: &Dataset, env: &Environment) -> Result<RewardTable> {
    ds_rated.validate(env)?;
    let (np, k) = (env.num_prompts(), env.num_responses());
    if ds_rated.rated_count() == 0 {
        return Err(Error::Data("least-squares rating fit needs at least one rated example".into()));
    }
    let mut laplacians = vec![DMatrix::<f64>::zeros(k, k); np];
    let mut rhs = vec![DVector::<f64>::zeros(k); np];
    let mut seen = vec![false; np];
    for e in &ds_rated.examples {
        let Some(g) = e.rating_gap else { continue };
        let (a, b) = (e.chosen, e.rejected);
        if a == b {
            continue;
        }
        let (l, r) = (&mut laplacians[e.prompt], &mut rhs[e.prompt]);
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
        r[a] += g;
        r[b] -= g;
        seen[e.prompt] = true;
    }
    let mut values = vec![0.0; np * k];
    for x in 0..np {
        if !seen[x] {
            continue;
        }
        let l = laplacians[x].clone();
        let scale = l.amax().max(1.0);
        let pinv = l
            .pseudo_inverse(1e-10 * scale)
            .map_err(|e| Error::Numeric(format!("least-squares fit: {e}")))?;
        let sol = pinv * &rhs[x];
        values[x * k..(x + 1) * k].copy_from_slice(sol.as_slice());
    }
    RewardTable::from_values(values, np, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_dataset, EnvSpec, PreferenceExample};
    use crate::math::PromptDist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex(prompt: usize, chosen: usize, rejected: usize, gap: Option<f64>) -> PreferenceExample {
        PreferenceExample {
            prompt,
            chosen,
            rejected,
            z: 1,
            rating_gap: gap,
        }
    }

    fn small_env(seed: u64) -> Environment {
        EnvSpec {
            num_prompts: 3,
            num_responses: 4,
            r_max: 1.5,
            reward_seed: seed,
            data_logit_scale: 0.5,
            ref_equals_data: false,
        }
        .build()
        .unwrap()
    }

    fn random_policy(env: &Environment, rng: &mut ChaCha8Rng, scale: f64) -> SoftmaxPolicy {
        let (np, nr) = (env.num_prompts(), env.num_responses());
        SoftmaxPolicy::from_flat(
            (0..np * nr).map(|_| rng.random_range(-scale..scale)).collect(),
            np,
            nr,
        )
        .unwrap()
    }

    fn gaussian_ds(env: &Environment, n: usize, seed: u64) -> Dataset {
        sample_dataset(env, n, &RatingModel::Gaussian { variance: 0.3 }, seed).unwrap()
    }

    fn two_arm_env(ref_probs: [f64; 2]) -> Environment {
        Environment::new(
            PromptDist::uniform(1).unwrap(),
            RewardTable::new(vec![vec![1.0, 0.0]], 0.0, 1.0).unwrap(),
            SoftmaxPolicy::uniform(1, 2).unwrap(),
            SoftmaxPolicy::from_probs(vec![ref_probs.to_vec()]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn delta_theta_examples() {
        let env = two_arm_env([0.5, 0.5]);
        let pi = SoftmaxPolicy::from_probs(vec![vec![2.0 / 3.0, 1.0 / 3.0]]).unwrap();
        let kl = delta_theta(&pi, env.pi_ref(), 0, 0, 1, DivergenceKind::Kl).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
        let g1 = DivergenceKind::KlPlusGammaChi2 { gamma: 1.0 };
        let chi = delta_theta(&pi, env.pi_ref(), 0, 0, 1, g1).unwrap();
        assert!((chi - (2f64.ln() + 2.0 / 3.0)).abs() < 1e-12);
        let back = delta_theta(&pi, env.pi_ref(), 0, 1, 0, g1).unwrap();
        assert!((chi + back).abs() < 1e-15);
        assert_eq!(delta_theta(env.pi_ref(), env.pi_ref(), 0, 0, 1, g1).unwrap(), 0.0);
        assert!(matches!(
            delta_theta(&pi, env.pi_ref(), 0, 0, 2, DivergenceKind::Kl),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn dpo_at_reference_is_n_ln2() {
        let env = small_env(1);
        let ds = gaussian_ds(&env, 37, 2);
        let v = loss(&AlgorithmSpec::new(Family::Dpo), env.pi_ref(), &env, &ds).unwrap();
        assert!((v - 37.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ripo_vertex_is_zero_with_zero_gradient() {
        // policy = ref gives delta = 0; gaps chosen so -(beta/beta1) g = 1/2
        let env = small_env(3);
        let spec = AlgorithmSpec::new(Family::Ripo).with_beta(0.2).with_beta1(0.4);
        let g = -0.5 * spec.beta1 / spec.beta;
        let ds = Dataset::new(vec![ex(0, 1, 2, Some(g)), ex(2, 3, 0, Some(g))], 0);
        let obj = Objective::empirical(&spec, &env, &ds).unwrap();
        let (v, grad) = obj.value_and_grad(env.pi_ref(), &env).unwrap();
        assert!(v.abs() < 1e-24);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn rpo_zero_when_margins_match_gaps() {
        let env = small_env(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi = random_policy(&env, &mut rng, 1.0);
        let ds = gaussian_ds(&env, 50, 5);
        let mut matched = ds.clone();
        for e in matched.examples.iter_mut() {
            e.rating_gap = Some(delta_theta(&pi, env.pi_ref(), e.prompt, e.chosen, e.rejected, DivergenceKind::Kl).unwrap());
        }
        let v = loss(&AlgorithmSpec::new(Family::Rpo), &pi, &env, &matched).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn missing_rating_is_a_data_error() {
        let env = small_env(5);
        let ds = gaussian_ds(&env, 20, 6).strip_ratings();
        for fam in [Family::Rdpo, Family::Ripo, Family::Ddpo, Family::Rpo, Family::RdpoPenalized] {
            let err = loss(&AlgorithmSpec::new(fam), env.pi_ref(), &env, &ds).unwrap_err();
            assert!(matches!(err, Error::Data(ref m) if m.contains("missing rating")), "{fam}: {err}");
        }
        // ML-RDPO tolerates missing ratings, RDPO_HETERO needs at least one
        assert!(loss(&AlgorithmSpec::new(Family::Mlrdpo), env.pi_ref(), &env, &ds).is_ok());
        assert!(loss(&AlgorithmSpec::new(Family::RdpoHetero), env.pi_ref(), &env, &ds).is_err());
    }

    #[test]
    fn zero_variance_rejected() {
        let env = small_env(6);
        let ds = gaussian_ds(&env, 5, 6);
        let spec = AlgorithmSpec::new(Family::Mlrdpo).with_variance(0.0);
        assert!(matches!(loss(&spec, env.pi_ref(), &env, &ds), Err(Error::Argument(_))));
    }

    #[test]
    fn ripo_with_beta1_equal_beta_is_shifted_ddpo() {
        let env = small_env(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pi = random_policy(&env, &mut rng, 1.0);
        let ds = gaussian_ds(&env, 40, 8);
        let mut shifted = ds.clone();
        shifted.examples.iter_mut().for_each(|e| *e.rating_gap.as_mut().unwrap() += 0.5);
        let ripo = loss(&AlgorithmSpec::new(Family::Ripo).with_beta(0.3).with_beta1(0.3), &pi, &env, &ds).unwrap();
        let ddpo = loss(&AlgorithmSpec::new(Family::Ddpo).with_beta(0.3), &pi, &env, &shifted).unwrap();
        assert!((ripo - ddpo).abs() < 1e-10 * ripo.max(1.0));
    }

    #[test]
    fn rdpo_with_zero_gaps_is_dpo() {
        let env = small_env(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pi = random_policy(&env, &mut rng, 2.0);
        let mut ds = gaussian_ds(&env, 40, 9);
        ds.examples.iter_mut().for_each(|e| e.rating_gap = Some(0.0));
        let a = loss(&AlgorithmSpec::new(Family::Rdpo), &pi, &env, &ds).unwrap();
        let b = loss(&AlgorithmSpec::new(Family::Dpo), &pi, &env, &ds).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_is_additive_and_order_free() {
        let env = small_env(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pi = random_policy(&env, &mut rng, 1.0);
        let d1 = gaussian_ds(&env, 30, 10);
        let d2 = gaussian_ds(&env, 20, 11);
        for fam in Family::ALL.into_iter().filter(|f| *f != Family::RdpoHetero) {
            let spec = AlgorithmSpec::new(fam).with_penalties(1.0, 2.0, 0.5);
            let joint = loss(&spec, &pi, &env, &d1.concat(&d2)).unwrap();
            let split = loss(&spec, &pi, &env, &d1).unwrap() + loss(&spec, &pi, &env, &d2).unwrap();
            assert!((joint - split).abs() < 1e-10 * joint.abs().max(1.0), "{fam}");
            let mut rev = d1.clone();
            rev.examples.reverse();
            let a = loss(&spec, &pi, &env, &d1).unwrap();
            let b = loss(&spec, &pi, &env, &rev).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{fam}");
        }
    }

    #[test]
    fn lsq_single_and_contradictory() {
        let env = small_env(10);
        let one = Dataset::new(vec![ex(1, 2, 0, Some(0.7))], 0);
        let t = fit_rating_lsq(&one, &env).unwrap();
        assert!((t.gap(1, 2, 0) - 0.7).abs() < 1e-12);
        let row_mean: f64 = t.row(1).iter().sum::<f64>() / 4.0;
        assert!(row_mean.abs() < 1e-12);
        let two = Dataset::new(vec![ex(0, 1, 3, Some(0.2)), ex(0, 1, 3, Some(1.0))], 0);
        let t = fit_rating_lsq(&two, &env).unwrap();
        assert!((t.gap(0, 1, 3) - 0.6).abs() < 1e-12);
        assert!(fit_rating_lsq(&Dataset::default(), &env).is_err());
    }

    #[test]
    fn lsq_recovers_consistent_gaps() {
        let env = small_env(11);
        let ds = sample_dataset(&env, 300, &RatingModel::Exact, 12).unwrap();
        let t = fit_rating_lsq(&ds, &env).unwrap();
        for x in 0..3 {
            for a in 0..4 {
                for b in 0..4 {
                    assert!((t.gap(x, a, b) - env.r_star().gap(x, a, b)).abs() < 1e-8);
                }
            }
            let mean: f64 = t.row(x).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn lsq_residual_is_orthogonal() {
        // normal equations: sum_i resid_i (e_chosen - e_rejected) = 0 per prompt
        let env = small_env(12);
        let ds = gaussian_ds(&env, 80, 13);
        let t = fit_rating_lsq(&ds, &env).unwrap();
        let mut normal = vec![0.0; 12];
        for e in &ds.examples {
            let resid = t.gap(e.prompt, e.chosen, e.rejected) - e.rating_gap.unwrap();
            normal[e.prompt * 4 + e.chosen] += resid;
            normal[e.prompt * 4 + e.rejected] -= resid;
        }
        assert!(normal.iter().all(|v| v.abs() < 1e-9), "{normal:?}");
    }

    #[test]
    fn hetero_compositions() {
        let env = small_env(13);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pi = random_policy(&env, &mut rng, 1.0);
        let ds = sample_dataset(&env, 300, &RatingModel::Exact, 14).unwrap();
        let rdpo = loss(&AlgorithmSpec::new(Family::Rdpo), &pi, &env, &ds).unwrap();
        let het = loss_hetero(&AlgorithmSpec::new(Family::RdpoHetero), &pi, &env, &ds, &ds).unwrap();
        assert!((rdpo - het).abs() < 1e-8);

        let ml = AlgorithmSpec::new(Family::MlrdpoHetero);
        let empty = Dataset::default();
        let only_rank = loss_hetero(&ml, &pi, &env, &ds, &empty).unwrap();
        let dpo = loss(&AlgorithmSpec::new(Family::Dpo), &pi, &env, &ds).unwrap();
        assert!((only_rank - dpo).abs() < 1e-10);
        let only_rated = loss_hetero(&ml, &pi, &env, &empty, &ds).unwrap();
        let ddpo = loss(&AlgorithmSpec::new(Family::Ddpo), &pi, &env, &ds).unwrap();
        assert!((only_rated - ddpo).abs() < 1e-10);
        assert!(loss_hetero(&AlgorithmSpec::new(Family::Dpo), &pi, &env, &ds, &ds).is_err());
    }

    #[test]
    fn uniform_population_dpo_is_ln2() {
        let mut spec = EnvSpec::default();
        spec.num_prompts = 3;
        spec.num_responses = 3;
        let env = spec.build().unwrap();
        let v = population_loss(&AlgorithmSpec::new(Family::Dpo), env.pi_ref(), &env, &RatingModel::Exact).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn population_gaussian_constants() {
        let env = small_env(14);
        let exact = RatingModel::Exact;
        let noisy = RatingModel::Gaussian { variance: 0.4 };
        let ml = AlgorithmSpec::new(Family::Mlrdpo).with_variance(0.4);
        let a = population_loss(&ml, env.pi_ref(), &env, &exact).unwrap();
        let b = population_loss(&ml, env.pi_ref(), &env, &noisy).unwrap();
        assert!((b - a - 0.5).abs() < 1e-12);
        let dd = AlgorithmSpec::new(Family::Ddpo);
        let a = population_loss(&dd, env.pi_ref(), &env, &exact).unwrap();
        let b = population_loss(&dd, env.pi_ref(), &env, &noisy).unwrap();
        assert!((b - a - 0.4).abs() < 1e-12);
        for fam in [Family::Rdpo, Family::RdpoPenalized, Family::Rpo] {
            let r = population_loss(&AlgorithmSpec::new(fam), env.pi_ref(), &env, &noisy);
            assert!(matches!(r, Err(Error::Unsupported(_))), "{fam}");
        }
    }

    #[test]
    fn spec_json_round_trip_and_unknown_fields() {
        let spec = AlgorithmSpec::new(Family::RdpoPenalized)
            .with_divergence(DivergenceKind::KlPlusGammaChi2 { gamma: 0.5 })
            .with_penalties(10.0, 10.0, 2.0);
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"family\":\"RDPO_PENALIZED\""));
        let back: AlgorithmSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"family":"DPO","beta":0.1,"temperature":1}"#;
        assert!(serde_json::from_str::<AlgorithmSpec>(bad).is_err());
        let minimal: AlgorithmSpec = serde_json::from_str(r#"{"family":"MLRDPO_HETERO"}"#).unwrap();
        assert_eq!(minimal.beta, 0.1);
    }

    #[test]
    fn beta_eff_by_family() {
        let r = AlgorithmSpec::new(Family::Rdpo).with_beta(0.1).with_beta1(0.1);
        assert!((r.beta_eff() - 0.05).abs() < 1e-15);
        assert_eq!(AlgorithmSpec::new(Family::Mlrdpo).beta_eff(), 0.1);
    }
}
