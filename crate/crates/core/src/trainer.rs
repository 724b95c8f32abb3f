//! Full-batch gradient descent on policy logits, plus a central-difference
//! gradient checker.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::env::{stream_rng, streams, Dataset, Environment, RatingModel};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvBuffer};
use crate::losses::{AlgorithmSpec, Family, Objective};
use crate::math::{kl_divergence, SoftmaxPolicy};
use crate::oracle::{objective_j_beta, optimal_policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    #[default]
    Empirical,
    Population,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Init {
    #[default]
    FromRef,
    FromLogits { values: Vec<Vec<f64>> },
}

fn default_lr() -> f64 {
    0.1
}
fn default_steps() -> usize {
    1000
}
fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            steps: default_steps(),
            seed: 0,
            mode: TrainMode::Empirical,
            log_every: default_log_every(),
            init: Init::FromRef,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// A learning rate of exactly 0 is accepted so a run can be used as an
    /// evaluation pass.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Argument("steps must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Argument(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    fn initial_policy(&self, env: &Environment) -> Result<SoftmaxPolicy> {
        let mut p = match &self.init {
            Init::FromRef => env.pi_ref().clone(),
            Init::FromLogits { values } => {
                let p = SoftmaxPolicy::new(values.clone())?;
                p.check_same_shape(env.pi_ref())?;
                p
            }
        };
        p.recenter();
        Ok(p)
    }
}

/// What the loss is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Empirical(&'a Dataset),
    Hetero { rank: &'a Dataset, rated: &'a Dataset },
    Population(&'a RatingModel),
}

impl TrainData<'_> {
    fn mode(&self) -> TrainMode {
        match self {
            TrainData::Population(_) => TrainMode::Population,
            _ => TrainMode::Empirical,
        }
    }

    pub fn objective(&self, spec: &AlgorithmSpec, env: &Environment) -> Result<Objective> {
        match *self {
            TrainData::Empirical(ds) => Objective::empirical(spec, env, ds),
            TrainData::Hetero { rank, rated } => Objective::hetero(spec, env, rank, rated),
            TrainData::Population(rating) => Objective::population(spec, env, rating),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub subopt_gap: f64,
    pub kl_to_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub algorithm: String,
    pub beta_eff: f64,
    pub mode: TrainMode,
    pub records: Vec<TraceRecord>,
    pub notes: Vec<String>,
}

impl TrainTrace {
    pub const CSV_HEADER: [&'static str; 5] = ["step", "loss", "grad_norm", "subopt_gap", "kl_to_ref"];

    pub fn to_csv(&self) -> String {
        let mut csv = CsvBuffer::with_header(&Self::CSV_HEADER);
        for r in &self.records {
            csv.row([
                r.step.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.grad_norm),
                fmt_f64(r.subopt_gap),
                fmt_f64(r.kl_to_ref),
            ]);
        }
        csv.into_string()
    }

    pub fn first(&self) -> &TraceRecord {
        self.records.first().expect("a trace always holds the initial record")
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("a trace always holds the final record")
    }
}

/// Scores a policy against the regularized optimum at the family's beta_eff.
pub struct GapEvaluator<'a> {
    env: &'a Environment,
    beta_eff: f64,
    kind: crate::math::DivergenceKind,
    j_star: f64,
}

impl<'a> GapEvaluator<'a> {
    pub fn new(spec: &AlgorithmSpec, env: &'a Environment) -> Result<Self> {
        let beta_eff = spec.beta_eff();
        let kind = spec.divergence;
        let star = optimal_policy(env.r_star(), beta_eff, env.pi_ref(), env.nu0(), kind)?;
        let j_star = objective_j_beta(&star, env.r_star(), beta_eff, env.pi_ref(), env.nu0(), kind)?;
        Ok(Self {
            env,
            beta_eff,
            kind,
            j_star,
        })
    }

    pub fn beta_eff(&self) -> f64 {
        self.beta_eff
    }

    pub fn gap(&self, policy: &SoftmaxPolicy) -> Result<f64> {
        let e = self.env;
        Ok(self.j_star - objective_j_beta(policy, e.r_star(), self.beta_eff, e.pi_ref(), e.nu0(), self.kind)?)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Minimizes the loss by gradient descent from the configured start.
pub fn train(
    spec: &AlgorithmSpec,
    env: &Environment,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(SoftmaxPolicy, TrainTrace)> {
    cfg.validate()?;
    if data.mode() != cfg.mode {
        return Err(Error::Argument(format!(
            "config mode {:?} does not match the supplied training data",
            cfg.mode
        )));
    }
    let objective = data.objective(spec, env)?;
    train_objective(&objective, env, cfg)
}

/// [`train`] on a prebuilt objective.
pub fn train_objective(
    objective: &Objective,
    env: &Environment,
    cfg: &TrainConfig,
) -> Result<(SoftmaxPolicy, TrainTrace)> {
    cfg.validate()?;
    let spec = objective.spec();
    let gaps = GapEvaluator::new(spec, env)?;
    let scale = 1.0 / objective.normalizer();
    let log_every = cfg.log_every.max(1);
    let mut policy = cfg.initial_policy(env)?;
    let mut records = Vec::new();
    let record = |step: usize, loss: f64, grad: &[f64], policy: &SoftmaxPolicy| -> Result<TraceRecord> {
        Ok(TraceRecord {
            step,
            loss,
            grad_norm: norm(grad),
            subopt_gap: gaps.gap(policy)?,
            kl_to_ref: kl_divergence(policy, env.pi_ref(), env.nu0())?,
        })
    };
    let evaluate = |policy: &SoftmaxPolicy, step: usize| -> Result<(f64, Vec<f64>)> {
        let (loss, mut grad) = objective.value_and_grad(policy, env)?;
        let loss = loss * scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {loss}"),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("non-finite gradient at logit {i}"),
            });
        }
        Ok((loss, grad))
    };
    for step in 0..cfg.steps {
        let (loss, mut grad) = evaluate(&policy, step)?;
        if step % log_every == 0 {
            records.push(record(step, loss, &grad, &policy)?);
        }
        if let Some(clip) = cfg.grad_clip {
            let n = norm(&grad);
            if n > clip {
                grad.iter_mut().for_each(|g| *g *= clip / n);
            }
        }
        for (theta, g) in policy.logits_mut().iter_mut().zip(&grad) {
            *theta -= cfg.learning_rate * g;
        }
        policy.recenter();
    }
    let (loss, grad) = evaluate(&policy, cfg.steps)?;
    records.push(record(cfg.steps, loss, &grad, &policy)?);

    let mut notes = vec![format!("optimizer=gd lr={} steps={}", cfg.learning_rate, cfg.steps)];
    if spec.family == Family::RdpoPenalized {
        notes.push("policy-class restriction enforced by hinge penalties, not projection".into());
    }
    let trace = TrainTrace {
        algorithm: spec.label(),
        beta_eff: gaps.beta_eff(),
        mode: cfg.mode,
        records,
        notes,
    };
    Ok((policy, trace))
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// A penalty hinge lies within reach of the difference stencil.
    pub near_nonsmooth: bool,
    /// Threshold appropriate for this point.
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

const MAX_FULL_CHECK: usize = 200;
const REL_FLOOR: f64 = 1e-8;

/// Central differences of the empirical loss against its analytic gradient.
pub fn finite_diff_gradcheck(
    spec: &AlgorithmSpec,
    policy: &SoftmaxPolicy,
    env: &Environment,
    ds: &Dataset,
    step: f64,
) -> Result<GradCheckReport> {
    gradcheck_objective(&Objective::empirical(spec, env, ds)?, policy, env, step)
}

/// Checks every logit of small tables and 200 random logits of larger ones.
pub fn gradcheck_objective(
    objective: &Objective,
    policy: &SoftmaxPolicy,
    env: &Environment,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Argument(format!("finite-difference step must lie in (0, 1e-2], got {step}")));
    }
    let (_, analytic) = objective.value_and_grad(policy, env)?;
    let n = analytic.len();
    let coords: Vec<usize> = if n <= MAX_FULL_CHECK {
        (0..n).collect()
    } else {
        let mut rng = stream_rng(0, &[streams::GRADCHECK, n as u64]);
        let mut c = index::sample(&mut rng, n, MAX_FULL_CHECK).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = policy.clone();
    let mut max_rel: f64 = 0.0;
    for &i in &coords {
        let orig = probe.logits()[i];
        probe.logits_mut()[i] = orig + step;
        let up = objective.value(&probe, env)?;
        probe.logits_mut()[i] = orig - step;
        let down = objective.value(&probe, env)?;
        probe.logits_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic[i];
        // cancellation error of the difference quotient is not a gradient error
        let roundoff = 4.0 * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / step;
        let rel = ((a - fd).abs() - roundoff).max(0.0) / a.abs().max(fd.abs()).max(REL_FLOOR);
        max_rel = max_rel.max(rel);
    }
    let (_, kink) = objective.nonsmooth_proximity(policy, env)?;
    // a unit logit move shifts a margin by at most (1 + gamma rho_a) + (1 + gamma rho_b)
    let reach = 4.0 * step * (1.0 + objective.spec().divergence.gamma() * max_ratio(policy, env));
    let near_nonsmooth = kink <= reach * 10.0;
    let tolerance = if near_nonsmooth {
        1e-3
    } else if objective.spec().family.is_quadratic() {
        1e-7
    } else {
        1e-5
    };
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: coords.len(),
        near_nonsmooth,
        tolerance,
    })
}

fn max_ratio(policy: &SoftmaxPolicy, env: &Environment) -> f64 {
    policy
        .log_probs()
        .iter()
        .zip(env.pi_ref().log_probs())
        .map(|(p, r)| (p - r).exp())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_dataset, EnvSpec};
    use crate::math::DivergenceKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_env() -> Environment {
        EnvSpec {
            num_prompts: 3,
            num_responses: 4,
            r_max: 2.0,
            reward_seed: 11,
            data_logit_scale: 0.0,
            ref_equals_data: true,
        }
        .build()
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let env = small_env();
        let ds = sample_dataset(&env, 30, &RatingModel::Exact, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            steps: 1,
            ..TrainConfig::default()
        };
        let (p, trace) = train(&AlgorithmSpec::new(Family::Dpo), &env, TrainData::Empirical(&ds), &cfg).unwrap();
        assert_eq!(&p, env.pi_ref());
        assert_eq!(trace.records.len(), 2);
        assert!((trace.first().loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn population_dpo_reaches_closed_form() {
        let env = small_env();
        let spec = AlgorithmSpec::new(Family::Dpo);
        let cfg = TrainConfig {
            learning_rate: 1000.0,
            steps: 20_000,
            mode: TrainMode::Population,
            log_every: 1000,
            ..TrainConfig::default()
        };
        let (p, trace) = train(&spec, &env, TrainData::Population(&RatingModel::Exact), &cfg).unwrap();
        let star = optimal_policy(env.r_star(), 0.1, env.pi_ref(), env.nu0(), DivergenceKind::Kl).unwrap();
        let kl = kl_divergence(&p, &star, env.nu0()).unwrap();
        assert!(kl < 1e-4, "kl {kl}");
        assert!(trace.last().subopt_gap <= trace.first().subopt_gap);
        assert!(trace.records.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn training_is_deterministic_and_shift_invariant() {
        let env = small_env();
        let ds = sample_dataset(&env, 50, &RatingModel::Exact, 2).unwrap();
        let spec = AlgorithmSpec::new(Family::Rdpo);
        let cfg = TrainConfig {
            learning_rate: 5.0,
            steps: 200,
            log_every: 10,
            ..TrainConfig::default()
        };
        let a = train(&spec, &env, TrainData::Empirical(&ds), &cfg).unwrap();
        let b = train(&spec, &env, TrainData::Empirical(&ds), &cfg).unwrap();
        assert_eq!(a.1.to_csv(), b.1.to_csv());
        let mut shifted = env.pi_ref().logits().to_vec();
        shifted[4..8].iter_mut().for_each(|v| *v += 3.0);
        let rows: Vec<Vec<f64>> = shifted.chunks(4).map(|c| c.to_vec()).collect();
        let cfg2 = TrainConfig {
            init: Init::FromLogits { values: rows },
            ..cfg
        };
        let c = train(&spec, &env, TrainData::Empirical(&ds), &cfg2).unwrap();
        for (x, y) in a.0.probs().iter().zip(c.0.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_mismatch_and_bad_config() {
        let env = small_env();
        let ds = sample_dataset(&env, 5, &RatingModel::Exact, 2).unwrap();
        let spec = AlgorithmSpec::new(Family::Dpo);
        let pop = TrainConfig {
            mode: TrainMode::Population,
            ..TrainConfig::default()
        };
        assert!(train(&spec, &env, TrainData::Empirical(&ds), &pop).is_err());
        let zero = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(train(&spec, &env, TrainData::Empirical(&ds), &zero).is_err());
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let env = small_env();
        let ds = sample_dataset(&env, 20, &RatingModel::Exact, 3).unwrap();
        let spec = AlgorithmSpec::new(Family::Ipo).with_beta(1e-3);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            steps: 500,
            ..TrainConfig::default()
        };
        match train(&spec, &env, TrainData::Empirical(&ds), &cfg) {
            Err(Error::Training { step, .. }) => assert!(step > 0),
            other => panic!("expected a training abort, got {other:?}"),
        }
    }

    #[test]
    fn gradcheck_quadratic_and_richardson() {
        let env = small_env();
        let ds = sample_dataset(&env, 40, &RatingModel::Gaussian { variance: 0.2 }, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SoftmaxPolicy::from_flat((0..12).map(|_| rng.random_range(-1.0..1.0)).collect(), 3, 4).unwrap();
        for fam in [Family::Ipo, Family::Ripo, Family::Ddpo] {
            let r = finite_diff_gradcheck(&AlgorithmSpec::new(fam), &p, &env, &ds, 1e-5).unwrap();
            assert!(r.max_rel_err <= 1e-7, "{fam}: {r:?}");
        }
        let spec = AlgorithmSpec::new(Family::Dpo);
        let coarse = finite_diff_gradcheck(&spec, &p, &env, &ds, 1e-2).unwrap();
        let fine = finite_diff_gradcheck(&spec, &p, &env, &ds, 1e-3).unwrap();
        assert!(fine.max_rel_err < coarse.max_rel_err / 10.0, "{coarse:?} {fine:?}");
        assert!(finite_diff_gradcheck(&spec, &p, &env, &ds, 0.1).is_err());
    }
}
