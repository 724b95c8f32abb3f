//! Synthetic alignment problems: a latent reward, data and reference
//! policies, Bradley-Terry preference labels with optional rating gaps, and
//! the rating corruptions (score swaps, additive noise, missingness) used by
//! the robustness experiments.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid_unchecked, PromptDist, RewardTable, SoftmaxPolicy};

/// Prompt distribution, latent reward, data policy and reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvironmentDoc", into = "EnvironmentDoc")]
pub struct Environment {
    nu0: PromptDist,
    r_star: RewardTable,
    pi_data: SoftmaxPolicy,
    pi_ref: SoftmaxPolicy,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvironmentDoc {
    nu0: PromptDist,
    r_star: RewardTable,
    pi_data: SoftmaxPolicy,
    pi_ref: SoftmaxPolicy,
}

impl TryFrom<EnvironmentDoc> for Environment {
    type Error = Error;
    fn try_from(d: EnvironmentDoc) -> Result<Self> {
        Environment::new(d.nu0, d.r_star, d.pi_data, d.pi_ref)
    }
}

impl From<Environment> for EnvironmentDoc {
    fn from(e: Environment) -> Self {
        EnvironmentDoc {
            nu0: e.nu0,
            r_star: e.r_star,
            pi_data: e.pi_data,
            pi_ref: e.pi_ref,
        }
    }
}

impl Environment {
    pub fn new(
        nu0: PromptDist,
        r_star: RewardTable,
        pi_data: SoftmaxPolicy,
        pi_ref: SoftmaxPolicy,
    ) -> Result<Self> {
        let shape = r_star.shape();
        if pi_data.shape() != shape || pi_ref.shape() != shape || nu0.num_prompts() != shape.0 {
            return Err(Error::Dimension(format!(
                "environment components disagree on shape {shape:?}"
            )));
        }
        if r_star.r_min() < 0.0 {
            return Err(Error::Argument(format!(
                "latent reward lower bound must be >= 0, got {}",
                r_star.r_min()
            )));
        }
        Ok(Self {
            nu0,
            r_star,
            pi_data,
            pi_ref,
        })
    }

    pub fn nu0(&self) -> &PromptDist {
        &self.nu0
    }

    pub fn r_star(&self) -> &RewardTable {
        &self.r_star
    }

    pub fn pi_data(&self) -> &SoftmaxPolicy {
        &self.pi_data
    }

    pub fn pi_ref(&self) -> &SoftmaxPolicy {
        &self.pi_ref
    }

    pub fn num_prompts(&self) -> usize {
        self.r_star.shape().0
    }

    pub fn num_responses(&self) -> usize {
        self.r_star.shape().1
    }

    /// Bound width R_max - R_min of the latent reward.
    pub fn delta_max(&self) -> f64 {
        self.r_star.r_max() - self.r_star.r_min()
    }
}

/// Generator parameters for a random tabular instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub num_prompts: usize,
    pub num_responses: usize,
    pub r_max: f64,
    pub reward_seed: u64,
    /// Standard deviation of Gaussian data-policy logits; 0 gives uniform.
    pub data_logit_scale: f64,
    /// When false the reference policy gets its own random logits.
    pub ref_equals_data: bool,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            num_prompts: 8,
            num_responses: 6,
            r_max: 2.0,
            reward_seed: 0,
            data_logit_scale: 0.0,
            ref_equals_data: true,
        }
    }
}

impl EnvSpec {
    /// Uniform prompts, r* i.i.d. uniform on [0, r_max].
    pub fn build(&self) -> Result<Environment> {
        if self.num_prompts == 0 || self.num_responses == 0 {
            return Err(Error::Argument("environment needs prompts and responses".into()));
        }
        if !(self.r_max > 0.0) || !self.r_max.is_finite() {
            return Err(Error::Argument(format!("r_max must be > 0, got {}", self.r_max)));
        }
        if !(self.data_logit_scale >= 0.0) {
            return Err(Error::Argument("data_logit_scale must be >= 0".into()));
        }
        let (np, nr) = (self.num_prompts, self.num_responses);
        let mut rng = stream_rng(self.reward_seed, &[streams::ENV]);
        let values: Vec<f64> = (0..np * nr)
            .map(|_| rng.random::<f64>() * self.r_max)
            .collect();
        let r_star = RewardTable::from_flat(values, np, nr, 0.0, self.r_max)?;
        let logits = |scale: f64, rng: &mut ChaCha8Rng| -> Result<SoftmaxPolicy> {
            if scale == 0.0 {
                return SoftmaxPolicy::uniform(np, nr);
            }
            let normal = Normal::new(0.0, scale).expect("scale checked");
            SoftmaxPolicy::from_flat((0..np * nr).map(|_| normal.sample(rng)).collect(), np, nr)
        };
        let pi_data = logits(self.data_logit_scale, &mut rng)?;
        let pi_ref = if self.ref_equals_data {
            pi_data.clone()
        } else {
            logits(self.data_logit_scale.max(1.0), &mut rng)?
        };
        Environment::new(PromptDist::uniform(np)?, r_star, pi_data, pi_ref)
    }
}

/// Stream identifiers for [`stream_rng`].
pub mod streams {
    pub const ENV: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const SWAP: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const MASK: u64 = 5;
    pub const GRADCHECK: u64 = 6;
    pub const INSTANCE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator for the stream identified by `path` under `seed`.
///
/// Distinct paths give independent ChaCha streams, so sweeps can derive
/// per-run generators from (seed, run key) without coordination.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let stream = path
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One labelled comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceExample {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
    /// 1 when the first of the two i.i.d. draws won.
    pub z: u8,
    pub rating_gap: Option<f64>,
}

impl PreferenceExample {
    pub fn is_rated(&self) -> bool {
        self.rating_gap.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<PreferenceExample>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(examples: Vec<PreferenceExample>, seed: u64) -> Self {
        Self { examples, seed }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn rated_count(&self) -> usize {
        self.examples.iter().filter(|e| e.is_rated()).count()
    }

    pub fn rated_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.rated_count() as f64 / self.len() as f64
        }
    }

    /// Copy with every rating gap removed.
    pub fn strip_ratings(&self) -> Dataset {
        let mut out = self.clone();
        out.examples.iter_mut().for_each(|e| e.rating_gap = None);
        out
    }

    /// Only the examples that carry a rating gap.
    pub fn rated_subset(&self) -> Dataset {
        Dataset {
            examples: self.examples.iter().filter(|e| e.is_rated()).cloned().collect(),
            seed: self.seed,
        }
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Dataset {
            examples,
            seed: self.seed,
        }
    }

    /// Indices in range for the environment, finite gaps, binary z.
    pub fn validate(&self, env: &Environment) -> Result<()> {
        let (np, nr) = (env.num_prompts(), env.num_responses());
        for (i, e) in self.examples.iter().enumerate() {
            if e.prompt >= np || e.chosen >= nr || e.rejected >= nr {
                return Err(Error::Dimension(format!(
                    "example {i} indexes ({}, {}, {}) outside a {np}x{nr} instance",
                    e.prompt, e.chosen, e.rejected
                )));
            }
            if e.z > 1 {
                return Err(Error::Schema(format!("example {i}: z must be 0 or 1")));
            }
            if matches!(e.rating_gap, Some(g) if !g.is_finite()) {
                return Err(Error::Schema(format!("example {i}: non-finite rating_gap")));
            }
        }
        Ok(())
    }

    /// Mean squared discrepancy between stored gaps and the latent gaps.
    pub fn empirical_rating_error(&self, env: &Environment) -> Option<f64> {
        let rated: Vec<f64> = self
            .examples
            .iter()
            .filter_map(|e| {
                e.rating_gap.map(|g| {
                    let d = env.r_star().gap(e.prompt, e.chosen, e.rejected) - g;
                    d * d
                })
            })
            .collect();
        if rated.is_empty() {
            None
        } else {
            Some(rated.iter().sum::<f64>() / rated.len() as f64)
        }
    }
}

/// Law of the rating gap attached to each sampled comparison.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum RatingModel {
    /// Exactly the latent gap.
    #[default]
    #[serde(rename = "EXACT")]
    Exact,
    /// Latent gap plus zero-mean Gaussian noise.
    #[serde(rename = "GAUSSIAN")]
    Gaussian { variance: f64 },
    /// Gaps of a fixed, possibly wrong, rating table.
    #[serde(rename = "BIASED")]
    Biased { r_hat: RewardTable },
}

impl RatingModel {
    pub fn validate(&self, env: &Environment) -> Result<()> {
        match self {
            RatingModel::Exact => Ok(()),
            RatingModel::Gaussian { variance } => {
                if variance.is_finite() && *variance >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Argument(format!("rating variance must be >= 0, got {variance}")))
                }
            }
            RatingModel::Biased { r_hat } => {
                if r_hat.shape() == env.r_star().shape() {
                    Ok(())
                } else {
                    Err(Error::Dimension("biased rating table shape mismatch".into()))
                }
            }
        }
    }

    /// Mean rating gap for the ordered pair (a, b).
    pub fn mean_gap(&self, env: &Environment, x: usize, a: usize, b: usize) -> f64 {
        match self {
            RatingModel::Exact | RatingModel::Gaussian { .. } => env.r_star().gap(x, a, b),
            RatingModel::Biased { r_hat } => r_hat.gap(x, a, b),
        }
    }

    /// Variance of the rating gap around its mean.
    pub fn noise_variance(&self) -> f64 {
        match self {
            RatingModel::Gaussian { variance } => *variance,
            _ => 0.0,
        }
    }
}

/// Post-hoc damage applied to the rating channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub swap_fraction: f64,
    pub noise_variance: f64,
    pub rating_obs_prob: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            swap_fraction: 0.0,
            noise_variance: 0.0,
            rating_obs_prob: 1.0,
        }
    }
}

impl CorruptionSpec {
    /// Swap, then noise, then masking, each on its own stream of `seed`.
    pub fn apply(&self, ds: &Dataset, seed: u64) -> Result<Dataset> {
        let ds = corrupt_swap(ds, self.swap_fraction, seed)?;
        let ds = corrupt_noise(&ds, self.noise_variance, seed)?;
        mask_ratings(&ds, self.rating_obs_prob, seed)
    }
}

struct Cdf(Vec<f64>);

impl Cdf {
    fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        Cdf(probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect())
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u = rng.random::<f64>() * self.0[self.0.len() - 1];
        self.0.partition_point(|&c| c <= u).min(self.0.len() - 1)
    }
}

/// Draw `n` comparisons x ~ nu0, a, a' ~ pi_data(.|x) i.i.d.,
/// z ~ Bern(sigma(r*(x,a) - r*(x,a'))), with rating gaps from `rating`.
pub fn sample_dataset(env: &Environment, n: usize, rating: &RatingModel, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be >= 1".into()));
    }
    rating.validate(env)?;
    let mut rng = stream_rng(seed, &[streams::SAMPLE]);
    let prompts = Cdf::new(env.nu0().weights());
    let responses: Vec<Cdf> = (0..env.num_prompts())
        .map(|x| Cdf::new(&env.pi_data().prob_row(x)))
        .collect();
    let noise = match rating {
        RatingModel::Gaussian { variance } if *variance > 0.0 => {
            Some(Normal::new(0.0, variance.sqrt()).expect("variance checked"))
        }
        _ => None,
    };
    let r = env.r_star();
    let examples = (0..n)
        .map(|_| {
            let x = prompts.sample(&mut rng);
            let a = responses[x].sample(&mut rng);
            let b = responses[x].sample(&mut rng);
            let first_wins = rng.random::<f64>() < sigmoid_unchecked(r.gap(x, a, b));
            let (chosen, rejected) = if first_wins { (a, b) } else { (b, a) };
            let mut gap = rating.mean_gap(env, x, chosen, rejected);
            if let Some(normal) = &noise {
                gap += normal.sample(&mut rng);
            }
            PreferenceExample {
                prompt: x,
                chosen,
                rejected,
                z: u8::from(first_wins),
                rating_gap: Some(gap),
            }
        })
        .collect();
    Ok(Dataset::new(examples, seed))
}

fn check_unit(v: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Argument(format!("{what} must lie in [0, 1], got {v}")))
    }
}

/// Negate the rating gap (a score swap) on a uniformly chosen
/// floor(fraction * N) subset of examples; preference bits are untouched.
pub fn corrupt_swap(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    check_unit(fraction, "swap fraction")?;
    let mut out = ds.clone();
    let count = ((fraction * ds.len() as f64) + 1e-9).floor() as usize;
    let count = count.min(ds.len());
    if count == 0 {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, &[streams::SWAP]);
    for i in index::sample(&mut rng, ds.len(), count) {
        if let Some(g) = out.examples[i].rating_gap.as_mut() {
            *g = -*g;
        }
    }
    Ok(out)
}

/// Add i.i.d. N(0, variance) noise to every stored rating gap.
pub fn corrupt_noise(ds: &Dataset, variance: f64, seed: u64) -> Result<Dataset> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::Argument(format!("noise variance must be >= 0, got {variance}")));
    }
    let mut out = ds.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance checked");
    let mut rng = stream_rng(seed, &[streams::NOISE]);
    for g in out.examples.iter_mut().filter_map(|e| e.rating_gap.as_mut()) {
        *g += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Keep each rating independently with probability `obs_prob`.
pub fn mask_ratings(ds: &Dataset, obs_prob: f64, seed: u64) -> Result<Dataset> {
    check_unit(obs_prob, "rating observation probability")?;
    let mut out = ds.clone();
    if obs_prob == 1.0 {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, &[streams::MASK]);
    for e in out.examples.iter_mut() {
        let keep = rng.random::<f64>() < obs_prob;
        if !keep {
            e.rating_gap = None;
        }
    }
    Ok(out)
}
