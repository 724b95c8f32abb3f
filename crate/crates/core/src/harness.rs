//! Multi-seed experiment sweeps: dataset generation, training, and gap
//! evaluation over a grid of sweep points, with long-format CSV rows and
//! per-cell aggregates.

use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    corrupt_noise, corrupt_swap, mask_ratings, sample_dataset, stream_rng, streams, Dataset,
    EnvSpec, Environment, RatingModel,
};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, CsvBuffer};
use crate::losses::{AlgorithmSpec, Family};
use crate::oracle::{c_max, optimal_policy, rate_bounds, BoundParams};
use crate::trainer::{train, TrainConfig, TrainData, TrainMode};

/// Axis being varied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum SweepKind {
    Acceleration { n_grid: Vec<usize> },
    RobustSwap { fractions: Vec<f64> },
    RobustNoise { variances: Vec<f64> },
    AblationBeta1 { values: Vec<f64> },
    AblationVariance { values: Vec<f64> },
    MissingRatings { obs_probs: Vec<f64> },
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::Acceleration { .. } => "ACCELERATION",
            SweepKind::RobustSwap { .. } => "ROBUST_SWAP",
            SweepKind::RobustNoise { .. } => "ROBUST_NOISE",
            SweepKind::AblationBeta1 { .. } => "ABLATION_BETA1",
            SweepKind::AblationVariance { .. } => "ABLATION_VARIANCE",
            SweepKind::MissingRatings { .. } => "MISSING_RATINGS",
        }
    }

    pub fn points(&self) -> Vec<f64> {
        match self {
            SweepKind::Acceleration { n_grid } => n_grid.iter().map(|&n| n as f64).collect(),
            SweepKind::RobustSwap { fractions: v }
            | SweepKind::RobustNoise { variances: v }
            | SweepKind::AblationBeta1 { values: v }
            | SweepKind::AblationVariance { values: v }
            | SweepKind::MissingRatings { obs_probs: v } => v.clone(),
        }
    }
}

/// Constants for the bound diagnostics attached to every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    pub c: f64,
    pub delta: f64,
    pub policy_class_size: f64,
    /// Lower clamp on the beta1 prescription, which is 0 for exact ratings.
    pub beta1_floor: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            c: 32.0,
            delta: 0.1,
            policy_class_size: 100.0,
            beta1_floor: 1e-6,
        }
    }
}

fn default_n() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub sweep: SweepKind,
    pub algorithms: Vec<AlgorithmSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub env_spec: EnvSpec,
    /// Dataset size for every kind except ACCELERATION.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub rating: RatingModel,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        let points = self.sweep.points();
        if points.is_empty() {
            return Err(Error::Argument("sweep grid is empty".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Argument("sweep needs at least one algorithm".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Argument("sweep needs at least one seed".into()));
        }
        if self.train.mode != TrainMode::Empirical {
            return Err(Error::Argument("sweeps train on sampled data; set train.mode to EMPIRICAL".into()));
        }
        if let SweepKind::Acceleration { n_grid } = &self.sweep {
            if n_grid.contains(&0) {
                return Err(Error::Argument("n_grid entries must be >= 1".into()));
            }
        } else if self.n == 0 {
            return Err(Error::Argument("n must be >= 1".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Argument("sweep points must be finite".into()));
        }
        for a in &self.algorithms {
            a.validate()?;
        }
        self.train.validate()
    }

    /// Algorithm as run at a sweep point (ablations override a hyperparameter).
    pub fn algorithm_at(&self, algorithm: usize, point: f64) -> AlgorithmSpec {
        let mut spec = self.algorithms[algorithm].clone();
        match self.sweep {
            SweepKind::AblationBeta1 { .. } if spec.family.is_rdpo_like() => spec.beta1 = point,
            SweepKind::AblationVariance { .. } if spec.family == Family::Mlrdpo => spec.variance = point,
            _ => {}
        }
        spec
    }

    /// Column label for an algorithm; ablated hyperparameters are left out
    /// so a cell groups one algorithm across the grid.
    pub fn algorithm_label(&self, algorithm: usize) -> String {
        self.algorithms[algorithm].label()
    }
}

/// One (point, algorithm, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub point_index: usize,
    pub point: f64,
    pub algorithm_index: usize,
    pub algorithm: String,
    pub family: Family,
    pub seed: u64,
    pub status: String,
    pub n: usize,
    pub beta_eff: f64,
    pub final_gap: f64,
    pub final_loss: f64,
    pub kl_to_ref: f64,
    pub err_rating: f64,
    pub err_dpo: f64,
    pub rdpo_bound: f64,
    pub mlrdpo_bound: f64,
    pub beta1_theorem1: f64,
    pub c_max_proxy: f64,
    pub error: String,
}

pub const RESULT_COLUMNS: [&str; 20] = [
    "sweep",
    "point_index",
    "point",
    "algorithm_index",
    "algorithm",
    "family",
    "seed",
    "status",
    "n",
    "beta_eff",
    "final_gap",
    "final_loss",
    "kl_to_ref",
    "err_rating",
    "err_dpo",
    "rdpo_bound",
    "mlrdpo_bound",
    "beta1_theorem1",
    "c_max_proxy",
    "error",
];

/// Mean and spread of the final gap in one (point, algorithm) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub point_index: usize,
    pub point: f64,
    pub algorithm_index: usize,
    pub algorithm: String,
    pub runs_ok: usize,
    pub runs_failed: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
    pub stderr_gap: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub sweep: String,
    pub cells: Vec<CellAggregate>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub sweep: String,
    pub rows: Vec<RunRow>,
    /// Wall time per run in the order of `rows`.
    pub seconds: Vec<f64>,
}

/// Dataset seed for a plan seed; changing the master seed reshuffles every run.
pub fn data_seed(master: u64, seed: u64) -> u64 {
    stream_rng(master, &[streams::INSTANCE, seed]).next_u64()
}

struct RunContext<'a> {
    plan: &'a SweepPlan,
    env: &'a Environment,
    master: u64,
}

impl RunContext<'_> {
    fn dataset(&self, point: f64, seed: u64) -> Result<Dataset> {
        let p = self.plan;
        let s = data_seed(self.master, seed);
        match p.sweep {
            SweepKind::Acceleration { .. } => sample_dataset(self.env, point as usize, &p.rating, s),
            SweepKind::RobustSwap { .. } => corrupt_swap(&sample_dataset(self.env, p.n, &p.rating, s)?, point, s),
            SweepKind::RobustNoise { .. } => corrupt_noise(&sample_dataset(self.env, p.n, &p.rating, s)?, point, s),
            SweepKind::MissingRatings { .. } => mask_ratings(&sample_dataset(self.env, p.n, &p.rating, s)?, point, s),
            SweepKind::AblationBeta1 { .. } | SweepKind::AblationVariance { .. } => {
                sample_dataset(self.env, p.n, &p.rating, s)
            }
        }
    }

    fn run(&self, point_index: usize, point: f64, algorithm: usize, seed: u64) -> RunRow {
        let plan = self.plan;
        let spec = plan.algorithm_at(algorithm, point);
        let mut row = RunRow {
            point_index,
            point,
            algorithm_index: algorithm,
            algorithm: plan.algorithm_label(algorithm),
            family: spec.family,
            seed,
            status: "ok".into(),
            n: 0,
            beta_eff: spec.beta_eff(),
            final_gap: f64::NAN,
            final_loss: f64::NAN,
            kl_to_ref: f64::NAN,
            err_rating: f64::NAN,
            err_dpo: f64::NAN,
            rdpo_bound: f64::NAN,
            mlrdpo_bound: f64::NAN,
            beta1_theorem1: f64::NAN,
            c_max_proxy: f64::NAN,
            error: String::new(),
        };
        if let Err(e) = self.fill(&spec, &mut row) {
            row.status = "error".into();
            row.error = e.to_string();
        }
        row
    }

    fn fill(&self, spec: &AlgorithmSpec, row: &mut RunRow) -> Result<()> {
        let ds = self.dataset(row.point, row.seed)?;
        row.n = ds.len();
        row.err_rating = ds.empirical_rating_error(self.env).unwrap_or(f64::NAN);
        let mut cfg = self.plan.train.clone();
        cfg.seed = row.seed;
        let (policy, trace) = train(spec, self.env, TrainData::Empirical(&ds), &cfg)?;
        let last = trace.last();
        row.final_gap = last.subopt_gap;
        row.final_loss = last.loss;
        row.kl_to_ref = last.kl_to_ref;

        let b = &self.plan.bounds;
        let params = BoundParams {
            c: b.c,
            delta: b.delta,
            policy_class_size: b.policy_class_size,
            r_max: self.env.r_star().r_max().max(f64::MIN_POSITIVE),
            n: ds.len(),
            beta: spec.beta,
        };
        let star = optimal_policy(self.env.r_star(), row.beta_eff, self.env.pi_ref(), self.env.nu0(), spec.divergence)?;
        let conc = c_max(&[star, policy], self.env)?;
        let err_r = if row.err_rating.is_nan() { 0.0 } else { row.err_rating };
        let bounds = rate_bounds(&params, err_r, spec.variance, conc)?;
        row.err_dpo = bounds.err_dpo;
        row.rdpo_bound = bounds.rdpo_bound;
        row.mlrdpo_bound = bounds.mlrdpo_bound;
        row.beta1_theorem1 = bounds.beta1_theorem1.max(b.beta1_floor);
        row.c_max_proxy = conc;
        Ok(())
    }
}

/// Runs every (point, algorithm, seed) combination. Individual failures
/// become error rows; only an invalid plan fails the whole sweep.
pub fn run_sweep(plan: &SweepPlan, master_seed: u64) -> Result<SweepOutput> {
    plan.validate()?;
    let env = plan.env_spec.build()?;
    let ctx = RunContext {
        plan,
        env: &env,
        master: master_seed,
    };
    let points = plan.sweep.points();
    let jobs: Vec<(usize, f64, usize, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(pi, &p)| {
            (0..plan.algorithms.len()).flat_map(move |a| plan.seeds.iter().map(move |&s| (pi, p, a, s)))
        })
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = plan.workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?;
    let mut results: Vec<(RunRow, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(pi, p, a, s)| {
                let t = Instant::now();
                let row = ctx.run(pi, p, a, s);
                (row, t.elapsed().as_secs_f64())
            })
            .collect()
    });
    results.sort_by(|(x, _), (y, _)| {
        (x.point_index, x.algorithm_index, x.seed).cmp(&(y.point_index, y.algorithm_index, y.seed))
    });
    let (rows, seconds) = results.into_iter().unzip();
    Ok(SweepOutput {
        sweep: plan.sweep.name().into(),
        rows,
        seconds,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (zero for a single run).
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl SweepOutput {
    pub fn aggregate(&self) -> SweepAggregate {
        let mut cells: Vec<CellAggregate> = Vec::new();
        for row in &self.rows {
            let same = cells
                .last()
                .is_some_and(|c| c.point_index == row.point_index && c.algorithm_index == row.algorithm_index);
            if !same {
                cells.push(CellAggregate {
                    point_index: row.point_index,
                    point: row.point,
                    algorithm_index: row.algorithm_index,
                    algorithm: row.algorithm.clone(),
                    runs_ok: 0,
                    runs_failed: 0,
                    mean_gap: f64::NAN,
                    std_gap: f64::NAN,
                    stderr_gap: f64::NAN,
                    mean_loss: f64::NAN,
                });
            }
        }
        for cell in cells.iter_mut() {
            let ok: Vec<&RunRow> = self
                .rows
                .iter()
                .filter(|r| r.point_index == cell.point_index && r.algorithm_index == cell.algorithm_index)
                .collect();
            cell.runs_failed = ok.iter().filter(|r| r.status != "ok").count();
            let gaps: Vec<f64> = ok.iter().filter(|r| r.status == "ok").map(|r| r.final_gap).collect();
            let losses: Vec<f64> = ok.iter().filter(|r| r.status == "ok").map(|r| r.final_loss).collect();
            cell.runs_ok = gaps.len();
            if !gaps.is_empty() {
                cell.mean_gap = mean(&gaps);
                cell.std_gap = std_dev(&gaps);
                cell.stderr_gap = cell.std_gap / (gaps.len() as f64).sqrt();
                cell.mean_loss = mean(&losses);
            }
        }
        SweepAggregate {
            sweep: self.sweep.clone(),
            cells,
        }
    }

    pub fn results_csv(&self) -> String {
        let mut csv = CsvBuffer::with_header(&RESULT_COLUMNS);
        for r in &self.rows {
            csv.row([
                self.sweep.clone(),
                r.point_index.to_string(),
                fmt_f64(r.point),
                r.algorithm_index.to_string(),
                r.algorithm.clone(),
                r.family.to_string(),
                r.seed.to_string(),
                r.status.clone(),
                r.n.to_string(),
                fmt_f64(r.beta_eff),
                fmt_f64(r.final_gap),
                fmt_f64(r.final_loss),
                fmt_f64(r.kl_to_ref),
                fmt_f64(r.err_rating),
                fmt_f64(r.err_dpo),
                fmt_f64(r.rdpo_bound),
                fmt_f64(r.mlrdpo_bound),
                fmt_f64(r.beta1_theorem1),
                fmt_f64(r.c_max_proxy),
                r.error.clone(),
            ]);
        }
        csv.into_string()
    }

    pub fn timing_csv(&self) -> String {
        let mut csv = CsvBuffer::with_header(&["point_index", "algorithm_index", "seed", "wall_seconds"]);
        for (r, s) in self.rows.iter().zip(&self.seconds) {
            csv.row([
                r.point_index.to_string(),
                r.algorithm_index.to_string(),
                r.seed.to_string(),
                format!("{s:.6}"),
            ]);
        }
        csv.into_string()
    }

    /// Rows of one cell.
    pub fn cell(&self, point_index: usize, algorithm_index: usize) -> Vec<&RunRow> {
        self.rows
            .iter()
            .filter(|r| r.point_index == point_index && r.algorithm_index == algorithm_index)
            .collect()
    }
}
