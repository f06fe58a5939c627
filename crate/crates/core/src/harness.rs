//! Configuration, seeded replication campaigns and result persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{empirical_sinkhorn_value, exact_ot_1d, oracle_eot_value, OracleValue};
use crate::error::{Error, Result};
use crate::estimator::{estimate_eot, symmetric_ci, EotEstimate, DEFAULT_INDEX_GRID_SIZE, MIN_BOOTSTRAP_DRAWS};
use crate::measures::{CostFunction, CostKind, Marginal, DEFAULT_COST_GRID};
use crate::numeric::sorted_quantile;
use crate::reference::{ReferenceMeasure, DEFAULT_NORMALIZER_SAMPLES, MAX_NORMALIZER_REL_STDERR};
use crate::saa::{solve_general, solve_reduced_with, ReducedFeasibleSet, SaaSolution, SolverOptions};
use crate::sieve::{build_partition, entropy_condition_ok, kappa, optimal_sample_size, DictionaryKind, SieveDictionary, SieveLevel, SievePartition};

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginalSpec {
    Uniform { lo: f64, hi: f64 },
    PointMass { at: f64 },
    Discrete { atoms: Vec<f64>, weights: Vec<f64> },
    Empirical { atoms: Vec<f64> },
}

impl MarginalSpec {
    pub fn build(&self) -> Result<Marginal> {
        match self {
            MarginalSpec::Uniform { lo, hi } => Marginal::uniform(*lo, *hi),
            MarginalSpec::PointMass { at } => Marginal::point_mass(*at),
            MarginalSpec::Discrete { atoms, weights } => Marginal::discrete(atoms.clone(), weights.clone()),
            MarginalSpec::Empirical { atoms } => Marginal::empirical(atoms.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    Quadratic,
    Absolute,
    Constant { value: f64 },
    User,
}

impl CostSpec {
    pub fn build(&self, x: &Marginal, y: &Marginal, grid: usize) -> Result<CostFunction> {
        match self {
            CostSpec::Quadratic => CostFunction::with_estimated_bounds(CostKind::Quadratic, x, y, grid),
            CostSpec::Absolute => CostFunction::with_estimated_bounds(CostKind::Absolute, x, y, grid),
            CostSpec::Constant { value } => CostFunction::constant(*value),
            CostSpec::User => Err(Error::Config("user cost kinds are code-level plugins and cannot be named in a config".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Reduced,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Sieve,
    Sinkhorn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleSize {
    Explicit(usize),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl Default for SampleSize {
    fn default() -> Self {
        SampleSize::Auto(AutoTag::Auto)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CiConfig {
    pub level: f64,
    pub bootstrap_draws: usize,
    pub index_grid_size: usize,
}

impl Default for CiConfig {
    fn default() -> Self {
        CiConfig { level: 0.95, bootstrap_draws: 1000, index_grid_size: DEFAULT_INDEX_GRID_SIZE }
    }
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Sieve, EstimatorKind::Sinkhorn]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub x_marginal: MarginalSpec,
    pub y_marginal: MarginalSpec,
    pub cost: CostSpec,
    pub gamma: f64,
    pub epsilon: f64,
    #[serde(default = "ExperimentConfig::default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub strict_slab: bool,
    #[serde(default)]
    pub sample_size: SampleSize,
    #[serde(default = "ExperimentConfig::default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub ci: Option<CiConfig>,
    #[serde(default = "ExperimentConfig::default_output_dir")]
    pub output_dir: PathBuf,
    /// Value the summary measures deviations against.
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default = "ExperimentConfig::default_normalizer_samples")]
    pub normalizer_samples: usize,
    #[serde(default)]
    pub allow_noisy_normalizer: bool,
    /// Rejection-sampler proposals allowed per requested draw.
    #[serde(default = "ExperimentConfig::default_proposal_budget")]
    pub proposal_budget: usize,
    #[serde(default = "ExperimentConfig::default_cost_grid")]
    pub cost_grid: usize,
    #[serde(default = "ExperimentConfig::default_oracle_grid")]
    pub oracle_grid: usize,
    #[serde(default = "ExperimentConfig::default_solver")]
    pub solver: SolverOptions,
}

impl ExperimentConfig {
    fn default_mode() -> Mode {
        Mode::Reduced
    }
    fn default_replications() -> usize {
        1
    }
    fn default_output_dir() -> PathBuf {
        PathBuf::from("out")
    }
    fn default_normalizer_samples() -> usize {
        DEFAULT_NORMALIZER_SAMPLES
    }
    fn default_proposal_budget() -> usize {
        10_000
    }
    fn default_cost_grid() -> usize {
        DEFAULT_COST_GRID
    }
    fn default_oracle_grid() -> usize {
        512
    }
    fn default_solver() -> SolverOptions {
        SolverOptions { max_iters: 100_000, ..Default::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator must be selected".into());
        }
        if self.proposal_budget < 1 {
            return bad("proposal_budget must be at least 1".into());
        }
        if let SampleSize::Explicit(0) = self.sample_size {
            return bad("sample_size must be positive".into());
        }
        if let Some(ci) = &self.ci {
            if !(ci.level > 0.5 && ci.level < 1.0) {
                return bad(format!("ci.level must lie in (0.5, 1), got {}", ci.level));
            }
            if ci.bootstrap_draws < MIN_BOOTSTRAP_DRAWS {
                return bad(format!("ci.bootstrap_draws must be at least {MIN_BOOTSTRAP_DRAWS}"));
            }
            if ci.index_grid_size < 1 {
                return bad("ci.index_grid_size must be at least 1".into());
            }
            if self.mode == Mode::General {
                return bad("confidence intervals are available in reduced mode only".into());
            }
        }
        Ok(())
    }

    fn uses(&self, e: EstimatorKind) -> bool {
        self.estimators.contains(&e)
    }
}

/// Seed of replication `index`: a SplitMix64 hash of the pair.
pub fn replication_seed(master_seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(master_seed ^ mix(index))
}

/// Stream reserved for the shared normalizer estimate.
const NORMALIZER_KEY: u64 = u64::MAX;

/// Everything shared by the replications of one campaign.
#[derive(Clone, Debug)]
pub struct Campaign {
    pub config: ExperimentConfig,
    pub x: Marginal,
    pub y: Marginal,
    pub cost: CostFunction,
    pub kappa: f64,
    pub partition: SievePartition,
    pub dictionary: SieveDictionary,
    pub reference: ReferenceMeasure,
    pub sample_size: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ReplicationRecord {
    pub schema_version: u32,
    pub replication_index: usize,
    pub seed: u64,
    pub sieve_value: Option<f64>,
    pub sinkhorn_value: Option<f64>,
    pub theta_hat: Option<f64>,
    pub log_theta_hat: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub log_ci_lo: Option<f64>,
    pub log_ci_hi: Option<f64>,
    pub acceptance_rate: Option<f64>,
    pub solver_iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TimingRecord {
    pub replication_index: usize,
    pub wall_time_ms: f64,
}

impl Campaign {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let x = config.x_marginal.build()?;
        let y = config.y_marginal.build()?;
        let cost = config.cost.build(&x, &y, config.cost_grid)?;
        let kappa = kappa(&x, &y)?;
        let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(config.master_seed, NORMALIZER_KEY));
        let partition = build_partition(&x, &y, config.epsilon, None, &mut rng)?;
        let kind = match config.mode {
            Mode::Reduced => DictionaryKind::ReducedTau,
            Mode::General => DictionaryKind::GeneralAlphaMu,
        };
        let dictionary = SieveDictionary::new(partition.clone(), kind, &x, &y, config.gamma, cost.sup_norm)?;
        let sample_size = match config.sample_size {
            SampleSize::Explicit(n) => n,
            SampleSize::Auto(_) => optimal_sample_size(config.epsilon, partition.n_total.max(2))?,
        };
        let reference = ReferenceMeasure::new(config.gamma, cost.clone(), x.clone(), y.clone(), config.normalizer_samples, &mut rng)?;
        let rel = reference.normalizer_relative_stderr();
        if rel > MAX_NORMALIZER_REL_STDERR {
            if config.allow_noisy_normalizer {
                warn!("normalizer relative stderr {rel:.3} exceeds {MAX_NORMALIZER_REL_STDERR}; continuing as configured");
            } else {
                return Err(Error::NumericalUnderflow(format!(
                    "normalizer relative stderr {rel:.3} exceeds {MAX_NORMALIZER_REL_STDERR}; raise normalizer_samples or set allow_noisy_normalizer"
                )));
            }
        }
        info!(
            "n_total = {}, N = {}, log a_γ = {:.6} ± {:.2e}",
            partition.n_total, sample_size, reference.log_a_gamma_estimate, reference.a_gamma_stderr
        );
        Ok(Campaign { config: config.clone(), x, y, cost, kappa, partition, dictionary, reference, sample_size })
    }

    pub fn level(&self) -> SieveLevel {
        SieveLevel { epsilon: self.config.epsilon, n_total: self.partition.n_total, sample_size: self.sample_size }
    }

    fn solve(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<(SaaSolution, ndarray::Array2<f64>)> {
        let cfg = &self.config;
        let values = self.dictionary.matrix(pairs);
        let shift = cfg.gamma * self.kappa * self.cost.sup_norm;
        let solution = match cfg.mode {
            Mode::Reduced => {
                let n = self.dictionary.len();
                let set = if cfg.strict_slab { ReducedFeasibleSet::strict(n, self.kappa) } else { ReducedFeasibleSet::slab(n) };
                solve_reduced_with(values.view(), self.dictionary.scale, shift, &set, None, &cfg.solver)?
            }
            Mode::General => {
                let signed = crate::sieve::signed(&values);
                solve_general(signed.view(), cfg.gamma, self.kappa, self.cost.sup_norm, &cfg.solver)?
            }
        };
        Ok((solution, values))
    }

    /// Full sieve estimate (with CI when configured) from `rng`.
    pub fn sieve_estimate(&self, rng: &mut dyn RngCore) -> Result<(EotEstimate, f64)> {
        let cfg = &self.config;
        let budget = self.sample_size.saturating_mul(cfg.proposal_budget);
        let sample = self.reference.sample(self.sample_size, budget, rng)?;
        let (solution, values) = self.solve(&sample.pairs)?;
        let mut est = estimate_eot(&solution, &self.reference)?;
        est.attach_level(&self.level(), self.kappa, self.cost.sup_norm);
        if let Some(ci) = &cfg.ci {
            let n = self.dictionary.len();
            let set = if cfg.strict_slab { ReducedFeasibleSet::strict(n, self.kappa) } else { ReducedFeasibleSet::slab(n) };
            let interval = symmetric_ci(
                &solution,
                values.view(),
                self.dictionary.scale,
                &set,
                ci.level,
                ci.bootstrap_draws,
                ci.index_grid_size,
                rng,
            )?;
            est.attach_ci(&interval);
        }
        Ok((est, sample.acceptance_rate()))
    }

    /// Empirical Sinkhorn value on `N` independent draws from each marginal.
    pub fn sinkhorn_estimate(&self, rng: &mut dyn RngCore) -> Result<f64> {
        let xs = self.x.sample(self.sample_size, rng);
        let ys = self.y.sample(self.sample_size, rng);
        empirical_sinkhorn_value(&xs, &ys, &self.cost, self.config.gamma)
    }

    pub fn run_replication(&self, index: usize) -> (ReplicationRecord, TimingRecord) {
        let start = Instant::now();
        let seed = replication_seed(self.config.master_seed, index as u64);
        let mut rec = ReplicationRecord { schema_version: CSV_SCHEMA_VERSION, replication_index: index, seed, ..Default::default() };
        let mut errors = Vec::new();
        if self.config.uses(EstimatorKind::Sieve) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match self.sieve_estimate(&mut rng) {
                Ok((est, rate)) => {
                    rec.sieve_value = Some(est.eot_value);
                    rec.theta_hat = Some(est.theta_hat);
                    rec.log_theta_hat = Some(est.log_theta_hat);
                    rec.ci_lo = est.ci_lo;
                    rec.ci_hi = est.ci_hi;
                    rec.log_ci_lo = est.log_ci_lo;
                    rec.log_ci_hi = est.log_ci_hi;
                    rec.acceptance_rate = Some(rate);
                    rec.solver_iterations = Some(est.solver_iterations);
                }
                Err(e) => errors.push(format!("sieve: {e}")),
            }
        }
        if self.config.uses(EstimatorKind::Sinkhorn) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            match self.sinkhorn_estimate(&mut rng) {
                Ok(v) => rec.sinkhorn_value = Some(v),
                Err(e) => errors.push(format!("sinkhorn: {e}")),
            }
        }
        if !errors.is_empty() {
            rec.error = Some(errors.join("; "));
        }
        let timing = TimingRecord { replication_index: index, wall_time_ms: start.elapsed().as_secs_f64() * 1e3 };
        (rec, timing)
    }

    /// Runs every replication on `threads` workers (all cores when `None`).
    pub fn run(&self, threads: Option<usize>) -> Result<(Vec<ReplicationRecord>, Vec<TimingRecord>)> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(t) = threads {
            builder = builder.num_threads(t.max(1));
        }
        let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut out: Vec<(ReplicationRecord, TimingRecord)> =
            pool.install(|| (0..self.config.replications).into_par_iter().map(|i| self.run_replication(i)).collect());
        out.sort_by_key(|(r, _)| r.replication_index);
        Ok(out.into_iter().unzip())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BoxStats {
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    /// Mean of `|value − target|`.
    pub mean_abs_dev: Option<f64>,
    /// `|mean − target|`.
    pub abs_mean_dev: Option<f64>,
}

impl BoxStats {
    pub fn from_values(values: &[f64], target: Option<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let (q1, median, q3) = (sorted_quantile(&v, 0.25), sorted_quantile(&v, 0.5), sorted_quantile(&v, 0.75));
        let iqr = q3 - q1;
        let whisker_lo = v.iter().copied().find(|x| *x >= q1 - 1.5 * iqr).unwrap_or(v[0]);
        let whisker_hi = v.iter().rev().copied().find(|x| *x <= q3 + 1.5 * iqr).unwrap_or(v[v.len() - 1]);
        Some(BoxStats {
            count: v.len(),
            mean,
            std_dev: var.sqrt(),
            min: v[0],
            q1,
            median,
            q3,
            max: v[v.len() - 1],
            whisker_lo,
            whisker_hi,
            mean_abs_dev: target.map(|t| v.iter().map(|x| (x - t).abs()).sum::<f64>() / n),
            abs_mean_dev: target.map(|t| (mean - t).abs()),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyCheck {
    pub epsilon: f64,
    pub n_total: usize,
    pub sample_size: usize,
    pub log_n_over_n: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub replications: usize,
    pub failed_replications: usize,
    pub complete: bool,
    pub target: Option<f64>,
    pub estimators: BTreeMap<String, BoxStats>,
    pub entropy_condition: EntropyCheck,
    pub log_a_gamma: f64,
    pub log_a_gamma_stderr: f64,
    pub normalizer_relative_stderr: f64,
    pub mean_acceptance_rate: Option<f64>,
}

pub fn summarize(campaign: &Campaign, records: &[ReplicationRecord]) -> Result<CampaignSummary> {
    let target = campaign.config.target;
    let mut estimators = BTreeMap::new();
    let collect = |f: fn(&ReplicationRecord) -> Option<f64>| records.iter().filter_map(f).collect::<Vec<f64>>();
    if campaign.config.uses(EstimatorKind::Sieve) {
        if let Some(s) = BoxStats::from_values(&collect(|r| r.sieve_value), target) {
            estimators.insert("sieve".to_string(), s);
        }
    }
    if campaign.config.uses(EstimatorKind::Sinkhorn) {
        if let Some(s) = BoxStats::from_values(&collect(|r| r.sinkhorn_value), target) {
            estimators.insert("sinkhorn".to_string(), s);
        }
    }
    let level = campaign.level();
    let ok = entropy_condition_ok(&[level])?;
    let rates = collect(|r| r.acceptance_rate);
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    Ok(CampaignSummary {
        replications: records.len(),
        failed_replications: failed,
        complete: failed == 0,
        target,
        estimators,
        entropy_condition: EntropyCheck {
            epsilon: level.epsilon,
            n_total: level.n_total,
            sample_size: level.sample_size,
            log_n_over_n: level.entropy_ratio(),
            ok: ok[0],
        },
        log_a_gamma: campaign.reference.log_a_gamma_estimate,
        log_a_gamma_stderr: campaign.reference.a_gamma_stderr,
        normalizer_relative_stderr: campaign.reference.normalizer_relative_stderr(),
        mean_acceptance_rate: if rates.is_empty() { None } else { Some(rates.iter().sum::<f64>() / rates.len() as f64) },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub package_version: &'static str,
    pub csv_schema_version: u32,
    pub config: ExperimentConfig,
    pub kappa: f64,
    pub cost_sup_norm: f64,
    pub cost_inf_value: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub n_total: usize,
    pub sample_size: usize,
    pub dictionary_scale: f64,
    pub log_a_gamma: f64,
    pub log_a_gamma_stderr: f64,
}

impl Manifest {
    pub fn new(c: &Campaign) -> Self {
        Manifest {
            package_version: env!("CARGO_PKG_VERSION"),
            csv_schema_version: CSV_SCHEMA_VERSION,
            config: c.config.clone(),
            kappa: c.kappa,
            cost_sup_norm: c.cost.sup_norm,
            cost_inf_value: c.cost.inf_value,
            n_x: c.partition.n_x,
            n_y: c.partition.n_y,
            n_total: c.partition.n_total,
            sample_size: c.sample_size,
            dictionary_scale: c.dictionary.scale,
            log_a_gamma: c.reference.log_a_gamma_estimate,
            log_a_gamma_stderr: c.reference.a_gamma_stderr,
        }
    }
}

pub fn write_records<W: std::io::Write>(records: &[ReplicationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ReplicationRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug)]
pub struct ReplicateOutput {
    pub records: Vec<ReplicationRecord>,
    pub timings: Vec<TimingRecord>,
    pub summary: CampaignSummary,
    pub manifest: Manifest,
}

/// Runs a replication campaign and writes `results.csv`, `timings.csv`,
/// `summary.json` and `manifest.json` into `out_dir`.
pub fn replicate(config: &ExperimentConfig, threads: Option<usize>, out_dir: &Path) -> Result<ReplicateOutput> {
    let campaign = Campaign::prepare(config)?;
    let (records, timings) = campaign.run(threads)?;
    let summary = summarize(&campaign, &records)?;
    let manifest = Manifest::new(&campaign);
    fs::create_dir_all(out_dir)?;
    write_records(&records, fs::File::create(out_dir.join("results.csv"))?)?;
    let mut tw = csv::Writer::from_path(out_dir.join("timings.csv"))?;
    for t in &timings {
        tw.serialize(t)?;
    }
    tw.flush()?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ReplicateOutput { records, timings, summary, manifest })
}

/// One end-to-end sieve estimate seeded by `master_seed`.
pub fn estimate(config: &ExperimentConfig) -> Result<EotEstimate> {
    let campaign = Campaign::prepare(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(config.master_seed, 0));
    Ok(campaign.sieve_estimate(&mut rng)?.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct PartitionInfo {
    pub epsilon: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub n_total: usize,
    pub kappa: f64,
    #[serde(rename = "N")]
    pub sample_size: usize,
    pub log_n_over_n: f64,
}

/// Partition summary without touching the reference measure.
pub fn partition_info(config: &ExperimentConfig) -> Result<PartitionInfo> {
    config.validate()?;
    let x = config.x_marginal.build()?;
    let y = config.y_marginal.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    let p = build_partition(&x, &y, config.epsilon, None, &mut rng)?;
    let sample_size = match config.sample_size {
        SampleSize::Explicit(n) => n,
        SampleSize::Auto(_) => optimal_sample_size(config.epsilon, p.n_total.max(2))?,
    };
    Ok(PartitionInfo {
        epsilon: config.epsilon,
        n_x: p.n_x,
        n_y: p.n_y,
        n_total: p.n_total,
        kappa: kappa(&x, &y)?,
        sample_size,
        log_n_over_n: (p.n_total as f64).ln() / sample_size as f64,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub eot_value: f64,
    pub ot_value: Option<f64>,
    pub oracle: OracleValue,
}

pub const EXACT_OT_QUADRATURE: usize = 100_000;

fn oracle_key(config: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string(&(&config.x_marginal, &config.y_marginal, &config.cost, config.gamma, config.oracle_grid))?)
}

/// Grid oracle for the configured problem, memoized in a JSON sidecar when
/// `cache` is given.
pub fn oracle(config: &ExperimentConfig, cache: Option<&Path>) -> Result<OracleReport> {
    config.validate()?;
    let x = config.x_marginal.build()?;
    let y = config.y_marginal.build()?;
    let cost = config.cost.build(&x, &y, config.cost_grid)?;
    let key = oracle_key(config)?;
    let mut table: BTreeMap<String, OracleValue> = match cache {
        Some(p) if p.exists() => serde_json::from_str(&fs::read_to_string(p)?)?,
        _ => BTreeMap::new(),
    };
    let value = match table.get(&key) {
        Some(v) => v.clone(),
        None => {
            let v = oracle_eot_value(&x, &y, &cost, config.gamma, config.oracle_grid)?;
            if let Some(p) = cache {
                table.insert(key, v.clone());
                fs::write(p, serde_json::to_string_pretty(&table)?)?;
            }
            v
        }
    };
    let ot_value = match &config.cost {
        CostSpec::Quadratic | CostSpec::Absolute => Some(exact_ot_1d(&x, &y, &cost.kind, EXACT_OT_QUADRATURE)?),
        CostSpec::Constant { value } => Some(*value),
        CostSpec::User => None,
    };
    Ok(OracleReport { eot_value: value.eot_value, ot_value, oracle: value })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn appendix() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"x_marginal": {"kind": "uniform", "lo": 0, "hi": 1},
                "y_marginal": {"kind": "uniform", "lo": 0, "hi": 2},
                "cost": {"kind": "quadratic"}, "gamma": 100, "epsilon": 0.1}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_are_materialized() {
        let c = appendix();
        assert_eq!(c.sample_size, SampleSize::Auto(AutoTag::Auto));
        assert_eq!(c.mode, Mode::Reduced);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"sample_size\":\"auto\""));
        assert!(text.contains("\"replications\":1"));
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.sample_size, c.sample_size);
    }

    #[test]
    fn partition_info_matches_table() {
        let info = partition_info(&appendix()).unwrap();
        assert_eq!((info.n_total, info.sample_size, info.kappa), (160, 1015, 1.0));
        let mut c = appendix();
        c.epsilon = 0.2;
        assert_eq!(partition_info(&c).unwrap().n_total, 80);
        c.x_marginal = MarginalSpec::PointMass { at: 0.5 };
        assert_eq!(partition_info(&c).unwrap().n_x, 1);
    }

    #[test]
    fn bad_epsilon_is_invalid_argument() {
        let mut c = appendix();
        c.epsilon = 1.5;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        assert!(ExperimentConfig::from_json(r#"{"x_marginal": {"kind": "uniform", "lo": 0, "hi": 1}}"#).is_err());
    }

    #[test]
    fn seeds_differ_by_index() {
        assert_ne!(replication_seed(7, 0), replication_seed(7, 1));
        assert_eq!(replication_seed(7, 3), replication_seed(7, 3));
    }

    #[test]
    fn box_stats_single_value() {
        let s = BoxStats::from_values(&[0.2], Some(0.25)).unwrap();
        assert_eq!((s.mean, s.median, s.q1, s.q3), (0.2, 0.2, 0.2, 0.2));
        assert!((s.mean_abs_dev.unwrap() - 0.05).abs() < 1e-15);
        assert!(BoxStats::from_values(&[], None).is_none());
    }
}
