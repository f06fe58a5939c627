//! EOT value estimates from SAA solutions, multiplier-bootstrap confidence
//! intervals for `ϑ*`, and the sample-complexity bound.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{invalid_arg, Error, Result};
use crate::numeric::sorted_quantile;
use crate::reference::ReferenceMeasure;
use crate::saa::{ReducedFeasibleSet, SaaSolution};
use crate::sieve::SieveLevel;

pub const DEFAULT_INDEX_GRID_SIZE: usize = 256;
pub const MIN_BOOTSTRAP_DRAWS: usize = 200;

#[derive(Clone, Debug, Serialize)]
pub struct EotEstimate {
    pub gamma: f64,
    pub eot_value: f64,
    pub theta_hat: f64,
    pub log_theta_hat: f64,
    pub log_a_gamma: f64,
    pub log_a_gamma_stderr: f64,
    /// Interval for `ϑ*`; `ci_lo` is 0 when the lower end was truncated.
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub log_ci_lo: Option<f64>,
    pub log_ci_hi: Option<f64>,
    /// The interval mapped to the value scale. The upper end is absent when
    /// the `ϑ` interval was truncated at 0.
    pub value_ci_lo: Option<f64>,
    pub value_ci_hi: Option<f64>,
    pub ci_level: Option<f64>,
    pub epsilon: Option<f64>,
    pub n_total: Option<usize>,
    #[serde(rename = "N")]
    pub sample_size: Option<usize>,
    pub rate_bound_log10: Option<f64>,
    pub solver_iterations: usize,
    pub converged: bool,
}

/// `−(log a_γ + log ϑ)/γ`, strictly decreasing in `ϑ`.
pub fn value_from_log_theta(gamma: f64, log_a_gamma: f64, log_theta: f64) -> f64 {
    -(log_a_gamma + log_theta) / gamma
}

/// Point estimate of the EOT value from a converged solution.
pub fn estimate_eot(solution: &SaaSolution, reference: &ReferenceMeasure) -> Result<EotEstimate> {
    if !solution.converged {
        return Err(Error::NotConverged(format!(
            "solver stopped after {} iterations with gradient-mapping norm {:.3e}",
            solution.iterations, solution.final_gradient_mapping_norm
        )));
    }
    let gamma = reference.gamma;
    let log_a = reference.log_a_gamma_estimate;
    Ok(EotEstimate {
        gamma,
        eot_value: value_from_log_theta(gamma, log_a, solution.log_theta_hat),
        theta_hat: solution.theta_hat(),
        log_theta_hat: solution.log_theta_hat,
        log_a_gamma: log_a,
        log_a_gamma_stderr: reference.a_gamma_stderr,
        ci_lo: None,
        ci_hi: None,
        log_ci_lo: None,
        log_ci_hi: None,
        value_ci_lo: None,
        value_ci_hi: None,
        ci_level: None,
        epsilon: None,
        n_total: None,
        sample_size: None,
        rate_bound_log10: None,
        solver_iterations: solution.iterations,
        converged: solution.converged,
    })
}

impl EotEstimate {
    /// Records the sieve level and the corresponding rate bound.
    pub fn attach_level(&mut self, level: &SieveLevel, kappa: f64, sup_norm: f64) {
        self.epsilon = Some(level.epsilon);
        self.n_total = Some(level.n_total);
        self.sample_size = Some(level.sample_size);
        self.rate_bound_log10 = rate_bound(level.epsilon, level.n_total, level.sample_size, self.gamma, kappa, sup_norm).ok();
    }

    pub fn attach_ci(&mut self, ci: &ThetaInterval) {
        self.ci_level = Some(ci.level);
        self.ci_lo = Some(ci.lo());
        self.ci_hi = Some(ci.hi());
        self.log_ci_lo = ci.log_lo;
        self.log_ci_hi = Some(ci.log_hi);
        self.value_ci_lo = Some(value_from_log_theta(self.gamma, self.log_a_gamma, ci.log_hi));
        self.value_ci_hi = ci.log_lo.map(|l| value_from_log_theta(self.gamma, self.log_a_gamma, l));
    }
}

/// Symmetric interval `ϑ̂ ∓ q̂/√N` intersected with `(0, ∞)`, kept in logs
/// because `ϑ̂` underflows for large `γ`.
#[derive(Clone, Debug, Serialize)]
pub struct ThetaInterval {
    pub level: f64,
    pub log_theta_hat: f64,
    /// `log q̂`; `−∞` for a degenerate interval.
    pub log_q_hat: f64,
    /// `None` when the lower end was truncated at 0.
    pub log_lo: Option<f64>,
    pub log_hi: f64,
    pub index_grid_size: usize,
    pub bootstrap_draws: usize,
}

impl ThetaInterval {
    pub fn lo(&self) -> f64 {
        self.log_lo.map_or(0.0, f64::exp)
    }

    pub fn hi(&self) -> f64 {
        self.log_hi.exp()
    }

    pub fn contains_log(&self, log_theta: f64) -> bool {
        self.log_lo.is_none_or(|l| l <= log_theta) && log_theta <= self.log_hi
    }
}

/// Integrand values on an index grid, stored as `G(ωⱼ; τₖ) = e^{M}·gⱼₖ`
/// with the sample mean of each column removed.
#[derive(Clone, Debug)]
pub struct CenteredProcess {
    /// `N × K` matrix of centered, rescaled integrand values.
    pub centered: Array2<f64>,
    pub log_scale: f64,
}

/// Evaluates `exp(scale·⟨τₖ, v(ωⱼ)⟩)` on the grid and centers each column.
pub fn centered_process(values: ArrayView2<f64>, scale: f64, grid: &[Vec<f64>]) -> Result<CenteredProcess> {
    let (nrows, ncols) = values.dim();
    if grid.is_empty() || grid.iter().any(|t| t.len() != ncols) {
        return Err(invalid_arg("index grid points must match the dictionary size"));
    }
    let taus = Array2::from_shape_fn((ncols, grid.len()), |(i, k)| grid[k][i]);
    let mut expo = values.dot(&taus);
    expo.mapv_inplace(|e| scale * e);
    let log_scale = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !log_scale.is_finite() {
        return Err(Error::NumericalUnderflow("integrand exponents are not finite".into()));
    }
    expo.mapv_inplace(|e| (e - log_scale).exp());
    for mut col in expo.columns_mut() {
        let mean = col.sum() / nrows as f64;
        col.mapv_inplace(|g| g - mean);
    }
    Ok(CenteredProcess { centered: expo, log_scale })
}

/// Interval from explicit multipliers (`B × N`).
pub fn ci_from_multipliers(
    process: &CenteredProcess,
    multipliers: ArrayView2<f64>,
    log_theta_hat: f64,
    level: f64,
) -> Result<ThetaInterval> {
    if !(level > 0.5 && level < 1.0) {
        return Err(invalid_arg(format!("level must lie in (0.5, 1), got {level}")));
    }
    let n = process.centered.nrows();
    if multipliers.ncols() != n || multipliers.nrows() == 0 {
        return Err(invalid_arg("multiplier matrix must be B × N with B ≥ 1"));
    }
    let z = multipliers.dot(&process.centered);
    let root_n = (n as f64).sqrt();
    let mut sups = Vec::with_capacity(2 * z.nrows());
    for row in z.rows() {
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        sups.push(hi / root_n);
        sups.push(-lo / root_n);
    }
    sups.sort_by(f64::total_cmp);
    let q = sorted_quantile(&sups, 1.0 - (1.0 - level) / 2.0).max(0.0);
    let log_q_hat = if q > 0.0 { process.log_scale + q.ln() } else { f64::NEG_INFINITY };
    // half-width q̂/√N relative to ϑ̂
    let log_rel = log_q_hat - 0.5 * (n as f64).ln() - log_theta_hat;
    let rel = log_rel.exp();
    let log_hi = log_theta_hat + rel.ln_1p();
    let log_lo = if rel < 1.0 { Some(log_theta_hat + (-rel).ln_1p()) } else { None };
    Ok(ThetaInterval {
        level,
        log_theta_hat,
        log_q_hat,
        log_lo,
        log_hi,
        index_grid_size: process.centered.ncols(),
        bootstrap_draws: multipliers.nrows(),
    })
}

/// Gaussian multiplier bootstrap interval for `ϑ*` around a reduced solution.
/// The index grid is the optimizer plus `index_grid_size − 1` uniform draws
/// from `set`; draw `b` uses its own ChaCha stream.
#[allow(clippy::too_many_arguments)]
pub fn symmetric_ci(
    solution: &SaaSolution,
    values: ArrayView2<f64>,
    scale: f64,
    set: &ReducedFeasibleSet,
    level: f64,
    bootstrap_draws: usize,
    index_grid_size: usize,
    rng: &mut dyn RngCore,
) -> Result<ThetaInterval> {
    if !solution.converged {
        return Err(Error::NotConverged("confidence interval needs a converged solution".into()));
    }
    let tau = solution.tau().ok_or_else(|| invalid_arg("confidence intervals are built for reduced solutions"))?;
    if bootstrap_draws < MIN_BOOTSTRAP_DRAWS {
        return Err(invalid_arg(format!("need at least {MIN_BOOTSTRAP_DRAWS} bootstrap draws, got {bootstrap_draws}")));
    }
    if index_grid_size == 0 {
        return Err(invalid_arg("index grid must contain the optimizer"));
    }
    let mut grid = Vec::with_capacity(index_grid_size);
    grid.push(tau.to_vec());
    for _ in 1..index_grid_size {
        grid.push(set.sample_uniform(rng));
    }
    let process = centered_process(values, scale, &grid)?;
    let n = values.nrows();
    let base: u64 = rng.random();
    let mut xi = Array2::zeros((bootstrap_draws, n));
    for (b, mut row) in xi.rows_mut().into_iter().enumerate() {
        let mut stream = ChaCha8Rng::seed_from_u64(base);
        stream.set_stream(b as u64);
        row.iter_mut().for_each(|v| *v = stream.sample(StandardNormal));
    }
    ci_from_multipliers(&process, xi.view(), solution.log_theta_hat, level)
}

/// `log₁₀` of `max{√(2 log n/N), ε}·2κ‖c‖∞·exp(2γκ‖c‖∞)`.
pub fn rate_bound(epsilon: f64, n_total: usize, sample_size: usize, gamma: f64, kappa: f64, sup_norm: f64) -> Result<f64> {
    if !(epsilon > 0.0 && gamma > 0.0 && kappa > 0.0 && sup_norm > 0.0) || n_total == 0 || sample_size == 0 {
        return Err(invalid_arg("rate bound arguments must be positive"));
    }
    let stochastic = (2.0 * (n_total as f64).ln() / sample_size as f64).sqrt();
    let lead = stochastic.max(epsilon) * 2.0 * kappa * sup_norm;
    Ok(lead.log10() + 2.0 * gamma * kappa * sup_norm / std::f64::consts::LN_10)
}
