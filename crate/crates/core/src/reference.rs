//! The Gibbs reference measure `R_γ`, with density `exp(−γc)/a_γ` against
//! the product of the marginals.

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::error::{invalid_arg, Error, Result};
use crate::measures::{CostFunction, Marginal};

/// Default number of product draws used to estimate `log a_γ`.
pub const DEFAULT_NORMALIZER_SAMPLES: usize = 1_000_000;

/// Relative standard error of `log â_γ` above which the harness refuses to run.
pub const MAX_NORMALIZER_REL_STDERR: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct ReferenceMeasure {
    pub gamma: f64,
    pub cost: CostFunction,
    pub x_marg: Marginal,
    pub y_marg: Marginal,
    pub log_a_gamma_estimate: f64,
    /// Delta-method standard error of `log_a_gamma_estimate`.
    pub a_gamma_stderr: f64,
    pub normalizer_sample_count: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormalizerEstimate {
    pub log_a: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of `log a_γ = log E[exp(−γ c(X, Y))]` under the
/// product measure, with a max-shifted log-mean-exp.
pub fn estimate_log_a_gamma(
    gamma: f64,
    cost: &CostFunction,
    x_marg: &Marginal,
    y_marg: &Marginal,
    mc_count: usize,
    rng: &mut dyn RngCore,
) -> Result<NormalizerEstimate> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid_arg(format!("gamma must be positive, got {gamma}")));
    }
    if mc_count < 100 {
        return Err(invalid_arg(format!("need at least 100 normalizer draws, got {mc_count}")));
    }
    let mut xs = vec![0.0; x_marg.dimension()];
    let mut ys = vec![0.0; y_marg.dimension()];
    let exponents: Vec<f64> = (0..mc_count)
        .map(|_| {
            x_marg.draw_into(rng, &mut xs);
            y_marg.draw_into(rng, &mut ys);
            -gamma * cost.eval(&xs, &ys)
        })
        .collect();
    let shift = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::NumericalUnderflow(format!(
            "every weight exp(-γc) vanished at γ = {gamma}; use a smaller γ or a larger shift"
        )));
    }
    let n = mc_count as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for e in &exponents {
        let w = (e - shift).exp();
        sum += w;
        sum_sq += w * w;
    }
    let mean = sum / n;
    if mean <= 0.0 {
        return Err(Error::NumericalUnderflow("normalizer mean underflowed after shifting".into()));
    }
    let var = ((sum_sq / n) - mean * mean).max(0.0) * n / (n - 1.0);
    let log_a = (shift + mean.ln()).min(0.0);
    Ok(NormalizerEstimate { log_a, stderr: var.sqrt() / (n.sqrt() * mean) })
}

/// Draws from `R_γ` together with sampler diagnostics.
#[derive(Clone, Debug)]
pub struct ReferenceSample {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub proposals: usize,
}

impl ReferenceSample {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / self.proposals as f64
        }
    }
}

/// Product-measure draws with self-normalized log-weights `−γc − log Σ e^{−γc}`.
#[derive(Clone, Debug)]
pub struct WeightedSample {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub log_weights: Vec<f64>,
}

impl ReferenceMeasure {
    /// Builds the measure, estimating `log a_γ` from `mc_count` product draws.
    pub fn new(
        gamma: f64,
        cost: CostFunction,
        x_marg: Marginal,
        y_marg: Marginal,
        mc_count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let est = estimate_log_a_gamma(gamma, &cost, &x_marg, &y_marg, mc_count, rng)?;
        Ok(ReferenceMeasure {
            gamma,
            cost,
            x_marg,
            y_marg,
            log_a_gamma_estimate: est.log_a,
            a_gamma_stderr: est.stderr,
            normalizer_sample_count: mc_count,
        })
    }

    /// Builds the measure from a known `log a_γ`.
    pub fn with_log_a(gamma: f64, cost: CostFunction, x_marg: Marginal, y_marg: Marginal, log_a_gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid_arg(format!("gamma must be positive, got {gamma}")));
        }
        if !(log_a_gamma <= 0.0) {
            return Err(invalid_arg(format!("log a_γ must be ≤ 0, got {log_a_gamma}")));
        }
        Ok(ReferenceMeasure {
            gamma,
            cost,
            x_marg,
            y_marg,
            log_a_gamma_estimate: log_a_gamma,
            a_gamma_stderr: 0.0,
            normalizer_sample_count: 0,
        })
    }

    /// `stderr / |log â_γ|`, zero when both vanish.
    pub fn normalizer_relative_stderr(&self) -> f64 {
        if self.a_gamma_stderr == 0.0 {
            0.0
        } else {
            self.a_gamma_stderr / self.log_a_gamma_estimate.abs()
        }
    }

    /// Exact i.i.d. draws by rejection from the product measure, accepting
    /// with probability `exp(−γ(c − inf c))`.
    pub fn sample(&self, count: usize, max_proposals: usize, rng: &mut dyn RngCore) -> Result<ReferenceSample> {
        if count == 0 {
            return Err(invalid_arg("need at least one reference draw"));
        }
        if max_proposals < count {
            return Err(invalid_arg("max_proposals must be at least count"));
        }
        let (dx, dy) = (self.x_marg.dimension(), self.y_marg.dimension());
        let mut pairs = Vec::with_capacity(count);
        let mut proposals = 0;
        let mut xs = vec![0.0; dx];
        let mut ys = vec![0.0; dy];
        while pairs.len() < count {
            if proposals == max_proposals {
                return Err(Error::AcceptanceBudgetExceeded {
                    requested: count,
                    accepted: pairs.len(),
                    proposals,
                    rate: pairs.len() as f64 / proposals as f64,
                });
            }
            proposals += 1;
            self.x_marg.draw_into(rng, &mut xs);
            self.y_marg.draw_into(rng, &mut ys);
            let excess = (self.cost.eval(&xs, &ys) - self.cost.inf_value).max(0.0);
            let u: f64 = rng.random();
            if u < (-self.gamma * excess).exp() {
                pairs.push((xs.clone(), ys.clone()));
            }
        }
        Ok(ReferenceSample { pairs, proposals })
    }

    /// Self-normalized importance sampling: `count` product draws with
    /// normalized log-weights. Biased for fixed `count`; meant for regimes
    /// where rejection collapses.
    pub fn sample_weighted(&self, count: usize, rng: &mut dyn RngCore) -> Result<WeightedSample> {
        if count == 0 {
            return Err(invalid_arg("need at least one reference draw"));
        }
        let mut pairs = Vec::with_capacity(count);
        let mut log_weights = Vec::with_capacity(count);
        for _ in 0..count {
            let x = {
                let mut p = vec![0.0; self.x_marg.dimension()];
                self.x_marg.draw_into(rng, &mut p);
                p
            };
            let y = {
                let mut p = vec![0.0; self.y_marg.dimension()];
                self.y_marg.draw_into(rng, &mut p);
                p
            };
            log_weights.push(-self.gamma * self.cost.eval(&x, &y));
            pairs.push((x, y));
        }
        let lse = crate::numeric::log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::NumericalUnderflow("all importance weights vanished".into()));
        }
        log_weights.iter_mut().for_each(|w| *w -= lse);
        Ok(WeightedSample { pairs, log_weights })
    }
}
