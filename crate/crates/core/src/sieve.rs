//! The moment-function sieve.
//!
//! The marginal constraints are encoded by the CDF-indexed moment functions
//! `F_X(x') − 1[x ⪯ x']` and `F_Y(y') − 1[y ⪯ y']`. Partitioning the index
//! sets `X` and `Y` into cells with CDF increments at most `ε/8` and keeping
//! one representative per cell gives a finite dictionary of `n_x + n_y`
//! functions, each taking values in `[−1, 1]`.

use log::warn;
use ndarray::Array2;
use rand::RngCore;
use serde::Serialize;

use crate::error::{invalid_arg, Error, Result};
use crate::measures::{quantile_cells, Cell, Marginal};
use crate::reference::ReferenceMeasure;

/// Hard cap on the number of cells a partition may grow to.
pub const MAX_CELLS: usize = 1_000_000;

#[derive(Clone, Debug, Serialize)]
pub struct SievePartition {
    pub epsilon: f64,
    pub x_cells: Vec<Cell>,
    pub y_cells: Vec<Cell>,
    pub n_x: usize,
    pub n_y: usize,
    pub n_total: usize,
    pub check_reference_marginals: bool,
}

/// JSON-friendly partition summary.
#[derive(Clone, Debug, Serialize)]
pub struct PartitionSummary {
    pub epsilon: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub n_total: usize,
    pub check_reference_marginals: bool,
    pub x_breakpoints: Vec<f64>,
    pub y_breakpoints: Vec<f64>,
    pub x_representatives: Vec<f64>,
    pub y_representatives: Vec<f64>,
}

fn breakpoints(cells: &[Cell]) -> Vec<f64> {
    let mut b: Vec<f64> = cells.iter().flat_map(|c| [c.left, c.right]).collect();
    b.dedup();
    b
}

impl SievePartition {
    pub fn x_breakpoints(&self) -> Vec<f64> {
        breakpoints(&self.x_cells)
    }

    pub fn y_breakpoints(&self) -> Vec<f64> {
        breakpoints(&self.y_cells)
    }

    pub fn x_representatives(&self) -> Vec<f64> {
        self.x_cells.iter().map(|c| c.representative).collect()
    }

    pub fn y_representatives(&self) -> Vec<f64> {
        self.y_cells.iter().map(|c| c.representative).collect()
    }

    pub fn has_isolated_atoms(&self) -> bool {
        self.x_cells.iter().chain(&self.y_cells).any(|c| c.isolated_atom)
    }

    pub fn summary(&self) -> PartitionSummary {
        PartitionSummary {
            epsilon: self.epsilon,
            n_x: self.n_x,
            n_y: self.n_y,
            n_total: self.n_total,
            check_reference_marginals: self.check_reference_marginals,
            x_breakpoints: self.x_breakpoints(),
            y_breakpoints: self.y_breakpoints(),
            x_representatives: self.x_representatives(),
            y_representatives: self.y_representatives(),
        }
    }
}

/// Number of quantile cells per side: `⌈8/ε⌉`.
pub fn cells_per_side(epsilon: f64) -> usize {
    // guard against 8/0.1 landing a hair above 80
    ((8.0 / epsilon) - 1e-9).ceil().max(1.0) as usize
}

/// R_γ-marginal refinement settings for [`build_partition`].
#[derive(Clone, Copy, Debug)]
pub struct Refinement<'a> {
    pub reference: &'a ReferenceMeasure,
    /// Dedicated R_γ draws used to estimate the marginal increments.
    pub draws: usize,
}

pub fn build_partition(
    x_marg: &Marginal,
    y_marg: &Marginal,
    epsilon: f64,
    refinement: Option<Refinement<'_>>,
    rng: &mut dyn RngCore,
) -> Result<SievePartition> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid_arg(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if x_marg.dimension() != 1 || y_marg.dimension() != 1 {
        return Err(invalid_arg("sieve partitions are implemented for one-dimensional marginals only"));
    }
    let k = cells_per_side(epsilon);
    let mut x_cells = quantile_cells(x_marg, k)?;
    let mut y_cells = quantile_cells(y_marg, k)?;
    for c in x_cells.iter().chain(&y_cells).filter(|c| c.isolated_atom) {
        if c.mass > epsilon / 8.0 {
            warn!("atom at {} carries mass {:.4} > ε/8; increment bound waived for its cell", c.left, c.mass);
        }
    }

    if let Some(r) = refinement {
        let budget = epsilon / 8.0;
        let sample = r.reference.sample(r.draws, r.draws.saturating_mul(100_000), rng)?;
        let mut xs: Vec<f64> = sample.pairs.iter().map(|(x, _)| x[0]).collect();
        let mut ys: Vec<f64> = sample.pairs.iter().map(|(_, y)| y[0]).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        x_cells = refine_cells(x_marg, x_cells, &xs, budget, MAX_CELLS)?;
        y_cells = refine_cells(y_marg, y_cells, &ys, budget, MAX_CELLS.saturating_sub(x_cells.len()))?;
    }

    let (n_x, n_y) = (x_cells.len(), y_cells.len());
    let part = SievePartition {
        epsilon,
        x_cells,
        y_cells,
        n_x,
        n_y,
        n_total: n_x + n_y,
        check_reference_marginals: refinement.is_some(),
    };
    if refinement.is_none() && !part.has_isolated_atoms() {
        assert!(part.n_total <= 2 * k + 4, "partition count {} exceeds 2⌈8/ε⌉ + 4", part.n_total);
    }
    Ok(part)
}

/// Empirical mass of `cell` under the sorted sample.
fn empirical_mass(cell: &Cell, sorted: &[f64]) -> f64 {
    let lo = if cell.left_closed {
        sorted.partition_point(|v| *v < cell.left)
    } else {
        sorted.partition_point(|v| *v <= cell.left)
    };
    let hi = if cell.right_closed {
        sorted.partition_point(|v| *v <= cell.right)
    } else {
        sorted.partition_point(|v| *v < cell.right)
    };
    hi.saturating_sub(lo) as f64 / sorted.len() as f64
}

/// Bisects cells until the estimated reference-marginal increment of each is
/// within `budget`.
fn refine_cells(marginal: &Marginal, cells: Vec<Cell>, sorted: &[f64], budget: f64, cap: usize) -> Result<Vec<Cell>> {
    let mut done = Vec::with_capacity(cells.len());
    let mut stack: Vec<Cell> = cells.into_iter().rev().collect();
    while let Some(cell) = stack.pop() {
        if done.len() + stack.len() + 1 > cap {
            return Err(Error::PartitionBudget { cap: MAX_CELLS });
        }
        let mid = 0.5 * (cell.left + cell.right);
        let splittable = !cell.isolated_atom && mid > cell.left && mid < cell.right;
        if empirical_mass(&cell, sorted) <= budget || !splittable {
            if !splittable && empirical_mass(&cell, sorted) > budget && !cell.isolated_atom {
                return Err(Error::PartitionBudget { cap: MAX_CELLS });
            }
            done.push(cell);
            continue;
        }
        let right = Cell::build(marginal, mid, cell.right, false, cell.right_closed);
        let left = Cell::build(marginal, cell.left, mid, cell.left_closed, true);
        stack.push(right);
        stack.push(left);
    }
    Ok(done)
}

/// `1 / max{1 − P(X = inf X), 1 − P(Y = inf Y)}`.
pub fn kappa(x_marg: &Marginal, y_marg: &Marginal) -> Result<f64> {
    let mx = x_marg.mass_at(&x_marg.support_lo())?;
    let my = y_marg.mass_at(&y_marg.support_lo())?;
    let denom = (1.0 - mx).max(1.0 - my);
    if denom <= 0.0 {
        return Err(Error::DegenerateMarginal("both marginals are point masses at their infima".into()));
    }
    Ok(1.0 / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionaryKind {
    /// `τ`-parametrized program with scale `γ‖c‖∞`.
    ReducedTau,
    /// `(α, μ)`-parametrized program over the signed dictionary, scale `γκ‖c‖∞`.
    GeneralAlphaMu,
}

#[derive(Clone, Debug)]
pub struct SieveDictionary {
    pub partition: SievePartition,
    pub kind: DictionaryKind,
    pub scale: f64,
    pub kappa: f64,
    x_reps: Vec<f64>,
    x_cdf: Vec<f64>,
    y_reps: Vec<f64>,
    y_cdf: Vec<f64>,
}

impl SieveDictionary {
    pub fn new(
        partition: SievePartition,
        kind: DictionaryKind,
        x_marg: &Marginal,
        y_marg: &Marginal,
        gamma: f64,
        sup_norm: f64,
    ) -> Result<Self> {
        let kappa = kappa(x_marg, y_marg)?;
        let scale = match kind {
            DictionaryKind::ReducedTau => gamma * sup_norm,
            DictionaryKind::GeneralAlphaMu => gamma * kappa * sup_norm,
        };
        let x_reps = partition.x_representatives();
        let y_reps = partition.y_representatives();
        let x_cdf = x_reps.iter().map(|&r| x_marg.cdf_1d(r)).collect();
        let y_cdf = y_reps.iter().map(|&r| y_marg.cdf_1d(r)).collect();
        Ok(SieveDictionary { partition, kind, scale, kappa, x_reps, x_cdf, y_reps, y_cdf })
    }

    pub fn len(&self) -> usize {
        self.x_reps.len() + self.y_reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evaluate_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let (ox, oy) = out.split_at_mut(self.x_reps.len());
        for ((o, &r), &f) in ox.iter_mut().zip(&self.x_reps).zip(&self.x_cdf) {
            *o = f - if x[0] <= r { 1.0 } else { 0.0 };
        }
        for ((o, &r), &f) in oy.iter_mut().zip(&self.y_reps).zip(&self.y_cdf) {
            *o = f - if y[0] <= r { 1.0 } else { 0.0 };
        }
    }

    /// Dictionary values at `ω = (x, y)`: `n_x` X-entries then `n_y` Y-entries.
    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.evaluate_into(x, y, &mut out);
        out
    }

    /// `N × n` matrix of dictionary values at the given pairs.
    pub fn matrix(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Array2<f64> {
        let n = self.len();
        let mut m = Array2::zeros((pairs.len(), n));
        for (mut row, (x, y)) in m.rows_mut().into_iter().zip(pairs) {
            self.evaluate_into(x, y, row.as_slice_mut().expect("standard layout"));
        }
        m
    }

    /// `N × 2n` matrix `[v, −v]`: the four-family signed dictionary.
    pub fn signed_matrix(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Array2<f64> {
        signed(&self.matrix(pairs))
    }
}

/// Appends the negated columns: `[v, −v]`.
pub fn signed(values: &Array2<f64>) -> Array2<f64> {
    let (rows, n) = values.dim();
    let mut out = Array2::zeros((rows, 2 * n));
    for (mut o, v) in out.rows_mut().into_iter().zip(values.rows()) {
        for (k, &x) in v.iter().enumerate() {
            o[k] = x;
            o[n + k] = -x;
        }
    }
    out
}

/// Sample size balancing the stochastic and discretization errors,
/// `⌊2 log n / ε²⌋` (at least 1).
pub fn optimal_sample_size(epsilon: f64, n_total: usize) -> Result<usize> {
    if !(epsilon > 0.0) {
        return Err(invalid_arg(format!("epsilon must be positive, got {epsilon}")));
    }
    if n_total < 2 {
        return Err(invalid_arg(format!("dictionary size must be at least 2, got {n_total}")));
    }
    let exact = 2.0 * (n_total as f64).ln() / (epsilon * epsilon);
    Ok((exact.floor() as usize).max(1))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SieveLevel {
    pub epsilon: f64,
    pub n_total: usize,
    pub sample_size: usize,
}

impl SieveLevel {
    pub fn entropy_ratio(&self) -> f64 {
        (self.n_total as f64).ln() / self.sample_size as f64
    }
}

/// Finite-schedule check of `log n_ℓ / N_ℓ → 0`: a level fails when its ratio
/// exceeds the previous level's.
pub fn entropy_condition_ok(schedule: &[SieveLevel]) -> Result<Vec<bool>> {
    if schedule.is_empty() {
        return Err(invalid_arg("schedule must be nonempty"));
    }
    let mut out = vec![true];
    for w in schedule.windows(2) {
        out.push(w[1].entropy_ratio() <= w[0].entropy_ratio());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn table_one_partition_counts() {
        let x = Marginal::uniform(0.0, 1.0).unwrap();
        let y = Marginal::uniform(0.0, 2.0).unwrap();
        let p = build_partition(&x, &y, 0.1, None, &mut rng()).unwrap();
        assert_eq!((p.n_x, p.n_y, p.n_total), (80, 80, 160));
        for c in &p.y_cells {
            assert!((c.right - c.left - 2.0 / 80.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_side_has_one_cell() {
        let x = Marginal::point_mass(0.3).unwrap();
        let y = Marginal::uniform(0.0, 1.0).unwrap();
        let p = build_partition(&x, &y, 0.1, None, &mut rng()).unwrap();
        assert_eq!(p.n_x, 1);
        assert_eq!(p.x_cells[0].cdf_increment, 0.0);
    }

    #[test]
    fn epsilon_out_of_range() {
        let x = Marginal::uniform(0.0, 1.0).unwrap();
        assert!(build_partition(&x, &x, 1.5, None, &mut rng()).is_err());
        assert!(build_partition(&x, &x, 0.0, None, &mut rng()).is_err());
    }

    #[test]
    fn kappa_cases() {
        let u1 = Marginal::uniform(0.0, 1.0).unwrap();
        let u2 = Marginal::uniform(0.0, 2.0).unwrap();
        assert_eq!(kappa(&u1, &u2).unwrap(), 1.0);
        let half = Marginal::discrete(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(kappa(&half, &u2).unwrap(), 1.0);
        assert_eq!(kappa(&half, &half).unwrap(), 2.0);
        let pm = Marginal::point_mass(0.0).unwrap();
        assert!(matches!(kappa(&pm, &pm), Err(Error::DegenerateMarginal(_))));
    }

    #[test]
    fn dictionary_entries() {
        let x = Marginal::uniform(0.0, 1.0).unwrap();
        let y = Marginal::uniform(0.0, 2.0).unwrap();
        let p = build_partition(&x, &y, 0.1, None, &mut rng()).unwrap();
        let d = SieveDictionary::new(p, DictionaryKind::ReducedTau, &x, &y, 100.0, 2.0).unwrap();
        assert_eq!(d.scale, 200.0);
        // representative 40 of 80 sits at 40.5/80; use cell 39 whose midpoint is 0.49375
        let v = d.evaluate(&[0.3], &[1.0]);
        assert_eq!(v.len(), 160);
        assert!(v.iter().all(|e| (-1.0..=1.0).contains(e)));
        let r = d.partition.x_cells[39].representative;
        assert!((v[39] - (r - 1.0)).abs() < 1e-15);
        let v = d.evaluate(&[0.7], &[1.0]);
        assert!((v[39] - r).abs() < 1e-15);
    }

    #[test]
    fn dictionary_entry_at_half() {
        // a partition whose representative is exactly 0.5
        let x = Marginal::uniform(0.0, 1.0).unwrap();
        let p = build_partition(&x, &x, 0.8, None, &mut rng()).unwrap();
        assert_eq!(p.n_x, 10);
        let mut p = p;
        p.x_cells[0].representative = 0.5;
        let d = SieveDictionary::new(p, DictionaryKind::ReducedTau, &x, &x, 1.0, 1.0).unwrap();
        assert_eq!(d.evaluate(&[0.3], &[0.0])[0], -0.5);
        assert_eq!(d.evaluate(&[0.7], &[0.0])[0], 0.5);
    }

    #[test]
    fn sample_size_rule() {
        assert_eq!(optimal_sample_size(0.1, 160).unwrap(), 1015);
        assert_eq!(optimal_sample_size(0.2, 80).unwrap(), 219);
        assert_eq!(optimal_sample_size(0.1, 2).unwrap(), 138);
        assert_eq!(optimal_sample_size(1.0, 8).unwrap(), 4);
        assert!(optimal_sample_size(0.1, 1).is_err());
    }

    #[test]
    fn entropy_condition() {
        let lv = |e, n, s| SieveLevel { epsilon: e, n_total: n, sample_size: s };
        assert_eq!(entropy_condition_ok(&[lv(0.2, 80, 500), lv(0.1, 160, 1015)]).unwrap(), vec![true, true]);
        assert_eq!(entropy_condition_ok(&[lv(0.1, 160, 1015)]).unwrap(), vec![true]);
        assert_eq!(entropy_condition_ok(&[lv(0.1, 160, 100), lv(0.05, 320, 100)]).unwrap(), vec![true, false]);
        assert!(entropy_condition_ok(&[]).is_err());
    }

    #[test]
    fn signed_dictionary_layout() {
        let m = Array2::from_shape_vec((1, 2), vec![0.25, -0.5]).unwrap();
        let s = signed(&m);
        assert_eq!(s.row(0).to_vec(), vec![0.25, -0.5, -0.25, 0.5]);
    }
}
