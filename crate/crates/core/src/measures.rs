//! Marginal distributions on compact supports and transport cost functions.
//!
//! Built-in marginals are one-dimensional uniform, discrete and empirical
//! laws, plus independent products of those. Anything else plugs in through
//! [`MarginalLaw`].

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::error::{invalid_arg, Result};

/// Grid size used when the cost bounds have to be estimated.
pub const DEFAULT_COST_GRID: usize = 256;

const WEIGHT_TOL: f64 = 1e-12;

/// A user-supplied compactly supported law.
pub trait MarginalLaw: Send + Sync + fmt::Debug {
    fn dimension(&self) -> usize;
    fn support_lo(&self) -> Vec<f64>;
    fn support_hi(&self) -> Vec<f64>;
    /// Joint CDF at `point` (componentwise order).
    fn cdf(&self, point: &[f64]) -> f64;
    /// Writes one draw into `out` (length `dimension()`).
    fn draw_into(&self, rng: &mut dyn RngCore, out: &mut [f64]);
    /// Probability of the single point `point`. Atomless laws keep the default.
    fn point_mass(&self, _point: &[f64]) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug)]
pub enum Marginal {
    /// Uniform on `[lo, hi]`; `lo == hi` is a point mass.
    Uniform { lo: f64, hi: f64 },
    /// Finitely many atoms (sorted, distinct) with positive weights.
    Discrete {
        atoms: Vec<f64>,
        weights: Vec<f64>,
        cumulative: Vec<f64>,
    },
    /// Equal-weight atoms (sorted, duplicates allowed).
    Empirical { atoms: Vec<f64> },
    /// Independent product of one-dimensional built-ins.
    Product(Vec<Marginal>),
    Custom(Arc<dyn MarginalLaw>),
}

impl Marginal {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(invalid_arg(format!("uniform support [{lo}, {hi}] is not a compact interval")));
        }
        Ok(Marginal::Uniform { lo, hi })
    }

    pub fn point_mass(at: f64) -> Result<Self> {
        Self::uniform(at, at)
    }

    pub fn discrete(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(invalid_arg("discrete marginal needs matching nonempty atoms and weights"));
        }
        if atoms.iter().any(|a| !a.is_finite()) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid_arg("discrete atoms must be finite and weights nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid_arg(format!("discrete weights sum to {total}, expected 1")));
        }
        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(weights).filter(|(_, w)| *w > 0.0).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match merged.last_mut() {
                Some(last) if last.0 == a => last.1 += w,
                _ => merged.push((a, w)),
            }
        }
        let (atoms, weights): (Vec<f64>, Vec<f64>) = merged.into_iter().map(|(a, w)| (a, w / total)).unzip();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Marginal::Discrete { atoms, weights, cumulative })
    }

    pub fn empirical(mut atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.iter().any(|a| !a.is_finite()) {
            return Err(invalid_arg("empirical marginal needs finite atoms"));
        }
        atoms.sort_by(f64::total_cmp);
        Ok(Marginal::Empirical { atoms })
    }

    pub fn product(components: Vec<Marginal>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid_arg("product marginal needs at least one component"));
        }
        if components.iter().any(|c| c.dimension() != 1 || matches!(c, Marginal::Custom(_))) {
            return Err(invalid_arg("product components must be one-dimensional built-ins"));
        }
        Ok(Marginal::Product(components))
    }

    pub fn custom(law: Arc<dyn MarginalLaw>) -> Result<Self> {
        let (lo, hi) = (law.support_lo(), law.support_hi());
        if law.dimension() == 0 || lo.len() != law.dimension() || hi.len() != law.dimension() {
            return Err(invalid_arg("custom marginal reports inconsistent dimension"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite()) || l > h) {
            return Err(invalid_arg("custom marginal support is not a compact box"));
        }
        Ok(Marginal::Custom(law))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Marginal::Uniform { .. } => "uniform",
            Marginal::Discrete { .. } => "discrete",
            Marginal::Empirical { .. } => "empirical",
            Marginal::Product(_) => "product",
            Marginal::Custom(_) => "user",
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Marginal::Product(c) => c.len(),
            Marginal::Custom(law) => law.dimension(),
            _ => 1,
        }
    }

    pub fn support_lo(&self) -> Vec<f64> {
        match self {
            Marginal::Uniform { lo, .. } => vec![*lo],
            Marginal::Discrete { atoms, .. } | Marginal::Empirical { atoms } => vec![atoms[0]],
            Marginal::Product(c) => c.iter().map(|m| m.support_lo()[0]).collect(),
            Marginal::Custom(law) => law.support_lo(),
        }
    }

    pub fn support_hi(&self) -> Vec<f64> {
        match self {
            Marginal::Uniform { hi, .. } => vec![*hi],
            Marginal::Discrete { atoms, .. } | Marginal::Empirical { atoms } => vec![atoms[atoms.len() - 1]],
            Marginal::Product(c) => c.iter().map(|m| m.support_hi()[0]).collect(),
            Marginal::Custom(law) => law.support_hi(),
        }
    }

    fn check_dim(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.dimension() {
            return Err(invalid_arg(format!(
                "point has {} components, marginal has dimension {}",
                point.len(),
                self.dimension()
            )));
        }
        Ok(())
    }

    pub fn cdf(&self, point: &[f64]) -> Result<f64> {
        self.check_dim(point)?;
        Ok(self.cdf_unchecked(point))
    }

    pub(crate) fn cdf_unchecked(&self, point: &[f64]) -> f64 {
        match self {
            Marginal::Product(c) => c.iter().zip(point).map(|(m, &x)| m.cdf_1d(x)).product(),
            Marginal::Custom(law) => law.cdf(point),
            _ => self.cdf_1d(point[0]),
        }
    }

    /// One-dimensional CDF; panics on products or custom laws of higher dimension.
    pub(crate) fn cdf_1d(&self, x: f64) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => {
                if x < *lo {
                    0.0
                } else if x >= *hi {
                    1.0
                } else {
                    (x - lo) / (hi - lo)
                }
            }
            Marginal::Discrete { atoms, cumulative, .. } => {
                let k = atoms.partition_point(|a| *a <= x);
                if k == 0 {
                    0.0
                } else {
                    cumulative[k - 1]
                }
            }
            Marginal::Empirical { atoms } => atoms.partition_point(|a| *a <= x) as f64 / atoms.len() as f64,
            Marginal::Product(c) => c[0].cdf_1d(x),
            Marginal::Custom(law) => law.cdf(&[x]),
        }
    }

    /// Probability of the single point `point`.
    pub fn mass_at(&self, point: &[f64]) -> Result<f64> {
        self.check_dim(point)?;
        Ok(match self {
            Marginal::Product(c) => c.iter().zip(point).map(|(m, &x)| m.point_mass_1d(x)).product(),
            Marginal::Custom(law) => law.point_mass(point),
            _ => self.point_mass_1d(point[0]),
        })
    }

    fn point_mass_1d(&self, x: f64) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => {
                if lo == hi && x == *lo {
                    1.0
                } else {
                    0.0
                }
            }
            Marginal::Discrete { atoms, weights, .. } => match atoms.binary_search_by(|a| a.total_cmp(&x)) {
                Ok(k) => weights[k],
                Err(_) => 0.0,
            },
            Marginal::Empirical { atoms } => {
                let count = atoms.partition_point(|a| *a <= x) - atoms.partition_point(|a| *a < x);
                count as f64 / atoms.len() as f64
            }
            Marginal::Product(c) => c[0].point_mass_1d(x),
            Marginal::Custom(law) => law.point_mass(&[x]),
        }
    }

    /// `P(X < x)` for one-dimensional marginals.
    pub(crate) fn cdf_left_1d(&self, x: f64) -> f64 {
        (self.cdf_1d(x) - self.point_mass_1d(x)).max(0.0)
    }

    /// Generalized inverse `inf{x : F(x) ≥ level}` (one-dimensional only).
    pub fn quantile(&self, level: f64) -> Result<f64> {
        if self.dimension() != 1 {
            return Err(invalid_arg("quantiles are only defined for one-dimensional marginals"));
        }
        if !(0.0..=1.0).contains(&level) {
            return Err(invalid_arg(format!("quantile level {level} outside [0, 1]")));
        }
        Ok(self.quantile_1d(level))
    }

    pub(crate) fn quantile_1d(&self, level: f64) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => lo + level * (hi - lo),
            Marginal::Discrete { atoms, cumulative, .. } => {
                let k = cumulative.partition_point(|c| *c < level - WEIGHT_TOL);
                atoms[k.min(atoms.len() - 1)]
            }
            Marginal::Empirical { atoms } => {
                let n = atoms.len();
                let k = ((level * n as f64) - WEIGHT_TOL).ceil().max(1.0) as usize;
                atoms[k.min(n) - 1]
            }
            Marginal::Product(c) => c[0].quantile_1d(level),
            Marginal::Custom(law) => {
                let (mut lo, mut hi) = (law.support_lo()[0], law.support_hi()[0]);
                if law.cdf(&[lo]) >= level {
                    return lo;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if law.cdf(&[mid]) >= level {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    }

    pub fn draw_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        match self {
            Marginal::Uniform { lo, hi } => {
                out[0] = if lo == hi { *lo } else { lo + (hi - lo) * rng.random::<f64>() };
            }
            Marginal::Discrete { atoms, cumulative, .. } => {
                let u: f64 = rng.random();
                let k = cumulative.partition_point(|c| *c <= u);
                out[0] = atoms[k.min(atoms.len() - 1)];
            }
            Marginal::Empirical { atoms } => {
                out[0] = atoms[rng.random_range(0..atoms.len())];
            }
            Marginal::Product(c) => {
                for (m, o) in c.iter().zip(out.iter_mut()) {
                    m.draw_into(rng, std::slice::from_mut(o));
                }
            }
            Marginal::Custom(law) => law.draw_into(rng, out),
        }
    }

    /// `count` i.i.d. draws.
    pub fn sample(&self, count: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        let d = self.dimension();
        (0..count)
            .map(|_| {
                let mut p = vec![0.0; d];
                self.draw_into(rng, &mut p);
                p
            })
            .collect()
    }

    /// Short serializable description for manifests and reports.
    pub fn describe(&self) -> MarginalSummary {
        MarginalSummary {
            kind: self.kind_name().to_string(),
            dimension: self.dimension(),
            support_lo: self.support_lo(),
            support_hi: self.support_hi(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MarginalSummary {
    pub kind: String,
    pub dimension: usize,
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
}

/// One cell of a one-dimensional partition of a support.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub left: f64,
    pub right: f64,
    pub left_closed: bool,
    pub right_closed: bool,
    pub representative: f64,
    /// `sup |F(x) − F(x')|` over points of the cell.
    pub cdf_increment: f64,
    /// Probability mass of the cell.
    pub mass: f64,
    /// The cell is a single atom heavier than the increment budget.
    pub isolated_atom: bool,
}

impl Cell {
    pub fn contains(&self, x: f64) -> bool {
        let left_ok = if self.left_closed { x >= self.left } else { x > self.left };
        let right_ok = if self.right_closed { x <= self.right } else { x < self.right };
        left_ok && right_ok
    }

    pub(crate) fn build(marginal: &Marginal, left: f64, right: f64, left_closed: bool, right_closed: bool) -> Cell {
        let f_right = if right_closed { marginal.cdf_1d(right) } else { marginal.cdf_left_1d(right) };
        let f_left_excl = if left_closed { marginal.cdf_left_1d(left) } else { marginal.cdf_1d(left) };
        // increment: distance between the smallest and largest CDF values attained in the cell
        let f_min = if left_closed { marginal.cdf_1d(left) } else { f_left_excl };
        let isolated_atom = left == right;
        Cell {
            left,
            right,
            left_closed,
            right_closed,
            representative: 0.5 * (left + right),
            cdf_increment: if isolated_atom { 0.0 } else { (f_right - f_min).max(0.0) },
            mass: (f_right - f_left_excl).max(0.0),
            isolated_atom,
        }
    }
}

/// Partitions a one-dimensional support at the CDF quantile levels `k / cells`
/// so that every cell has CDF increment at most `1 / cells`. Atoms heavier than
/// that become their own cells; empty open gaps left by atoms are dropped.
pub fn quantile_cells(marginal: &Marginal, cells: usize) -> Result<Vec<Cell>> {
    if marginal.dimension() != 1 {
        return Err(invalid_arg("quantile partitions need a one-dimensional marginal"));
    }
    if cells == 0 {
        return Err(invalid_arg("need at least one cell"));
    }
    let lo = marginal.support_lo()[0];
    let hi = marginal.support_hi()[0];
    if lo == hi {
        return Ok(vec![Cell::build(marginal, lo, hi, true, true)]);
    }
    let budget = 1.0 / cells as f64;
    let mut breaks = Vec::with_capacity(cells + 1);
    breaks.push(lo);
    for k in 1..cells {
        breaks.push(marginal.quantile_1d(k as f64 / cells as f64));
    }
    breaks.push(hi);
    breaks.dedup();

    let mut out = Vec::with_capacity(breaks.len());
    let push_interval = |out: &mut Vec<Cell>, left: f64, right: f64, left_closed: bool| {
        let cell = Cell::build(marginal, left, right, left_closed, true);
        if cell.cdf_increment <= budget + WEIGHT_TOL {
            out.push(cell);
            return;
        }
        // split off the heavy atoms at either end
        let mut l_closed = left_closed;
        if left_closed && marginal.point_mass_1d(left) > budget {
            out.push(Cell::build(marginal, left, left, true, true));
            l_closed = false;
        }
        let heavy_right = marginal.point_mass_1d(right) > budget;
        let inner = Cell::build(marginal, left, right, l_closed, !heavy_right);
        if inner.mass > WEIGHT_TOL || !heavy_right {
            out.push(inner);
        }
        if heavy_right {
            out.push(Cell::build(marginal, right, right, true, true));
        }
    };
    for (i, w) in breaks.windows(2).enumerate() {
        push_interval(&mut out, w[0], w[1], i == 0);
    }
    Ok(out)
}

type CostFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum CostKind {
    /// `½‖x − y‖²`
    Quadratic,
    /// `Σ |xᵢ − yᵢ|`
    Absolute,
    Constant(f64),
    Custom(Arc<CostFn>),
}

impl fmt::Debug for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostKind::Quadratic => write!(f, "Quadratic"),
            CostKind::Absolute => write!(f, "Absolute"),
            CostKind::Constant(c) => write!(f, "Constant({c})"),
            CostKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl CostKind {
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            CostKind::Quadratic => 0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            CostKind::Absolute => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum(),
            CostKind::Constant(c) => *c,
            CostKind::Custom(f) => f(x, y),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CostKind::Quadratic => "quadratic",
            CostKind::Absolute => "absolute",
            CostKind::Constant(_) => "constant",
            CostKind::Custom(_) => "user",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CostFunction {
    pub kind: CostKind,
    /// `‖c‖∞` over the support.
    pub sup_norm: f64,
    /// `inf c` over the support.
    pub inf_value: f64,
    /// The bounds came from a grid search rather than a closed form.
    pub bounds_estimated: bool,
}

impl CostFunction {
    pub fn new(kind: CostKind, sup_norm: f64, inf_value: f64) -> Result<Self> {
        if !(inf_value >= 0.0 && sup_norm >= inf_value && sup_norm.is_finite()) {
            return Err(invalid_arg(format!("cost bounds inf={inf_value}, sup={sup_norm} are inconsistent")));
        }
        Ok(CostFunction { kind, sup_norm, inf_value, bounds_estimated: false })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(CostKind::Constant(value), value, value)
    }

    /// Fills the bounds by a tensor-grid search over the support box.
    pub fn with_estimated_bounds(kind: CostKind, x: &Marginal, y: &Marginal, grid: usize) -> Result<Self> {
        let (sup, inf) = estimate_sup_and_inf(&kind, x, y, grid)?;
        if inf < 0.0 {
            return Err(invalid_arg(format!("cost takes the negative value {inf} on the support")));
        }
        Ok(CostFunction { kind, sup_norm: sup, inf_value: inf, bounds_estimated: true })
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.kind.eval(x, y)
    }

    /// Checks `inf ≤ c ≤ sup` at `count` random in-support points; returns the
    /// number of violations beyond `slack`.
    pub fn probe_bounds(&self, x: &Marginal, y: &Marginal, count: usize, slack: f64, rng: &mut dyn RngCore) -> usize {
        let mut xs = vec![0.0; x.dimension()];
        let mut ys = vec![0.0; y.dimension()];
        (0..count)
            .filter(|_| {
                x.draw_into(rng, &mut xs);
                y.draw_into(rng, &mut ys);
                let c = self.eval(&xs, &ys);
                !(c >= self.inf_value - slack && c <= self.sup_norm + slack)
            })
            .count()
    }
}

/// Max and min of the cost over a tensor grid of the support box. The max is a
/// lower bound on `‖c‖∞` and the min an upper bound on `inf c`.
pub fn estimate_sup_and_inf(kind: &CostKind, x: &Marginal, y: &Marginal, grid_points_per_axis: usize) -> Result<(f64, f64)> {
    if grid_points_per_axis < 2 {
        return Err(invalid_arg("grid_points_per_axis must be at least 2"));
    }
    let axes: Vec<Vec<f64>> = x
        .support_lo()
        .into_iter()
        .zip(x.support_hi())
        .chain(y.support_lo().into_iter().zip(y.support_hi()))
        .map(|(lo, hi)| {
            (0..grid_points_per_axis)
                .map(|k| if k + 1 == grid_points_per_axis { hi } else { lo + (hi - lo) * k as f64 / (grid_points_per_axis - 1) as f64 })
                .collect()
        })
        .collect();
    let total = (grid_points_per_axis as f64).powi(axes.len() as i32);
    if total > 1e8 {
        return Err(invalid_arg(format!("cost grid of {total:.0} points is too large")));
    }
    let dx = x.dimension();
    let mut idx = vec![0usize; axes.len()];
    let mut point = vec![0.0; axes.len()];
    let (mut sup, mut inf) = (f64::NEG_INFINITY, f64::INFINITY);
    loop {
        for (k, (&i, axis)) in idx.iter().zip(&axes).enumerate() {
            point[k] = axis[i];
        }
        let c = kind.eval(&point[..dx], &point[dx..]);
        if !c.is_finite() {
            return Err(invalid_arg("cost is not finite on the support grid"));
        }
        sup = sup.max(c);
        inf = inf.min(c);
        // odometer increment
        let mut k = 0;
        loop {
            if k == idx.len() {
                return Ok((sup, inf));
            }
            idx[k] += 1;
            if idx[k] < grid_points_per_axis {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
