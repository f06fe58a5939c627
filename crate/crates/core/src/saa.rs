//! Sample-average-approximation dual programs.
//!
//! The reduced program minimizes
//!
//! ```text
//! −shift + log (1/N) Σⱼ exp(scale · ⟨τ, v(ωⱼ)⟩)
//! ```
//!
//! over `τ ∈ [−1, 1]ⁿ` with `Σ τᵢ ∈ [−1, 1]`, where `scale = γ‖c‖∞` and
//! `shift = γκ‖c‖∞`. The general program minimizes the same log-mean-exp of
//! `α ⟨μ, v(ωⱼ)⟩` over `α ∈ [0, γκ‖c‖∞]` and `μ` in the simplex over the
//! signed dictionary. Both are solved by projected first-order methods
//! (plain Armijo projected gradient, or an accelerated monotone variant), and
//! both objectives are evaluated with max-subtraction so that large `γ` never
//! overflows. Line searches compare objective changes computed from exponent
//! differences rather than differences of large values. The accelerated
//! method also tries a regularized Newton step on the current active face
//! every few iterations, which settles the final digits quickly when the
//! first-order tail is slow.

use ndarray::{Array1, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::numeric::softmax_in_place;
use nalgebra::{DMatrix, DVector};

/// Feasibility tolerance for projected points.
pub const FEASIBILITY_TOL: f64 = 1e-12;

const ARMIJO_SIGMA: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 80;
/// Accelerated iterations between Newton steps on the active face.
const BLOCKING_ROUNDS: usize = 8;
const BLOCKING_STEP: f64 = 1e-3;
const NEWTON_PERIOD: usize = 25;

/// Constraint coupling the coordinates of `τ`, on top of the box `[−1, 1]ⁿ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "radius")]
pub enum SumConstraint {
    /// `Σ τᵢ ∈ [−1, 1]`.
    Slab,
    /// `Σ |τᵢ| ≤ radius` (the strict mode, radius `κ`).
    L1Ball(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReducedFeasibleSet {
    pub n: usize,
    pub constraint: SumConstraint,
}

impl ReducedFeasibleSet {
    pub fn slab(n: usize) -> Self {
        ReducedFeasibleSet { n, constraint: SumConstraint::Slab }
    }

    pub fn strict(n: usize, kappa: f64) -> Self {
        ReducedFeasibleSet { n, constraint: SumConstraint::L1Ball(kappa) }
    }

    pub fn contains(&self, tau: &[f64], tol: f64) -> bool {
        if tau.len() != self.n || tau.iter().any(|t| !(t.abs() <= 1.0 + tol)) {
            return false;
        }
        match self.constraint {
            SumConstraint::Slab => tau.iter().sum::<f64>().abs() <= 1.0 + tol,
            SumConstraint::L1Ball(r) => tau.iter().map(|t| t.abs()).sum::<f64>() <= r + tol,
        }
    }

    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        match self.constraint {
            SumConstraint::Slab => project_box_slab(point),
            SumConstraint::L1Ball(r) => project_box_l1(point, r),
        }
    }

    /// A uniform draw from the set (rejection from the box or the ℓ₁ ball).
    pub fn sample_uniform(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut tau = vec![0.0; self.n];
        loop {
            match self.constraint {
                SumConstraint::Slab => {
                    tau.iter_mut().for_each(|t| *t = rng.random_range(-1.0..=1.0));
                }
                SumConstraint::L1Ball(r) => {
                    // uniform on {x ≥ 0, Σx ≤ 1} from n + 1 exponential spacings
                    let e: Vec<f64> = (0..=self.n).map(|_| Exp1.sample(rng)).collect();
                    let total: f64 = e.iter().sum();
                    for (t, ei) in tau.iter_mut().zip(&e) {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        *t = sign * r * ei / total;
                    }
                }
            }
            if self.contains(&tau, 0.0) {
                return tau;
            }
        }
    }
}

/// Euclidean projection onto `{τ ∈ [−1, 1]ⁿ : Σ τᵢ ∈ [−1, 1]}`.
pub fn project_reduced(point: &[f64], set: &ReducedFeasibleSet) -> Vec<f64> {
    set.project(point)
}

fn clip_sum(point: &[f64], shift: f64) -> f64 {
    point.iter().map(|p| (p - shift).clamp(-1.0, 1.0)).sum()
}

/// Finds `λ` with `Σ clip(pᵢ − λ, −1, 1) = target` by bisection, then solves
/// exactly on the identified free set.
fn slab_multiplier(point: &[f64], target: f64) -> f64 {
    let max = point.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = point.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (min - 1.0, max + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if clip_sum(point, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    // refine on the free set: Σ_free (pᵢ − λ) + #upper − #lower = target
    let (mut free_sum, mut free_count, mut fixed) = (0.0, 0usize, 0.0);
    for &p in point {
        let t = p - lambda;
        if t >= 1.0 {
            fixed += 1.0;
        } else if t <= -1.0 {
            fixed -= 1.0;
        } else {
            free_sum += p;
            free_count += 1;
        }
    }
    if free_count > 0 {
        let exact = (free_sum + fixed - target) / free_count as f64;
        if (clip_sum(point, exact) - target).abs() <= (clip_sum(point, lambda) - target).abs() {
            return exact;
        }
    }
    lambda
}

fn project_box_slab(point: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = point.iter().map(|p| p.clamp(-1.0, 1.0)).collect();
    let s: f64 = clipped.iter().sum();
    if (-1.0..=1.0).contains(&s) {
        return clipped;
    }
    let target = if s > 1.0 { 1.0 } else { -1.0 };
    let lambda = slab_multiplier(point, target);
    point.iter().map(|p| (p - lambda).clamp(-1.0, 1.0)).collect()
}

/// Projection onto `[−1, 1]ⁿ ∩ {Σ|τᵢ| ≤ r}` by soft-thresholding.
fn project_box_l1(point: &[f64], radius: f64) -> Vec<f64> {
    let shrink = |lambda: f64| -> Vec<f64> {
        point.iter().map(|p| p.signum() * (p.abs() - lambda).clamp(0.0, 1.0)).collect()
    };
    let first = shrink(0.0);
    if first.iter().map(|t| t.abs()).sum::<f64>() <= radius {
        return first;
    }
    let (mut lo, mut hi) = (0.0, point.iter().fold(0.0f64, |m, p| m.max(p.abs())));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if shrink(mid).iter().map(|t| t.abs()).sum::<f64>() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    shrink(hi)
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(point: &[f64]) -> Vec<f64> {
    project_scaled_simplex(point, 1.0)
}

fn project_scaled_simplex(point: &[f64], radius: f64) -> Vec<f64> {
    let mut sorted = point.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = sorted[0];
    let mut theta = sorted[0] - radius;
    for (k, &u) in sorted.iter().enumerate().skip(1) {
        cumsum += u;
        let t = (cumsum - radius) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    point.iter().map(|p| (p - theta).max(0.0)).collect()
}

/// Projection onto `{λ ≥ 0, Σλ ≤ r}`.
fn project_capped_orthant(point: &[f64], radius: f64) -> Vec<f64> {
    let pos: Vec<f64> = point.iter().map(|p| p.max(0.0)).collect();
    if pos.iter().sum::<f64>() <= radius {
        pos
    } else {
        project_scaled_simplex(point, radius)
    }
}

/// Working face for a Newton step: coordinates free to move, the normal of
/// the active coupling constraint restricted to them, and coordinates snapped
/// onto a nearby bound that the gradient pushes them against.
struct Face {
    free: Vec<usize>,
    normal: Option<Vec<f64>>,
    snap: Vec<(usize, f64)>,
}

impl Face {
    /// Moves the given coordinates from the free set to the fixed set.
    fn fix(&mut self, fixed: &[(usize, f64)], base: &mut [f64]) {
        let keep: Vec<bool> = self.free.iter().map(|i| !fixed.iter().any(|(j, _)| j == i)).collect();
        if let Some(signs) = self.normal.as_mut() {
            let mut k = keep.iter();
            signs.retain(|_| *k.next().unwrap_or(&true));
        }
        let mut k = keep.iter();
        self.free.retain(|_| *k.next().unwrap_or(&true));
        for &(i, v) in fixed {
            base[i] = v;
        }
        self.snap.extend_from_slice(fixed);
    }
}

enum Region<'a> {
    Reduced(&'a ReducedFeasibleSet),
    /// `{λ ≥ 0, Σλ ≤ r}`.
    CappedOrthant(f64),
}

impl Region<'_> {
    fn project(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Region::Reduced(set) => set.project(p),
            Region::CappedOrthant(r) => project_capped_orthant(p, *r),
        }
    }

    /// Face of a projected point: coordinates the projection clamped are fixed
    /// and the coupling constraint binds when the point lies on it.
    fn face(&self, z: &[f64]) -> Face {
        const TIGHT: f64 = 1e-12;
        let mut free = Vec::new();
        let mut snap = Vec::new();
        let (sum_value, radius, signs): (f64, f64, Vec<f64>) = match self {
            Region::Reduced(set) => {
                let ball = matches!(set.constraint, SumConstraint::L1Ball(_));
                for (i, &v) in z.iter().enumerate() {
                    if v.abs() == 1.0 || (ball && v == 0.0) {
                        snap.push((i, v));
                    } else {
                        free.push(i);
                    }
                }
                match set.constraint {
                    SumConstraint::Slab => {
                        let s: f64 = z.iter().sum();
                        (s.abs(), 1.0, vec![s.signum(); free.len()])
                    }
                    SumConstraint::L1Ball(r) => {
                        (z.iter().map(|t| t.abs()).sum(), r, free.iter().map(|&i| z[i].signum()).collect())
                    }
                }
            }
            Region::CappedOrthant(r) => {
                for (i, &v) in z.iter().enumerate() {
                    if v == 0.0 {
                        snap.push((i, v));
                    } else {
                        free.push(i);
                    }
                }
                (z.iter().sum(), *r, vec![1.0; free.len()])
            }
        };
        let tight = !free.is_empty() && sum_value >= radius * (1.0 - TIGHT);
        Face { free, normal: tight.then_some(signs), snap }
    }

    /// Free coordinates that `d` drives onto a bound (or, in the ℓ1 ball,
    /// through zero) within a step of `BLOCKING_STEP`, with the value to fix them at.
    fn blocking(&self, base: &[f64], d: &[f64], face: &Face) -> Vec<(usize, f64)> {
        let (lo, hi) = match self {
            Region::Reduced(_) => (-1.0, 1.0),
            Region::CappedOrthant(r) => (0.0, *r),
        };
        let ball = matches!(self, Region::Reduced(set) if matches!(set.constraint, SumConstraint::L1Ball(_)));
        let reach = |gap: f64, rate: f64| rate > 0.0 && gap <= BLOCKING_STEP * rate;
        face.free
            .iter()
            .filter_map(|&i| {
                if reach(hi - base[i], d[i]) {
                    Some((i, hi))
                } else if reach(base[i] - lo, -d[i]) {
                    Some((i, lo))
                } else if ball && base[i] * d[i] <= 0.0 && reach(base[i].abs(), d[i].abs()) {
                    Some((i, 0.0))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Largest `t ≤ 1` keeping `base + t·d` inside the region without leaving the
    /// current sign pattern; free coordinates only move.
    fn max_step(&self, base: &[f64], d: &[f64], face: &Face) -> f64 {
        let mut t: f64 = 1.0;
        let mut limit = |gap: f64, rate: f64| {
            if rate > 0.0 {
                t = t.min((gap / rate).max(0.0));
            }
        };
        let (lo, hi) = match self {
            Region::Reduced(_) => (-1.0, 1.0),
            Region::CappedOrthant(r) => (0.0, *r),
        };
        for &i in &face.free {
            limit(hi - base[i], d[i]);
            limit(base[i] - lo, -d[i]);
            if let Region::Reduced(set) = self {
                if matches!(set.constraint, SumConstraint::L1Ball(_)) && base[i] * d[i] < 0.0 {
                    limit(base[i].abs(), d[i].abs());
                }
            }
        }
        if face.normal.is_none() {
            match self {
                Region::Reduced(set) => match set.constraint {
                    SumConstraint::Slab => {
                        let s: f64 = base.iter().sum();
                        let ds: f64 = d.iter().sum();
                        limit(1.0 - s, ds);
                        limit(1.0 + s, -ds);
                    }
                    SumConstraint::L1Ball(r) => {
                        let s: f64 = base.iter().map(|b| b.abs()).sum();
                        let ds: f64 = base.iter().zip(d).map(|(b, di)| b.signum() * di).sum();
                        limit(r - s, ds);
                    }
                },
                Region::CappedOrthant(r) => {
                    let s: f64 = base.iter().sum();
                    limit(r - s, d.iter().sum());
                }
            }
        }
        t
    }
}

/// Feasible set of the general program: `α ∈ [0, alpha_max]`, `μ` in the simplex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneralFeasibleSet {
    pub n: usize,
    pub alpha_max: f64,
}

impl GeneralFeasibleSet {
    pub fn contains(&self, alpha: f64, mu: &[f64], tol: f64) -> bool {
        mu.len() == self.n
            && alpha >= -tol
            && alpha <= self.alpha_max + tol
            && mu.iter().all(|m| *m >= -tol)
            && (mu.iter().sum::<f64>() - 1.0).abs() <= tol * self.n.max(1) as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub method: Method,
    pub max_iters: usize,
    /// Stop when the gradient-mapping norm falls below this.
    pub tol: f64,
    /// First trial step; defaults to `1/scale²` (reduced) or `1` (general).
    pub initial_step: Option<f64>,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { method: Method::Accelerated, max_iters: 20_000, tol: 1e-8, initial_step: None, record_trace: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Projected gradient with Armijo backtracking.
    ProjectedGradient,
    /// Monotone accelerated projected gradient with adaptive restart.
    Accelerated,
}

/// Why the solver stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gradient-mapping norm at or below the tolerance.
    Tolerance,
    /// A gradient step from the best iterate no longer decreases the
    /// objective in floating point, which cannot happen in exact arithmetic.
    WorkingPrecision,
    MaxIterations,
}

impl StopReason {
    pub fn converged(self) -> bool {
        self != StopReason::MaxIterations
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum SolutionPoint {
    Tau(Vec<f64>),
    AlphaMu { alpha: f64, mu: Vec<f64> },
}

#[derive(Clone, Debug, Serialize)]
pub struct SaaSolution {
    pub point: SolutionPoint,
    /// Optimum of the stabilized objective, `log ϑ̂ − shift`.
    pub log_value_stabilized: f64,
    pub log_theta_hat: f64,
    pub shift: f64,
    pub iterations: usize,
    pub final_gradient_mapping_norm: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

impl SaaSolution {
    pub fn theta_hat(&self) -> f64 {
        self.log_theta_hat.exp()
    }

    /// `τ` for reduced solutions; `None` for general ones.
    pub fn tau(&self) -> Option<&[f64]> {
        match &self.point {
            SolutionPoint::Tau(t) => Some(t),
            SolutionPoint::AlphaMu { .. } => None,
        }
    }

    /// Writes the per-iteration objective trace as CSV.
    pub fn write_trace<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "objective"])?;
        for (k, v) in self.trace.iter().flatten().enumerate() {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stabilized log-mean-exp objective over a matrix of per-sample features.
struct LogMeanExp<'a> {
    values: ArrayView2<'a, f64>,
    scale: f64,
    shift: f64,
    log_weights: Option<&'a [f64]>,
    uniform_log_weight: f64,
}

/// Iterate with its softmax weights and gradient.
#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    weights: Array1<f64>,
    /// Objective value, `−shift + lse`.
    value: f64,
    grad: Vec<f64>,
}

impl<'a> LogMeanExp<'a> {
    fn new(values: ArrayView2<'a, f64>, scale: f64, shift: f64, log_weights: Option<&'a [f64]>) -> Self {
        let n = values.nrows().max(1) as f64;
        LogMeanExp { values, scale, shift, log_weights, uniform_log_weight: -n.ln() }
    }

    fn exponents(&self, x: &[f64]) -> Array1<f64> {
        let x = ndarray::ArrayView1::from(x);
        let mut e = self.values.dot(&x);
        e.mapv_inplace(|v| self.scale * v);
        match self.log_weights {
            Some(w) => e.iter_mut().zip(w).for_each(|(v, lw)| *v += lw),
            None => e.mapv_inplace(|v| v + self.uniform_log_weight),
        }
        e
    }

    fn value(&self, x: &[f64]) -> f64 {
        -self.shift + crate::numeric::log_sum_exp(self.exponents(x).as_slice().expect("contiguous"))
    }

    fn point(&self, x: Vec<f64>) -> Point {
        let mut w = self.exponents(&x);
        let lse = softmax_in_place(w.as_slice_mut().expect("contiguous"));
        let grad = self.values.t().dot(&w).iter().map(|g| self.scale * g).collect();
        Point { x, weights: w, value: -self.shift + lse, grad }
    }

    /// [`Self::point`] at `x`, carrying the value forward from `from` by the
    /// precise `change` so accepted iterates stay monotone in floating point.
    fn step_to(&self, from: &Point, x: Vec<f64>, change: f64) -> Point {
        let mut q = self.point(x);
        q.value = from.value + change;
        q
    }

    /// Regularized Newton direction on `face`: zero on fixed coordinates,
    /// orthogonal to the active coupling normal.
    fn newton_direction(&self, p: &Point, face: &Face) -> Option<Vec<f64>> {
        let k = face.free.len();
        if k == 0 {
            return None;
        }
        let n_rows = self.values.nrows();
        let root_w: Vec<f64> = p.weights.iter().map(|w| w.sqrt()).collect();
        let b = ndarray::Array2::from_shape_fn((n_rows, k), |(j, c)| root_w[j] * self.values[[j, face.free[c]]]);
        let gram = b.t().dot(&b);
        let s2 = self.scale * self.scale;
        let g: Vec<f64> = face.free.iter().map(|&i| p.grad[i]).collect();
        let h = DMatrix::from_fn(k, k, |r, c| s2 * gram[[r, c]] - g[r] * g[c]);
        let top = (0..k).map(|i| h[(i, i)]).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
        let mut mu = 1e-10 * top;
        let chol = loop {
            let mut m = h.clone();
            for i in 0..k {
                m[(i, i)] += mu;
            }
            if let Some(c) = m.cholesky() {
                break c;
            }
            mu *= 100.0;
            if mu > top {
                return None;
            }
        };
        let u = chol.solve(&DVector::from_column_slice(&g));
        let step = match &face.normal {
            Some(a) => {
                let a = DVector::from_column_slice(a);
                let z = chol.solve(&a);
                let denom = a.dot(&z);
                if !(denom > 0.0) {
                    return None;
                }
                let coef = a.dot(&u) / denom;
                u - z * coef
            }
            None => u,
        };
        let mut d = vec![0.0; p.x.len()];
        for (c, &i) in face.free.iter().enumerate() {
            d[i] = -step[c];
        }
        d.iter().all(|v| v.is_finite()).then_some(d)
    }

    /// `f(q) − f(p)` computed from the exponent change, which keeps full
    /// relative precision even when `f` itself is large.
    fn change(&self, p: &Point, q: &[f64]) -> f64 {
        let dx: Vec<f64> = q.iter().zip(&p.x).map(|(a, b)| a - b).collect();
        let mut d = self.values.dot(&ndarray::ArrayView1::from(&dx[..]));
        d.mapv_inplace(|v| self.scale * v);
        let big = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if big < 0.5 {
            let s: f64 = p.weights.iter().zip(d.iter()).map(|(w, di)| w * di.exp_m1()).sum();
            s.ln_1p()
        } else {
            let shifted: Vec<f64> = p
                .weights
                .iter()
                .zip(d.iter())
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, di)| w.ln() + di)
                .collect();
            crate::numeric::log_sum_exp(&shifted)
        }
    }
}

fn validate_matrix(values: &ArrayView2<f64>) -> Result<()> {
    if values.nrows() == 0 || values.ncols() == 0 {
        return Err(invalid_arg("dictionary matrix must have at least one row and one column"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("dictionary matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Value and gradient of the stabilized reduced objective at `tau`.
pub fn reduced_objective_and_gradient(
    tau: &[f64],
    values: ArrayView2<f64>,
    scale: f64,
    shift: f64,
) -> Result<(f64, Vec<f64>)> {
    validate_matrix(&values)?;
    if tau.len() != values.ncols() {
        return Err(invalid_arg("tau length does not match the dictionary size"));
    }
    let p = LogMeanExp::new(values, scale, shift, None).point(tau.to_vec());
    Ok((p.value, p.grad))
}

/// Stabilized reduced objective value only.
pub fn reduced_objective(tau: &[f64], values: ArrayView2<f64>, scale: f64, shift: f64) -> f64 {
    LogMeanExp::new(values, scale, shift, None).value(tau)
}

struct PgdOutcome {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    gm_norm: f64,
    stop: StopReason,
    trace: Option<Vec<f64>>,
}

fn gradient_step(region: &Region<'_>, x: &[f64], grad: &[f64], t: f64) -> Vec<f64> {
    let trial: Vec<f64> = x.iter().zip(grad).map(|(xi, gi)| xi - t * gi).collect();
    region.project(&trial)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Projected gradient with Armijo backtracking. The trial step starts at
/// `initial_step`, halves on rejection and doubles after each accepted step.
fn projected_gradient(obj: &LogMeanExp<'_>, region: &Region<'_>, x0: Vec<f64>, initial_step: f64, opts: &SolverOptions) -> PgdOutcome {
    let mut cur = obj.point(x0);
    let mut trace = opts.record_trace.then(|| vec![cur.value]);
    let mut step = initial_step;
    let mut gm_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    while iterations < opts.max_iters {
        let mut accepted = None;
        let mut t = step;
        for _ in 0..MAX_BACKTRACKS {
            let cand = gradient_step(region, &cur.x, &cur.grad, t);
            let dir_dot: f64 = cand.iter().zip(&cur.x).zip(&cur.grad).map(|((c, xi), gi)| gi * (c - xi)).sum();
            let ch = obj.change(&cur, &cand);
            if ch <= ARMIJO_SIGMA * dir_dot {
                accepted = Some((cand, t, ch));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, t, ch)) = accepted else {
            gm_norm = dist(&gradient_step(region, &cur.x, &cur.grad, step), &cur.x) / step;
            stop = if gm_norm <= opts.tol { StopReason::Tolerance } else { StopReason::WorkingPrecision };
            break;
        };
        iterations += 1;
        gm_norm = dist(&cand, &cur.x) / t;
        cur = obj.step_to(&cur, cand, ch);
        if let Some(tr) = trace.as_mut() {
            tr.push(cur.value);
        }
        if gm_norm <= opts.tol {
            stop = StopReason::Tolerance;
            break;
        }
        step = 2.0 * t;
    }
    PgdOutcome { x: cur.x, value: cur.value, iterations, gm_norm, stop, trace }
}

/// Projected Newton step from `p` on its active face with a halving line
/// search; `None` when no trial point decreases the objective.
fn newton_polish(obj: &LogMeanExp<'_>, region: &Region<'_>, p: &Point, lip: f64) -> Option<Point> {
    let mut base = gradient_step(region, &p.x, &p.grad, 1.0 / lip);
    let mut face = region.face(&base);
    let at = obj.point(base.clone());
    let mut d = obj.newton_direction(&at, &face)?;
    let trial: Vec<f64> = base.iter().zip(&d).map(|(x, di)| x + di).collect();
    let cand = region.project(&trial);
    let ch = obj.change(p, &cand);
    if ch < 0.0 {
        return Some(obj.step_to(p, cand, ch));
    }
    // projection clipped the step: fix the coordinates that block it and
    // search along the feasible direction instead
    for _ in 0..BLOCKING_ROUNDS {
        let blocked = region.blocking(&base, &d, &face);
        if blocked.is_empty() {
            break;
        }
        face.fix(&blocked, &mut base);
        d = obj.newton_direction(&at, &face)?;
    }
    let mut t = region.max_step(&base, &d, &face);
    for _ in 0..30 {
        if t <= 0.0 {
            break;
        }
        let trial: Vec<f64> = base.iter().zip(&d).map(|(x, di)| x + t * di).collect();
        let cand = region.project(&trial);
        let ch = obj.change(p, &cand);
        if ch < 0.0 {
            return Some(obj.step_to(p, cand, ch));
        }
        t *= 0.5;
    }
    None
}

/// Accelerated projected gradient (monotone variant) with backtracking on the
/// Lipschitz estimate and a momentum restart whenever the candidate fails to
/// improve on the best iterate. Convergence is certified by the gradient
/// mapping at the best iterate.
fn accelerated_gradient(obj: &LogMeanExp<'_>, region: &Region<'_>, x0: Vec<f64>, initial_step: f64, opts: &SolverOptions) -> PgdOutcome {
    let n = x0.len();
    let mut best = obj.point(x0);
    let mut trace = opts.record_trace.then(|| vec![best.value]);
    let mut lip = 1.0 / initial_step;
    let mut y = best.clone();
    let mut prev_x = best.x.clone();
    let mut theta = 1.0_f64;
    let mut gm_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    while iterations < opts.max_iters {
        iterations += 1;
        let mut z = gradient_step(region, &y.x, &y.grad, 1.0 / lip);
        for _ in 0..MAX_BACKTRACKS {
            let (mut lin, mut sq) = (0.0, 0.0);
            for ((zi, yi), gi) in z.iter().zip(&y.x).zip(&y.grad) {
                lin += gi * (zi - yi);
                sq += (zi - yi) * (zi - yi);
            }
            if obj.change(&y, &z) <= lin + 0.5 * lip * sq {
                break;
            }
            lip *= 2.0;
            z = gradient_step(region, &y.x, &y.grad, 1.0 / lip);
        }
        let y_gm = lip * dist(&z, &y.x);
        let restarted = y.x == best.x;
        let gain = obj.change(&best, &z);
        let improved = gain < 0.0;
        if improved {
            let next = obj.step_to(&best, z.clone(), gain);
            prev_x = std::mem::replace(&mut best, next).x;
        }
        if !improved || iterations % NEWTON_PERIOD == 0 {
            if let Some(q) = newton_polish(obj, region, &best, lip) {
                best = q;
                y = best.clone();
                theta = 1.0;
                gm_norm = dist(&gradient_step(region, &best.x, &best.grad, 1.0 / lip), &best.x) * lip;
                if let Some(tr) = trace.as_mut() {
                    tr.push(best.value);
                }
                if gm_norm <= opts.tol {
                    stop = StopReason::Tolerance;
                    break;
                }
                lip *= 0.9;
                continue;
            }
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(best.value);
        }
        if y_gm <= opts.tol || !improved {
            gm_norm = dist(&gradient_step(region, &best.x, &best.grad, 1.0 / lip), &best.x) * lip;
            if gm_norm <= opts.tol {
                stop = StopReason::Tolerance;
                break;
            }
            if restarted && !improved {
                stop = StopReason::WorkingPrecision;
                break;
            }
        }
        if improved {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let (a, b) = (theta / theta_next, (theta - 1.0) / theta_next);
            let next: Vec<f64> = (0..n).map(|i| best.x[i] + a * (z[i] - best.x[i]) + b * (best.x[i] - prev_x[i])).collect();
            theta = theta_next;
            // the extrapolated point may leave the set
            y = obj.point(region.project(&next));
        } else {
            y = best.clone();
            theta = 1.0;
        }
        lip *= 0.9;
    }
    if stop == StopReason::MaxIterations {
        gm_norm = dist(&gradient_step(region, &best.x, &best.grad, 1.0 / lip), &best.x) * lip;
        if gm_norm <= opts.tol {
            stop = StopReason::Tolerance;
        }
    }
    PgdOutcome { x: best.x, value: best.value, iterations, gm_norm, stop, trace }
}

fn minimize(obj: &LogMeanExp<'_>, region: &Region<'_>, x0: Vec<f64>, initial_step: f64, opts: &SolverOptions) -> PgdOutcome {
    match opts.method {
        Method::ProjectedGradient => projected_gradient(obj, region, x0, initial_step, opts),
        Method::Accelerated => accelerated_gradient(obj, region, x0, initial_step, opts),
    }
}

/// Solves the reduced program on the verbatim slab constraint.
pub fn solve_reduced(values: ArrayView2<f64>, scale: f64, shift: f64, options: &SolverOptions) -> Result<SaaSolution> {
    let set = ReducedFeasibleSet::slab(values.ncols());
    solve_reduced_with(values, scale, shift, &set, None, options)
}

/// Solves the reduced program on `set`, optionally with per-sample
/// normalized log-weights (importance sampling).
pub fn solve_reduced_with(
    values: ArrayView2<f64>,
    scale: f64,
    shift: f64,
    set: &ReducedFeasibleSet,
    log_weights: Option<&[f64]>,
    options: &SolverOptions,
) -> Result<SaaSolution> {
    validate_matrix(&values)?;
    if set.n != values.ncols() {
        return Err(invalid_arg("feasible set dimension does not match the dictionary"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid_arg(format!("scale must be positive, got {scale}")));
    }
    if let Some(w) = log_weights {
        if w.len() != values.nrows() || w.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("log-weights do not match the sample".into()));
        }
    }
    let obj = LogMeanExp::new(values, scale, shift, log_weights);
    let step = options.initial_step.unwrap_or(1.0 / (scale * scale));
    let out = minimize(&obj, &Region::Reduced(set), vec![0.0; set.n], step, options);
    Ok(SaaSolution {
        point: SolutionPoint::Tau(out.x),
        log_value_stabilized: out.value,
        log_theta_hat: out.value + shift,
        shift,
        iterations: out.iterations,
        final_gradient_mapping_norm: out.gm_norm,
        converged: out.stop.converged(),
        stop_reason: out.stop,
        trace: out.trace,
    })
}

/// Solves the general `(α, μ)` program over the signed dictionary. The solver
/// works in `λ = αμ`, where the program is convex with feasible set
/// `{λ ≥ 0, Σλ ≤ γκ‖c‖∞}`, and maps back to `(α, μ)`.
pub fn solve_general(
    signed_values: ArrayView2<f64>,
    gamma: f64,
    kappa: f64,
    sup_norm: f64,
    options: &SolverOptions,
) -> Result<SaaSolution> {
    validate_matrix(&signed_values)?;
    if !(gamma > 0.0 && kappa > 0.0 && sup_norm >= 0.0) {
        return Err(invalid_arg("gamma and kappa must be positive and sup_norm nonnegative"));
    }
    solve_general_capped(signed_values, gamma * kappa * sup_norm, options)
}

/// [`solve_general`] with an explicit `α` cap, which is also the shift.
pub fn solve_general_capped(signed_values: ArrayView2<f64>, alpha_max: f64, options: &SolverOptions) -> Result<SaaSolution> {
    validate_matrix(&signed_values)?;
    if !(alpha_max >= 0.0 && alpha_max.is_finite()) {
        return Err(invalid_arg(format!("alpha_max must be nonnegative, got {alpha_max}")));
    }
    let n = signed_values.ncols();
    let obj = LogMeanExp::new(signed_values, 1.0, alpha_max, None);
    let step = options.initial_step.unwrap_or(1.0);
    let out = minimize(&obj, &Region::CappedOrthant(alpha_max), vec![0.0; n], step, options);
    let alpha: f64 = out.x.iter().sum();
    let mu = if alpha > 0.0 {
        out.x.iter().map(|l| l / alpha).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    Ok(SaaSolution {
        point: SolutionPoint::AlphaMu { alpha, mu },
        log_value_stabilized: out.value,
        log_theta_hat: out.value + alpha_max,
        shift: alpha_max,
        iterations: out.iterations,
        final_gradient_mapping_norm: out.gm_norm,
        converged: out.stop.converged(),
        stop_reason: out.stop,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn projection_keeps_feasible_points() {
        let set = ReducedFeasibleSet::slab(3);
        let p = vec![0.2, -0.5, 0.9];
        assert_eq!(project_reduced(&p, &set), p);
    }

    #[test]
    fn projection_of_ones_is_uniform() {
        let set = ReducedFeasibleSet::slab(4);
        let p = project_reduced(&[1.0; 4], &set);
        for v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_box_only() {
        let set = ReducedFeasibleSet::slab(2);
        assert_eq!(project_reduced(&[2.0, -2.0], &set), vec![1.0, -1.0]);
    }

    #[test]
    fn simplex_projection_symmetric() {
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn strict_projection_respects_radius() {
        let set = ReducedFeasibleSet::strict(3, 1.0);
        let p = set.project(&[0.9, -0.9, 0.4]);
        assert!(set.contains(&p, 1e-12));
        assert!((p.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn objective_at_zero() {
        let v = Array2::from_shape_vec((3, 2), vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.0]).unwrap();
        let (val, g) = reduced_objective_and_gradient(&[0.0, 0.0], v.view(), 10.0, 7.0).unwrap();
        assert!((val + 7.0).abs() < 1e-14);
        assert!((g[0] - 10.0 * (0.1 + 0.3 - 0.5) / 3.0).abs() < 1e-13);
        assert!((g[1] - 10.0 * (-0.2 + 0.4) / 3.0).abs() < 1e-13);
    }

    #[test]
    fn objective_single_sample() {
        let v = Array2::from_shape_vec((1, 2), vec![0.3, -0.7]).unwrap();
        let tau = [0.5, 0.25];
        let (val, g) = reduced_objective_and_gradient(&tau, v.view(), 4.0, 2.0).unwrap();
        assert!((val - (-2.0 + 4.0 * (0.15 - 0.175))).abs() < 1e-14);
        assert!((g[0] - 1.2).abs() < 1e-14 && (g[1] + 2.8).abs() < 1e-14);
    }

    #[test]
    fn objective_rejects_nan() {
        let v = Array2::from_shape_vec((1, 2), vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            reduced_objective_and_gradient(&[0.0, 0.0], v.view(), 1.0, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_dictionary_gives_unit_theta() {
        let v = Array2::zeros((20, 5));
        let sol = solve_reduced(v.view(), 30.0, 30.0, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.log_value_stabilized + 30.0).abs() < 1e-12);
        assert!(sol.log_theta_hat.abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_boundary_optimum() {
        let v = Array2::from_elem((10, 1), 0.5);
        let s = 6.0;
        let sol = solve_reduced(v.view(), s, s, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.tau().unwrap()[0] + 1.0).abs() < 1e-12);
        assert!((sol.log_value_stabilized - (-s - 0.5 * s)).abs() < 1e-10);
        // 1-D grid search oracle
        let best = (0..=2000)
            .map(|k| -1.0 + k as f64 / 1000.0)
            .map(|t| reduced_objective(&[t], v.view(), s, s))
            .fold(f64::INFINITY, f64::min);
        assert!(sol.log_value_stabilized <= best + 1e-12);
    }

    #[test]
    fn general_with_zero_cap() {
        let v = Array2::from_shape_vec((2, 2), vec![0.5, -0.5, -0.25, 0.25]).unwrap();
        let sol = solve_general_capped(v.view(), 0.0, &SolverOptions::default()).unwrap();
        assert_eq!(sol.log_theta_hat, 0.0);
    }

    #[test]
    fn descent_trace_is_monotone() {
        let v = Array2::from_shape_fn((30, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.45);
        let opts = SolverOptions { record_trace: true, ..Default::default() };
        let sol = solve_reduced(v.view(), 5.0, 5.0, &opts).unwrap();
        let tr = sol.trace.as_ref().unwrap();
        assert!(tr.windows(2).all(|w| w[1] <= w[0]));
        let mut buf = Vec::new();
        sol.write_trace(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("iteration,objective\n"));
    }
}
