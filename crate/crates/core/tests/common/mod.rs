#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sieve_eot::baseline::DiscreteEotProblem;
use sieve_eot::measures::{quantile_cells, CostFunction, CostKind, Marginal};
use sieve_eot::reference::ReferenceMeasure;
use sieve_eot::sieve::{DictionaryKind, SieveDictionary, SievePartition};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows × cols` matrix with entries uniform in `[−1, 1]`.
pub fn random_values(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..=1.0))
}

pub fn uniforms() -> (Marginal, Marginal) {
    (Marginal::uniform(0.0, 1.0).unwrap(), Marginal::uniform(0.0, 2.0).unwrap())
}

pub fn quadratic_cost(x: &Marginal, y: &Marginal) -> CostFunction {
    CostFunction::with_estimated_bounds(CostKind::Quadratic, x, y, 256).unwrap()
}

/// Dictionary with `cells` quantile cells per side, bypassing the `ε/8` rule
/// so that small dictionaries are possible.
pub fn small_dictionary(x: &Marginal, y: &Marginal, cells: usize, gamma: f64, sup_norm: f64) -> SieveDictionary {
    let x_cells = quantile_cells(x, cells).unwrap();
    let y_cells = quantile_cells(y, cells).unwrap();
    let partition = SievePartition {
        epsilon: 8.0 / cells as f64,
        n_x: x_cells.len(),
        n_y: y_cells.len(),
        n_total: x_cells.len() + y_cells.len(),
        x_cells,
        y_cells,
        check_reference_marginals: false,
    };
    SieveDictionary::new(partition, DictionaryKind::ReducedTau, x, y, gamma, sup_norm).unwrap()
}

/// Uniform marginals, quadratic cost, `γ = 5`, `n = 8`, `N = 400` reference draws.
pub struct SmallSaa {
    pub values: Array2<f64>,
    pub gamma: f64,
    pub kappa: f64,
    pub sup_norm: f64,
}

pub fn small_saa(seed: u64) -> SmallSaa {
    let (x, y) = uniforms();
    let cost = quadratic_cost(&x, &y);
    let gamma = 5.0;
    let mut r = rng(seed);
    let reference = ReferenceMeasure::new(gamma, cost.clone(), x.clone(), y.clone(), 100_000, &mut r).unwrap();
    let dict = small_dictionary(&x, &y, 4, gamma, cost.sup_norm);
    let sample = reference.sample(400, 400 * 10_000, &mut r).unwrap();
    SmallSaa { values: dict.matrix(&sample.pairs), gamma, kappa: dict.kappa, sup_norm: cost.sup_norm }
}

/// Random discrete problem with strictly positive weights and costs in `[0, 1]`.
pub fn random_discrete(n: usize, m: usize, gamma: f64, rng: &mut impl Rng) -> DiscreteEotProblem {
    let normalized = |k: usize, rng: &mut dyn rand::RngCore| {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let a = normalized(n, rng);
    let b = normalized(m, rng);
    let cost = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..1.0));
    let xs = (0..n).map(|i| vec![i as f64]).collect();
    let ys = (0..m).map(|j| vec![j as f64]).collect();
    DiscreteEotProblem::new(xs, ys, a, b, cost, gamma).unwrap()
}
