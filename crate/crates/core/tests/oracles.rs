//! Fixed reference values. Quadrature and grid values below were computed
//! independently with scipy (adaptive quadrature, log-domain Sinkhorn,
//! bounded scalar minimization).

mod common;

use approx::assert_abs_diff_eq;
use common::*;
use ndarray::{array, Array2};
use rand::Rng;
use sieve_eot::baseline::{
    discretized_problem, empirical_sinkhorn_value, exact_ot_1d, oracle_eot_value, sinkhorn, DiscreteEotProblem,
};
use sieve_eot::estimator::{estimate_eot, rate_bound};
use sieve_eot::harness::{self, ExperimentConfig};
use sieve_eot::measures::{CostFunction, CostKind, Marginal};
use sieve_eot::reference::{estimate_log_a_gamma, ReferenceMeasure};
use sieve_eot::saa::{solve_reduced, SolverOptions};
use sieve_eot::sieve::{build_partition, kappa, optimal_sample_size, DictionaryKind, SieveDictionary};
use sieve_eot::Error;

const LOG_A_GAMMA_100: f64 = -2.1175055618139966;
const R_GAMMA_100_X_LE_HALF: f64 = 0.4792240508739071;
const ORACLE_GAMMA_5_GRID_512: f64 = 0.275962535712088;
const EOT_2X2: f64 = 0.22510996785998905;
const EOT_2X2_SYMMETRIC: f64 = 0.3798854930417225;

#[test]
fn table_one_partition_sizes() {
    let (x, y) = uniforms();
    let p = build_partition(&x, &y, 0.1, None, &mut rng(0)).unwrap();
    assert_eq!((p.n_x, p.n_y, p.n_total), (80, 80, 160));
    for c in &p.x_cells {
        assert_abs_diff_eq!(c.right - c.left, 1.0 / 80.0, epsilon = 1e-12);
        assert!(c.contains(c.representative));
    }
    for c in &p.y_cells {
        assert_abs_diff_eq!(c.right - c.left, 2.0 / 80.0, epsilon = 1e-12);
    }
    assert_eq!(kappa(&x, &y).unwrap(), 1.0);
    assert_eq!(optimal_sample_size(0.1, 160).unwrap(), 1015);
}

#[test]
fn point_mass_gets_one_cell() {
    let x = Marginal::point_mass(0.3).unwrap();
    let y = Marginal::uniform(0.0, 1.0).unwrap();
    let p = build_partition(&x, &y, 0.1, None, &mut rng(0)).unwrap();
    assert_eq!(p.n_x, 1);
    assert_eq!(p.x_cells[0].cdf_increment, 0.0);
}

#[test]
fn kappa_cases() {
    let atom = Marginal::discrete(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
    let flat = Marginal::uniform(0.0, 1.0).unwrap();
    assert_eq!(kappa(&atom, &flat).unwrap(), 1.0);
    assert_abs_diff_eq!(kappa(&atom, &atom).unwrap(), 2.0, epsilon = 1e-12);
    let a = Marginal::point_mass(0.0).unwrap();
    assert!(matches!(kappa(&a, &a), Err(Error::DegenerateMarginal(_))));
}

#[test]
fn dictionary_entries_and_their_mean() {
    let (x, y) = uniforms();
    let mut r = rng(4);
    let p = build_partition(&x, &y, 0.1, None, &mut r).unwrap();
    let d = SieveDictionary::new(p, DictionaryKind::ReducedTau, &x, &y, 100.0, 2.0).unwrap();
    let j = d.partition.x_cells.iter().position(|c| (c.representative - 0.50625).abs() < 1e-12).unwrap();
    let rep = d.partition.x_cells[j].representative;
    assert_abs_diff_eq!(d.evaluate(&[0.3], &[1.0])[j], rep - 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(d.evaluate(&[0.7], &[1.0])[j], rep, epsilon = 1e-12);
    let draws = 100_000;
    let mean: f64 = (0..draws).map(|_| d.evaluate(&[r.random::<f64>()], &[1.0])[j]).sum::<f64>() / draws as f64;
    assert!(mean.abs() <= 3.0 / (draws as f64).sqrt());
}

#[test]
fn sample_size_examples() {
    assert_eq!(optimal_sample_size(0.2, 80).unwrap(), 219);
    assert_eq!(optimal_sample_size(0.1, 2).unwrap(), 138);
}

#[test]
fn normalizer_matches_quadrature() {
    let (x, y) = uniforms();
    let cost = quadratic_cost(&x, &y);
    let est = estimate_log_a_gamma(100.0, &cost, &x, &y, 1_000_000, &mut rng(9)).unwrap();
    assert!((est.log_a - LOG_A_GAMMA_100).abs() <= 3.0 * est.stderr, "{} vs {}", est.log_a, LOG_A_GAMMA_100);
    assert!(matches!(estimate_log_a_gamma(0.0, &cost, &x, &y, 1000, &mut rng(9)), Err(Error::InvalidArgument(_))));
}

#[test]
fn reference_draws_match_quadrature() {
    let (x, y) = uniforms();
    let cost = quadratic_cost(&x, &y);
    let mut r = rng(12);
    let reference = ReferenceMeasure::new(100.0, cost, x, y, 1_000_000, &mut r).unwrap();
    let sample = reference.sample(100_000, 100_000_000, &mut r).unwrap();
    let share = sample.pairs.iter().filter(|p| p.0[0] <= 0.5).count() as f64 / sample.pairs.len() as f64;
    assert!((share - R_GAMMA_100_X_LE_HALF).abs() <= 0.01);
    // inf c = 0 here, so the acceptance rate estimates a_γ
    let rate = sample.acceptance_rate();
    let se = (rate * (1.0 - rate) / sample.proposals as f64).sqrt();
    let a = reference.log_a_gamma_estimate.exp();
    let se_a = a * reference.a_gamma_stderr;
    assert!((rate - a).abs() <= 3.0 * (se * se + se_a * se_a).sqrt());
}

#[test]
fn exact_ot_values() {
    let (x, y) = uniforms();
    assert_abs_diff_eq!(exact_ot_1d(&x, &y, &CostKind::Quadratic, 100_000).unwrap(), 1.0 / 6.0, epsilon = 1e-6);
    assert_abs_diff_eq!(exact_ot_1d(&x, &x, &CostKind::Quadratic, 1000).unwrap(), 0.0, epsilon = 1e-15);
    let a = Marginal::point_mass(0.0).unwrap();
    let b = Marginal::point_mass(3.0).unwrap();
    assert_abs_diff_eq!(exact_ot_1d(&a, &b, &CostKind::Quadratic, 10).unwrap(), 4.5, epsilon = 1e-12);
}

#[test]
fn symmetric_two_by_two() {
    let p = DiscreteEotProblem::new(
        vec![vec![0.0], vec![1.0]],
        vec![vec![0.0], vec![1.0]],
        vec![0.5, 0.5],
        vec![0.5, 0.5],
        array![[0.0, 1.0], [1.0, 0.0]],
        1.0,
    )
    .unwrap();
    let res = sinkhorn(&p, 1e-12, 10_000).unwrap();
    let plan = res.plan(&p);
    assert_abs_diff_eq!(plan[[0, 1]], plan[[1, 0]], epsilon = 1e-12);
    assert_abs_diff_eq!(plan[[0, 0]], plan[[1, 1]], epsilon = 1e-12);
    assert_abs_diff_eq!(plan.sum(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(res.reg_value, EOT_2X2_SYMMETRIC, epsilon = 1e-8);
}

#[test]
fn single_atoms() {
    let p = DiscreteEotProblem::new(vec![vec![1.0]], vec![vec![1.0]], vec![1.0], vec![1.0], Array2::zeros((1, 1)), 3.0).unwrap();
    let res = sinkhorn(&p, 1e-9, 10).unwrap();
    assert_abs_diff_eq!(res.plan(&p)[[0, 0]], 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(res.reg_value, 0.0, epsilon = 1e-15);
    let cost = CostFunction::new(CostKind::Quadratic, 2.0, 0.0).unwrap();
    let v = empirical_sinkhorn_value(&[vec![0.2]], &[vec![1.2]], &cost, 7.0).unwrap();
    assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn large_gamma_approaches_assignment() {
    let mut r = rng(5);
    let n = 5;
    let cost = Array2::from_shape_fn((n, n), |_| r.random_range(0.0..1.0));
    let w = vec![1.0 / n as f64; n];
    let atoms: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
    let p = DiscreteEotProblem::new(atoms.clone(), atoms, w.clone(), w, cost.clone(), 1000.0).unwrap();
    let res = sinkhorn(&p, 1e-9, 100_000).unwrap();
    // with uniform weights the vertices of the transport polytope are permutations
    let best = permutations(n)
        .iter()
        .map(|s| s.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min);
    assert!((res.reg_value - best).abs() <= 1e-2, "{} vs {}", res.reg_value, best);
}

#[test]
fn self_transport_is_small() {
    let (x, _) = uniforms();
    let xs = x.sample(100, &mut rng(8));
    let cost = CostFunction::new(CostKind::Quadratic, 0.5, 0.0).unwrap();
    let v = empirical_sinkhorn_value(&xs, &xs, &cost, 100.0).unwrap();
    assert!((0.0..=0.05).contains(&v), "{v}");
}

#[test]
fn grid_oracle_values() {
    let (x, y) = uniforms();
    let cost = quadratic_cost(&x, &y);
    let o = oracle_eot_value(&x, &y, &cost, 5.0, 512).unwrap();
    assert!(o.richardson_ok);
    assert_abs_diff_eq!(o.eot_value, ORACLE_GAMMA_5_GRID_512, epsilon = 1e-6);
    let same = oracle_eot_value(&x, &x, &cost, 100.0, 128).unwrap();
    assert!((0.0..=0.02).contains(&same.eot_value), "{}", same.eot_value);
    assert!(oracle_eot_value(&x, &y, &cost, 5.0, 8).is_err());
}

#[test]
fn oracle_discretization_is_quantile_midpoints() {
    let (x, y) = uniforms();
    let cost = quadratic_cost(&x, &y);
    let p = discretized_problem(&x, &y, &cost, 5.0, 4).unwrap();
    assert_eq!(p.x_atoms, vec![vec![0.125], vec![0.375], vec![0.625], vec![0.875]]);
    assert_eq!(p.y_atoms, vec![vec![0.25], vec![0.75], vec![1.25], vec![1.75]]);
}

#[test]
fn two_by_two_estimate_matches_oracle() {
    let cfg = ExperimentConfig::from_json(
        r#"{"x_marginal": {"kind": "discrete", "atoms": [0, 1], "weights": [0.3, 0.7]},
            "y_marginal": {"kind": "discrete", "atoms": [0, 1], "weights": [0.6, 0.4]},
            "cost": {"kind": "quadratic"}, "gamma": 2, "epsilon": 0.5,
            "sample_size": 400000, "estimators": ["sieve"], "master_seed": 3}"#,
    )
    .unwrap();
    let est = harness::estimate(&cfg).unwrap();
    assert!((est.eot_value - EOT_2X2).abs() <= 1e-3, "{} vs {}", est.eot_value, EOT_2X2);
}

#[test]
fn zero_cost_estimate_is_zero() {
    let (x, y) = uniforms();
    let cost = CostFunction::constant(0.0).unwrap();
    let reference = ReferenceMeasure::new(3.0, cost, x.clone(), y.clone(), 1000, &mut rng(2)).unwrap();
    let v = Array2::from_shape_fn((50, 4), |(i, j)| if (i + j) % 2 == 0 { 0.5 } else { -0.5 });
    // a vanishing cost means the sup-norm scale is 0; any positive scale with τ = 0 optimal works
    let sol = solve_reduced(v.view(), 1e-9, 0.0, &SolverOptions::default()).unwrap();
    let est = estimate_eot(&sol, &reference).unwrap();
    assert_abs_diff_eq!(est.eot_value, 0.0, epsilon = 1e-9);
}

#[test]
fn table_one_rate_bound() {
    let b = rate_bound(0.1, 160, 1015, 100.0, 1.0, 2.0).unwrap();
    assert_abs_diff_eq!(b, (0.4f64).log10() + 400.0 / std::f64::consts::LN_10, epsilon = 1e-3);
    assert!((b - 173.3).abs() < 0.05);
}
