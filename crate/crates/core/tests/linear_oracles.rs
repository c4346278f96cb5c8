mod common;

use cql_core::eval::{cql_fixed_point, BackupSource, CqlEvalConfig, Variant};
use cql_core::generators::{chain2, random_features, random_mdp, random_policy, rng_from_seed, SeedRng};
use cql_core::linalg::Matrix;
use cql_core::linear::{
    alpha_threshold_linear, cql_linear_iterate, data_density, expected_projection_penalty, lstdq_iterate,
    ntk_gradient_step, ntk_penalty_terms, projection_penalty, Features, LinearQModel,
};
use cql_core::mdp::{bellman_policy_op, discounted_state_marginal};
use cql_core::{Policy, QTable, TabularMdp};

struct Instance {
    m: TabularMdp,
    beta: Policy,
    pi: Policy,
    fa: LinearQModel,
    q: QTable,
}

fn instance(rng: &mut SeedRng, ns: usize, na: usize, dim: usize, bias: bool) -> Instance {
    let m = random_mdp(ns, na, 2, 0.9, rng).unwrap();
    let beta = random_policy(ns, na, rng);
    let pi = random_policy(ns, na, rng);
    let fa = LinearQModel::zeros(Features(random_features(ns * na, dim, bias, rng).unwrap()));
    let q = QTable::new(ns, na, (0..ns * na).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    Instance { m, beta, pi, fa, q }
}

fn col(f: &Matrix, j: usize) -> Vec<f64> {
    (0..f.rows()).map(|i| f[(i, j)]).collect()
}

/// Weighted least squares via explicit normal equations.
fn normal_equations(f: &Matrix, w: &[f64], y: &[f64]) -> Vec<f64> {
    let k = f.cols();
    let cols: Vec<Vec<f64>> = (0..k).map(|j| col(f, j)).collect();
    let a = (0..k)
        .map(|i| (0..k).map(|j| (0..w.len()).map(|r| cols[i][r] * w[r] * cols[j][r]).sum()).collect())
        .collect();
    let b = (0..k).map(|i| (0..w.len()).map(|r| cols[i][r] * y[r]).sum()).collect();
    common::gauss_jordan(a, b)
}

fn ratio_minus_one(pi: &Policy, beta: &Policy) -> Vec<f64> {
    pi.as_slice().iter().zip(beta.as_slice()).map(|(p, b)| (p - b) / b).collect()
}

fn d_weighted_value(d: &[f64], pi: &Policy, q: &[f64]) -> f64 {
    common::v_of(q, pi).iter().zip(d).map(|(v, w)| v * w).sum()
}

#[test]
fn linear_iterate_solves_normal_equations() {
    let mut rng = rng_from_seed(31);
    for alpha in [0.0, 0.7, 3.0] {
        let it = instance(&mut rng, 4, 3, 5, true);
        let na = 3;
        let dens = data_density(&it.m, &it.beta).unwrap();
        let d = common::marginal_series(&it.m, &it.beta, 1e-15);
        let bq = common::policy_backup(&it.m, &it.pi, it.q.as_slice());
        let y: Vec<f64> = (0..12)
            .map(|i| {
                let (s, a) = (i / na, i % na);
                dens[i] * bq[i] - alpha * d[s] * (it.pi.prob(s, a) - it.beta.prob(s, a))
            })
            .collect();
        let oracle = normal_equations(&it.fa.features.0, &dens, &y);
        let got = cql_linear_iterate(&it.fa, &it.m, &it.beta, &it.pi, alpha, &it.q).unwrap();
        assert!(common::max_abs_diff(&got.weights, &oracle) < 1e-8);
    }
}

#[test]
fn tabular_features_reduce_to_expected_penalty() {
    let m = chain2();
    let beta = Policy::from_rows(2, 2, vec![0.5, 0.5, 0.3, 0.7]).unwrap();
    let pi = Policy::from_rows(2, 2, vec![0.8, 0.2, 0.4, 0.6]).unwrap();
    let fa = LinearQModel::zeros(Features::identity(4));
    let alpha = 0.6;
    let mut q = QTable::zeros(2, 2);
    for _ in 0..600 {
        q = cql_linear_iterate(&fa, &m, &beta, &pi, alpha, &q).unwrap().q(2, 2).unwrap();
    }
    let src = BackupSource::exact(&m, &beta).unwrap();
    let fixed = cql_fixed_point(&CqlEvalConfig::new(alpha, pi.clone(), Variant::Eq2), &src, &pi).unwrap();
    assert!(common::max_abs_diff(q.as_slice(), fixed.as_slice()) < 1e-9);
}

#[test]
fn threshold_marks_onset_of_expected_lower_bound() {
    let mut rng = rng_from_seed(5);
    let mut positive = 0;
    for _ in 0..100 {
        let it = instance(&mut rng, 4, 2, 3, true);
        let t = alpha_threshold_linear(&it.fa, &it.m, &it.beta, &it.pi, &it.q).unwrap();
        if !(t.value > 0.0 && t.value.is_finite()) {
            continue;
        }
        positive += 1;
        let d = discounted_state_marginal(&it.m, &it.beta).unwrap();
        let bq = bellman_policy_op(&it.m, &it.pi, &it.q).unwrap();
        let target = d_weighted_value(&d, &it.pi, bq.as_slice());
        let excess = |alpha: f64| {
            let w = cql_linear_iterate(&it.fa, &it.m, &it.beta, &it.pi, alpha, &it.q).unwrap();
            d_weighted_value(&d, &it.pi, w.q(4, 2).unwrap().as_slice()) - target
        };
        let eps = 1e-6 * (1.0 + t.value);
        assert!(excess(t.value + eps) <= 1e-10);
        assert!(excess(t.value - eps) > 0.0);
        assert!(excess(0.0) > 0.0);
    }
    assert!(positive >= 10, "only {positive} instances with a positive threshold");
}

#[test]
fn ntk_step_matches_explicit_kernel() {
    let mut rng = rng_from_seed(12);
    let it = instance(&mut rng, 3, 2, 4, false);
    let n = 6;
    let f = &it.fa.features.0;
    let kernel: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..f.cols()).map(|c| f[(i, c)] * f[(j, c)]).sum()).collect())
        .collect();
    let dens = data_density(&it.m, &it.beta).unwrap();
    let x = ratio_minus_one(&it.pi, &it.beta);
    let bq = common::policy_backup(&it.m, &it.pi, it.q.as_slice());
    let (alpha, eta) = (0.8, 0.05);
    let expected: Vec<f64> = (0..n)
        .map(|i| {
            let mut step = 0.0;
            for j in 0..n {
                step += kernel[i][j] * dens[j] * (bq[j] - it.q.as_slice()[j] - alpha * x[j]);
            }
            it.q.as_slice()[i] + eta * step
        })
        .collect();
    let got = ntk_gradient_step(&it.fa, &it.m, &it.beta, &it.pi, alpha, eta, &it.q).unwrap();
    assert!(common::max_abs_diff(got.as_slice(), &expected) < 1e-12);
}

#[test]
fn ntk_quadratic_is_the_penalty_effect() {
    let mut rng = rng_from_seed(13);
    for _ in 0..30 {
        let it = instance(&mut rng, 4, 3, 5, false);
        let terms = ntk_penalty_terms(&it.fa, &it.m, &it.beta, &it.pi).unwrap();
        assert!(terms.quadratic >= 0.0);
        let d = discounted_state_marginal(&it.m, &it.beta).unwrap();
        // One unit of penalty moves Q by −M D x; measure the change in E_π − E_β.
        let moved = ntk_gradient_step(&it.fa, &it.m, &it.beta, &it.pi, 1.0, 1.0, &it.q).unwrap();
        let free = ntk_gradient_step(&it.fa, &it.m, &it.beta, &it.pi, 0.0, 1.0, &it.q).unwrap();
        let delta: Vec<f64> = free.as_slice().iter().zip(moved.as_slice()).map(|(a, b)| a - b).collect();
        let effect = d_weighted_value(&d, &it.pi, &delta) - d_weighted_value(&d, &it.beta, &delta);
        assert!((effect - terms.quadratic).abs() < 1e-9 * (1.0 + terms.quadratic));
    }
}

#[test]
fn per_state_penalties_can_be_negative() {
    let mut rng = rng_from_seed(99);
    let (mut proj_neg, mut ntk_neg) = (false, false);
    for _ in 0..500 {
        let it = instance(&mut rng, 5, 3, 3, true);
        proj_neg |= projection_penalty(&it.fa, &it.m, &it.beta, &it.pi)
            .unwrap()
            .iter()
            .any(|&v| v < -1e-9);
        ntk_neg |= ntk_penalty_terms(&it.fa, &it.m, &it.beta, &it.pi)
            .unwrap()
            .per_state
            .iter()
            .any(|&v| v < -1e-9);
        if proj_neg && ntk_neg {
            break;
        }
    }
    assert!(proj_neg && ntk_neg);
}

#[test]
fn expected_penalty_is_projected_norm_with_bias() {
    let mut rng = rng_from_seed(21);
    for _ in 0..50 {
        let it = instance(&mut rng, 4, 3, 4, true);
        let dens = data_density(&it.m, &it.beta).unwrap();
        let x = ratio_minus_one(&it.pi, &it.beta);
        let dx: Vec<f64> = x.iter().zip(&dens).map(|(a, b)| a * b).collect();
        let w = normal_equations(&it.fa.features.0, &dens, &dx);
        let px = it.fa.features.0.mul_vec(&w);
        let norm: f64 = px.iter().zip(&dens).map(|(p, d)| p * p * d).sum();
        let got = expected_projection_penalty(&it.fa, &it.m, &it.beta, &it.pi).unwrap();
        assert!(got >= -1e-12);
        assert!((got - norm).abs() < 1e-9 * (1.0 + norm));
    }
}

#[test]
fn lstdq_identity_features_reproduce_backup() {
    let mut rng = rng_from_seed(3);
    let it = instance(&mut rng, 3, 2, 2, false);
    let fa = LinearQModel::zeros(Features::identity(6));
    let w = lstdq_iterate(&fa, &it.m, &it.beta, &it.pi, &it.q).unwrap();
    assert!(common::max_abs_diff(&w.weights, &common::policy_backup(&it.m, &it.pi, it.q.as_slice())) < 1e-12);
}

#[test]
fn bias_only_features_cannot_carry_the_penalty() {
    let mut rng = rng_from_seed(8);
    for _ in 0..20 {
        let it = instance(&mut rng, 4, 3, 1, true);
        let t = alpha_threshold_linear(&it.fa, &it.m, &it.beta, &it.pi, &it.q).unwrap();
        // The projected penalty is a constant with zero data-weighted mean.
        assert!(t.denominator.abs() < 1e-12);
        assert!(t.value == 0.0 || t.value.is_infinite());
        assert!(t.note.is_some());
    }
}
