#![allow(clippy::needless_range_loop)]

mod common;

use cql_core::analysis::{gap_expanding_check, nu_necessity_search, nu_penalty};
use cql_core::dataset::{build_empirical_model, overestimation_bound, sample_dataset, ConcentrationConfig, MdpShape};
use cql_core::eval::{cql_fixed_point, d_cql, BackupSource, CqlEvalConfig, Variant};
use cql_core::generators::{random_features, random_mdp, random_policy, rng_from_seed, SeedRng};
use cql_core::learn::{cql_objective_value, CqlLearnConfig};
use cql_core::linear::{expected_projection_penalty, Features, LinearQModel};
use cql_core::mdp::{
    bellman_optimality_op, bellman_policy_op, discounted_state_marginal, exact_q, soft_policy_from_q,
    total_variation,
};
use cql_core::{Policy, QTable, TabularMdp};
use proptest::prelude::*;
use rand::Rng;

fn setup(seed: u64, ns: usize, na: usize, gamma: f64) -> (SeedRng, TabularMdp) {
    let mut rng = rng_from_seed(seed);
    let branching = 1 + (seed as usize % ns);
    let m = random_mdp(ns, na, branching, gamma, &mut rng).unwrap();
    (rng, m)
}

fn random_q(rng: &mut SeedRng, ns: usize, na: usize, scale: f64) -> QTable {
    QTable::new(ns, na, (0..ns * na).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    common::max_abs_diff(a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backups_are_gamma_contractions(seed in any::<u64>(), ns in 1usize..7, na in 1usize..4, gamma in 0.0f64..0.99) {
        let (mut rng, m) = setup(seed, ns, na, gamma);
        let pi = random_policy(ns, na, &mut rng);
        let (q1, q2) = (random_q(&mut rng, ns, na, 10.0), random_q(&mut rng, ns, na, 10.0));
        let dist = sup(q1.as_slice(), q2.as_slice());
        let bp = sup(bellman_policy_op(&m, &pi, &q1).unwrap().as_slice(), bellman_policy_op(&m, &pi, &q2).unwrap().as_slice());
        let bo = sup(bellman_optimality_op(&m, &q1).unwrap().as_slice(), bellman_optimality_op(&m, &q2).unwrap().as_slice());
        prop_assert!(bp <= gamma * dist + 1e-12);
        prop_assert!(bo <= gamma * dist + 1e-12);
    }

    #[test]
    fn optimality_backup_dominates(seed in any::<u64>(), ns in 1usize..7, na in 1usize..4) {
        let (mut rng, m) = setup(seed, ns, na, 0.9);
        let pi = random_policy(ns, na, &mut rng);
        let q = random_q(&mut rng, ns, na, 5.0);
        let star = bellman_optimality_op(&m, &q).unwrap();
        let plain = bellman_policy_op(&m, &pi, &q).unwrap();
        prop_assert!(star.as_slice().iter().zip(plain.as_slice()).all(|(a, b)| *a >= b - 1e-12));
    }

    #[test]
    fn exact_q_is_a_fixed_point(seed in any::<u64>(), ns in 1usize..9, na in 1usize..4, gamma in 0.0f64..0.99) {
        let (mut rng, m) = setup(seed, ns, na, gamma);
        let pi = random_policy(ns, na, &mut rng);
        let q = exact_q(&m, &pi).unwrap();
        let res = sup(bellman_policy_op(&m, &pi, &q).unwrap().as_slice(), q.as_slice());
        prop_assert!(res <= 1e-9);
        prop_assert!(q.as_slice().iter().all(|x| x.abs() <= m.q_bound() + 1e-9));
    }

    #[test]
    fn marginal_satisfies_flow(seed in any::<u64>(), ns in 1usize..8, na in 1usize..4, gamma in 0.0f64..0.99) {
        let (mut rng, m) = setup(seed, ns, na, gamma);
        let pi = random_policy(ns, na, &mut rng);
        let d = discounted_state_marginal(&m, &pi).unwrap();
        prop_assert!(d.iter().all(|&x| x >= 0.0));
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for s2 in 0..ns {
            let mut inflow = 0.0;
            for s in 0..ns {
                for a in 0..na {
                    inflow += d[s] * pi.prob(s, a) * common::t(&m, s, a, s2);
                }
            }
            let expect = (1.0 - gamma) * m.initial_dist()[s2] + gamma * inflow;
            prop_assert!((d[s2] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_is_nonnegative_and_zero_only_at_equality(seed in any::<u64>(), ns in 1usize..6, na in 2usize..5) {
        let mut rng = rng_from_seed(seed);
        let beta = random_policy(ns, na, &mut rng);
        let pi = random_policy(ns, na, &mut rng);
        let d = d_cql(&pi, &beta).unwrap();
        prop_assert!(d.iter().all(|&x| x >= -1e-12));
        let same = d_cql(&beta, &beta).unwrap();
        prop_assert!(same.iter().all(|&x| x.abs() < 1e-12));
        let tv = total_variation(&pi, &beta).unwrap();
        for s in 0..ns {
            if tv[s] > 1e-6 {
                prop_assert!(d[s] > 0.0);
            }
        }
    }

    #[test]
    fn pointwise_penalty_underestimates_everywhere(seed in any::<u64>(), ns in 1usize..6, na in 1usize..4, alpha in 0.0f64..5.0) {
        let (mut rng, m) = setup(seed, ns, na, 0.9);
        let beta = random_policy(ns, na, &mut rng);
        let pi = random_policy(ns, na, &mut rng);
        let src = BackupSource::exact(&m, &beta).unwrap();
        let q_hat = cql_fixed_point(&CqlEvalConfig::new(alpha, pi.clone(), Variant::Eq1), &src, &pi).unwrap();
        let q = exact_q(&m, &pi).unwrap();
        prop_assert!(q_hat.as_slice().iter().zip(q.as_slice()).all(|(a, b)| *a <= b + 1e-9));
    }

    #[test]
    fn expected_penalty_underestimates_values(seed in any::<u64>(), ns in 1usize..6, na in 1usize..4, alpha in 0.0f64..5.0) {
        let (mut rng, m) = setup(seed, ns, na, 0.9);
        let beta = random_policy(ns, na, &mut rng);
        let pi = random_policy(ns, na, &mut rng);
        let src = BackupSource::exact(&m, &beta).unwrap();
        let q_hat = cql_fixed_point(&CqlEvalConfig::new(alpha, pi.clone(), Variant::Eq2), &src, &pi).unwrap();
        let v_hat = q_hat.value_under(&pi).v;
        let v = common::v_of(exact_q(&m, &pi).unwrap().as_slice(), &pi);
        prop_assert!(v_hat.iter().zip(&v).all(|(a, b)| *a <= b + 1e-9));
    }

    #[test]
    fn entropy_regularizer_gap_is_nonnegative(seed in any::<u64>(), ns in 1usize..6, na in 1usize..4, t in 0.05f64..5.0) {
        let (mut rng, m) = setup(seed, ns, na, 0.9);
        let beta = random_policy(ns, na, &mut rng);
        let src = BackupSource::exact(&m, &beta).unwrap();
        let q = random_q(&mut rng, ns, na, 10.0);
        let cfg = CqlLearnConfig { mu_temperature: t, ..CqlLearnConfig::default() };
        prop_assert!(cql_objective_value(&cfg, &q, &beta, &src).unwrap() >= -1e-12);
    }

    #[test]
    fn bound_shrinks_with_more_data(seed in any::<u64>(), c_r in 0.0f64..2.0, c_t in 0.0f64..2.0) {
        let (mut rng, m) = setup(seed, 3, 2, 0.9);
        let beta = random_policy(3, 2, &mut rng);
        let data = sample_dataset(&m, &beta, 2_000, 20, seed).unwrap();
        let cfg = ConcentrationConfig::new(c_r, c_t, 0.1).unwrap();
        let small = build_empirical_model(&data.prefix(300), MdpShape::of(&m), None).unwrap();
        let large = build_empirical_model(&data, MdpShape::of(&m), None).unwrap();
        let (bs, bl) = (overestimation_bound(&small, &cfg, 0.9, 1.0), overestimation_bound(&large, &cfg, 0.9, 1.0));
        prop_assert!(bl.iter().zip(&bs).all(|(l, s)| l <= s));
        prop_assert!(bl.iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn expected_projection_penalty_with_bias_is_nonnegative(seed in any::<u64>(), ns in 2usize..6, na in 2usize..4, dim in 1usize..5) {
        let (mut rng, m) = setup(seed, ns, na, 0.9);
        let beta = random_policy(ns, na, &mut rng);
        let pi = random_policy(ns, na, &mut rng);
        let dim = dim.min(ns * na);
        let fa = LinearQModel::zeros(Features(random_features(ns * na, dim, true, &mut rng).unwrap()));
        prop_assert!(expected_projection_penalty(&fa, &m, &beta, &pi).unwrap() >= -1e-9);
    }

    #[test]
    fn nu_minimizer_is_optimal(seed in any::<u64>(), ns in 1usize..5, na in 2usize..5) {
        let mut rng = rng_from_seed(seed);
        let beta = random_policy(ns, na, &mut rng);
        let nu = random_policy(ns, na, &mut rng);
        let report = nu_necessity_search(&beta, &nu).unwrap();
        prop_assert!(report.per_state.iter().all(|&p| p <= 1e-12));
        let other = random_policy(ns, na, &mut rng);
        let p = nu_penalty(&other, &nu, &beta).unwrap();
        prop_assert!(p.iter().zip(&report.per_state).all(|(a, b)| *a >= b - 1e-12));
    }

    #[test]
    fn gap_expands_above_required_alpha(seed in any::<u64>(), ns in 1usize..6, na in 2usize..4) {
        let (mut rng, m) = setup(seed, ns, na, 0.9);
        let beta = random_policy(ns, na, &mut rng);
        let mu = random_policy(ns, na, &mut rng);
        let pi = random_policy(ns, na, &mut rng);
        let q = exact_q(&m, &pi).unwrap();
        let q_hat = QTable::new(ns, na, q.as_slice().iter().map(|x| x + rng.random_range(-2.0..2.0)).collect()).unwrap();
        let probe = gap_expanding_check(&m, &beta, &q_hat, &q, &mu, 0.0, &pi).unwrap();
        let r = gap_expanding_check(&m, &beta, &q_hat, &q, &mu, probe.alpha_required + 0.1, &pi).unwrap();
        prop_assert!(r.holds);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), ns in 1usize..6, na in 1usize..5, t in 0.01f64..10.0) {
        let mut rng = rng_from_seed(seed);
        let q = random_q(&mut rng, ns, na, 50.0);
        let p = soft_policy_from_q(&q, t).unwrap();
        for s in 0..ns {
            prop_assert!((p.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let _ = Policy::greedy(&q);
    }
}
