mod common;

use cql_core::analysis::{
    gap_expanding_check, nu_necessity_search, nu_penalty, objective_equivalence_check, simplex_grid,
    zeta_bound,
};
use cql_core::dataset::{build_empirical_model, sample_dataset, ConcentrationConfig, MdpShape};
use cql_core::generators::{chain2, random_mdp, random_policy, rng_from_seed};
use cql_core::mdp::exact_q;
use cql_core::{Policy, QTable};
use rand::Rng;

#[test]
fn nu_minimum_matches_grid_search() {
    let mut rng = rng_from_seed(17);
    let grid = simplex_grid(3, 200);
    for _ in 0..10 {
        let beta = random_policy(2, 3, &mut rng);
        let nu = random_policy(2, 3, &mut rng);
        let report = nu_necessity_search(&beta, &nu).unwrap();
        for s in 0..2 {
            let chi2: f64 = (0..3).map(|a| (nu.prob(s, a) - beta.prob(s, a)).powi(2) / beta.prob(s, a)).sum();
            assert!((report.per_state[s] + 0.25 * chi2).abs() < 1e-12);
            let mut best = f64::INFINITY;
            for row in &grid {
                let v: f64 = (0..3).map(|a| row[a] * (row[a] - nu.prob(s, a)) / beta.prob(s, a)).sum();
                best = best.min(v);
            }
            assert!(best >= report.per_state[s] - 1e-12);
            assert!(best - report.per_state[s] < 1e-3);
        }
        assert!(report.min_penalty < 0.0);
    }
}

#[test]
fn nu_equal_to_behavior_gives_zero_minimum() {
    let beta = Policy::from_rows(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
    let report = nu_necessity_search(&beta, &beta).unwrap();
    assert!(report.min_penalty.abs() < 1e-15);
    let p = nu_penalty(&Policy::uniform(1, 3), &beta, &beta).unwrap();
    assert!(p[0] >= 0.0);
}

#[test]
fn gap_check_against_manual_backup() {
    let mut rng = rng_from_seed(40);
    let mut violated_at_zero = false;
    for _ in 0..100 {
        let m = random_mdp(4, 3, 2, 0.9, &mut rng).unwrap();
        let beta = random_policy(4, 3, &mut rng);
        let mu = random_policy(4, 3, &mut rng);
        let pi = random_policy(4, 3, &mut rng);
        let q = exact_q(&m, &pi).unwrap();
        let noise: Vec<f64> = q.as_slice().iter().map(|x| x + rng.random_range(-1.0..1.0)).collect();
        let q_hat = QTable::new(4, 3, noise).unwrap();
        let probe = gap_expanding_check(&m, &beta, &q_hat, &q, &mu, 0.0, &pi).unwrap();
        let alpha = probe.alpha_required + 0.1;
        let report = gap_expanding_check(&m, &beta, &q_hat, &q, &mu, alpha, &pi).unwrap();
        assert!(report.holds);

        let b_hat = common::policy_backup(&m, &pi, q_hat.as_slice());
        let b = common::policy_backup(&m, &pi, q.as_slice());
        for s in 0..4 {
            let mut l = 0.0;
            let mut r = 0.0;
            for a in 0..3 {
                let i = s * 3 + a;
                let pen = alpha * (mu.prob(s, a) - beta.prob(s, a)) / beta.prob(s, a);
                let w = beta.prob(s, a) - mu.prob(s, a);
                l += w * (b_hat[i] - pen);
                r += w * b[i];
            }
            assert!((report.lhs[s] - l).abs() < 1e-9);
            assert!((report.rhs[s] - r).abs() < 1e-9);
        }
        violated_at_zero |= !probe.holds;
    }
    assert!(violated_at_zero, "no α = 0 violation found");
}

#[test]
fn equivalence_on_two_state_instance() {
    let m = chain2();
    let beta = Policy::from_rows(2, 2, vec![0.6, 0.4, 0.5, 0.5]).unwrap();
    let r = objective_equivalence_check(&m, &beta, 0.5, 0.05).unwrap();
    assert_eq!(r.n_policies, 21 * 21);
    assert!(r.max_abs_diff < 1e-8);
    assert!(r.altered_reward_max_diff < 1e-8);
    assert!(r.matched || r.near_tie);
}

#[test]
fn zeta_without_sampling_error_is_negative_improvement() {
    let m = chain2();
    let beta = Policy::uniform(2, 2);
    let data = sample_dataset(&m, &beta, 4_000, 20, 6).unwrap();
    let model = build_empirical_model(&data, MdpShape::of(&m), None).unwrap();
    let pi_star = Policy::deterministic(2, &[1, 0]).unwrap();
    let zero = ConcentrationConfig::new(0.0, 0.0, 0.1).unwrap();
    let r = zeta_bound(&m, &model, &pi_star, &zero, 1.0).unwrap();
    assert_eq!(r.sampling_term, 0.0);
    assert!((r.zeta + r.improvement_term).abs() < 1e-15);
    // Noiseless exhaustive data: M̂ agrees with M, so J(π*, M̂) = J(π*, M).
    assert!((r.j_pi_star_m_hat - r.j_pi_star_m).abs() < 1e-9);
    assert!(r.improvement_term > 0.0);
    assert!(r.holds);
}

#[test]
fn zeta_for_behavior_itself_is_sampling_term() {
    let m = chain2();
    let beta = Policy::from_rows(2, 2, vec![0.7, 0.3, 0.4, 0.6]).unwrap();
    let data = sample_dataset(&m, &beta, 1_000, 20, 2).unwrap();
    let model = build_empirical_model(&data, MdpShape::of(&m), None).unwrap();
    let cfg = ConcentrationConfig::new(0.3, 0.2, 0.1).unwrap();
    let r = zeta_bound(&m, &model, &model.pi_beta_hat().clone(), &cfg, 1.0).unwrap();
    assert_eq!(r.improvement_term, 0.0);
    assert!(r.zeta >= 0.0);
    assert!((r.zeta - r.sampling_term).abs() < 1e-15);
    assert!(r.holds);
    assert!(r.sentinel_states.is_empty());
}
