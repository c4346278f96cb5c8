mod common;

use cql_core::analysis::lower_bound_step_check;
use cql_core::dataset::{build_empirical_model, sample_dataset, MdpShape};
use cql_core::eval::BackupSource;
use cql_core::generators::{chain2, gridworld};
use cql_core::learn::{
    run_cql, run_cql_from, Actor, AlphaMode, CqlLearnConfig, CqlLearner, LearnBackup, Prior, Regularizer,
};
use cql_core::{Policy, QTable};

fn q_star(m: &cql_core::TabularMdp) -> Vec<f64> {
    let mut q = vec![0.0; m.n_pairs()];
    for _ in 0..2_000 {
        q = common::optimality_backup(m, &q);
    }
    q
}

#[test]
fn lagrange_trace_replays() {
    let m = chain2();
    let beta = Policy::uniform(2, 2);
    let cfg = CqlLearnConfig {
        alpha_mode: AlphaMode::Lagrange {
            tau: 0.05,
            dual_step: 0.5,
            initial_alpha: 1.0,
        },
        iters: 60,
        ..CqlLearnConfig::default()
    };
    let out = run_cql(&cfg, BackupSource::exact(&m, &beta).unwrap(), Some(&m)).unwrap();
    let recs = &out.trace.records;
    assert_eq!(recs[0].alpha, 1.0);
    for w in recs.windows(2) {
        let expected = (w[0].alpha + 0.5 * (w[0].gap - 0.05)).max(0.0);
        assert!((w[1].alpha - expected).abs() < 1e-15);
        assert!(w[1].alpha >= 0.0);
    }
}

#[test]
fn greedy_zero_alpha_is_value_iteration() {
    let m = gridworld(3, 3, 0.1).unwrap();
    let beta = Policy::uniform(m.n_states(), m.n_actions());
    let cfg = CqlLearnConfig {
        alpha_mode: AlphaMode::Fixed(0.0),
        backup: LearnBackup::Optimality,
        actor: Actor::Greedy,
        iters: 1,
        ..CqlLearnConfig::default()
    };
    let src = BackupSource::exact(&m, &beta).unwrap();
    let mut learner = CqlLearner::new(cfg, src).unwrap();
    let mut oracle = vec![0.0; m.n_pairs()];
    for _ in 0..50 {
        learner.step().unwrap();
        oracle = common::optimality_backup(&m, &oracle);
        assert!(common::max_abs_diff(learner.state().q.as_slice(), &oracle) < 1e-12);
    }
}

#[test]
fn zero_alpha_recovers_optimal_policy() {
    let m = chain2();
    let beta = Policy::uniform(2, 2);
    let cfg = CqlLearnConfig {
        alpha_mode: AlphaMode::Fixed(0.0),
        backup: LearnBackup::Optimality,
        actor: Actor::Greedy,
        iters: 400,
        ..CqlLearnConfig::default()
    };
    let out = run_cql(&cfg, BackupSource::exact(&m, &beta).unwrap(), Some(&m)).unwrap();
    assert_eq!(out.policy, Policy::deterministic(2, &[1, 0]).unwrap());
    assert!(common::max_abs_diff(out.q.as_slice(), &q_star(&m)) < 1e-9);
}

#[test]
fn large_alpha_keeps_to_data_support() {
    let m = chain2();
    let expert = Policy::deterministic(2, &[1, 0]).unwrap();
    let data = sample_dataset(&m, &expert, 500, 25, 3).unwrap();
    let model = build_empirical_model(&data, MdpShape::of(&m), None).unwrap();
    assert_eq!(model.pi_beta_hat(), &expert);
    for backup in [LearnBackup::PolicyEval, LearnBackup::Optimality] {
        let cfg = CqlLearnConfig {
            alpha_mode: AlphaMode::Fixed(100.0),
            backup,
            actor: Actor::Greedy,
            iters: 300,
            ..CqlLearnConfig::default()
        };
        let out = run_cql(&cfg, BackupSource::Empirical(&model), Some(&m)).unwrap();
        assert_eq!(out.policy, expert);
    }
}

#[test]
fn lower_bound_step_holds_every_iteration() {
    let mut checked = 0;
    for (slip, alpha) in [(0.0, 0.5), (0.2, 2.0), (0.4, 5.0)] {
        let m = gridworld(3, 3, slip).unwrap();
        let beta = Policy::uniform(m.n_states(), m.n_actions());
        let src = BackupSource::exact(&m, &beta).unwrap();
        let cfg = CqlLearnConfig {
            alpha_mode: AlphaMode::Fixed(alpha),
            iters: 1,
            policy_step: 0.05,
            ..CqlLearnConfig::default()
        };
        let t = cfg.mu_temperature;
        let q0 = QTable::zeros(m.n_states(), m.n_actions());
        let mut learner = CqlLearner::from_state(cfg, src, q0, beta.clone()).unwrap();
        for _ in 0..100 {
            let info = learner.step().unwrap();
            let r = lower_bound_step_check(&info, &src, t, 1e-9).unwrap();
            assert!(r.holds, "slip {slip} α {alpha} k {}: {:?}", info.k, r.value_gap);
            checked += r.premise_count;
        }
    }
    assert!(checked > 0, "premise never held");
}

#[test]
fn behavior_prior_at_high_temperature_is_plain_backup() {
    let m = chain2();
    let beta = Policy::from_rows(2, 2, vec![0.4, 0.6, 0.7, 0.3]).unwrap();
    let src = BackupSource::exact(&m, &beta).unwrap();
    let cfg = CqlLearnConfig {
        regularizer: Regularizer::Rho(Prior::Behavior),
        mu_temperature: 1e8,
        iters: 1,
        ..CqlLearnConfig::default()
    };
    let q0 = QTable::new(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap();
    let mut learner = CqlLearner::from_state(cfg, src, q0, beta.clone()).unwrap();
    let info = learner.step().unwrap();
    assert!(common::max_abs_diff(info.q_next.as_slice(), info.backup.as_slice()) < 1e-7);
    assert!(info.gap.abs() < 1e-6);
}

#[test]
fn penalty_lowers_learned_values() {
    let m = chain2();
    let beta = Policy::uniform(2, 2);
    let base = CqlLearnConfig {
        alpha_mode: AlphaMode::Fixed(0.0),
        iters: 200,
        ..CqlLearnConfig::default()
    };
    let q0 = QTable::zeros(2, 2);
    let plain = run_cql_from(&base, BackupSource::exact(&m, &beta).unwrap(), q0.clone(), beta.clone(), None).unwrap();
    let cons = run_cql_from(
        &CqlLearnConfig {
            alpha_mode: AlphaMode::Fixed(1.0),
            ..base
        },
        BackupSource::exact(&m, &beta).unwrap(),
        q0,
        beta.clone(),
        None,
    )
    .unwrap();
    let v_plain: f64 = common::v_of(plain.q.as_slice(), &plain.policy).iter().sum();
    let v_cons: f64 = common::v_of(cons.q.as_slice(), &cons.policy).iter().sum();
    assert!(v_cons < v_plain);
}
