//! Checks of the conservative-learning guarantees on concrete instances.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{ConcentrationConfig, EmpiricalModel};
use crate::error::{check_len, invalid, Error, Result};
use crate::eval::{cql_fixed_point, d_cql, BackupSource, CqlEvalConfig, Variant};
use crate::learn::StepInfo;
use crate::math;
use crate::mdp::{
    bellman_policy_op, discounted_state_marginal, exact_q, return_j, soft_policy_from_q, total_variation,
    Policy, QTable, TabularMdp,
};

/// States whose `Δ̂` falls below this are reported as vacuous.
pub const VACUOUS_DELTA: f64 = 1e-10;
/// Required margin of `lhs − rhs` at non-vacuous states.
pub const GAP_SLACK: f64 = 1e-12;

/// One gap-expansion comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `E_{π_β}[Q̂^{k+1}] − E_{μ_k}[Q̂^{k+1}]` per state.
    pub lhs: Vec<f64>,
    /// `E_{π_β}[Q^{k+1}] − E_{μ_k}[Q^{k+1}]` per state.
    pub rhs: Vec<f64>,
    /// `Δ̂(s) = Σ_a μ_k(μ_k/π_β − 1)`.
    pub delta_hat: Vec<f64>,
    pub vacuous: Vec<bool>,
    /// `max(((μ_k − π_β)ᵀ B(Q̂^k − Q^k))(s)/Δ̂(s), 0)` per state.
    pub per_state_alpha: Vec<f64>,
    /// Largest entry of `per_state_alpha` over non-vacuous states.
    pub alpha_required: f64,
    /// `max_s D_TV(π_β, μ_k)(s)·r_max/(1−γ)/Δ̂(s)`, free of `Q^k`.
    pub worst_case_alpha: f64,
    /// `lhs − rhs > GAP_SLACK` at every non-vacuous state.
    pub holds: bool,
}

/// Applies one penalized backup to `Q̂^k` and one plain backup to `Q^k` (both
/// under `backup_policy`) and compares the in-distribution gaps.
pub fn gap_expanding_check(
    mdp: &TabularMdp,
    behavior: &Policy,
    q_hat_k: &QTable,
    q_k: &QTable,
    mu_k: &Policy,
    alpha_k: f64,
    backup_policy: &Policy,
) -> Result<GapReport> {
    if !(alpha_k >= 0.0 && alpha_k.is_finite()) {
        return Err(invalid("alpha_k", "must be finite and non-negative"));
    }
    mdp.check_policy(behavior)?;
    mdp.check_policy(mu_k)?;
    let b_hat = bellman_policy_op(mdp, backup_policy, q_hat_k)?;
    let b = bellman_policy_op(mdp, backup_policy, q_k)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q_hat_next = b_hat.as_slice().to_vec();
    for s in 0..ns {
        for a in 0..na {
            let (m, pb) = (mu_k.prob(s, a), behavior.prob(s, a));
            if pb > 0.0 {
                q_hat_next[s * na + a] -= alpha_k * (m - pb) / pb;
            } else if m > 0.0 {
                return Err(Error::SupportViolation { state: s, action: a });
            }
        }
    }
    let delta_hat = d_cql(mu_k, behavior)?;
    let tv = total_variation(behavior, mu_k)?;
    let horizon = mdp.r_max() / (1.0 - mdp.gamma());
    let (mut lhs, mut rhs, mut vacuous, mut per_state_alpha) = (vec![], vec![], vec![], vec![]);
    let (mut alpha_required, mut worst_case_alpha, mut holds) = (0.0f64, 0.0f64, true);
    for s in 0..ns {
        let (pb, m) = (behavior.row(s), mu_k.row(s));
        let qh = &q_hat_next[s * na..(s + 1) * na];
        let q = b.row(s);
        let l = math::dot(pb, qh) - math::dot(m, qh);
        let r = math::dot(pb, q) - math::dot(m, q);
        let num: f64 = (0..na)
            .map(|a| (m[a] - pb[a]) * (b_hat.get(s, a) - b.get(s, a)))
            .sum();
        let vac = delta_hat[s] <= VACUOUS_DELTA;
        let need = if vac { 0.0 } else { (num / delta_hat[s]).max(0.0) };
        if !vac {
            alpha_required = alpha_required.max(need);
            worst_case_alpha = worst_case_alpha.max(tv[s] * horizon / delta_hat[s]);
            holds &= l - r > GAP_SLACK;
        }
        lhs.push(l);
        rhs.push(r);
        vacuous.push(vac);
        per_state_alpha.push(need);
    }
    Ok(GapReport {
        lhs,
        rhs,
        delta_hat,
        vacuous,
        per_state_alpha,
        alpha_required,
        worst_case_alpha,
        holds,
    })
}

/// Every distribution over `n_actions` with entries in multiples of `1/k`.
pub fn simplex_grid(n_actions: usize, k: usize) -> Vec<Vec<f64>> {
    fn rec(left: usize, slots: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / k as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(left - c, slots - 1, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, n_actions, k, &mut Vec::new(), &mut out);
    out
}

/// Result of comparing the penalized-evaluation objective with the penalized return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub n_policies: usize,
    /// Largest `|lhs(π) − rhs(π)|` over the grid.
    pub max_abs_diff: f64,
    /// Largest `|lhs(π) − J(π, M̂ with reward r − α(π/π̂_β − 1))|`.
    pub altered_reward_max_diff: f64,
    pub argmax_lhs: Policy,
    pub argmax_rhs: Policy,
    pub best_lhs: f64,
    pub best_rhs: f64,
    pub matched: bool,
    /// The best and second-best grid values are within `1e-8`: the argmax is
    /// not resolved by this grid.
    pub near_tie: bool,
}

/// Compares, over a product simplex grid of policies,
/// `lhs(π) = E_{ρ₀}[V̂^π]` (expected-value-penalty fixed point in `M̂` with `μ = π`) and
/// `rhs(π) = J(π, M̂) − α/(1−γ)·E_{d^π_{M̂}}[D_CQL(π, π̂_β)]`.
///
/// Grid policies placing mass outside the support of `π̂_β` are skipped.
pub fn objective_equivalence_check(
    mdp_hat: &TabularMdp,
    pi_beta_hat: &Policy,
    alpha: f64,
    grid_step: f64,
) -> Result<EquivalenceReport> {
    mdp_hat.check_policy(pi_beta_hat)?;
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(invalid("grid_step", "must lie in (0, 1]"));
    }
    let k = libm::round(1.0 / grid_step) as usize;
    let (ns, na) = (mdp_hat.n_states(), mdp_hat.n_actions());
    let rows = simplex_grid(na, k);
    let total = rows.len().checked_pow(ns as u32).filter(|&t| t <= 2_000_000);
    let Some(total) = total else {
        return Err(invalid("grid_step", "grid too large for this MDP"));
    };
    let src = BackupSource::exact(mdp_hat, pi_beta_hat)?;
    let gamma = mdp_hat.gamma();
    let mut idx = vec![0usize; ns];
    let mut report: Option<EquivalenceReport> = None;
    let mut values: Vec<f64> = Vec::new();
    for _ in 0..total {
        let probs: Vec<f64> = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        advance(&mut idx, rows.len());
        let pi = Policy::from_rows(ns, na, probs)?;
        let supported = pi
            .as_slice()
            .iter()
            .zip(pi_beta_hat.as_slice())
            .all(|(p, b)| *p == 0.0 || *b > 0.0);
        if !supported {
            continue;
        }
        let cfg = CqlEvalConfig::new(alpha, pi.clone(), Variant::Eq2);
        let q_hat = cql_fixed_point(&cfg, &src, &pi)?;
        let lhs = math::dot(mdp_hat.initial_dist(), q_hat.value_under(&pi).as_slice());
        let d = discounted_state_marginal(mdp_hat, &pi)?;
        let div = d_cql(&pi, pi_beta_hat)?;
        let rhs = return_j(mdp_hat, &pi)? - alpha / (1.0 - gamma) * math::dot(&d, &div);
        let altered: Vec<f64> = (0..ns * na)
            .map(|i| {
                let b = pi_beta_hat.as_slice()[i];
                let ratio = if b > 0.0 { pi.as_slice()[i] / b - 1.0 } else { 0.0 };
                mdp_hat.rewards()[i] - alpha * ratio
            })
            .collect();
        let alt_q = crate::mdp::solve_policy_system(mdp_hat, &pi, &altered)?;
        let alt_j = math::dot(mdp_hat.initial_dist(), &pi.expect(&alt_q));
        values.push(lhs);
        let r = report.get_or_insert_with(|| EquivalenceReport {
            n_policies: 0,
            max_abs_diff: 0.0,
            altered_reward_max_diff: 0.0,
            argmax_lhs: pi.clone(),
            argmax_rhs: pi.clone(),
            best_lhs: f64::NEG_INFINITY,
            best_rhs: f64::NEG_INFINITY,
            matched: false,
            near_tie: false,
        });
        r.n_policies += 1;
        r.max_abs_diff = r.max_abs_diff.max(libm::fabs(lhs - rhs));
        r.altered_reward_max_diff = r.altered_reward_max_diff.max(libm::fabs(lhs - alt_j));
        if lhs > r.best_lhs {
            r.best_lhs = lhs;
            r.argmax_lhs = pi.clone();
        }
        if rhs > r.best_rhs {
            r.best_rhs = rhs;
            r.argmax_rhs = pi;
        }
    }
    let mut r = report.ok_or_else(|| invalid("grid_step", "no grid policy lies in the behavior support"))?;
    r.matched = r.argmax_lhs == r.argmax_rhs;
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    r.near_tie = values.len() > 1 && values[0] - values[1] < 1e-8;
    Ok(r)
}

fn advance(idx: &mut [usize], base: usize) {
    for i in idx.iter_mut() {
        *i += 1;
        if *i < base {
            return;
        }
        *i = 0;
    }
}

/// Sampling-error bound on `|J(π, M̂) − J(π, M)|` for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBound {
    pub j_hat: f64,
    pub j_true: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeImprovementReport {
    pub zeta: f64,
    pub alpha: f64,
    /// `J(π*, M)`.
    pub j_pi_star_m: f64,
    /// `J(π̂_β, M)`.
    pub j_beta_m: f64,
    pub j_pi_star_m_hat: f64,
    pub j_beta_m_hat: f64,
    /// `2·c·E_{d^{π*}_{M̂}}[√|A|/√n(s)·√(D_CQL(π*, π̂_β)(s) + 1)]`.
    pub sampling_term: f64,
    /// `J(π*, M̂) − J(π̂_β, M̂)`.
    pub improvement_term: f64,
    /// `J(π*, M) ≥ J(π̂_β, M) − ζ`.
    pub holds: bool,
    pub bound_pi_star: PolicyBound,
    pub bound_beta: PolicyBound,
    /// States without data that carry mass under `d^{π*}_{M̂}`.
    pub sentinel_states: Vec<usize>,
}

/// `c = C_r/(1−γ) + γ·r_max·C_T/(1−γ)²`.
pub fn sampling_constant(cfg: &ConcentrationConfig, gamma: f64, r_max: f64) -> f64 {
    cfg.c_r / (1.0 - gamma) + gamma * r_max * cfg.c_t / ((1.0 - gamma) * (1.0 - gamma))
}

fn sampling_expectation(m_hat: &TabularMdp, model: &EmpiricalModel, pi: &Policy) -> Result<(f64, Vec<f64>)> {
    let d = discounted_state_marginal(m_hat, pi)?;
    let div = d_cql(pi, model.pi_beta_hat())?;
    let inv = model.inv_sqrt_state_counts();
    let sqrt_a = libm::sqrt(model.n_actions() as f64);
    let e = (0..d.len())
        .map(|s| d[s] * sqrt_a * inv[s] * libm::sqrt(div[s] + 1.0))
        .sum();
    Ok((e, d))
}

/// The safe-improvement slack `ζ` of `π*` over the empirical behavior policy,
/// evaluated against the true MDP.
pub fn zeta_bound(
    mdp: &TabularMdp,
    model: &EmpiricalModel,
    pi_star: &Policy,
    cfg: &ConcentrationConfig,
    alpha: f64,
) -> Result<SafeImprovementReport> {
    cfg.validate()?;
    check_len("model states", mdp.n_states(), model.n_states())?;
    check_len("model actions", mdp.n_actions(), model.n_actions())?;
    let beta = model.pi_beta_hat();
    let m_hat = model.to_mdp(mdp.initial_dist().to_vec())?;
    let c = sampling_constant(cfg, mdp.gamma(), mdp.r_max());
    let (e_star, d_star) = sampling_expectation(&m_hat, model, pi_star)?;
    let (e_beta, _) = sampling_expectation(&m_hat, model, beta)?;
    let j_pi_star_m_hat = return_j(&m_hat, pi_star)?;
    let j_beta_m_hat = return_j(&m_hat, beta)?;
    let j_pi_star_m = return_j(mdp, pi_star)?;
    let j_beta_m = return_j(mdp, beta)?;
    let sampling_term = 2.0 * c * e_star;
    let improvement_term = j_pi_star_m_hat - j_beta_m_hat;
    let zeta = sampling_term - improvement_term;
    let bound = |j_hat: f64, j_true: f64, e: f64| PolicyBound {
        j_hat,
        j_true,
        bound: c * e,
        holds: libm::fabs(j_hat - j_true) <= c * e,
    };
    let sentinel_states = (0..mdp.n_states())
        .filter(|&s| d_star[s] > 0.0 && !model.visited_state(s))
        .collect();
    Ok(SafeImprovementReport {
        zeta,
        alpha,
        j_pi_star_m,
        j_beta_m,
        j_pi_star_m_hat,
        j_beta_m_hat,
        sampling_term,
        improvement_term,
        holds: j_pi_star_m >= j_beta_m - zeta,
        bound_pi_star: bound(j_pi_star_m_hat, j_pi_star_m, e_star),
        bound_beta: bound(j_beta_m_hat, j_beta_m, e_beta),
        sentinel_states,
    })
}

/// Minimum over `π` of `p(π)(s) = Σ_a π(a|s)(π(a|s) − ν(a|s))/π̂_β(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuSearchReport {
    /// `p(π*)(s)` at the minimizer `π* = ½ν + ½π̂_β`, equal to `−¼χ²(ν‖π̂_β)(s)`.
    pub per_state: Vec<f64>,
    /// Smallest per-state minimum.
    pub min_penalty: f64,
    pub witness: Policy,
}

/// The per-state penalty `p(π)(s)` of maximizing under `ν` instead of `π̂_β`.
pub fn nu_penalty(pi: &Policy, nu: &Policy, pi_beta_hat: &Policy) -> Result<Vec<f64>> {
    check_len("policy states", pi_beta_hat.n_states(), pi.n_states())?;
    check_len("policy states", pi_beta_hat.n_states(), nu.n_states())?;
    check_len("policy actions", pi_beta_hat.n_actions(), pi.n_actions())?;
    check_len("policy actions", pi_beta_hat.n_actions(), nu.n_actions())?;
    let na = pi.n_actions();
    let mut out = Vec::with_capacity(pi.n_states());
    for s in 0..pi.n_states() {
        let mut acc = 0.0;
        for a in 0..na {
            let b = pi_beta_hat.prob(s, a);
            if b <= 0.0 {
                return Err(Error::SupportViolation { state: s, action: a });
            }
            let p = pi.prob(s, a);
            acc += p * (p - nu.prob(s, a)) / b;
        }
        out.push(acc);
    }
    Ok(out)
}

pub fn nu_necessity_search(pi_beta_hat: &Policy, nu: &Policy) -> Result<NuSearchReport> {
    let witness = pi_beta_hat.mix(nu, 0.5)?;
    let per_state = nu_penalty(&witness, nu, pi_beta_hat)?;
    let min_penalty = per_state.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(NuSearchReport {
        per_state,
        min_penalty,
        witness,
    })
}

/// Outcome of the per-iteration lower-bound implication for the entropy regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundStep {
    /// Premise `E_{π_Q}[π_Q/π̂_β − 1] ≥ max_a(π_Q/π̂_β)·D_TV(π̂^{k+1}, π_Q)` per state.
    pub premise: Vec<bool>,
    /// `V̂^{k+1}(s) − V^{k+1}(s)` per state, both under `π̂^{k+1}`.
    pub value_gap: Vec<f64>,
    /// States excluded because `π̂_β` lacks full support there.
    pub excluded: Vec<usize>,
    /// The implication holds at every checked state.
    pub holds: bool,
    /// Number of states where the premise held.
    pub premise_count: usize,
}

/// Checks that where the slow-policy premise holds, the penalized value
/// `E_{π̂^{k+1}}[Q̂^{k+1}]` does not exceed the unpenalized `E_{π̂^{k+1}}[B Q̂^k]`.
///
/// `π_Q = softmax(Q̂^k/t)`, matching the entropy regularizer at temperature `t`.
pub fn lower_bound_step_check(
    info: &StepInfo,
    src: &BackupSource,
    mu_temperature: f64,
    slack: f64,
) -> Result<LowerBoundStep> {
    let beta = src.behavior();
    let pi_q = soft_policy_from_q(&info.q_prev, mu_temperature)?;
    let tv = total_variation(&info.policy_next, &pi_q)?;
    let na = beta.n_actions();
    let (mut premise, mut value_gap, mut excluded) = (vec![], vec![], vec![]);
    let mut holds = true;
    let mut premise_count = 0;
    for s in 0..beta.n_states() {
        let full = beta.row(s).iter().all(|&b| b > 0.0) && src.visited_state(s);
        let full = full
            && match src {
                BackupSource::Empirical(m) => (0..na).all(|a| m.visited_pair(s, a)),
                BackupSource::Exact { .. } => true,
            };
        let p = info.policy_next.row(s);
        let gap = math::dot(p, info.q_next.row(s)) - math::dot(p, info.backup.row(s));
        value_gap.push(gap);
        if !full {
            excluded.push(s);
            premise.push(false);
            continue;
        }
        let (pq, b) = (pi_q.row(s), beta.row(s));
        let div: f64 = (0..na).map(|a| pq[a] * (pq[a] / b[a] - 1.0)).sum();
        let max_ratio = (0..na).map(|a| pq[a] / b[a]).fold(0.0, f64::max);
        let ok = div >= max_ratio * tv[s];
        premise.push(ok);
        if ok {
            premise_count += 1;
            holds &= gap <= slack;
        }
    }
    Ok(LowerBoundStep {
        premise,
        value_gap,
        excluded,
        holds,
        premise_count,
    })
}

/// `max_{s,a} (Q̂ − Q^π)` for a fixed point, handy for spotting pointwise violations.
pub fn max_pointwise_excess(mdp: &TabularMdp, target: &Policy, q_hat: &QTable) -> Result<f64> {
    let q = exact_q(mdp, target)?;
    Ok(q_hat
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::chain2;

    #[test]
    fn grid_counts() {
        assert_eq!(simplex_grid(2, 20).len(), 21);
        assert_eq!(simplex_grid(3, 2).len(), 6);
        assert!(simplex_grid(3, 4).iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn nu_equal_beta_gives_zero() {
        let beta = Policy::from_rows(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let r = nu_necessity_search(&beta, &beta).unwrap();
        assert!(r.min_penalty.abs() < 1e-15);
        assert_eq!(r.witness, beta);
    }

    #[test]
    fn deterministic_nu_witness() {
        let beta = Policy::uniform(1, 2);
        let nu = Policy::deterministic(2, &[0]).unwrap();
        let r = nu_necessity_search(&beta, &nu).unwrap();
        assert!((r.witness.prob(0, 0) - 0.75).abs() < 1e-15);
        // −¼·χ²(ν‖β) = −¼·(1/0.5 − 1).
        assert!((r.min_penalty + 0.25).abs() < 1e-15);
    }

    #[test]
    fn equal_q_gap_is_alpha_delta() {
        let m = chain2();
        let beta = Policy::uniform(2, 2);
        let mu = Policy::from_rows(2, 2, vec![0.8, 0.2, 0.3, 0.7]).unwrap();
        let q = QTable::new(2, 2, vec![0.5, 1.0, -0.2, 0.4]).unwrap();
        let r = gap_expanding_check(&m, &beta, &q, &q, &mu, 0.7, &beta).unwrap();
        for s in 0..2 {
            assert!((r.lhs[s] - r.rhs[s] - 0.7 * r.delta_hat[s]).abs() < 1e-12);
        }
        assert!(r.holds);
        assert_eq!(r.alpha_required, 0.0);
    }

    #[test]
    fn mu_equal_beta_is_vacuous() {
        let m = chain2();
        let beta = Policy::uniform(2, 2);
        let q = QTable::zeros(2, 2);
        let r = gap_expanding_check(&m, &beta, &q, &q, &beta, 1.0, &beta).unwrap();
        assert!(r.vacuous.iter().all(|&v| v));
        assert_eq!(r.lhs, r.rhs);
    }
}
