//! Offline policy learning with a conservative critic.
//!
//! Each iteration picks the penalty distribution `μ_k` from the regularizer,
//! applies the closed-form critic update
//! `Q̂^{k+1} = B Q̂^k − α_k (μ_k − π̂_β)/π̂_β`
//! with `B` either the policy backup of the current actor or the optimality
//! backup, and then moves the actor toward the new Q-values. Pairs without data
//! (or outside the behavior support) are set to the floor `−2·r_max/(1−γ)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::BackupSource;
use crate::math;
use crate::mdp::{return_j, soft_policy_from_q, total_variation, Policy, QTable, TabularMdp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prior {
    Uniform,
    PreviousPolicy,
    Behavior,
}

/// Proposal distribution for the variance regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PHat {
    Uniform,
    /// `∝ 1/n(s,a)` over visited actions (`∝ 1/π_β` for an exact source).
    InverseCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regularizer {
    /// Entropy: `μ = softmax(Q)`.
    H,
    /// KL to a prior: `μ ∝ ρ·exp(Q)`.
    Rho(Prior),
    /// Robust expectation under `P̂`: `E_P̂[Q] + √(2δ·Var_P̂(Q)/n(s))`.
    Var { p_hat: PHat, robust_delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaMode {
    Fixed(f64),
    /// Dual ascent on `α` against the budget `tau`.
    Lagrange {
        tau: f64,
        dual_step: f64,
        initial_alpha: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnBackup {
    /// `B^{π_k}` (actor-critic).
    PolicyEval,
    /// `B*` (Q-learning).
    Optimality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Actor {
    /// `π_{k+1} = (1−step)·π_k + step·softmax(Q̂^{k+1}/temperature)`.
    SoftGreedy { temperature: f64 },
    /// `π_{k+1} = argmax Q̂^{k+1}`, lowest index on ties.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqlLearnConfig {
    pub regularizer: Regularizer,
    pub alpha_mode: AlphaMode,
    pub backup: LearnBackup,
    pub actor: Actor,
    pub iters: usize,
    pub policy_step: f64,
    /// Temperature of `μ` for the entropy and KL regularizers.
    pub mu_temperature: f64,
    pub clamp: bool,
}

impl Default for CqlLearnConfig {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::H,
            alpha_mode: AlphaMode::Fixed(1.0),
            backup: LearnBackup::PolicyEval,
            actor: Actor::SoftGreedy { temperature: 1.0 },
            iters: 200,
            policy_step: 0.1,
            mu_temperature: 1.0,
            clamp: false,
        }
    }
}

impl CqlLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(invalid("iters", "must be positive"));
        }
        if !(self.policy_step > 0.0 && self.policy_step <= 1.0) {
            return Err(invalid("policy_step", "must lie in (0, 1]"));
        }
        if !(self.mu_temperature > 0.0 && self.mu_temperature.is_finite()) {
            return Err(invalid("mu_temperature", "must be positive"));
        }
        if let Actor::SoftGreedy { temperature } = self.actor {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(invalid("temperature", "must be positive"));
            }
        }
        if let Regularizer::Var { robust_delta, .. } = self.regularizer {
            if !(robust_delta > 0.0 && robust_delta.is_finite()) {
                return Err(invalid("robust_delta", "must be positive"));
            }
        }
        match self.alpha_mode {
            AlphaMode::Fixed(a) => {
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(invalid("alpha", format!("{a} must be finite and non-negative")));
                }
            }
            AlphaMode::Lagrange {
                tau,
                dual_step,
                initial_alpha,
            } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(invalid("tau", "must be positive"));
                }
                if !(dual_step > 0.0 && dual_step.is_finite()) {
                    return Err(invalid("dual_step", "must be positive"));
                }
                if !(initial_alpha >= 0.0 && initial_alpha.is_finite()) {
                    return Err(invalid("initial_alpha", "must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }

    fn initial_alpha(&self) -> f64 {
        match self.alpha_mode {
            AlphaMode::Fixed(a) => a,
            AlphaMode::Lagrange { initial_alpha, .. } => initial_alpha,
        }
    }
}

fn prior_row<'p>(prior: Prior, s: usize, prev: &'p Policy, src: &'p BackupSource, uniform: &'p [f64]) -> &'p [f64] {
    match prior {
        Prior::Uniform => uniform,
        Prior::PreviousPolicy => prev.row(s),
        Prior::Behavior => src.behavior().row(s),
    }
}

fn p_hat(kind: PHat, src: &BackupSource) -> Policy {
    let (ns, na) = (src.n_states(), src.n_actions());
    match kind {
        PHat::Uniform => Policy::uniform(ns, na),
        PHat::InverseCounts => {
            let mut probs = vec![0.0; ns * na];
            for s in 0..ns {
                let row = &mut probs[s * na..(s + 1) * na];
                for (a, p) in row.iter_mut().enumerate() {
                    *p = match src {
                        BackupSource::Empirical(m) => {
                            let n = m.count(s, a);
                            if n > 0 {
                                1.0 / n as f64
                            } else {
                                0.0
                            }
                        }
                        BackupSource::Exact { behavior, .. } => {
                            let b = behavior.prob(s, a);
                            if b > 0.0 {
                                1.0 / b
                            } else {
                                0.0
                            }
                        }
                    };
                }
                if row.iter().all(|&p| p == 0.0) {
                    row.iter_mut().for_each(|p| *p = 1.0);
                }
            }
            Policy::from_unnormalized(ns, na, probs)
        }
    }
}

/// `√(2δ/n(s))` per state; zero for an exact source, sentinel-based at unvisited states.
fn robust_scale(src: &BackupSource, robust_delta: f64) -> Vec<f64> {
    match src {
        BackupSource::Exact { mdp, .. } => vec![0.0; mdp.n_states()],
        BackupSource::Empirical(m) => m
            .inv_sqrt_state_counts()
            .into_iter()
            .map(|w| libm::sqrt(2.0 * robust_delta) * w)
            .collect(),
    }
}

/// Inner maximizer of the regularized objective.
///
/// `softmax(Q/t)` for the entropy regularizer, `ρ·exp(Q/t)/Z` for the KL
/// regularizer, and the proposal `P̂` for the variance regularizer (its
/// variance term enters the critic through [`critic_mu`]).
pub fn mu_from_regularizer(cfg: &CqlLearnConfig, q: &QTable, prev_policy: &Policy, src: &BackupSource) -> Result<Policy> {
    src.check_policy(prev_policy)?;
    let (ns, na) = (q.n_states(), q.n_actions());
    let t = cfg.mu_temperature;
    match cfg.regularizer {
        Regularizer::H => soft_policy_from_q(q, t),
        Regularizer::Rho(prior) => {
            let uniform = vec![1.0 / na as f64; na];
            let mut probs = vec![0.0; ns * na];
            for s in 0..ns {
                let rho = prior_row(prior, s, prev_policy, src, &uniform);
                let row = q.row(s);
                let m = row
                    .iter()
                    .zip(rho)
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(&x, _)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return Err(Error::DegeneratePrior { state: s });
                }
                for a in 0..na {
                    probs[s * na + a] = rho[a] * libm::exp((row[a] - m) / t);
                }
            }
            Ok(Policy::from_unnormalized(ns, na, probs))
        }
        Regularizer::Var { p_hat: kind, .. } => Ok(p_hat(kind, src)),
    }
}

/// The signed weights whose deviation from `π̂_β` drives the critic penalty.
///
/// Equal to `μ` for the entropy and KL regularizers. For the variance
/// regularizer this is the gradient of the robust expectation at `Q`:
/// `P̂(a)·(1 + c(s)·(Q(s,a) − E_P̂ Q)/σ_P̂(s))` with `c(s) = √(2δ/n(s))`.
pub fn critic_mu(cfg: &CqlLearnConfig, q: &QTable, prev_policy: &Policy, src: &BackupSource) -> Result<Vec<f64>> {
    let mu = mu_from_regularizer(cfg, q, prev_policy, src)?;
    let Regularizer::Var { robust_delta, .. } = cfg.regularizer else {
        return Ok(mu.as_slice().to_vec());
    };
    let na = q.n_actions();
    let scale = robust_scale(src, robust_delta);
    let mut out = mu.as_slice().to_vec();
    for s in 0..q.n_states() {
        let (p, row) = (mu.row(s), q.row(s));
        let mean = math::dot(p, row);
        let var: f64 = p.iter().zip(row).map(|(w, x)| w * (x - mean) * (x - mean)).sum();
        if var <= 0.0 || scale[s] == 0.0 {
            continue;
        }
        let sd = libm::sqrt(var);
        for a in 0..na {
            out[s * na + a] = p[a] * (1.0 + scale[s] * (row[a] - mean) / sd);
        }
    }
    Ok(out)
}

/// The regularizer gap `Σ_s w(s)[soft-max of Q under the regularizer − E_{π̂_β} Q]`.
///
/// `w` is the empirical state frequency (or `d^{π_β}` for an exact source).
pub fn cql_objective_value(cfg: &CqlLearnConfig, q: &QTable, prev_policy: &Policy, src: &BackupSource) -> Result<f64> {
    src.check_policy(prev_policy)?;
    let w = src.state_weights()?;
    let beta = src.behavior();
    let na = q.n_actions();
    let t = cfg.mu_temperature;
    let uniform = vec![1.0 / na as f64; na];
    let scale = match cfg.regularizer {
        Regularizer::Var { robust_delta, .. } => robust_scale(src, robust_delta),
        _ => Vec::new(),
    };
    let p_hat_pol = match cfg.regularizer {
        Regularizer::Var { p_hat: kind, .. } => Some(p_hat(kind, src)),
        _ => None,
    };
    let mut total = 0.0;
    for s in 0..q.n_states() {
        if w[s] == 0.0 {
            continue;
        }
        let row = q.row(s);
        let scaled: Vec<f64> = row.iter().map(|x| x / t).collect();
        let soft = match cfg.regularizer {
            Regularizer::H => t * math::logsumexp(&scaled),
            Regularizer::Rho(prior) => {
                let rho = prior_row(prior, s, prev_policy, src, &uniform);
                let v = t * math::weighted_logsumexp(rho, &scaled);
                if v == f64::NEG_INFINITY {
                    return Err(Error::DegeneratePrior { state: s });
                }
                v
            }
            Regularizer::Var { .. } => {
                let p = p_hat_pol.as_ref().expect("set for Var").row(s);
                let mean = math::dot(p, row);
                let var: f64 = p.iter().zip(row).map(|(w, x)| w * (x - mean) * (x - mean)).sum();
                mean + scale[s] * libm::sqrt(var.max(0.0))
            }
        };
        total += w[s] * (soft - math::dot(beta.row(s), row));
    }
    Ok(total)
}

/// Projected dual ascent: `max(0, α + step·(gap − τ))`.
pub fn lagrange_alpha_update(alpha: f64, gap: f64, tau: f64, dual_step: f64) -> f64 {
    (alpha + dual_step * (gap - tau)).max(0.0)
}

/// Learner state between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnState {
    pub k: usize,
    pub q: QTable,
    pub policy: Policy,
    pub alpha: f64,
}

/// Everything produced by one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub k: usize,
    /// Penalty weight used in this iteration.
    pub alpha: f64,
    /// Regularizer gap at `Q̂^k`.
    pub gap: f64,
    pub mu: Policy,
    /// `B Q̂^k` before the penalty.
    pub backup: QTable,
    pub q_prev: QTable,
    pub q_next: QTable,
    pub policy_prev: Policy,
    pub policy_next: Policy,
    /// `max_s D_TV(π_{k+1}, softmax(Q̂^k/t_μ))`.
    pub dtv: f64,
}

/// One critic solve plus one actor update.
pub fn cql_learn_step(cfg: &CqlLearnConfig, src: &BackupSource, state: &LearnState) -> Result<(LearnState, StepInfo)> {
    cfg.validate()?;
    src.check_policy(&state.policy)?;
    let q = &state.q;
    let (ns, na) = (src.n_states(), src.n_actions());
    let mu = mu_from_regularizer(cfg, q, &state.policy, src)?;
    let weights = critic_mu(cfg, q, &state.policy, src)?;
    let gap = cql_objective_value(cfg, q, &state.policy, src)?;
    let backup = match cfg.backup {
        LearnBackup::PolicyEval => src.policy_backup(&state.policy, q)?,
        LearnBackup::Optimality => src.optimality_backup(q)?,
    };
    let beta = src.behavior();
    let floor = -src.q_bound();
    let alpha = state.alpha;
    let mut next = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let i = s * na + a;
            let b = beta.prob(s, a);
            let has_data = match src {
                BackupSource::Empirical(m) => m.visited_pair(s, a),
                BackupSource::Exact { .. } => b > 0.0,
            };
            next[i] = if has_data {
                backup.as_slice()[i] - alpha * (weights[i] - b) / b
            } else {
                floor
            };
        }
    }
    let mut q_next = QTable::new(ns, na, next)?;
    if cfg.clamp {
        q_next = q_next.clamped(src.q_bound());
    }
    let policy_next = match cfg.actor {
        Actor::SoftGreedy { temperature } => {
            state.policy.mix(&soft_policy_from_q(&q_next, temperature)?, cfg.policy_step)?
        }
        Actor::Greedy => Policy::greedy(&q_next),
    };
    let soft_prev = soft_policy_from_q(q, cfg.mu_temperature)?;
    let dtv = total_variation(&policy_next, &soft_prev)?
        .into_iter()
        .fold(0.0, f64::max);
    let next_alpha = match cfg.alpha_mode {
        AlphaMode::Fixed(a) => a,
        AlphaMode::Lagrange { tau, dual_step, .. } => lagrange_alpha_update(alpha, gap, tau, dual_step),
    };
    let info = StepInfo {
        k: state.k,
        alpha,
        gap,
        mu,
        backup,
        q_prev: q.clone(),
        q_next: q_next.clone(),
        policy_prev: state.policy.clone(),
        policy_next: policy_next.clone(),
        dtv,
    };
    let new_state = LearnState {
        k: state.k + 1,
        q: q_next,
        policy: policy_next,
        alpha: next_alpha,
    };
    Ok((new_state, info))
}

/// Stepwise driver around [`cql_learn_step`].
pub struct CqlLearner<'a> {
    cfg: CqlLearnConfig,
    src: BackupSource<'a>,
    state: LearnState,
}

impl<'a> CqlLearner<'a> {
    /// Starts from `Q ≡ 0` with `π_0 = π̂_β` for the soft actor or `argmax 0` for the greedy one.
    pub fn new(cfg: CqlLearnConfig, src: BackupSource<'a>) -> Result<Self> {
        let q0 = QTable::zeros(src.n_states(), src.n_actions());
        let pi0 = match cfg.actor {
            Actor::SoftGreedy { .. } => src.behavior().clone(),
            Actor::Greedy => Policy::greedy(&q0),
        };
        Self::from_state(cfg, src, q0, pi0)
    }

    pub fn from_state(cfg: CqlLearnConfig, src: BackupSource<'a>, q0: QTable, pi0: Policy) -> Result<Self> {
        cfg.validate()?;
        src.check_policy(&pi0)?;
        let alpha = cfg.initial_alpha();
        Ok(Self {
            cfg,
            src,
            state: LearnState {
                k: 0,
                q: q0,
                policy: pi0,
                alpha,
            },
        })
    }

    pub fn state(&self) -> &LearnState {
        &self.state
    }

    pub fn step(&mut self) -> Result<StepInfo> {
        let (next, info) = cql_learn_step(&self.cfg, &self.src, &self.state)?;
        self.state = next;
        Ok(info)
    }
}

/// One trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnRecord {
    pub k: usize,
    pub alpha: f64,
    pub gap: f64,
    pub dtv: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub q_mean: f64,
    /// `J(π_{k+1}, M̂)`.
    pub j_hat: Option<f64>,
    /// `J(π_{k+1}, M)` in the scoring MDP.
    pub j_true: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearnTrace {
    pub records: Vec<LearnRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutcome {
    pub policy: Policy,
    pub q: QTable,
    pub alpha: f64,
    pub trace: LearnTrace,
}

/// Runs `cfg.iters` iterations from the default start.
///
/// With a `scoring` MDP the trace carries `J` in the true MDP and, for an
/// empirical source, in `M̂` built with the scoring MDP's initial distribution.
pub fn run_cql(cfg: &CqlLearnConfig, src: BackupSource, scoring: Option<&TabularMdp>) -> Result<LearnOutcome> {
    let learner = CqlLearner::new(cfg.clone(), src)?;
    drive(learner, scoring)
}

/// [`run_cql`] from a given `Q̂^0` and `π_0`.
pub fn run_cql_from(
    cfg: &CqlLearnConfig,
    src: BackupSource,
    q0: QTable,
    pi0: Policy,
    scoring: Option<&TabularMdp>,
) -> Result<LearnOutcome> {
    let learner = CqlLearner::from_state(cfg.clone(), src, q0, pi0)?;
    drive(learner, scoring)
}

fn drive(mut learner: CqlLearner, scoring: Option<&TabularMdp>) -> Result<LearnOutcome> {
    let m_hat = match (learner.src, scoring) {
        (BackupSource::Exact { mdp, .. }, _) => Some(mdp.clone()),
        (BackupSource::Empirical(m), Some(true_mdp)) => Some(m.to_mdp(true_mdp.initial_dist().to_vec())?),
        (BackupSource::Empirical(_), None) => None,
    };
    let mut trace = LearnTrace::default();
    for _ in 0..learner.cfg.iters {
        let info = learner.step()?;
        let pi = &learner.state.policy;
        let qs = learner.state.q.as_slice();
        let j_hat = m_hat.as_ref().map(|m| return_j(m, pi)).transpose()?;
        let j_true = scoring.map(|m| return_j(m, pi)).transpose()?;
        trace.records.push(LearnRecord {
            k: info.k,
            alpha: info.alpha,
            gap: info.gap,
            dtv: info.dtv,
            q_min: qs.iter().copied().fold(f64::INFINITY, f64::min),
            q_max: qs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            q_mean: qs.iter().sum::<f64>() / qs.len() as f64,
            j_hat,
            j_true,
        });
    }
    Ok(LearnOutcome {
        policy: learner.state.policy,
        q: learner.state.q,
        alpha: learner.state.alpha,
        trace,
    })
}
