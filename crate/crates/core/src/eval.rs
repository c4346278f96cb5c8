//! Conservative policy evaluation.
//!
//! Two penalized backups are provided:
//!
//! - [`Variant::Eq1`] subtracts `α·μ(a|s)/π̂_β(a|s)` from every backup, which
//!   pushes every Q-value below its true value once `α` is large enough.
//! - [`Variant::Eq2`] subtracts `α·(μ(a|s)/π̂_β(a|s) − 1)`, which raises values at
//!   actions the data favours and only bounds the policy value `V^π` from below.
//!
//! Backups come either from a known MDP with a given behavior policy or from an
//! [`EmpiricalModel`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    empirical_bellman_op, empirical_optimality_op, overestimation_bound, overestimation_bound_states,
    ConcentrationConfig, EmpiricalModel,
};
use crate::error::{check_len, invalid, Error, Result};
use crate::math;
use crate::mdp::{
    bellman_optimality_op, bellman_policy_op, discounted_state_marginal, solve_policy_system, Policy,
    QTable, TabularMdp,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Eq1,
    Eq2,
}

/// Where backups and the behavior policy come from.
#[derive(Debug, Clone, Copy)]
pub enum BackupSource<'a> {
    /// The true operator of `mdp`, with `behavior` in place of `π̂_β`.
    Exact {
        mdp: &'a TabularMdp,
        behavior: &'a Policy,
    },
    /// `B̂^π` built from dataset counts, with the empirical behavior policy.
    Empirical(&'a EmpiricalModel),
}

impl<'a> BackupSource<'a> {
    pub fn exact(mdp: &'a TabularMdp, behavior: &'a Policy) -> Result<Self> {
        mdp.check_policy(behavior)?;
        Ok(Self::Exact { mdp, behavior })
    }

    pub fn behavior(&self) -> &'a Policy {
        match self {
            Self::Exact { behavior, .. } => behavior,
            Self::Empirical(m) => m.pi_beta_hat(),
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            Self::Exact { mdp, .. } => mdp.n_states(),
            Self::Empirical(m) => m.n_states(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Self::Exact { mdp, .. } => mdp.n_actions(),
            Self::Empirical(m) => m.n_actions(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Self::Exact { mdp, .. } => mdp.gamma(),
            Self::Empirical(m) => m.gamma(),
        }
    }

    pub fn r_max(&self) -> f64 {
        match self {
            Self::Exact { mdp, .. } => mdp.r_max(),
            Self::Empirical(m) => m.r_max(),
        }
    }

    /// `2·r_max/(1−γ)`.
    pub fn q_bound(&self) -> f64 {
        2.0 * self.r_max() / (1.0 - self.gamma())
    }

    pub fn policy_backup(&self, policy: &Policy, q: &QTable) -> Result<QTable> {
        match self {
            Self::Exact { mdp, .. } => bellman_policy_op(mdp, policy, q),
            Self::Empirical(m) => empirical_bellman_op(m, policy, q),
        }
    }

    pub fn optimality_backup(&self, q: &QTable) -> Result<QTable> {
        match self {
            Self::Exact { mdp, .. } => bellman_optimality_op(mdp, q),
            Self::Empirical(m) => empirical_optimality_op(m, q),
        }
    }

    /// State weights used for expectations over `s ∼ D`: `d^{π_β}` for an exact
    /// source, empirical state frequencies otherwise.
    pub fn state_weights(&self) -> Result<Vec<f64>> {
        match self {
            Self::Exact { mdp, behavior } => discounted_state_marginal(mdp, behavior),
            Self::Empirical(m) => Ok(m.state_frequency()),
        }
    }

    /// Whether `s` carries data (always true for an exact source).
    pub fn visited_state(&self, s: usize) -> bool {
        match self {
            Self::Exact { .. } => true,
            Self::Empirical(m) => m.visited_state(s),
        }
    }

    pub(crate) fn check_policy(&self, pi: &Policy) -> Result<()> {
        check_len("policy states", self.n_states(), pi.n_states())?;
        check_len("policy actions", self.n_actions(), pi.n_actions())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqlEvalConfig {
    pub alpha: f64,
    /// Distribution under which Q-values are pushed down.
    pub mu: Policy,
    pub variant: Variant,
    pub max_iters: usize,
    pub tol: f64,
    /// Scale the penalty at each pair by `1/n(s,a)` (the squared sentinel at zero
    /// counts) instead of dividing by `π̂_β`. Needs an empirical source.
    pub counts_weighted_alpha: bool,
    /// Clamp iterates to `±2·r_max/(1−γ)`.
    pub clamp: bool,
}

impl CqlEvalConfig {
    pub fn new(alpha: f64, mu: Policy, variant: Variant) -> Self {
        Self {
            alpha,
            mu,
            variant,
            max_iters: 100_000,
            tol: 1e-10,
            counts_weighted_alpha: false,
            clamp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha", format!("{} must be finite and non-negative", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be positive"));
        }
        Ok(())
    }
}

/// The per-pair amount subtracted from each backup, already scaled by `α`.
pub fn penalty(cfg: &CqlEvalConfig, src: &BackupSource) -> Result<Vec<f64>> {
    cfg.validate()?;
    src.check_policy(&cfg.mu)?;
    let beta = src.behavior();
    let (ns, na) = (src.n_states(), src.n_actions());
    let mut out = Vec::with_capacity(ns * na);
    if cfg.counts_weighted_alpha {
        let BackupSource::Empirical(model) = src else {
            return Err(invalid("counts_weighted_alpha", "requires an empirical backup"));
        };
        for (i, w) in model.inv_sqrt_counts().iter().enumerate() {
            let (s, a) = (i / na, i % na);
            let mu = cfg.mu.prob(s, a);
            let x = match cfg.variant {
                Variant::Eq1 => mu,
                Variant::Eq2 => mu - beta.prob(s, a),
            };
            out.push(cfg.alpha * x * w * w);
        }
        return Ok(out);
    }
    for s in 0..ns {
        for a in 0..na {
            let (mu, b) = (cfg.mu.prob(s, a), beta.prob(s, a));
            let ratio = if b > 0.0 {
                mu / b
            } else if mu > 0.0 {
                return Err(Error::SupportViolation { state: s, action: a });
            } else {
                // No data and no penalty mass: the pair is left to the backup.
                out.push(0.0);
                continue;
            };
            let x = match cfg.variant {
                Variant::Eq1 => ratio,
                Variant::Eq2 => ratio - 1.0,
            };
            out.push(cfg.alpha * x);
        }
    }
    Ok(out)
}

fn penalized_step(
    cfg: &CqlEvalConfig,
    src: &BackupSource,
    target: &Policy,
    q: &QTable,
    pen: &[f64],
) -> Result<QTable> {
    let b = src.policy_backup(target, q)?;
    let next: Vec<f64> = b.as_slice().iter().zip(pen).map(|(x, p)| x - p).collect();
    let out = QTable::new(src.n_states(), src.n_actions(), next)?;
    Ok(if cfg.clamp { out.clamped(src.q_bound()) } else { out })
}

fn require_variant(cfg: &CqlEvalConfig, v: Variant) -> Result<()> {
    if cfg.variant == v {
        Ok(())
    } else {
        Err(invalid("variant", format!("expected {v:?}, config holds {:?}", cfg.variant)))
    }
}

/// `Q̂^{k+1} = B^π Q̂^k − α·μ/π̂_β`.
pub fn cql_eq1_iterate(cfg: &CqlEvalConfig, src: &BackupSource, target: &Policy, q: &QTable) -> Result<QTable> {
    require_variant(cfg, Variant::Eq1)?;
    let pen = penalty(cfg, src)?;
    penalized_step(cfg, src, target, q, &pen)
}

/// `Q̂^{k+1} = B^π Q̂^k − α·(μ/π̂_β − 1)`.
pub fn cql_eq2_iterate(cfg: &CqlEvalConfig, src: &BackupSource, target: &Policy, q: &QTable) -> Result<QTable> {
    require_variant(cfg, Variant::Eq2)?;
    let pen = penalty(cfg, src)?;
    penalized_step(cfg, src, target, q, &pen)
}

/// Fixed point of the configured iterate.
///
/// An exact, unclamped source is solved directly as `(I − γP^π)^{-1}(r − penalty)`;
/// otherwise the iterate runs from zero until successive iterates differ by at
/// most `tol` in sup norm.
pub fn cql_fixed_point(cfg: &CqlEvalConfig, src: &BackupSource, target: &Policy) -> Result<QTable> {
    src.check_policy(target)?;
    let pen = penalty(cfg, src)?;
    if let (BackupSource::Exact { mdp, .. }, false) = (src, cfg.clamp) {
        let rhs: Vec<f64> = mdp.rewards().iter().zip(&pen).map(|(r, p)| r - p).collect();
        let q = solve_policy_system(mdp, target, &rhs)?;
        return QTable::new(mdp.n_states(), mdp.n_actions(), q);
    }
    let mut q = QTable::zeros(src.n_states(), src.n_actions());
    let mut diff = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let next = penalized_step(cfg, src, target, &q, &pen)?;
        diff = math::max_abs_diff(next.as_slice(), q.as_slice());
        q = next;
        if diff <= cfg.tol {
            return Ok(q);
        }
    }
    Err(Error::NotConverged {
        iters: cfg.max_iters,
        residual: diff,
    })
}

/// `D_CQL(π, π_β)(s) = Σ_a π(a|s)(π(a|s)/π_β(a|s) − 1)`.
pub fn d_cql(pi: &Policy, pi_beta: &Policy) -> Result<Vec<f64>> {
    check_len("policy states", pi.n_states(), pi_beta.n_states())?;
    check_len("policy actions", pi.n_actions(), pi_beta.n_actions())?;
    let mut out = Vec::with_capacity(pi.n_states());
    for s in 0..pi.n_states() {
        let mut acc = 0.0;
        for a in 0..pi.n_actions() {
            let (p, b) = (pi.prob(s, a), pi_beta.prob(s, a));
            if p == 0.0 {
                continue;
            }
            if b == 0.0 {
                return Err(Error::SupportViolation { state: s, action: a });
            }
            acc += p * (p / b - 1.0);
        }
        out.push(acc);
    }
    Ok(out)
}

/// A penalty-weight threshold plus what was left out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaThreshold {
    /// `+∞` when the formula divides by zero.
    pub value: f64,
    /// Entries excluded for lack of data (pairs for the pointwise threshold,
    /// states for the expected-value threshold).
    pub excluded: usize,
    pub note: Option<String>,
}

/// Smallest `α` for which the empirical pointwise-penalty fixed point lies below
/// `Q^π` on the concentration event:
/// `max_{(s,a)∈D} bound(s,a) · max_{(s,a)∈D} π̂_β(a|s)/μ(a|s)`.
pub fn alpha_threshold_eq1(
    model: &EmpiricalModel,
    cfg: &ConcentrationConfig,
    mu: &Policy,
    gamma: f64,
    r_max: f64,
) -> Result<AlphaThreshold> {
    cfg.validate()?;
    model.check_policy(mu)?;
    let bound = overestimation_bound(model, cfg, gamma, r_max);
    let beta = model.pi_beta_hat();
    let na = model.n_actions();
    let (mut max_b, mut max_ratio, mut excluded) = (0.0f64, 0.0f64, 0);
    let mut note = None;
    for (i, &b) in bound.iter().enumerate() {
        let (s, a) = (i / na, i % na);
        if !model.visited_pair(s, a) {
            excluded += 1;
            if mu.prob(s, a) > 0.0 && model.visited_state(s) {
                return Err(Error::SupportViolation { state: s, action: a });
            }
            continue;
        }
        max_b = max_b.max(b);
        let m = mu.prob(s, a);
        if m == 0.0 {
            max_ratio = f64::INFINITY;
            note = Some(format!("mu has no mass on visited pair ({s}, {a})"));
        } else {
            max_ratio = max_ratio.max(beta.prob(s, a) / m);
        }
    }
    let value = if max_b == 0.0 { 0.0 } else { max_b * max_ratio };
    Ok(AlphaThreshold { value, excluded, note })
}

/// Smallest `α` for which the empirical expected-value-penalty fixed point
/// satisfies `V̂^π ≤ V^π`:
/// `max_{s∈D} bound(s) · max_{s∈D} 1/D_CQL(π, π̂_β)(s)`, with state counts.
pub fn alpha_threshold_eq2(
    model: &EmpiricalModel,
    cfg: &ConcentrationConfig,
    target: &Policy,
    gamma: f64,
    r_max: f64,
) -> Result<AlphaThreshold> {
    cfg.validate()?;
    model.check_policy(target)?;
    let bound = overestimation_bound_states(model, cfg, gamma, r_max);
    let div = d_cql(target, model.pi_beta_hat())?;
    let (mut max_b, mut max_inv, mut excluded) = (0.0f64, 0.0f64, 0);
    let mut note = None;
    for s in 0..model.n_states() {
        if !model.visited_state(s) {
            excluded += 1;
            continue;
        }
        max_b = max_b.max(bound[s]);
        if div[s] > 0.0 {
            max_inv = max_inv.max(1.0 / div[s]);
        } else {
            max_inv = f64::INFINITY;
            note = Some(format!("D_CQL is zero at visited state {s}: the policy matches the data there"));
        }
    }
    let value = if max_b == 0.0 { 0.0 } else { max_b * max_inv };
    Ok(AlphaThreshold { value, excluded, note })
}

/// Side-by-side comparison of a conservative estimate with the true value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub alpha: f64,
    pub v_hat: Vec<f64>,
    pub v: Vec<f64>,
    /// `v_hat − v` per state.
    pub gap: Vec<f64>,
    pub threshold: Option<f64>,
    /// States where `v_hat > v + slack`.
    pub violated: Vec<bool>,
}

pub fn eval_report(
    cfg: &CqlEvalConfig,
    q_hat: &QTable,
    v_true: &[f64],
    target: &Policy,
    threshold: Option<f64>,
    slack: f64,
) -> Result<EvalReport> {
    check_len("value table", q_hat.n_states(), v_true.len())?;
    let v_hat = q_hat.value_under(target).v;
    let gap: Vec<f64> = v_hat.iter().zip(v_true).map(|(a, b)| a - b).collect();
    let violated = gap.iter().map(|g| *g > slack).collect();
    Ok(EvalReport {
        variant: cfg.variant,
        alpha: cfg.alpha,
        v_hat,
        v: v_true.to_vec(),
        gap,
        threshold,
        violated,
    })
}
