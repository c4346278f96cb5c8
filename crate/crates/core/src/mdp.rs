//! Finite MDPs, policies, Q/V tables and exact dynamic programming.
//!
//! Every table is stored flat and row-major: `q[s * n_actions + a]`,
//! `transition[(s * n_actions + a) * n_states + s']`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::math;

/// Tolerance on row sums of stochastic vectors.
pub const PROB_TOL: f64 = 1e-12;

/// Largest `|S|·|A|` solved with a dense factorization; larger systems iterate.
pub const DENSE_LIMIT: usize = 1024;

const ITER_TOL: f64 = 1e-12;
const ITER_MAX: usize = 1_000_000;

fn check_distribution(what: &'static str, p: &[f64], offset: usize) -> Result<()> {
    let mut sum = 0.0;
    for (i, &x) in p.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what,
                index: offset + i,
            });
        }
        if x < 0.0 {
            return Err(Error::InvalidProbability {
                what,
                detail: format!("negative entry {x} at index {}", offset + i),
            });
        }
        sum += x;
    }
    if libm::fabs(sum - 1.0) > PROB_TOL {
        return Err(Error::InvalidProbability {
            what,
            detail: format!("row starting at index {offset} sums to {sum}"),
        });
    }
    Ok(())
}

fn check_finite(what: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Raw serialized form of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpParts {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub reward: Vec<f64>,
    pub transition: Vec<f64>,
    pub initial_dist: Vec<f64>,
}

/// A validated finite MDP `(S, A, T, r, γ, ρ₀)` with reward bound `r_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpParts", into = "MdpParts")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    reward: Vec<f64>,
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
}

impl TryFrom<MdpParts> for TabularMdp {
    type Error = Error;
    fn try_from(p: MdpParts) -> Result<Self> {
        TabularMdp::new(
            p.n_states,
            p.n_actions,
            p.gamma,
            p.r_max,
            p.reward,
            p.transition,
            p.initial_dist,
        )
    }
}

impl From<TabularMdp> for MdpParts {
    fn from(m: TabularMdp) -> Self {
        MdpParts {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            r_max: m.r_max,
            reward: m.reward,
            transition: m.transition,
            initial_dist: m.initial_dist,
        }
    }
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        r_max: f64,
        reward: Vec<f64>,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(invalid("n_states", "must be positive"));
        }
        if n_actions == 0 {
            return Err(invalid("n_actions", "must be positive"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(invalid("gamma", format!("{gamma} is outside (0, 1)")));
        }
        if !(r_max.is_finite() && r_max >= 0.0) {
            return Err(invalid("r_max", format!("{r_max} is not a finite bound")));
        }
        let sa = n_states * n_actions;
        check_len("reward", sa, reward.len())?;
        check_len("transition", sa * n_states, transition.len())?;
        check_len("initial_dist", n_states, initial_dist.len())?;
        check_finite("reward", &reward)?;
        if let Some(i) = reward.iter().position(|r| libm::fabs(*r) > r_max) {
            return Err(invalid(
                "reward",
                format!("|r| = {} at index {i} exceeds r_max = {r_max}", libm::fabs(reward[i])),
            ));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution("transition", row, i * n_states)?;
        }
        check_distribution("initial_dist", &initial_dist, 0)?;
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            r_max,
            reward,
            transition,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }
    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }
    /// `T(·|s,a)`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Same dynamics and rewards with another discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut m = self.clone();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(invalid("gamma", format!("{gamma} is outside (0, 1)")));
        }
        m.gamma = gamma;
        Ok(m)
    }

    /// Same MDP with another initial distribution.
    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        check_len("initial_dist", self.n_states, initial_dist.len())?;
        check_distribution("initial_dist", &initial_dist, 0)?;
        let mut m = self.clone();
        m.initial_dist = initial_dist;
        Ok(m)
    }

    /// Same MDP with another reward table.
    pub fn with_reward(&self, reward: Vec<f64>, r_max: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.gamma,
            r_max,
            reward,
            self.transition.clone(),
            self.initial_dist.clone(),
        )
    }

    /// The clamp bound `2·r_max/(1−γ)`.
    pub fn q_bound(&self) -> f64 {
        2.0 * self.r_max / (1.0 - self.gamma)
    }

    /// FNV-1a hash of the full parameter set.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.n_states as u64);
        eat(self.n_actions as u64);
        eat(self.gamma.to_bits());
        eat(self.r_max.to_bits());
        for x in self.reward.iter().chain(&self.transition).chain(&self.initial_dist) {
            eat(x.to_bits());
        }
        h
    }

    /// Identifier derived from [`fingerprint`](Self::fingerprint).
    pub fn id(&self) -> alloc::string::String {
        format!("mdp-{:016x}", self.fingerprint())
    }

    pub(crate) fn check_policy(&self, pi: &Policy) -> Result<()> {
        check_len("policy states", self.n_states, pi.n_states())?;
        check_len("policy actions", self.n_actions, pi.n_actions())
    }

    pub(crate) fn check_q(&self, q: &QTable) -> Result<()> {
        check_len("q-table states", self.n_states, q.n_states())?;
        check_len("q-table actions", self.n_actions, q.n_actions())
    }

    /// `Σ_{s'} T(s'|s,a) v(s')` for every pair.
    pub fn expect_next(&self, v: &[f64]) -> Vec<f64> {
        self.transition
            .chunks(self.n_states)
            .map(|row| math::dot(row, v))
            .collect()
    }
}

/// Row-stochastic action distribution per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyParts", into = "PolicyParts")]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParts {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TryFrom<PolicyParts> for Policy {
    type Error = Error;
    fn try_from(p: PolicyParts) -> Result<Self> {
        Policy::from_rows(p.n_states, p.n_actions, p.probs)
    }
}

impl From<Policy> for PolicyParts {
    fn from(p: Policy) -> Self {
        PolicyParts {
            n_states: p.n_states,
            n_actions: p.n_actions,
            probs: p.probs,
        }
    }
}

impl Policy {
    /// Validates a flat row-major probability table.
    pub fn from_rows(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(invalid("policy shape", "dimensions must be positive"));
        }
        check_len("policy", n_states * n_actions, probs.len())?;
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution("policy", row, s * n_actions)?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Rows are normalized by their sum; used for internally computed distributions.
    pub(crate) fn from_unnormalized(n_states: usize, n_actions: usize, mut probs: Vec<f64>) -> Self {
        for row in probs.chunks_mut(n_actions) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Puts all mass on `actions[s]`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(invalid("action", format!("{a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::from_rows(actions.len(), n_actions, probs)
    }

    /// Argmax policy of `q`; the lowest action index wins ties.
    pub fn greedy(q: &QTable) -> Self {
        let actions: Vec<usize> = (0..q.n_states()).map(|s| math::argmax(q.row(s))).collect();
        Self::deterministic(q.n_actions(), &actions).expect("argmax is in range")
    }

    /// `(1−w)·self + w·other`.
    pub fn mix(&self, other: &Policy, w: f64) -> Result<Self> {
        check_len("policy states", self.n_states, other.n_states)?;
        check_len("policy actions", self.n_actions, other.n_actions)?;
        if !(0.0..=1.0).contains(&w) {
            return Err(invalid("mixture weight", format!("{w} outside [0, 1]")));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| (1.0 - w) * p + w * q)
            .collect();
        Ok(Self::from_unnormalized(self.n_states, self.n_actions, probs))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// `Σ_a π(a|s) x(s,a)` per state.
    pub fn expect(&self, x: &[f64]) -> Vec<f64> {
        self.probs
            .chunks(self.n_actions)
            .zip(x.chunks(self.n_actions))
            .map(|(p, v)| math::dot(p, v))
            .collect()
    }
}

/// Q(s,a) values; all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QParts", into = "QParts")]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    q: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QParts {
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
}

impl TryFrom<QParts> for QTable {
    type Error = Error;
    fn try_from(p: QParts) -> Result<Self> {
        QTable::new(p.n_states, p.n_actions, p.q)
    }
}

impl From<QTable> for QParts {
    fn from(q: QTable) -> Self {
        QParts {
            n_states: q.n_states,
            n_actions: q.n_actions,
            q: q.q,
        }
    }
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, q: Vec<f64>) -> Result<Self> {
        check_len("q-table", n_states * n_actions, q.len())?;
        check_finite("q-table", &q)?;
        Ok(Self {
            n_states,
            n_actions,
            q,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::constant(n_states, n_actions, 0.0)
    }

    pub fn constant(n_states: usize, n_actions: usize, c: f64) -> Self {
        Self {
            n_states,
            n_actions,
            q: vec![c; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }
    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.q
    }

    /// Clamps every entry to `[-bound, bound]`.
    pub fn clamped(mut self, bound: f64) -> Self {
        self.q.iter_mut().for_each(|x| *x = x.clamp(-bound, bound));
        self
    }

    /// `V(s) = Σ_a π(a|s) Q(s,a)`.
    pub fn value_under(&self, pi: &Policy) -> ValueTable {
        ValueTable {
            v: pi.expect(&self.q),
        }
    }

    pub fn max_per_state(&self) -> Vec<f64> {
        self.q
            .chunks(self.n_actions)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// V(s) values; all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub v: Vec<f64>,
}

impl ValueTable {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        check_finite("value table", &v)?;
        Ok(Self { v })
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }
}

/// `(B^π Q)(s,a) = r(s,a) + γ Σ_{s'} T(s'|s,a) Σ_{a'} π(a'|s') Q(s',a')`.
pub fn bellman_policy_op(mdp: &TabularMdp, policy: &Policy, q: &QTable) -> Result<QTable> {
    mdp.check_policy(policy)?;
    mdp.check_q(q)?;
    let v = policy.expect(q.as_slice());
    Ok(backup_with_values(mdp, &v))
}

/// `(B* Q)(s,a) = r(s,a) + γ Σ_{s'} T(s'|s,a) max_{a'} Q(s',a')`.
pub fn bellman_optimality_op(mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
    mdp.check_q(q)?;
    Ok(backup_with_values(mdp, &q.max_per_state()))
}

fn backup_with_values(mdp: &TabularMdp, v: &[f64]) -> QTable {
    let next = mdp.expect_next(v);
    let q = mdp
        .reward
        .iter()
        .zip(next)
        .map(|(r, e)| r + mdp.gamma * e)
        .collect();
    QTable {
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        q,
    }
}

/// The pair-to-pair matrix `P^π[(s,a),(s',a')] = T(s'|s,a) π(a'|s')`.
pub fn pair_transition_matrix(mdp: &TabularMdp, policy: &Policy) -> Result<Matrix> {
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut p = Matrix::zeros(ns * na, ns * na);
    for i in 0..ns * na {
        let row = &mdp.transition[i * ns..(i + 1) * ns];
        for (s2, &t) in row.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            for a2 in 0..na {
                p[(i, s2 * na + a2)] += t * policy.prob(s2, a2);
            }
        }
    }
    Ok(p)
}

/// The state-to-state matrix `P^π_S[s,s'] = Σ_a π(a|s) T(s'|s,a)`.
pub fn state_transition_matrix(mdp: &TabularMdp, policy: &Policy) -> Result<Matrix> {
    mdp.check_policy(policy)?;
    let ns = mdp.n_states;
    let mut p = Matrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (s2, &t) in mdp.next_dist(s, a).iter().enumerate() {
                p[(s, s2)] += w * t;
            }
        }
    }
    Ok(p)
}

/// Solves `(I − γP^π) x = rhs` over state-action pairs.
///
/// Dense LU up to [`DENSE_LIMIT`] pairs, fixed-point sweeps beyond.
pub fn solve_policy_system(mdp: &TabularMdp, policy: &Policy, rhs: &[f64]) -> Result<Vec<f64>> {
    check_len("right-hand side", mdp.n_pairs(), rhs.len())?;
    if mdp.n_pairs() <= DENSE_LIMIT {
        let p = pair_transition_matrix(mdp, policy)?;
        let mut a = Matrix::identity(mdp.n_pairs());
        for i in 0..mdp.n_pairs() {
            for j in 0..mdp.n_pairs() {
                a[(i, j)] -= mdp.gamma * p[(i, j)];
            }
        }
        linalg::solve(&a, rhs)
    } else {
        mdp.check_policy(policy)?;
        let mut x = rhs.to_vec();
        for _ in 0..ITER_MAX {
            let v = policy.expect(&x);
            let next: Vec<f64> = mdp
                .expect_next(&v)
                .into_iter()
                .zip(rhs)
                .map(|(e, r)| r + mdp.gamma * e)
                .collect();
            let diff = math::max_abs_diff(&next, &x);
            x = next;
            if diff <= ITER_TOL {
                return Ok(x);
            }
        }
        let v = policy.expect(&x);
        let residual = mdp
            .expect_next(&v)
            .iter()
            .zip(rhs)
            .zip(&x)
            .map(|((e, r), q)| libm::fabs(r + mdp.gamma * e - q))
            .fold(0.0, f64::max);
        Err(Error::NotConverged {
            iters: ITER_MAX,
            residual,
        })
    }
}

/// Solves `(I − γP^π_S) x = rhs` over states.
pub fn solve_state_system(mdp: &TabularMdp, policy: &Policy, rhs: &[f64]) -> Result<Vec<f64>> {
    check_len("right-hand side", mdp.n_states, rhs.len())?;
    let p = state_transition_matrix(mdp, policy)?;
    let mut a = Matrix::identity(mdp.n_states);
    for i in 0..mdp.n_states {
        for j in 0..mdp.n_states {
            a[(i, j)] -= mdp.gamma * p[(i, j)];
        }
    }
    linalg::solve(&a, rhs)
}

/// `Q^π = (I − γP^π)^{-1} r`.
pub fn exact_q(mdp: &TabularMdp, policy: &Policy) -> Result<QTable> {
    let q = solve_policy_system(mdp, policy, &mdp.reward)?;
    QTable::new(mdp.n_states, mdp.n_actions, q)
}

/// `V^π(s) = Σ_a π(a|s) Q^π(s,a)`.
pub fn policy_value(mdp: &TabularMdp, policy: &Policy) -> Result<ValueTable> {
    Ok(exact_q(mdp, policy)?.value_under(policy))
}

/// `J(π, M) = Σ_s ρ₀(s) V^π(s)`, without the `1/(1−γ)` normalization.
pub fn return_j(mdp: &TabularMdp, policy: &Policy) -> Result<f64> {
    let v = policy_value(mdp, policy)?;
    Ok(math::dot(&mdp.initial_dist, v.as_slice()))
}

/// `d^π = (1−γ)(I − γ(P^π_S)ᵀ)^{-1} ρ₀`.
pub fn discounted_state_marginal(mdp: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    let p = state_transition_matrix(mdp, policy)?;
    let n = mdp.n_states;
    let mut a = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] -= mdp.gamma * p[(j, i)];
        }
    }
    let rhs: Vec<f64> = mdp.initial_dist.iter().map(|r| (1.0 - mdp.gamma) * r).collect();
    let mut d = linalg::solve(&a, &rhs)?;
    // Round-off can leave tiny negatives at unreachable states.
    d.iter_mut().for_each(|x| *x = x.max(0.0));
    Ok(d)
}

/// `π(a|s) ∝ exp(Q(s,a)/temperature)`.
pub fn soft_policy_from_q(q: &QTable, temperature: f64) -> Result<Policy> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid("temperature", format!("{temperature} must be positive")));
    }
    let na = q.n_actions;
    let mut probs = vec![0.0; q.q.len()];
    for (out, row) in probs.chunks_mut(na).zip(q.q.chunks(na)) {
        math::softmax_into(row, temperature, out);
    }
    Ok(Policy {
        n_states: q.n_states,
        n_actions: na,
        probs,
    })
}

/// `½ Σ_a |p(a|s) − q(a|s)|` per state.
pub fn total_variation(p: &Policy, q: &Policy) -> Result<Vec<f64>> {
    check_len("policy states", p.n_states, q.n_states)?;
    check_len("policy actions", p.n_actions, q.n_actions)?;
    Ok((0..p.n_states)
        .map(|s| {
            0.5 * p
                .row(s)
                .iter()
                .zip(q.row(s))
                .map(|(x, y)| libm::fabs(x - y))
                .sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::chain2;

    #[test]
    fn zero_q_backs_up_to_reward() {
        let m = chain2();
        let out = bellman_policy_op(&m, &Policy::uniform(2, 2), &QTable::zeros(2, 2)).unwrap();
        assert_eq!(out.as_slice(), m.rewards());
        let out = bellman_optimality_op(&m, &QTable::zeros(2, 2)).unwrap();
        assert_eq!(out.as_slice(), m.rewards());
    }

    #[test]
    fn chain2_uniform_backup_of_ones() {
        let m = chain2();
        let out = bellman_policy_op(&m, &Policy::uniform(2, 2), &QTable::constant(2, 2, 1.0)).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert!((out.get(s, a) - (m.reward(s, a) + 0.9)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = chain2();
        let err = bellman_policy_op(&m, &Policy::uniform(3, 2), &QTable::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn constructor_rejects_bad_rows() {
        let bad = TabularMdp::new(1, 1, 0.9, 1.0, vec![0.0], vec![0.9], vec![1.0]);
        assert!(matches!(bad, Err(Error::InvalidProbability { .. })));
        let bad = TabularMdp::new(1, 1, 1.0, 1.0, vec![0.0], vec![1.0], vec![1.0]);
        assert!(matches!(bad, Err(Error::InvalidParameter { .. })));
        let bad = TabularMdp::new(1, 1, 0.5, 1.0, vec![2.0], vec![1.0], vec![1.0]);
        assert!(matches!(bad, Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn constant_reward_value_is_geometric() {
        let m = chain2().with_reward(vec![0.5; 4], 1.0).unwrap();
        let pi = Policy::uniform(2, 2);
        for v in exact_q(&m, &pi).unwrap().as_slice() {
            assert!((v - 5.0).abs() < 1e-12);
        }
        assert!((return_j(&m, &pi).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_gamma_gives_reward() {
        let m = chain2().with_gamma(1e-12).unwrap();
        let q = exact_q(&m, &Policy::uniform(2, 2)).unwrap();
        assert!(math::max_abs_diff(q.as_slice(), m.rewards()) < 1e-9);
        let d = discounted_state_marginal(&m, &Policy::uniform(2, 2)).unwrap();
        assert!(math::max_abs_diff(&d, m.initial_dist()) < 1e-9);
    }

    #[test]
    fn softmax_of_one_zero() {
        let q = QTable::new(1, 2, vec![1.0, 0.0]).unwrap();
        let p = soft_policy_from_q(&q, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((p.prob(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.prob(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!(soft_policy_from_q(&q, 0.0).is_err());
    }

    #[test]
    fn total_variation_small_example() {
        let p = Policy::from_rows(1, 2, vec![0.6, 0.4]).unwrap();
        let q = Policy::uniform(1, 2);
        assert!((total_variation(&p, &q).unwrap()[0] - 0.1).abs() < 1e-15);
        let a = Policy::deterministic(2, &[0]).unwrap();
        let b = Policy::deterministic(2, &[1]).unwrap();
        assert_eq!(total_variation(&a, &b).unwrap(), vec![1.0]);
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let q = QTable::new(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let g = Policy::greedy(&q);
        assert_eq!(g.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(g.row(1), &[0.0, 1.0, 0.0]);
    }
}
