//! Offline datasets and the empirical quantities built from them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::generators::rng_from_seed;
use crate::math;
use crate::mdp::{Policy, QTable, TabularMdp};

/// One `(s, a, r, s')` tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub tuples: Vec<Transition>,
    pub source_mdp_id: String,
    pub rng_seed: u64,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// The first `n` tuples; prefixes of one dataset are nested.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            tuples: self.tuples[..n.min(self.tuples.len())].to_vec(),
            source_mdp_id: self.source_mdp_id.clone(),
            rng_seed: self.rng_seed,
        }
    }

    /// Checks index ranges and the reward bound.
    pub fn validate(&self, shape: &MdpShape) -> Result<()> {
        for (i, t) in self.tuples.iter().enumerate() {
            if t.s >= shape.n_states || t.s_next >= shape.n_states || t.a >= shape.n_actions {
                return Err(invalid("dataset", format!("tuple {i} has an index out of range")));
            }
            if !t.r.is_finite() {
                return Err(Error::NonFinite {
                    what: "dataset reward",
                    index: i,
                });
            }
            if libm::fabs(t.r) > shape.r_max {
                return Err(invalid("dataset", format!("tuple {i} reward exceeds r_max")));
            }
        }
        Ok(())
    }
}

/// Sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_transitions: usize,
    pub horizon: usize,
    /// Half-width of uniform noise added to every observed reward.
    pub reward_noise: f64,
}

impl SampleConfig {
    pub fn new(n_transitions: usize, horizon: usize) -> Self {
        Self {
            n_transitions,
            horizon,
            reward_noise: 0.0,
        }
    }
}

/// Samples from a categorical distribution by inverse CDF.
pub fn draw_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Episodic rollouts from `ρ₀` under `behavior`, truncated at `horizon`,
/// concatenated until `n_transitions` tuples are collected.
pub fn sample_dataset(
    mdp: &TabularMdp,
    behavior: &Policy,
    n_transitions: usize,
    horizon: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    sample_dataset_with(mdp, behavior, &SampleConfig::new(n_transitions, horizon), seed)
}

/// [`sample_dataset`] with optional uniform reward noise `r + U(−η, η)`.
pub fn sample_dataset_with(
    mdp: &TabularMdp,
    behavior: &Policy,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<TransitionDataset> {
    mdp.check_policy(behavior)?;
    if cfg.n_transitions == 0 {
        return Err(invalid("n_transitions", "must be at least 1"));
    }
    if cfg.horizon == 0 {
        return Err(invalid("horizon", "must be at least 1"));
    }
    let eta = cfg.reward_noise;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(invalid("reward_noise", "must be finite and non-negative"));
    }
    let worst = mdp.rewards().iter().map(|r| libm::fabs(*r)).fold(0.0, f64::max);
    if worst + eta > mdp.r_max() {
        return Err(invalid(
            "reward_noise",
            format!("|r| + noise = {} exceeds r_max = {}", worst + eta, mdp.r_max()),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut tuples = Vec::with_capacity(cfg.n_transitions);
    'outer: loop {
        let mut s = draw_categorical(mdp.initial_dist(), &mut rng);
        for _ in 0..cfg.horizon {
            let a = draw_categorical(behavior.row(s), &mut rng);
            let s_next = draw_categorical(mdp.next_dist(s, a), &mut rng);
            let mut r = mdp.reward(s, a);
            if eta > 0.0 {
                r += eta * (2.0 * rng.random::<f64>() - 1.0);
            }
            tuples.push(Transition { s, a, r, s_next });
            if tuples.len() == cfg.n_transitions {
                break 'outer;
            }
            s = s_next;
        }
    }
    Ok(TransitionDataset {
        tuples,
        source_mdp_id: mdp.id(),
        rng_seed: seed,
    })
}

/// The parts of an MDP needed to interpret a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
}

impl MdpShape {
    pub fn of(mdp: &TabularMdp) -> Self {
        Self {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            gamma: mdp.gamma(),
            r_max: mdp.r_max(),
        }
    }

    /// `2·r_max/(1−γ)`.
    pub fn q_bound(&self) -> f64 {
        2.0 * self.r_max / (1.0 - self.gamma)
    }
}

/// Counts, empirical means and the empirical behavior policy of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalModel {
    shape: MdpShape,
    n_total: usize,
    counts: Vec<u64>,
    state_counts: Vec<u64>,
    r_hat: Vec<f64>,
    t_hat: Vec<f64>,
    pi_beta_hat: Policy,
    inv_sqrt_counts: Vec<f64>,
    sentinel: f64,
    source_mdp_id: String,
}

/// Builds the empirical model. `sentinel` replaces `1/√n` at zero counts and
/// defaults to `2·r_max/(1−γ)`; smaller values are rejected.
pub fn build_empirical_model(
    dataset: &TransitionDataset,
    shape: MdpShape,
    sentinel: Option<f64>,
) -> Result<EmpiricalModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if shape.n_states == 0 || shape.n_actions == 0 {
        return Err(invalid("shape", "dimensions must be positive"));
    }
    if !(shape.gamma > 0.0 && shape.gamma < 1.0) {
        return Err(invalid("gamma", "must lie in (0, 1)"));
    }
    dataset.validate(&shape)?;
    let min_sentinel = shape.q_bound();
    let sentinel = sentinel.unwrap_or(min_sentinel);
    if !(sentinel >= min_sentinel && sentinel.is_finite()) {
        return Err(invalid(
            "sentinel",
            format!("{sentinel} is below 2·r_max/(1−γ) = {min_sentinel}"),
        ));
    }
    let (ns, na) = (shape.n_states, shape.n_actions);
    let mut counts = vec![0u64; ns * na];
    let mut state_counts = vec![0u64; ns];
    let mut r_sum = vec![0.0; ns * na];
    let mut t_cnt = vec![0.0; ns * na * ns];
    for t in &dataset.tuples {
        let i = t.s * na + t.a;
        counts[i] += 1;
        state_counts[t.s] += 1;
        r_sum[i] += t.r;
        t_cnt[i * ns + t.s_next] += 1.0;
    }
    let mut r_hat = vec![0.0; ns * na];
    let mut inv_sqrt_counts = vec![sentinel; ns * na];
    for i in 0..ns * na {
        if counts[i] > 0 {
            let n = counts[i] as f64;
            r_hat[i] = r_sum[i] / n;
            inv_sqrt_counts[i] = 1.0 / libm::sqrt(n);
            for p in &mut t_cnt[i * ns..(i + 1) * ns] {
                *p /= n;
            }
        }
    }
    let mut probs = vec![1.0 / na as f64; ns * na];
    for s in 0..ns {
        if state_counts[s] > 0 {
            let n = state_counts[s] as f64;
            for a in 0..na {
                probs[s * na + a] = counts[s * na + a] as f64 / n;
            }
        }
    }
    Ok(EmpiricalModel {
        shape,
        n_total: dataset.len(),
        counts,
        state_counts,
        r_hat,
        t_hat: t_cnt,
        pi_beta_hat: Policy::from_unnormalized(ns, na, probs),
        inv_sqrt_counts,
        sentinel,
        source_mdp_id: dataset.source_mdp_id.clone(),
    })
}

impl EmpiricalModel {
    pub fn shape(&self) -> &MdpShape {
        &self.shape
    }
    pub fn n_states(&self) -> usize {
        self.shape.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.shape.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.shape.gamma
    }
    pub fn r_max(&self) -> f64 {
        self.shape.r_max
    }
    pub fn n_total(&self) -> usize {
        self.n_total
    }
    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[s * self.shape.n_actions + a]
    }
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
    pub fn state_count(&self, s: usize) -> u64 {
        self.state_counts[s]
    }
    pub fn state_counts(&self) -> &[u64] {
        &self.state_counts
    }
    pub fn r_hat(&self) -> &[f64] {
        &self.r_hat
    }
    /// `T̂(·|s,a)`; all zeros at unvisited pairs.
    pub fn t_hat(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.shape.n_states;
        let i = (s * self.shape.n_actions + a) * ns;
        &self.t_hat[i..i + ns]
    }
    pub fn pi_beta_hat(&self) -> &Policy {
        &self.pi_beta_hat
    }
    pub fn inv_sqrt_counts(&self) -> &[f64] {
        &self.inv_sqrt_counts
    }
    pub fn sentinel(&self) -> f64 {
        self.sentinel
    }
    pub fn source_mdp_id(&self) -> &str {
        &self.source_mdp_id
    }
    pub fn visited_state(&self, s: usize) -> bool {
        self.state_counts[s] > 0
    }
    pub fn visited_pair(&self, s: usize, a: usize) -> bool {
        self.count(s, a) > 0
    }

    /// `1/√n(s)` with the sentinel at unvisited states.
    pub fn inv_sqrt_state_counts(&self) -> Vec<f64> {
        self.state_counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    self.sentinel
                } else {
                    1.0 / libm::sqrt(n as f64)
                }
            })
            .collect()
    }

    /// Pairs whose `1/√n` entry is the sentinel.
    pub fn sentinel_pairs(&self) -> Vec<(usize, usize)> {
        let na = self.shape.n_actions;
        (0..self.counts.len())
            .filter(|&i| self.counts[i] == 0)
            .map(|i| (i / na, i % na))
            .collect()
    }

    /// `n(s)/N`.
    pub fn state_frequency(&self) -> Vec<f64> {
        let n = self.n_total as f64;
        self.state_counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// The empirical MDP `M̂`. Unvisited pairs become absorbing with reward `−r_max`.
    pub fn to_mdp(&self, initial_dist: Vec<f64>) -> Result<TabularMdp> {
        let (ns, na) = (self.shape.n_states, self.shape.n_actions);
        let mut reward = self.r_hat.clone();
        let mut transition = self.t_hat.clone();
        for s in 0..ns {
            for a in 0..na {
                let i = s * na + a;
                if self.counts[i] == 0 {
                    reward[i] = -self.shape.r_max;
                    transition[i * ns + s] = 1.0;
                }
            }
        }
        TabularMdp::new(ns, na, self.shape.gamma, self.shape.r_max, reward, transition, initial_dist)
    }

    pub(crate) fn check_policy(&self, pi: &Policy) -> Result<()> {
        check_len("policy states", self.shape.n_states, pi.n_states())?;
        check_len("policy actions", self.shape.n_actions, pi.n_actions())
    }

    pub(crate) fn check_q(&self, q: &QTable) -> Result<()> {
        check_len("q-table states", self.shape.n_states, q.n_states())?;
        check_len("q-table actions", self.shape.n_actions, q.n_actions())
    }

    fn backup_with_values(&self, v: &[f64]) -> QTable {
        let (ns, na) = (self.shape.n_states, self.shape.n_actions);
        let floor = -self.shape.q_bound();
        let q = (0..ns * na)
            .map(|i| {
                if self.counts[i] == 0 {
                    floor
                } else {
                    self.r_hat[i] + self.shape.gamma * math::dot(&self.t_hat[i * ns..(i + 1) * ns], v)
                }
            })
            .collect();
        QTable::new(ns, na, q).expect("finite by construction")
    }
}

/// `B̂^π Q` from `r̂` and `T̂`; unvisited pairs return the floor `−2·r_max/(1−γ)`.
pub fn empirical_bellman_op(model: &EmpiricalModel, policy: &Policy, q: &QTable) -> Result<QTable> {
    model.check_policy(policy)?;
    model.check_q(q)?;
    Ok(model.backup_with_values(&policy.expect(q.as_slice())))
}

/// `B̂* Q`, with the same floor at unvisited pairs.
pub fn empirical_optimality_op(model: &EmpiricalModel, q: &QTable) -> Result<QTable> {
    model.check_q(q)?;
    Ok(model.backup_with_values(&q.max_per_state()))
}

/// Concentration constants `C_r`, `C_T` holding jointly with probability `1 − δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationConfig {
    pub c_r: f64,
    pub c_t: f64,
    pub delta: f64,
}

impl ConcentrationConfig {
    pub fn new(c_r: f64, c_t: f64, delta: f64) -> Result<Self> {
        let cfg = Self { c_r, c_t, delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_r >= 0.0 && self.c_r.is_finite()) {
            return Err(invalid("c_r", "must be finite and non-negative"));
        }
        if !(self.c_t >= 0.0 && self.c_t.is_finite()) {
            return Err(invalid("c_t", "must be finite and non-negative"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `C_r + γ·C_T·2·r_max/(1−γ)`.
    pub fn combined(&self, gamma: f64, r_max: f64) -> f64 {
        self.c_r + gamma * self.c_t * 2.0 * r_max / (1.0 - gamma)
    }
}

/// Per-pair bound on `|B̂^π Q − B^π Q|`: `combined / √n(s,a)`, using the
/// sentinel in place of `1/√n` at zero counts.
pub fn overestimation_bound(model: &EmpiricalModel, cfg: &ConcentrationConfig, gamma: f64, r_max: f64) -> Vec<f64> {
    let c = cfg.combined(gamma, r_max);
    model.inv_sqrt_counts.iter().map(|w| c * w).collect()
}

/// Per-state version of [`overestimation_bound`] using `n(s)`.
pub fn overestimation_bound_states(model: &EmpiricalModel, cfg: &ConcentrationConfig, gamma: f64, r_max: f64) -> Vec<f64> {
    let c = cfg.combined(gamma, r_max);
    model.inv_sqrt_state_counts().iter().map(|w| c * w).collect()
}

/// Resampling estimate of `C_r` and `C_T`.
///
/// Draws `n_resamples` datasets, records `max √n·|r̂ − r|` and `max √n·‖T̂ − T‖₁`
/// over visited pairs, and returns the `1 − δ/2` quantile of each.
pub fn estimate_concentration(
    mdp: &TabularMdp,
    behavior: &Policy,
    sample: &SampleConfig,
    delta: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<ConcentrationConfig> {
    if n_resamples == 0 {
        return Err(invalid("n_resamples", "must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", "must lie in (0, 1)"));
    }
    let shape = MdpShape::of(mdp);
    let (ns, na) = (shape.n_states, shape.n_actions);
    let mut rs = Vec::with_capacity(n_resamples);
    let mut ts = Vec::with_capacity(n_resamples);
    for i in 0..n_resamples {
        let sub_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let data = sample_dataset_with(mdp, behavior, sample, sub_seed)?;
        let model = build_empirical_model(&data, shape, None)?;
        let (mut r_dev, mut t_dev) = (0.0f64, 0.0f64);
        for s in 0..ns {
            for a in 0..na {
                let n = model.count(s, a);
                if n == 0 {
                    continue;
                }
                let sq = libm::sqrt(n as f64);
                r_dev = r_dev.max(sq * libm::fabs(model.r_hat[s * na + a] - mdp.reward(s, a)));
                let l1: f64 = model
                    .t_hat(s, a)
                    .iter()
                    .zip(mdp.next_dist(s, a))
                    .map(|(x, y)| libm::fabs(x - y))
                    .sum();
                t_dev = t_dev.max(sq * l1);
            }
        }
        rs.push(r_dev);
        ts.push(t_dev);
    }
    let q = 1.0 - delta / 2.0;
    ConcentrationConfig::new(quantile(&mut rs, q), quantile(&mut ts, q), delta)
}

/// Empirical upper quantile: the `⌈q·n⌉`-th order statistic.
pub fn quantile(xs: &mut [f64], q: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let k = libm::ceil(q * xs.len() as f64) as usize;
    xs[k.clamp(1, xs.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::chain2;

    fn single_state() -> TabularMdp {
        TabularMdp::new(1, 1, 0.9, 1.0, vec![0.3], vec![1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn one_tuple_on_trivial_mdp() {
        let m = single_state();
        let d = sample_dataset(&m, &Policy::uniform(1, 1), 1, 5, 0).unwrap();
        assert_eq!(d.tuples, vec![Transition { s: 0, a: 0, r: 0.3, s_next: 0 }]);
    }

    #[test]
    fn single_tuple_model() {
        let m = chain2();
        let d = TransitionDataset {
            tuples: vec![Transition { s: 1, a: 0, r: 1.0, s_next: 1 }],
            source_mdp_id: m.id(),
            rng_seed: 0,
        };
        let model = build_empirical_model(&d, MdpShape::of(&m), None).unwrap();
        assert_eq!(model.pi_beta_hat().row(1), &[1.0, 0.0]);
        assert_eq!(model.pi_beta_hat().row(0), &[0.5, 0.5]);
        assert!((model.inv_sqrt_counts()[0] - 20.0).abs() < 1e-12);
        assert_eq!(model.sentinel_pairs().len(), 3);
    }

    #[test]
    fn empty_dataset_and_small_sentinel_rejected() {
        let m = chain2();
        let empty = TransitionDataset {
            tuples: vec![],
            source_mdp_id: m.id(),
            rng_seed: 0,
        };
        assert_eq!(build_empirical_model(&empty, MdpShape::of(&m), None), Err(Error::EmptyDataset));
        let d = sample_dataset(&m, &Policy::uniform(2, 2), 10, 5, 1).unwrap();
        assert!(build_empirical_model(&d, MdpShape::of(&m), Some(1.0)).is_err());
    }

    #[test]
    fn bound_arithmetic() {
        let m = chain2();
        let tuples = vec![Transition { s: 0, a: 0, r: 0.0, s_next: 0 }; 100];
        let d = TransitionDataset {
            tuples,
            source_mdp_id: m.id(),
            rng_seed: 0,
        };
        let model = build_empirical_model(&d, MdpShape::of(&m), None).unwrap();
        let cfg = ConcentrationConfig::new(1.0, 1.0, 0.1).unwrap();
        let b = overestimation_bound(&model, &cfg, 0.9, 1.0);
        assert!((b[0] - 1.9).abs() < 1e-12);
        let zero = ConcentrationConfig::new(0.0, 0.0, 0.1).unwrap();
        assert!(overestimation_bound(&model, &zero, 0.9, 1.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noise_must_fit_reward_bound() {
        let m = chain2();
        let cfg = SampleConfig {
            n_transitions: 10,
            horizon: 5,
            reward_noise: 0.5,
        };
        assert!(sample_dataset_with(&m, &Policy::uniform(2, 2), &cfg, 0).is_err());
    }

    #[test]
    fn quantile_picks_order_statistic() {
        let mut xs = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&mut xs, 0.95), 5.0);
        assert_eq!(quantile(&mut xs, 0.6), 3.0);
    }
}
