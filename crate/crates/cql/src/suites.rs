//! Verification suites. Each seed runs independently on the rayon pool and
//! results are merged in seed order, so reports depend only on the inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use cql_core::analysis::{gap_expanding_check, nu_necessity_search, objective_equivalence_check, zeta_bound};
use cql_core::dataset::{
    build_empirical_model, estimate_concentration, sample_dataset_with, ConcentrationConfig, EmpiricalModel,
    MdpShape, SampleConfig,
};
use cql_core::eval::{
    alpha_threshold_eq1, alpha_threshold_eq2, cql_fixed_point, BackupSource, CqlEvalConfig, Variant,
};
use cql_core::generators::{
    chain2_with_r_max, gridworld, random_features, random_mdp, random_policy, rng_from_seed, SeedRng,
};
use cql_core::learn::{cql_objective_value, run_cql, AlphaMode, CqlLearnConfig, Regularizer};
use cql_core::linear::{
    alpha_threshold_linear, cql_linear_iterate, projection_penalty, Features, LinearQModel,
};
use cql_core::mdp::{
    bellman_policy_op, discounted_state_marginal, exact_q, return_j, soft_policy_from_q, solve_policy_system,
    solve_state_system, total_variation,
};
use cql_core::{Policy, QTable, TabularMdp};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Slack for exact-arithmetic comparisons.
pub const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Suite {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
    D1,
    D3,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::T1,
        Suite::T2,
        Suite::T3,
        Suite::T4,
        Suite::T5,
        Suite::T6,
        Suite::D1,
        Suite::D3,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            Suite::T1 => "pointwise penalty lower-bounds Q (exact backup)",
            Suite::T2 => "expected-value penalty lower-bounds V (exact backup)",
            Suite::T3 => "lower bounds under sampling error at the alpha thresholds",
            Suite::T4 => "gap expansion above the required alpha",
            Suite::T5 => "penalized evaluation equals penalized return",
            Suite::T6 => "safe policy improvement",
            Suite::D1 => "linear function approximation lower bound",
            Suite::D3 => "maximizing under the behavior policy is necessary",
        }
    }

    /// Seeds used when none are given.
    pub fn default_seeds(self) -> usize {
        match self {
            Suite::T1 | Suite::T2 | Suite::T4 => 200,
            Suite::T3 | Suite::T6 => 500,
            Suite::T5 => 50,
            Suite::D1 => 100,
            Suite::D3 => 1000,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown suite {s:?}; expected one of T1..T6, D1, D3"))
    }
}

/// Knobs shared by all suites. `None` means the suite's own default.
#[derive(Debug, Clone, Default)]
pub struct SuiteParams {
    pub seeds: Vec<u64>,
    pub alphas: Option<Vec<f64>>,
    pub mdp: Option<TabularMdp>,
    pub delta: Option<f64>,
    pub n_transitions: Option<usize>,
    pub regularizer: Option<Regularizer>,
    pub tau: Option<f64>,
}

impl SuiteParams {
    pub fn with_seeds(n: usize) -> Self {
        Self {
            seeds: (0..n as u64).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        for &a in self.alphas.iter().flatten() {
            if !(a >= 0.0 && a.is_finite()) {
                bail!("alpha must be finite and non-negative, got {a}");
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                bail!("delta must lie in (0, 1), got {d}");
            }
        }
        if let Some(t) = self.tau {
            if !t.is_finite() {
                bail!("tau must be finite");
            }
        }
        if self.n_transitions == Some(0) {
            bail!("n_transitions must be positive");
        }
        Ok(())
    }

    fn delta(&self) -> f64 {
        self.delta.unwrap_or(0.1)
    }
}

/// One pass/fail observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub group: String,
    pub seed: u64,
    /// The measured quantity (a margin, an error or a count).
    pub value: f64,
    pub pass: bool,
}

impl Check {
    fn new(group: impl Into<String>, seed: u64, value: f64, pass: bool) -> Self {
        Self {
            group: group.into(),
            seed,
            value,
            pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub passed: usize,
    pub total: usize,
    pub rate: f64,
    pub required_rate: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub description: String,
    pub groups: Vec<GroupSummary>,
    pub notes: Vec<String>,
    pub ok: bool,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    /// Summarizes `checks` per group; `required` maps a group to its minimum pass rate (default 1).
    fn build(suite: &str, description: &str, checks: Vec<Check>, required: &[(&str, f64)], notes: Vec<String>) -> Self {
        let mut by_group: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for c in &checks {
            let e = by_group.entry(c.group.as_str()).or_default();
            e.1 += 1;
            e.0 += usize::from(c.pass);
        }
        let groups: Vec<GroupSummary> = by_group
            .into_iter()
            .map(|(g, (passed, total))| {
                let required_rate = required.iter().find(|(n, _)| *n == g).map_or(1.0, |r| r.1);
                let rate = passed as f64 / total as f64;
                GroupSummary {
                    group: g.to_string(),
                    passed,
                    total,
                    rate,
                    required_rate,
                    ok: rate >= required_rate,
                }
            })
            .collect();
        let ok = !groups.is_empty() && groups.iter().all(|g| g.ok);
        Self {
            suite: suite.to_string(),
            description: description.to_string(),
            groups,
            notes,
            ok,
            checks,
        }
    }

    pub fn summary_line(&self) -> String {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| format!("{} {}/{}", g.group, g.passed, g.total))
            .collect();
        parts.join(", ")
    }
}

fn fan_out<F>(seeds: &[u64], f: F) -> Result<Vec<Check>>
where
    F: Fn(u64) -> Result<Vec<Check>> + Sync + Send,
{
    let per_seed: Vec<Vec<Check>> = seeds.par_iter().map(|&s| f(s)).collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn run_suite(suite: Suite, params: &SuiteParams) -> Result<SuiteReport> {
    params.validate()?;
    match suite {
        Suite::T1 => pointwise_exact(params),
        Suite::T2 => expected_exact(params),
        Suite::T3 => sampled_lower_bounds(params),
        Suite::T4 => gap_expansion(params),
        Suite::T5 => objective_equivalence(params),
        Suite::T6 => safe_improvement(params),
        Suite::D1 => linear_bound(params, 100),
        Suite::D3 => nu_necessity(params),
    }
}

/// A random evaluation instance: MDP, full-support behavior, and a target
/// policy mixed between the behavior and a fresh random policy.
pub struct Instance {
    pub mdp: TabularMdp,
    pub behavior: Policy,
    pub target: Policy,
}

pub fn random_instance(rng: &mut SeedRng, fixed: Option<&TabularMdp>) -> Result<Instance> {
    let mdp = match fixed {
        Some(m) => m.clone(),
        None => {
            let ns = rng.random_range(2..=10);
            let na = rng.random_range(2..=4);
            let branching = rng.random_range(1..=ns);
            let gamma = rng.random_range(0.5..0.95);
            random_mdp(ns, na, branching, gamma, rng)?
        }
    };
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let behavior = random_policy(ns, na, rng);
    let w = rng.random_range(0.05..=1.0);
    let target = behavior.mix(&random_policy(ns, na, rng), w)?;
    Ok(Instance { mdp, behavior, target })
}

fn alphas(params: &SuiteParams) -> Vec<f64> {
    params.alphas.clone().unwrap_or_else(|| vec![0.01, 0.1, 1.0])
}

fn pointwise_exact(params: &SuiteParams) -> Result<SuiteReport> {
    let alphas = alphas(params);
    let checks = fan_out(&params.seeds, |seed| {
        let it = random_instance(&mut rng_from_seed(seed), params.mdp.as_ref())?;
        let src = BackupSource::exact(&it.mdp, &it.behavior)?;
        let q = exact_q(&it.mdp, &it.target)?;
        let mut out = Vec::new();
        for &alpha in &alphas {
            let cfg = CqlEvalConfig::new(alpha, it.target.clone(), Variant::Eq1);
            let q_hat = cql_fixed_point(&cfg, &src, &it.target)?;
            let excess = max_excess(q_hat.as_slice(), q.as_slice());
            out.push(Check::new(format!("alpha={alpha}"), seed, excess, excess <= SLACK));
        }
        Ok(out)
    })?;
    Ok(SuiteReport::build("T1", Suite::T1.describe(), checks, &[], vec![]))
}

fn max_excess(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x - y).fold(f64::NEG_INFINITY, f64::max)
}

fn expected_exact(params: &SuiteParams) -> Result<SuiteReport> {
    let alphas = alphas(params);
    let mut checks = fan_out(&params.seeds, |seed| {
        let it = random_instance(&mut rng_from_seed(seed), params.mdp.as_ref())?;
        let src = BackupSource::exact(&it.mdp, &it.behavior)?;
        let q = exact_q(&it.mdp, &it.target)?;
        let v = q.value_under(&it.target).v;
        let (ns, na) = (it.mdp.n_states(), it.mdp.n_actions());
        let excess: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let p = it.target.prob(s, a);
                        p * (p / it.behavior.prob(s, a) - 1.0)
                    })
                    .sum()
            })
            .collect();
        let shift = solve_state_system(&it.mdp, &it.target, &excess)?;
        let mut out = Vec::new();
        for &alpha in &alphas {
            let cfg = CqlEvalConfig::new(alpha, it.target.clone(), Variant::Eq2);
            let q_hat = cql_fixed_point(&cfg, &src, &it.target)?;
            let v_hat = q_hat.value_under(&it.target).v;
            let gap = max_excess(&v_hat, &v);
            out.push(Check::new(format!("values alpha={alpha}"), seed, gap, gap <= SLACK));
            let closed: Vec<f64> = v.iter().zip(&shift).map(|(v, d)| v - alpha * d).collect();
            let err = v_hat.iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.push(Check::new(format!("closed form alpha={alpha}"), seed, err, err <= SLACK));
            let pointwise = max_excess(q_hat.as_slice(), q.as_slice());
            // Recorded so the suite can report a witness; never a failure by itself.
            out.push(Check::new("pointwise excess", seed, pointwise, true));
        }
        Ok(out)
    })?;
    let witnesses: Vec<&Check> = checks
        .iter()
        .filter(|c| c.group == "pointwise excess" && c.value > 1e-12)
        .collect();
    let first = witnesses.first().map_or(0, |c| c.seed);
    let note = match witnesses.first() {
        Some(c) => format!("non-pointwise witness: seed {} with Q̂ − Q = {:.3e}", c.seed, c.value),
        None => String::from("no instance with Q̂ > Q at some pair"),
    };
    let count = witnesses.len() as f64;
    checks.retain(|c| c.group != "pointwise excess");
    checks.push(Check::new("non-pointwise witness", first, count, count > 0.0));
    Ok(SuiteReport::build("T2", Suite::T2.describe(), checks, &[], vec![note]))
}

/// A sampled-data environment: MDP, behavior, target, sampling plan.
pub struct SampledEnv {
    pub name: &'static str,
    pub mdp: TabularMdp,
    pub behavior: Policy,
    pub target: Policy,
    pub sample: SampleConfig,
}

/// Chain2 with reward noise 1 (r_max raised to 2).
pub fn noisy_chain2(n: usize) -> SampledEnv {
    let mdp = chain2_with_r_max(2.0);
    SampledEnv {
        name: "chain2",
        behavior: Policy::uniform(2, 2),
        target: Policy::from_rows(2, 2, vec![0.8, 0.2, 0.8, 0.2]).expect("valid rows"),
        sample: SampleConfig {
            n_transitions: n,
            horizon: 50,
            reward_noise: 1.0,
        },
        mdp,
    }
}

/// 4×4 gridworld, slip 0.1, reward noise 0.5 (r_max raised to 1.5).
pub fn noisy_grid(n: usize) -> Result<SampledEnv> {
    let base = gridworld(4, 4, 0.1)?;
    let mdp = base.with_reward(base.rewards().to_vec(), 1.5)?;
    let target = Policy::from_rows(16, 4, [0.1, 0.4, 0.4, 0.1].repeat(16))?;
    Ok(SampledEnv {
        name: "grid4x4",
        behavior: Policy::uniform(16, 4),
        target,
        sample: SampleConfig {
            n_transitions: n,
            horizon: 30,
            reward_noise: 0.5,
        },
        mdp,
    })
}

fn sampled_envs(params: &SuiteParams) -> Result<Vec<SampledEnv>> {
    if let Some(m) = &params.mdp {
        let (ns, na) = (m.n_states(), m.n_actions());
        let target = random_policy(ns, na, &mut rng_from_seed(0x7a79e7));
        return Ok(vec![SampledEnv {
            name: "custom",
            behavior: Policy::uniform(ns, na),
            target,
            sample: SampleConfig::new(params.n_transitions.unwrap_or(20 * ns * na), 50),
            mdp: m.clone(),
        }]);
    }
    let mut chain = noisy_chain2(1_000);
    let mut grid = noisy_grid(4_000)?;
    if let Some(n) = params.n_transitions {
        chain.sample.n_transitions = n;
        grid.sample.n_transitions = n;
    }
    Ok(vec![chain, grid])
}

/// Calibrates concentration constants for an environment at confidence `delta`.
pub fn calibrate(env: &SampledEnv, delta: f64) -> Result<ConcentrationConfig> {
    Ok(estimate_concentration(
        &env.mdp,
        &env.behavior,
        &env.sample,
        delta,
        200,
        0x00c0_ffee,
    )?)
}

fn sampled_lower_bounds(params: &SuiteParams) -> Result<SuiteReport> {
    let delta = params.delta();
    let mut checks = Vec::new();
    let mut notes = Vec::new();
    let mut required = Vec::new();
    for env in sampled_envs(params)? {
        let conc = calibrate(&env, delta)?;
        notes.push(format!("{}: c_r = {:.4}, c_t = {:.4}", env.name, conc.c_r, conc.c_t));
        let q_true = exact_q(&env.mdp, &env.target)?;
        let v_true = q_true.value_under(&env.target).v;
        let (gamma, r_max) = (env.mdp.gamma(), env.mdp.r_max());
        let na = env.mdp.n_actions();
        checks.extend(fan_out(&params.seeds, |seed| {
            let data = sample_dataset_with(&env.mdp, &env.behavior, &env.sample, seed)?;
            let model = build_empirical_model(&data, MdpShape::of(&env.mdp), None)?;
            let src = BackupSource::Empirical(&model);
            let mut out = Vec::new();

            let a1 = alpha_threshold_eq1(&model, &conc, &env.target, gamma, r_max)?.value;
            let e1 = if a1.is_finite() {
                let mut cfg = CqlEvalConfig::new(a1, env.target.clone(), Variant::Eq1);
                cfg.clamp = true;
                let q_hat = cql_fixed_point(&cfg, &src, &env.target)?;
                (0..q_hat.as_slice().len())
                    .filter(|&i| model.visited_pair(i / na, i % na))
                    .map(|i| q_hat.as_slice()[i] - q_true.as_slice()[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            } else {
                f64::INFINITY
            };
            out.push(Check::new(format!("{} pointwise", env.name), seed, e1, e1 <= SLACK));

            let a2 = alpha_threshold_eq2(&model, &conc, &env.target, gamma, r_max)?.value;
            let e2 = if a2.is_finite() {
                let mut cfg = CqlEvalConfig::new(a2, env.target.clone(), Variant::Eq2);
                cfg.clamp = true;
                let v_hat = cql_fixed_point(&cfg, &src, &env.target)?.value_under(&env.target).v;
                (0..v_hat.len())
                    .filter(|&s| model.visited_state(s))
                    .map(|s| v_hat[s] - v_true[s])
                    .fold(f64::NEG_INFINITY, f64::max)
            } else {
                f64::INFINITY
            };
            out.push(Check::new(format!("{} expected", env.name), seed, e2, e2 <= SLACK));
            Ok(out)
        })?);
        required.push((format!("{} pointwise", env.name), 1.0 - delta));
        required.push((format!("{} expected", env.name), 1.0 - delta));
    }
    let req: Vec<(&str, f64)> = required.iter().map(|(g, r)| (g.as_str(), *r)).collect();
    Ok(SuiteReport::build("T3", Suite::T3.describe(), checks, &req, notes))
}

fn gap_expansion(params: &SuiteParams) -> Result<SuiteReport> {
    let mut checks = fan_out(&params.seeds, |seed| {
        let mut rng = rng_from_seed(seed);
        let it = random_instance(&mut rng, params.mdp.as_ref())?;
        let (ns, na) = (it.mdp.n_states(), it.mdp.n_actions());
        let mu = random_policy(ns, na, &mut rng);
        let q = exact_q(&it.mdp, &it.target)?;
        let scale = it.mdp.q_bound() * 0.1;
        let noisy: Vec<f64> = q.as_slice().iter().map(|x| x + rng.random_range(-scale..scale)).collect();
        let q_hat = QTable::new(ns, na, noisy)?;
        let probe = gap_expanding_check(&it.mdp, &it.behavior, &q_hat, &q, &mu, 0.0, &it.target)?;
        let alpha = probe.alpha_required + 0.1;
        let r = gap_expanding_check(&it.mdp, &it.behavior, &q_hat, &q, &mu, alpha, &it.target)?;
        let margin = margin(&r.lhs, &r.rhs, &r.vacuous);
        let zero_margin = margin_of(&probe);
        Ok(vec![
            Check::new("threshold + 0.1", seed, margin, r.holds),
            Check::new("alpha = 0", seed, zero_margin, true),
        ])
    })?;
    let violations: Vec<u64> = checks
        .iter()
        .filter(|c| c.group == "alpha = 0" && c.value <= cql_core::analysis::GAP_SLACK)
        .map(|c| c.seed)
        .collect();
    checks.retain(|c| c.group != "alpha = 0");
    let first = violations.first().copied().unwrap_or(0);
    checks.push(Check::new("alpha = 0 violation found", first, violations.len() as f64, !violations.is_empty()));
    let note = format!("{} of {} instances violate gap expansion at alpha = 0", violations.len(), params.seeds.len());
    Ok(SuiteReport::build("T4", Suite::T4.describe(), checks, &[], vec![note]))
}

fn margin(lhs: &[f64], rhs: &[f64], vacuous: &[bool]) -> f64 {
    (0..lhs.len())
        .filter(|&s| !vacuous[s])
        .map(|s| lhs[s] - rhs[s])
        .fold(f64::INFINITY, f64::min)
}

fn margin_of(r: &cql_core::analysis::GapReport) -> f64 {
    margin(&r.lhs, &r.rhs, &r.vacuous)
}

fn objective_equivalence(params: &SuiteParams) -> Result<SuiteReport> {
    let alpha = alphas(params).first().copied().unwrap_or(1.0);
    let checks = fan_out(&params.seeds, |seed| {
        let mut rng = rng_from_seed(seed);
        let mdp = match &params.mdp {
            Some(m) => m.clone(),
            None => random_mdp(2, 2, 2, 0.9, &mut rng)?,
        };
        let behavior = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let sample = SampleConfig::new(params.n_transitions.unwrap_or(200), 20);
        let data = sample_dataset_with(&mdp, &behavior, &sample, seed)?;
        let model = build_empirical_model(&data, MdpShape::of(&mdp), None)?;
        let m_hat = model.to_mdp(mdp.initial_dist().to_vec())?;
        let r = objective_equivalence_check(&m_hat, model.pi_beta_hat(), alpha, 0.05)?;
        Ok(vec![
            Check::new("objectives agree", seed, r.max_abs_diff, r.max_abs_diff <= 1e-8),
            Check::new(
                "altered-reward return agrees",
                seed,
                r.altered_reward_max_diff,
                r.altered_reward_max_diff <= 1e-8,
            ),
        ])
    })?;
    Ok(SuiteReport::build("T5", Suite::T5.describe(), checks, &[], vec![]))
}

/// Chain2-scale environment for the safe-improvement suite: noisy rewards and
/// a behavior that mostly stays put.
pub fn improvement_env(n: usize) -> SampledEnv {
    let mut env = noisy_chain2(n);
    let stay = Policy::deterministic(2, &[0, 0]).expect("valid actions");
    env.behavior = Policy::uniform(2, 2).mix(&stay, 0.6).expect("same shape");
    env.sample.horizon = 20;
    env
}

pub fn learn_config(params: &SuiteParams) -> CqlLearnConfig {
    let alpha_mode = match params.tau {
        Some(tau) => AlphaMode::Lagrange {
            tau,
            dual_step: 0.1,
            initial_alpha: alphas(params).first().copied().unwrap_or(1.0),
        },
        None => AlphaMode::Fixed(params.alphas.as_ref().and_then(|a| a.first().copied()).unwrap_or(1.0)),
    };
    CqlLearnConfig {
        regularizer: params.regularizer.unwrap_or(Regularizer::H),
        alpha_mode,
        iters: 100,
        ..CqlLearnConfig::default()
    }
}

fn safe_improvement(params: &SuiteParams) -> Result<SuiteReport> {
    let delta = params.delta();
    let mut env = improvement_env(params.n_transitions.unwrap_or(200));
    if let Some(m) = &params.mdp {
        env.mdp = m.clone();
        env.behavior = Policy::uniform(m.n_states(), m.n_actions());
        env.sample.reward_noise = 0.0;
    }
    let conc = calibrate(&env, delta)?;
    let cfg = learn_config(params);
    let checks = fan_out(&params.seeds, |seed| {
        let data = sample_dataset_with(&env.mdp, &env.behavior, &env.sample, seed)?;
        let model = build_empirical_model(&data, MdpShape::of(&env.mdp), None)?;
        let out = run_cql(&cfg, BackupSource::Empirical(&model), None)?;
        let r = zeta_bound(&env.mdp, &model, &out.policy, &conc, out.alpha)?;
        let margin = r.j_pi_star_m - (r.j_beta_m - r.zeta);
        Ok(vec![Check::new("improvement within zeta", seed, margin, r.holds)])
    })?;
    let note = format!("c_r = {:.4}, c_t = {:.4}, delta = {delta}", conc.c_r, conc.c_t);
    Ok(SuiteReport::build(
        "T6",
        Suite::T6.describe(),
        checks,
        &[("improvement within zeta", 1.0 - delta)],
        vec![note],
    ))
}

/// `Σ_s d(s) Σ_a π(a|s) q(s,a)`.
fn d_weighted(d: &[f64], pi: &Policy, q: &[f64]) -> f64 {
    let na = pi.n_actions();
    (0..d.len())
        .map(|s| d[s] * (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum::<f64>())
        .sum()
}

/// Linear FA suite. Each seed draws one instance for the expected-value bound
/// and `draws_per_seed` feature/policy pairs for the per-state penalty sign.
pub fn linear_bound(params: &SuiteParams, draws_per_seed: usize) -> Result<SuiteReport> {
    let checks = fan_out(&params.seeds, |seed| {
        let mut rng = rng_from_seed(seed);
        let mut out = Vec::new();
        let it = random_instance(&mut rng, params.mdp.as_ref())?;
        let (ns, na) = (it.mdp.n_states(), it.mdp.n_actions());
        // A bias-only feature set cannot represent the penalty, so the bound needs dim >= 2.
        let dim = rng.random_range(2..=ns * na);
        let fa = LinearQModel::zeros(Features(random_features(ns * na, dim, true, &mut rng)?));
        let q = QTable::new(ns, na, (0..ns * na).map(|_| rng.random_range(-5.0..5.0)).collect())?;
        let t = alpha_threshold_linear(&fa, &it.mdp, &it.behavior, &it.target, &q)?;
        let excess = if t.value.is_finite() {
            let d = discounted_state_marginal(&it.mdp, &it.behavior)?;
            let next = cql_linear_iterate(&fa, &it.mdp, &it.behavior, &it.target, t.value, &q)?.q(ns, na)?;
            let plain = bellman_policy_op(&it.mdp, &it.target, &q)?;
            d_weighted(&d, &it.target, next.as_slice()) - d_weighted(&d, &it.target, plain.as_slice())
        } else {
            f64::INFINITY
        };
        out.push(Check::new("expected value bound", seed, excess, excess <= SLACK));
        let mut worst = f64::INFINITY;
        for _ in 0..draws_per_seed {
            let dim = rng.random_range(1..=ns * na);
            let f = Features(random_features(ns * na, dim, true, &mut rng)?);
            let pi = random_policy(ns, na, &mut rng);
            let fa = LinearQModel::zeros(f);
            let p = projection_penalty(&fa, &it.mdp, &it.behavior, &pi)?;
            let m = p.iter().copied().fold(f64::INFINITY, f64::min);
            out.push(Check::new("per-state projection penalty", seed, m, m >= -SLACK));
            worst = worst.min(m);
        }
        Ok(out)
    })?;
    let neg = checks
        .iter()
        .filter(|c| c.group == "per-state projection penalty" && !c.pass)
        .count();
    let note = format!(
        "{neg} feature/policy draws have a negative per-state projection penalty; the d-weighted penalty is nonnegative with a bias column"
    );
    Ok(SuiteReport::build("D1", Suite::D1.describe(), checks, &[], vec![note]))
}

fn nu_necessity(params: &SuiteParams) -> Result<SuiteReport> {
    let checks = fan_out(&params.seeds, |seed| {
        let mut rng = rng_from_seed(seed);
        let (ns, na) = match &params.mdp {
            Some(m) => (m.n_states(), m.n_actions()),
            None => (rng.random_range(1..=4), rng.random_range(2..=4)),
        };
        let beta = random_policy(ns, na, &mut rng);
        let at_beta = nu_necessity_search(&beta, &beta)?.min_penalty;
        let nu = loop {
            let nu = random_policy(ns, na, &mut rng);
            let tv = total_variation(&nu, &beta)?.into_iter().fold(0.0, f64::max);
            if tv >= 0.05 {
                break nu;
            }
        };
        let r = nu_necessity_search(&beta, &nu)?;
        Ok(vec![
            Check::new("nu = behavior", seed, at_beta, at_beta.abs() <= 1e-12),
            Check::new("nu away from behavior", seed, r.min_penalty, r.min_penalty < -1e-9),
        ])
    })?;
    Ok(SuiteReport::build("D3", Suite::D3.describe(), checks, &[], vec![]))
}

/// Mean estimate-minus-truth gaps of naive fitted Q iteration and the two
/// conservative estimators on one sampled task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub task: String,
    pub seeds: usize,
    pub fqi_gap: f64,
    pub eq2_gap: f64,
    pub eq1_gap: f64,
}

/// Fitted Q iteration without any penalty: unvisited pairs keep their initial
/// value of zero, visited pairs are regressed onto `r̂ + γ T̂ max Q`.
pub fn naive_fqi(model: &EmpiricalModel, iters: usize) -> Result<QTable> {
    let (ns, na) = (model.n_states(), model.n_actions());
    let mut q = vec![0.0; ns * na];
    for _ in 0..iters {
        let v: Vec<f64> = q.chunks(na).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut next = q.clone();
        for s in 0..ns {
            for a in 0..na {
                if model.visited_pair(s, a) {
                    let ev: f64 = model.t_hat(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                    next[s * na + a] = model.r_hat()[s * na + a] + model.gamma() * ev;
                }
            }
        }
        q = next;
    }
    Ok(QTable::new(ns, na, q)?)
}

/// Policy `∝ π̂_β·exp(Q)`: follows the estimate while staying on the data support.
fn supported_soft(q: &QTable, beta: &Policy) -> Result<Policy> {
    let soft = soft_policy_from_q(q, 1.0)?;
    let (ns, na) = (q.n_states(), q.n_actions());
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let w: Vec<f64> = (0..na).map(|a| soft.prob(s, a) * beta.prob(s, a)).collect();
        let z: f64 = w.iter().sum();
        probs.extend(w.iter().map(|x| x / z));
    }
    Ok(Policy::from_rows(ns, na, probs)?)
}

pub fn bias_tasks() -> Result<Vec<SampledEnv>> {
    let mut rng = rng_from_seed(0xb1a5);
    let random = random_mdp(6, 3, 3, 0.9, &mut rng)?;
    let random = random.with_reward(random.rewards().to_vec(), 2.0)?;
    Ok(vec![
        noisy_chain2(100),
        noisy_grid(1_000)?,
        SampledEnv {
            name: "random6x3",
            behavior: Policy::uniform(6, 3),
            target: Policy::uniform(6, 3),
            sample: SampleConfig {
                n_transitions: 300,
                horizon: 30,
                reward_noise: 1.0,
            },
            mdp: random,
        },
    ])
}

/// Estimate bias of naive fitted Q iteration against the two conservative estimators.
pub fn estimate_bias(seeds: &[u64], alpha: f64) -> Result<Vec<BiasRow>> {
    let mut rows = Vec::new();
    for env in bias_tasks()? {
        let gaps: Vec<[f64; 3]> = seeds
            .par_iter()
            .map(|&seed| -> Result<[f64; 3]> {
                let data = sample_dataset_with(&env.mdp, &env.behavior, &env.sample, seed)?;
                let model = build_empirical_model(&data, MdpShape::of(&env.mdp), None)?;
                let rho = env.mdp.initial_dist();
                let q_fqi = naive_fqi(&model, 400)?;
                let greedy = Policy::greedy(&q_fqi);
                let fqi_est: f64 = rho.iter().zip(q_fqi.max_per_state()).map(|(p, v)| p * v).sum();
                let fqi_gap = fqi_est - return_j(&env.mdp, &greedy)?;

                let pi = supported_soft(&q_fqi, model.pi_beta_hat())?;
                let truth = return_j(&env.mdp, &pi)?;
                let src = BackupSource::Empirical(&model);
                let mut est = [0.0; 2];
                for (k, variant) in [Variant::Eq2, Variant::Eq1].into_iter().enumerate() {
                    let cfg = CqlEvalConfig::new(alpha, pi.clone(), variant);
                    let v = cql_fixed_point(&cfg, &src, &pi)?.value_under(&pi).v;
                    est[k] = rho.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>() - truth;
                }
                Ok([fqi_gap, est[0], est[1]])
            })
            .collect::<Result<_>>()?;
        let n = gaps.len() as f64;
        let mean = |k: usize| gaps.iter().map(|g| g[k]).sum::<f64>() / n;
        rows.push(BiasRow {
            task: env.name.to_string(),
            seeds: gaps.len(),
            fqi_gap: mean(0),
            eq2_gap: mean(1),
            eq1_gap: mean(2),
        });
    }
    Ok(rows)
}

/// Sign and ordering checks on the bias rows.
pub fn bias_checks(rows: &[BiasRow]) -> SuiteReport {
    let mut checks = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let i = i as u64;
        checks.push(Check::new("fitted Q overestimates", i, r.fqi_gap, r.fqi_gap > 0.0));
        checks.push(Check::new("expected penalty underestimates", i, r.eq2_gap, r.eq2_gap < 0.0));
        checks.push(Check::new(
            "pointwise penalty is more conservative",
            i,
            r.eq1_gap - r.eq2_gap,
            r.eq1_gap < r.eq2_gap,
        ));
    }
    let notes = rows
        .iter()
        .map(|r| format!("{}: fqi {:+.3}, expected {:+.3}, pointwise {:+.3}", r.task, r.fqi_gap, r.eq2_gap, r.eq1_gap))
        .collect();
    SuiteReport::build("bias", "estimate bias of fitted Q vs conservative evaluation", checks, &[], notes)
}

/// Exact solver vs long iteration, tabular linear vs closed form, and the
/// sign of the entropy regularizer gap on random rows.
pub fn oracle_equivalences(seeds: &[u64], rows_per_seed: usize) -> Result<SuiteReport> {
    let checks = fan_out(seeds, |seed| {
        let mut rng = rng_from_seed(seed);
        let mut out = Vec::new();
        let it = random_instance(&mut rng, None)?;
        let (ns, na) = (it.mdp.n_states(), it.mdp.n_actions());

        let q = exact_q(&it.mdp, &it.target)?;
        let mut sweep = QTable::zeros(ns, na);
        for _ in 0..10_000 {
            sweep = bellman_policy_op(&it.mdp, &it.target, &sweep)?;
        }
        let err = cql_core::math::max_abs_diff(q.as_slice(), sweep.as_slice());
        out.push(Check::new("exact solve vs sweeps", seed, err, err <= 1e-6));

        let alpha = rng.random_range(0.0..2.0);
        let fa = LinearQModel::zeros(Features::identity(ns * na));
        let mut lin = QTable::zeros(ns, na);
        for _ in 0..2_000 {
            lin = cql_linear_iterate(&fa, &it.mdp, &it.behavior, &it.target, alpha, &lin)?.q(ns, na)?;
        }
        let ratio: Vec<f64> = (0..ns * na)
            .map(|i| it.target.as_slice()[i] / it.behavior.as_slice()[i] - 1.0)
            .collect();
        let shift = solve_policy_system(&it.mdp, &it.target, &ratio)?;
        let closed: Vec<f64> = q.as_slice().iter().zip(&shift).map(|(q, d)| q - alpha * d).collect();
        let err = cql_core::math::max_abs_diff(lin.as_slice(), &closed);
        out.push(Check::new("tabular linear vs closed form", seed, err, err <= SLACK));

        let one = TabularMdp::new(1, 4, 0.9, 1.0, vec![0.0; 4], vec![1.0; 4], vec![1.0])?;
        let cfg = CqlLearnConfig::default();
        let mut worst = f64::INFINITY;
        for _ in 0..rows_per_seed {
            let beta = random_policy(1, 4, &mut rng);
            let q = QTable::new(1, 4, (0..4).map(|_| rng.random_range(-50.0..50.0)).collect())?;
            let src = BackupSource::exact(&one, &beta)?;
            worst = worst.min(cql_objective_value(&cfg, &q, &beta, &src)?);
        }
        out.push(Check::new("entropy gap nonnegative", seed, worst, worst >= 0.0));
        Ok(out)
    })?;
    Ok(SuiteReport::build(
        "oracles",
        "oracle equivalences",
        checks,
        &[],
        vec![format!("{} random rows for the entropy gap", seeds.len() * rows_per_seed)],
    ))
}
