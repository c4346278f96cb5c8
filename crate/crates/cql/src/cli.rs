//! Command-line front end.
//!
//! Exit codes: 0 when every check passed, 1 when a violation was found, 2 on
//! configuration or input errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cql_core::dataset::{build_empirical_model, sample_dataset_with, ConcentrationConfig, MdpShape, SampleConfig};
use cql_core::eval::{
    alpha_threshold_eq1, alpha_threshold_eq2, cql_fixed_point, eval_report, BackupSource, CqlEvalConfig, Variant,
};
use cql_core::generators::{chain2, gridworld, random_mdp, rng_from_seed};
use cql_core::learn::{run_cql, Actor, AlphaMode, CqlLearnConfig};
use cql_core::mdp::exact_q;
use cql_core::{Policy, TabularMdp};
use serde::Serialize;

use crate::config::{parse_seeds, BackupName, ExperimentConfig, Format, RegularizerName, VariantName};
use crate::formats;
use crate::suites::{run_suite, Suite, SuiteParams, SuiteReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cql", version, about = "Conservative Q-learning on tabular and linear MDPs")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $CQL_OUT_DIR, then ./cql_out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Seeds: `7`, `1,2,3` or `0..500`.
    #[arg(long, global = true, value_parser = parse_seed_list)]
    pub seeds: Option<SeedList>,
    #[arg(long, global = true)]
    pub mdp: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Budget for Lagrange-mode alpha.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantName>,
    #[arg(long, global = true, value_enum)]
    pub regularizer: Option<RegularizerName>,
}

/// Parsed `--seeds` value; a newtype so clap treats it as one argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(text: &str) -> std::result::Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write an MDP file.
    GenMdp(GenMdpArgs),
    /// Sample one dataset per seed.
    GenDataset(GenDatasetArgs),
    /// Conservative policy evaluation against the exact value.
    Eval(EvalArgs),
    /// Run the conservative learner and write its trace.
    Learn(LearnArgs),
    /// Run a verification suite.
    Verify(VerifyArgs),
    /// Aggregate the verification reports in the output directory.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MdpKind {
    Chain2,
    Gridworld,
    Random,
}

#[derive(Debug, Args)]
pub struct GenMdpArgs {
    #[arg(value_enum)]
    pub kind: MdpKind,
    #[arg(long, default_value_t = 4)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub height: usize,
    #[arg(long, default_value_t = 0.1)]
    pub slip: f64,
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    #[arg(long, default_value_t = 3)]
    pub actions: usize,
    #[arg(long, default_value_t = 2)]
    pub branching: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    /// Behavior policy JSON (default: uniform).
    #[arg(long)]
    pub behavior: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub behavior: Option<PathBuf>,
    /// Policy to evaluate (default: uniform).
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub clamp: bool,
    /// Concentration constants; with a dataset they enable the threshold.
    #[arg(long)]
    pub c_r: Option<f64>,
    #[arg(long)]
    pub c_t: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[arg(long)]
    pub behavior: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub backup: Option<BackupName>,
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// T1..T6, D1 or D3.
    pub suite: Suite,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
}

/// Parses the process arguments and runs; returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_CONFIG
        }
    }
}

fn flags_config(c: &CommonArgs) -> ExperimentConfig {
    ExperimentConfig {
        seeds: c.seeds.clone().map(|s| s.0),
        output_dir: c.out.clone(),
        format: c.format,
        mdp: c.mdp.clone(),
        dataset: c.dataset.clone(),
        alpha: c.alpha,
        tau: c.tau,
        variant: c.variant,
        regularizer: c.regularizer,
        ..ExperimentConfig::default()
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let file = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = file.merge(&flags_config(&cli.common));
    match &cli.command {
        Command::GenDataset(a) => {
            overlay_opt(&mut cfg.n_transitions, a.n);
            overlay_opt(&mut cfg.horizon, a.horizon);
            overlay_opt(&mut cfg.reward_noise, a.noise);
            overlay_opt(&mut cfg.behavior, a.behavior.clone());
        }
        Command::Eval(a) => {
            overlay_opt(&mut cfg.behavior, a.behavior.clone());
            overlay_opt(&mut cfg.target, a.target.clone());
            overlay_opt(&mut cfg.c_r, a.c_r);
            overlay_opt(&mut cfg.c_t, a.c_t);
            if a.clamp {
                cfg.clamp = Some(true);
            }
        }
        Command::Learn(a) => {
            overlay_opt(&mut cfg.behavior, a.behavior.clone());
            overlay_opt(&mut cfg.iters, a.iters);
            overlay_opt(&mut cfg.backup, a.backup);
            if a.greedy {
                cfg.greedy_actor = Some(true);
            }
        }
        Command::Verify(a) => {
            overlay_opt(&mut cfg.delta, a.delta);
            overlay_opt(&mut cfg.n_transitions, a.n);
        }
        Command::GenMdp(_) | Command::Report => {}
    }
    cfg.validate()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    match &cli.command {
        Command::GenMdp(a) => gen_mdp(a, &out),
        Command::GenDataset(_) => gen_dataset(&cfg, &out),
        Command::Eval(_) => eval(&cfg, &out),
        Command::Learn(_) => learn(&cfg, &out),
        Command::Verify(a) => verify(a.suite, &cfg, &out),
        Command::Report => report(&cfg, &out),
    }
}

fn overlay_opt<T>(dst: &mut Option<T>, src: Option<T>) {
    if src.is_some() {
        *dst = src;
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("--{what} is required"))
}

fn load_policy(path: Option<&Path>, mdp: &TabularMdp) -> Result<Policy> {
    match path {
        Some(p) => {
            let pi: Policy = formats::read_json(p)?;
            if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
                bail!("{}: policy shape does not match the MDP", p.display());
            }
            Ok(pi)
        }
        None => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions())),
    }
}

fn gen_mdp(a: &GenMdpArgs, out: &Path) -> Result<i32> {
    let mdp = match a.kind {
        MdpKind::Chain2 => chain2(),
        MdpKind::Gridworld => gridworld(a.width, a.height, a.slip)?,
        MdpKind::Random => random_mdp(a.states, a.actions, a.branching, a.gamma, &mut rng_from_seed(a.seed))?,
    };
    let path = out.join("mdp.json");
    formats::write_json(&path, &mdp)?;
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn gen_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let mdp = formats::read_mdp(require(&cfg.mdp, "mdp")?)?;
    let beta = load_policy(cfg.behavior.as_deref(), &mdp)?;
    let sample = SampleConfig {
        n_transitions: cfg.n_transitions.unwrap_or(1_000),
        horizon: cfg.horizon.unwrap_or(50),
        reward_noise: cfg.reward_noise.unwrap_or(0.0),
    };
    for &seed in cfg.seeds.as_deref().unwrap_or(&[0]) {
        let data = sample_dataset_with(&mdp, &beta, &sample, seed)?;
        let path = out.join(format!("dataset_seed{seed}.csv"));
        formats::write_dataset(&path, &data)?;
        println!("wrote {}", path.display());
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: cql_core::eval::EvalReport,
    source: &'static str,
    threshold_applies: bool,
}

fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let mdp = formats::read_mdp(require(&cfg.mdp, "mdp")?)?;
    let beta = load_policy(cfg.behavior.as_deref(), &mdp)?;
    let target = load_policy(cfg.target.as_deref(), &mdp)?;
    let variant: Variant = cfg.variant.unwrap_or(VariantName::Eq2).into();
    let alpha = cfg.alpha.unwrap_or(1.0);
    let mut ec = CqlEvalConfig::new(alpha, target.clone(), variant);
    ec.clamp = cfg.clamp.unwrap_or(false);
    ec.counts_weighted_alpha = cfg.counts_weighted_alpha.unwrap_or(false);
    ec.validate()?;
    let model = match &cfg.dataset {
        Some(p) => {
            let data = formats::read_dataset(p)?;
            Some(build_empirical_model(&data, MdpShape::of(&mdp), None)?)
        }
        None => None,
    };
    let (src, source) = match &model {
        Some(m) => (BackupSource::Empirical(m), "empirical"),
        None => (BackupSource::exact(&mdp, &beta)?, "exact"),
    };
    let threshold = match (&model, cfg.c_r, cfg.c_t) {
        (Some(m), Some(c_r), Some(c_t)) => {
            let conc = ConcentrationConfig::new(c_r, c_t, cfg.delta.unwrap_or(0.1))?;
            let t = match variant {
                Variant::Eq1 => alpha_threshold_eq1(m, &conc, &target, mdp.gamma(), mdp.r_max())?,
                Variant::Eq2 => alpha_threshold_eq2(m, &conc, &target, mdp.gamma(), mdp.r_max())?,
            };
            Some(t.value)
        }
        _ => None,
    };
    let q_hat = cql_fixed_point(&ec, &src, &target)?;
    let v_true = exact_q(&mdp, &target)?.value_under(&target);
    let report = eval_report(&ec, &q_hat, v_true.as_slice(), &target, threshold, 1e-9)?;
    // The lower bound is guaranteed for the exact backup, and for data only at or above the threshold.
    let threshold_applies = model.is_none() || threshold.is_some_and(|t| alpha >= t);
    let violated = threshold_applies && report.violated.iter().any(|&v| v);
    formats::write_json(&out.join("q_hat.json"), &q_hat)?;
    match cfg.format() {
        Format::Json => {
            formats::write_json(&out.join("v_hat.json"), &q_hat.value_under(&target))?;
            formats::write_json(&out.join("v_true.json"), &v_true)?;
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = (0..report.v.len())
                .map(|s| {
                    vec![
                        s.to_string(),
                        report.v_hat[s].to_string(),
                        report.v[s].to_string(),
                        report.gap[s].to_string(),
                        report.violated[s].to_string(),
                    ]
                })
                .collect();
            formats::write_table(&out.join("values.csv"), &["state", "v_hat", "v", "gap", "violated"], &rows)?;
        }
    }
    formats::write_json(
        &out.join("eval_report.json"),
        &EvalOutput {
            report,
            source,
            threshold_applies,
        },
    )?;
    println!("eval: {} violation(s) reported", if violated { "some" } else { "no" });
    Ok(if violated { EXIT_VIOLATION } else { EXIT_OK })
}

#[derive(Serialize)]
struct LearnSummary {
    final_alpha: f64,
    iters: usize,
    j_true: f64,
    j_behavior: f64,
}

fn learn(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let mdp = formats::read_mdp(require(&cfg.mdp, "mdp")?)?;
    let beta = load_policy(cfg.behavior.as_deref(), &mdp)?;
    let alpha = cfg.alpha.unwrap_or(1.0);
    let alpha_mode = match cfg.tau {
        Some(tau) => AlphaMode::Lagrange {
            tau,
            dual_step: cfg.dual_step.unwrap_or(0.1),
            initial_alpha: alpha,
        },
        None => AlphaMode::Fixed(alpha),
    };
    let defaults = CqlLearnConfig::default();
    let lc = CqlLearnConfig {
        regularizer: cfg
            .regularizer
            .unwrap_or(RegularizerName::H)
            .build(cfg.robust_delta.unwrap_or(0.1)),
        alpha_mode,
        backup: cfg.backup.unwrap_or(BackupName::Policy).into(),
        actor: if cfg.greedy_actor.unwrap_or(false) {
            Actor::Greedy
        } else {
            Actor::SoftGreedy {
                temperature: cfg.temperature.unwrap_or(1.0),
            }
        },
        iters: cfg.iters.unwrap_or(defaults.iters),
        policy_step: cfg.policy_step.unwrap_or(defaults.policy_step),
        mu_temperature: cfg.mu_temperature.unwrap_or(defaults.mu_temperature),
        clamp: cfg.clamp.unwrap_or(false),
    };
    lc.validate()?;
    let model = match &cfg.dataset {
        Some(p) => Some(build_empirical_model(&formats::read_dataset(p)?, MdpShape::of(&mdp), None)?),
        None => None,
    };
    let src = match &model {
        Some(m) => BackupSource::Empirical(m),
        None => BackupSource::exact(&mdp, &beta)?,
    };
    let outcome = run_cql(&lc, src, Some(&mdp))?;
    formats::write_trace(&out.join("trace.csv"), &outcome.trace)?;
    formats::write_json(&out.join("policy.json"), &outcome.policy)?;
    formats::write_json(&out.join("q.json"), &outcome.q)?;
    let summary = LearnSummary {
        final_alpha: outcome.alpha,
        iters: lc.iters,
        j_true: cql_core::mdp::return_j(&mdp, &outcome.policy)?,
        j_behavior: cql_core::mdp::return_j(&mdp, src.behavior())?,
    };
    formats::write_json(&out.join("learn_summary.json"), &summary)?;
    println!(
        "learn: J = {:.6} (behavior {:.6}), final alpha {:.6}",
        summary.j_true, summary.j_behavior, summary.final_alpha
    );
    Ok(EXIT_OK)
}

fn verify(suite: Suite, cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let mdp = match &cfg.mdp {
        Some(p) => Some(formats::read_mdp(p)?),
        None => None,
    };
    let params = SuiteParams {
        seeds: cfg
            .seeds
            .clone()
            .unwrap_or_else(|| (0..suite.default_seeds() as u64).collect()),
        alphas: cfg.alpha.map(|a| vec![a]),
        mdp,
        delta: cfg.delta,
        n_transitions: cfg.n_transitions,
        regularizer: cfg.regularizer.map(|r| r.build(cfg.robust_delta.unwrap_or(0.1))),
        tau: cfg.tau,
    };
    params.validate()?;
    let report = run_suite(suite, &params)?;
    write_report(&report, cfg.format(), out)?;
    print_report(&report);
    Ok(if report.ok { EXIT_OK } else { EXIT_VIOLATION })
}

fn write_report(report: &SuiteReport, format: Format, out: &Path) -> Result<()> {
    formats::write_json(&out.join(format!("verify_{}.json", report.suite)), report)?;
    if format == Format::Csv {
        let rows: Vec<Vec<String>> = report
            .checks
            .iter()
            .map(|c| vec![c.group.clone(), c.seed.to_string(), c.value.to_string(), c.pass.to_string()])
            .collect();
        formats::write_table(
            &out.join(format!("verify_{}.csv", report.suite)),
            &["group", "seed", "value", "pass"],
            &rows,
        )?;
    }
    Ok(())
}

fn print_report(report: &SuiteReport) {
    let status = if report.ok { "PASS" } else { "FAIL" };
    println!("{status} {}: {}", report.suite, report.description);
    for g in &report.groups {
        println!(
            "  {:<40} {:>6}/{:<6} rate {:.4} (required {:.2})",
            g.group, g.passed, g.total, g.rate, g.required_rate
        );
    }
    for n in &report.notes {
        println!("  note: {n}");
    }
}

#[derive(Serialize)]
struct ReportRow {
    suite: String,
    group: String,
    passed: usize,
    total: usize,
    rate: f64,
    required_rate: f64,
    ok: bool,
}

fn report(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let mut paths: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("verify_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no verify_*.json reports in {}", out.display());
    }
    let mut rows = Vec::new();
    let mut all_ok = true;
    for p in &paths {
        let r: SuiteReport = formats::read_json(p)?;
        all_ok &= r.ok;
        print_report(&r);
        for g in r.groups {
            rows.push(ReportRow {
                suite: r.suite.clone(),
                group: g.group,
                passed: g.passed,
                total: g.total,
                rate: g.rate,
                required_rate: g.required_rate,
                ok: g.ok,
            });
        }
    }
    match cfg.format() {
        Format::Json => formats::write_json(&out.join("report.json"), &rows)?,
        Format::Csv => {
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.suite.clone(),
                        r.group.clone(),
                        r.passed.to_string(),
                        r.total.to_string(),
                        r.rate.to_string(),
                        r.required_rate.to_string(),
                        r.ok.to_string(),
                    ]
                })
                .collect();
            formats::write_table(
                &out.join("report.csv"),
                &["suite", "group", "passed", "total", "rate", "required_rate", "ok"],
                &table,
            )?;
        }
    }
    Ok(if all_ok { EXIT_OK } else { EXIT_VIOLATION })
}
