//! Experiment configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cql_core::eval::Variant;
use cql_core::learn::{LearnBackup, PHat, Prior, Regularizer};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CQL_OUT_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    #[default]
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    /// Pointwise penalty `αμ/π̂_β`.
    #[value(alias = "pointwise")]
    #[serde(alias = "pointwise")]
    Eq1,
    /// Expected-value penalty `α(μ/π̂_β − 1)`.
    #[value(alias = "expected")]
    #[serde(alias = "expected")]
    Eq2,
}

impl From<VariantName> for Variant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::Eq1 => Variant::Eq1,
            VariantName::Eq2 => Variant::Eq2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerName {
    H,
    RhoUniform,
    RhoPrev,
    RhoBehavior,
    Var,
    VarInverse,
}

impl RegularizerName {
    pub fn build(self, robust_delta: f64) -> Regularizer {
        match self {
            RegularizerName::H => Regularizer::H,
            RegularizerName::RhoUniform => Regularizer::Rho(Prior::Uniform),
            RegularizerName::RhoPrev => Regularizer::Rho(Prior::PreviousPolicy),
            RegularizerName::RhoBehavior => Regularizer::Rho(Prior::Behavior),
            RegularizerName::Var => Regularizer::Var {
                p_hat: PHat::Uniform,
                robust_delta,
            },
            RegularizerName::VarInverse => Regularizer::Var {
                p_hat: PHat::InverseCounts,
                robust_delta,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackupName {
    Policy,
    Optimality,
}

impl From<BackupName> for LearnBackup {
    fn from(b: BackupName) -> Self {
        match b {
            BackupName::Policy => LearnBackup::PolicyEval,
            BackupName::Optimality => LearnBackup::Optimality,
        }
    }
}

/// Every field is optional in the file; commands fill in their own defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub format: Option<Format>,
    pub mdp: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub behavior: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub dual_step: Option<f64>,
    pub variant: Option<VariantName>,
    pub regularizer: Option<RegularizerName>,
    pub robust_delta: Option<f64>,
    pub backup: Option<BackupName>,
    pub greedy_actor: Option<bool>,
    pub temperature: Option<f64>,
    pub mu_temperature: Option<f64>,
    pub policy_step: Option<f64>,
    pub iters: Option<usize>,
    pub clamp: Option<bool>,
    pub counts_weighted_alpha: Option<bool>,
    pub n_transitions: Option<usize>,
    pub horizon: Option<usize>,
    pub reward_noise: Option<f64>,
    pub delta: Option<f64>,
    pub c_r: Option<f64>,
    pub c_t: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `other` replace those in `self`.
    pub fn merge(mut self, other: &ExperimentConfig) -> Self {
        let s = &mut self;
        overlay!(s, other; seeds, output_dir, format, mdp, dataset, behavior, target, alpha, tau, dual_step,
            variant, regularizer, robust_delta, backup, greedy_actor, temperature, mu_temperature,
            policy_step, iters, clamp, counts_weighted_alpha, n_transitions, horizon, reward_noise, delta,
            c_r, c_t);
        self
    }

    /// Rejects values no command could use.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.seeds {
            if s.is_empty() {
                bail!("seeds must be nonempty");
            }
        }
        let nonneg = [("alpha", self.alpha), ("reward_noise", self.reward_noise), ("c_r", self.c_r), ("c_t", self.c_t)];
        for (name, v) in nonneg {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    bail!("{name} must be finite and non-negative, got {v}");
                }
            }
        }
        let positive = [
            ("dual_step", self.dual_step),
            ("temperature", self.temperature),
            ("mu_temperature", self.mu_temperature),
            ("robust_delta", self.robust_delta),
        ];
        for (name, v) in positive {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    bail!("{name} must be positive, got {v}");
                }
            }
        }
        if let Some(t) = self.tau {
            if !t.is_finite() {
                bail!("tau must be finite");
            }
        }
        if let Some(p) = self.policy_step {
            if !(p > 0.0 && p <= 1.0) {
                bail!("policy_step must lie in (0, 1], got {p}");
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                bail!("delta must lie in (0, 1), got {d}");
            }
        }
        for (name, v) in [("iters", self.iters), ("n_transitions", self.n_transitions), ("horizon", self.horizon)] {
            if v == Some(0) {
                bail!("{name} must be positive");
            }
        }
        Ok(())
    }

    /// Explicit setting, then `CQL_OUT_DIR`, then `./cql_out`.
    pub fn out_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("cql_out"))
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or_default()
    }
}

/// Parses `"3"`, `"1,4,9"` or a half-open range `"0..500"`.
pub fn parse_seeds(text: &str) -> std::result::Result<Vec<u64>, String> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|e| format!("seed range start: {e}"))?;
        let hi: u64 = b.trim().parse().map_err(|e| format!("seed range end: {e}"))?;
        if hi <= lo {
            return Err(format!("empty seed range {text}"));
        }
        return Ok((lo..hi).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("seed {s:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(String::from("no seeds given"));
    }
    Ok(seeds)
}
