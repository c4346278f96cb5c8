//! On-disk formats: MDP/policy/Q/report JSON, dataset CSV and trace CSV.
//!
//! Column layouts are documented in `schema/csv_columns.md`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cql_core::dataset::{Transition, TransitionDataset};
use cql_core::learn::LearnTrace;
use cql_core::TabularMdp;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_mdp(path: &Path) -> Result<TabularMdp> {
    read_json(path)
}

/// Writes `# seed=`, `# mdp=` comment lines, then `s,a,r,s_next` rows.
pub fn write_dataset(path: &Path, data: &TransitionDataset) -> Result<()> {
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "# seed={}", data.rng_seed)?;
    writeln!(file, "# mdp={}", data.source_mdp_id)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["s", "a", "r", "s_next"])?;
    for t in &data.tuples {
        w.write_record([t.s.to_string(), t.a.to_string(), t.r.to_string(), t.s_next.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TransitionDataset> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let (mut seed, mut mdp_id) = (None, None);
    let mut body = String::new();
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let Some(meta) = line.trim_end().strip_prefix('#') else {
            body.push_str(&line);
            break;
        };
        match meta.trim().split_once('=') {
            Some(("seed", v)) => seed = Some(v.trim().parse::<u64>().context("dataset seed")?),
            Some(("mdp", v)) => mdp_id = Some(v.trim().to_string()),
            _ => bail!("{}: unknown header line {:?}", path.display(), line.trim_end()),
        }
    }
    std::io::Read::read_to_string(&mut reader, &mut body)?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["s", "a", "r", "s_next"] {
        bail!("{}: expected columns s,a,r,s_next, found {:?}", path.display(), headers);
    }
    let mut tuples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| rec.get(j).ok_or_else(|| anyhow!("row {}: missing column {j}", i + 1));
        tuples.push(Transition {
            s: field(0)?.parse().with_context(|| format!("row {}: s", i + 1))?,
            a: field(1)?.parse().with_context(|| format!("row {}: a", i + 1))?,
            r: field(2)?.parse().with_context(|| format!("row {}: r", i + 1))?,
            s_next: field(3)?.parse().with_context(|| format!("row {}: s_next", i + 1))?,
        });
    }
    Ok(TransitionDataset {
        tuples,
        source_mdp_id: mdp_id.ok_or_else(|| anyhow!("{}: missing '# mdp=' header", path.display()))?,
        rng_seed: seed.ok_or_else(|| anyhow!("{}: missing '# seed=' header", path.display()))?,
    })
}

/// Columns `k, alpha, gap, dtv, J_hat_M, J_M`; the last two are blank when unscored.
pub fn write_trace(path: &Path, trace: &LearnTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["k", "alpha", "gap", "dtv", "J_hat_M", "J_M"])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in &trace.records {
        w.write_record([
            r.k.to_string(),
            r.alpha.to_string(),
            r.gap.to_string(),
            r.dtv.to_string(),
            opt(r.j_hat),
            opt(r.j_true),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub alpha: f64,
    pub gap: f64,
    pub dtv: f64,
    pub j_hat: Option<f64>,
    pub j_true: Option<f64>,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            Ok(Some(s.parse()?))
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(TraceRow {
            k: rec[0].parse()?,
            alpha: rec[1].parse()?,
            gap: rec[2].parse()?,
            dtv: rec[3].parse()?,
            j_hat: opt(&rec[4])?,
            j_true: opt(&rec[5])?,
        });
    }
    Ok(rows)
}

/// Writes `(header, rows)` as CSV.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
