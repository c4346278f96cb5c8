//! The acceptance criteria as data: each entry names a check, its wall-time
//! budget, and the suite run that decides it.

use std::time::{Duration, Instant};

use anyhow::Result;
use cql::suites::{
    bias_checks, estimate_bias, linear_bound, oracle_equivalences, run_suite, Suite, SuiteParams, SuiteReport,
};

pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub budget: Duration,
    pub run: fn() -> Result<SuiteReport>,
}

/// Result of running one criterion.
pub struct Verdict {
    pub id: u32,
    pub pass: bool,
    pub in_time: bool,
    pub elapsed: Duration,
    pub line: String,
}

fn suite(s: Suite, seeds: usize) -> Result<SuiteReport> {
    run_suite(s, &SuiteParams::with_seeds(seeds))
}

pub const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        name: "pointwise penalty lower-bounds Q, exact backup",
        budget: Duration::from_secs(30),
        run: || suite(Suite::T1, 200),
    },
    Criterion {
        id: 2,
        name: "expected penalty lower-bounds V, closed form, witness",
        budget: Duration::from_secs(30),
        run: || suite(Suite::T2, 200),
    },
    Criterion {
        id: 3,
        name: "sampled lower bounds at thresholds, rate >= 1 - delta",
        budget: Duration::from_secs(300),
        run: || suite(Suite::T3, 500),
    },
    Criterion {
        id: 4,
        name: "gap expansion at required alpha + 0.1",
        budget: Duration::from_secs(60),
        run: || suite(Suite::T4, 200),
    },
    Criterion {
        id: 5,
        name: "objective equivalence on 2x2 empirical MDPs",
        budget: Duration::from_secs(120),
        run: || suite(Suite::T5, 50),
    },
    Criterion {
        id: 6,
        name: "safe policy improvement within zeta",
        budget: Duration::from_secs(600),
        run: || suite(Suite::T6, 500),
    },
    Criterion {
        id: 7,
        name: "linear FA bound and per-state projection penalty sign",
        budget: Duration::from_secs(120),
        run: || linear_bound(&SuiteParams::with_seeds(100), 100),
    },
    Criterion {
        id: 8,
        name: "behavior-maximizing nu is necessary",
        budget: Duration::from_secs(30),
        run: || suite(Suite::D3, 1000),
    },
    Criterion {
        id: 9,
        name: "estimate bias signs and ordering",
        budget: Duration::from_secs(300),
        run: || {
            let seeds: Vec<u64> = (0..200).collect();
            Ok(bias_checks(&estimate_bias(&seeds, 1.0)?))
        },
    },
    Criterion {
        id: 10,
        name: "oracle equivalences",
        budget: Duration::from_secs(60),
        run: || {
            let seeds: Vec<u64> = (0..20).collect();
            oracle_equivalences(&seeds, 5_000)
        },
    },
];

impl Criterion {
    pub fn evaluate(&self) -> Verdict {
        let start = Instant::now();
        let result = (self.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= self.budget;
        let (ok, mut summary) = match result {
            Ok(r) => {
                let mut s = r.summary_line();
                if !r.notes.is_empty() {
                    s.push_str(&format!(" [{}]", r.notes.join("; ")));
                }
                (r.ok, s)
            }
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !in_time {
            summary.push_str(" (over budget)");
        }
        let pass = ok && in_time;
        let line = format!(
            "[{}] {:>2}. {} | {} | {:.1}s (limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            summary,
            elapsed.as_secs_f64(),
            self.budget.as_secs()
        );
        Verdict {
            id: self.id,
            pass,
            in_time,
            elapsed,
            line,
        }
    }
}
