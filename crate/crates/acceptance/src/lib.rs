//! Runner for the acceptance suite. Each criterion is a closure that returns
//! a short measurement on success; the runner adds timing, turns panics into
//! failures and fails anything that overruns its budget.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    NotRun,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub verdict: Verdict,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        let tag = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::NotRun => "SKIP",
        };
        if self.verdict == Verdict::NotRun {
            return format!("{tag} {}: {}", self.name, self.detail);
        }
        format!(
            "{tag} {}: {} [{:.2}s of {}s]",
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs()
        )
    }
}

/// Runs `check` and judges it against `budget`.
pub fn run(name: &'static str, budget: Duration, check: impl FnOnce() -> Result<String, String>) -> Outcome {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(check));
    let elapsed = start.elapsed();
    let (verdict, detail) = match result {
        Ok(Ok(d)) if elapsed <= budget => (Verdict::Pass, d),
        Ok(Ok(d)) => (Verdict::Fail, format!("{d}; over time budget")),
        Ok(Err(e)) => (Verdict::Fail, e),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            (Verdict::Fail, format!("panicked: {msg}"))
        }
    };
    Outcome { name, verdict, detail, elapsed, budget }
}

pub fn not_run(name: &'static str, reason: &str) -> Outcome {
    Outcome {
        name,
        verdict: Verdict::NotRun,
        detail: reason.into(),
        elapsed: Duration::ZERO,
        budget: Duration::ZERO,
    }
}

/// Fails with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
