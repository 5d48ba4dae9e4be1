//! Runner for the acceptance suite.
//!
//! Each criterion is a plain function returning a [`Verdict`]. The runner prints one
//! `PASS` or `FAIL` line per criterion as it finishes; a panic inside a criterion is
//! reported as a failure and does not stop the remaining ones.

use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

/// Accumulates named sub-checks into one verdict.
#[derive(Debug, Default)]
pub struct Checks {
    failed: bool,
    parts: Vec<String>,
}

impl Checks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, ok: bool, what: impl Into<String>) -> &mut Self {
        let what = what.into();
        if ok {
            self.parts.push(what);
        } else {
            self.failed = true;
            self.parts.push(format!("NOT {what}"));
        }
        self
    }

    /// Informational, never fails.
    pub fn note(&mut self, what: impl Into<String>) -> &mut Self {
        self.parts.push(what.into());
        self
    }

    pub fn verdict(&self) -> Verdict {
        Verdict { pass: !self.failed && !self.parts.is_empty(), detail: self.parts.join("; ") }
    }
}

pub struct Criterion {
    pub id: usize,
    pub title: &'static str,
    pub run: fn() -> Verdict,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: usize,
    pub title: &'static str,
    pub verdict: Verdict,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} [{:>2}] {}: {} ({:.1} s)",
            if self.verdict.pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.verdict.detail,
            self.seconds
        )
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Runs one criterion, converting a panic into a failed verdict.
pub fn run_one(c: &Criterion) -> Outcome {
    let start = Instant::now();
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let result = panic::catch_unwind(AssertUnwindSafe(c.run));
    panic::set_hook(hook);
    let verdict = result.unwrap_or_else(|p| Verdict {
        pass: false,
        detail: format!("panicked: {}", panic_message(p.as_ref()).replace('\n', " ")),
    });
    Outcome { id: c.id, title: c.title, verdict, seconds: start.elapsed().as_secs_f64() }
}

/// Runs the selected criteria (all when `only` is empty), printing each line as it completes.
pub fn run_all(criteria: &[Criterion], only: &[usize]) -> Vec<Outcome> {
    criteria
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.id))
        .map(|c| {
            let o = run_one(c);
            println!("{}", o.line());
            o
        })
        .collect()
}

pub fn summary(outcomes: &[Outcome]) -> String {
    let passed = outcomes.iter().filter(|o| o.verdict.pass).count();
    let mut s = format!("acceptance: {passed}/{} criteria passed", outcomes.len());
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.verdict.pass).map(|o| o.id.to_string()).collect();
    if !failed.is_empty() {
        let _ = write!(s, " (failed: {})", failed.join(", "));
    }
    s
}
