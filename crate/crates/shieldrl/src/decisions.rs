//! JSON-lines log of every real step.

use std::io::{self, Write};

use serde::Serialize;
use shieldrl_core::train::StepLog;

#[derive(Serialize)]
struct Line<'a> {
    episode: usize,
    step: usize,
    state: usize,
    action: usize,
    policy: &'a str,
    mu_hat: Option<f64>,
    threshold: Option<f64>,
    next_state: usize,
    reward: f64,
    violation: bool,
}

pub fn to_line(log: &StepLog) -> String {
    serde_json::to_string(&Line {
        episode: log.episode,
        step: log.step,
        state: log.state,
        action: log.action,
        policy: log.policy_used.as_str(),
        mu_hat: log.mu_hat,
        threshold: log.threshold,
        next_state: log.next_state,
        reward: log.reward,
        violation: log.violation,
    })
    .expect("step log serialises")
}

pub struct DecisionLog<W: Write> {
    out: W,
    error: Option<io::Error>,
}

impl<W: Write> DecisionLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, error: None }
    }

    /// Keeps the first write error for [`finish`](Self::finish).
    pub fn record(&mut self, log: &StepLog) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = writeln!(self.out, "{}", to_line(log)) {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}
