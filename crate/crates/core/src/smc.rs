//! Statistical model checking of ε-bounded safety.
//!
//! A state satisfies `P_{≥1-ε}(G<=n Φ)` when the measure `μ` of traces that
//! stay inside `Φ` for `n` steps is at least `1 - ε`. `μ` is estimated by
//! the fraction `μ̂` of `m` sampled traces that do; Hoeffding's inequality
//! gives the `m` that makes `|μ̂ - μ| < ϵ` with probability `1 - δ`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::env::{LabelSet, StateId, TransitionTable};
use crate::logic::{eval_state, EvalError, StateFormula, TraceProperty, Valuation};

/// Slack used when comparing `μ̂` against a threshold; `μ̂` is a ratio of
/// integers and thresholds such as `1 - 0.1 + 0.09` carry rounding error.
pub const THRESHOLD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SmcError {
    #[error("{name} = {value} must lie in (0, 1)")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("trace source ran dry after {0} traces")]
    SourceExhausted(usize),
    #[error("row for state {state} sums to {sum}")]
    RowSum { state: StateId, sum: f64 },
    #[error("state {0} out of range")]
    InvalidState(StateId),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn open_unit(name: &'static str, value: f64) -> Result<f64, SmcError> {
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(SmcError::OutOfRange { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundSide {
    /// `P[|μ̂ - μ| ≥ ϵ] ≤ 2exp(-2mϵ²)`.
    #[default]
    TwoSided,
    /// Only overestimation is bounded: `P[μ̂ - μ ≥ ϵ] ≤ exp(-2mϵ²)`.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecisionMode {
    /// SAFE iff `μ̂ ≥ 1 - ε + ϵ`; an accurate estimate never calls an
    /// unsafe state safe.
    #[default]
    NoFalsePositive,
    /// SAFE iff `μ̂ ≥ 1 - ε - ϵ`; an accurate estimate never calls a safe
    /// state unsafe.
    NoFalseNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Safe,
    Unsafe,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Safe => "SAFE",
            Verdict::Unsafe => "UNSAFE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmcConfig {
    /// ε: tolerated violation probability.
    pub epsilon_safety: f64,
    /// ϵ: estimation accuracy.
    pub epsilon_approx: f64,
    /// δ: probability that the estimate misses by more than ϵ.
    pub delta: f64,
    pub samples: usize,
    pub horizon: u64,
    pub mode: DecisionMode,
    pub bound_side: BoundSide,
}

impl SmcConfig {
    /// Config whose sample count is the Hoeffding minimum for `(ϵ, δ)`.
    pub fn new(
        epsilon_safety: f64,
        epsilon_approx: f64,
        delta: f64,
        horizon: u64,
    ) -> Result<Self, SmcError> {
        let samples = required_samples(epsilon_approx, delta, BoundSide::TwoSided)?;
        let cfg = Self {
            epsilon_safety,
            epsilon_approx,
            delta,
            samples,
            horizon,
            mode: DecisionMode::default(),
            bound_side: BoundSide::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SmcError> {
        open_unit("epsilon_safety", self.epsilon_safety)?;
        open_unit("epsilon_approx", self.epsilon_approx)?;
        open_unit("delta", self.delta)?;
        if self.samples == 0 {
            return Err(SmcError::NoSamples);
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        threshold(self.epsilon_safety, self.epsilon_approx, self.mode)
    }
}

/// Smallest `m` such that `m` samples estimate `μ` within `ϵ` with
/// confidence `1 - δ`: `⌈ln(2/δ) / 2ϵ²⌉` two-sided, `⌈ln(1/δ) / 2ϵ²⌉`
/// one-sided.
pub fn required_samples(epsilon: f64, delta: f64, side: BoundSide) -> Result<usize, SmcError> {
    open_unit("epsilon_approx", epsilon)?;
    open_unit("delta", delta)?;
    let tails = match side {
        BoundSide::TwoSided => 2.0,
        BoundSide::OneSided => 1.0,
    };
    let m = libm::log(tails / delta) / (2.0 * epsilon * epsilon);
    Ok(libm::ceil(m) as usize)
}

/// Hoeffding failure probability for `m` samples at accuracy `ϵ`.
pub fn hoeffding_delta(epsilon: f64, m: usize, side: BoundSide) -> f64 {
    let tails = match side {
        BoundSide::TwoSided => 2.0,
        BoundSide::OneSided => 1.0,
    };
    tails * libm::exp(-2.0 * m as f64 * epsilon * epsilon)
}

/// Fraction of the first `m` traces satisfying `property`.
pub fn estimate_mu<I, T, V, P>(traces: I, property: &P, m: usize) -> Result<f64, SmcError>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[V]>,
    V: Valuation,
    P: TraceProperty + ?Sized,
{
    if m == 0 {
        return Err(SmcError::NoSamples);
    }
    let mut seen = 0;
    let mut satisfied = 0usize;
    for trace in traces.into_iter().take(m) {
        seen += 1;
        if property.check(trace.as_ref())? {
            satisfied += 1;
        }
    }
    if seen < m {
        return Err(SmcError::SourceExhausted(seen));
    }
    Ok(satisfied as f64 / m as f64)
}

pub fn threshold(epsilon_safety: f64, epsilon_approx: f64, mode: DecisionMode) -> f64 {
    match mode {
        DecisionMode::NoFalsePositive => 1.0 - epsilon_safety + epsilon_approx,
        DecisionMode::NoFalseNegative => 1.0 - epsilon_safety - epsilon_approx,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub verdict: Verdict,
    pub threshold: f64,
    /// False when the threshold exceeds 1, i.e. SAFE can never be returned
    /// (`ϵ ≥ ε` in no-false-positive mode).
    pub safe_reachable: bool,
}

/// Whether `μ̂` lies in the closed interval `[threshold, 1]`.
pub fn meets_threshold(mu_hat: f64, threshold: f64) -> bool {
    mu_hat >= threshold - THRESHOLD_TOLERANCE
}

pub fn decide(
    mu_hat: f64,
    epsilon_safety: f64,
    epsilon_approx: f64,
    mode: DecisionMode,
) -> Result<Decision, SmcError> {
    open_unit("epsilon_safety", epsilon_safety)?;
    open_unit("epsilon_approx", epsilon_approx)?;
    if !(0.0..=1.0).contains(&mu_hat) {
        return Err(SmcError::OutOfRange {
            name: "mu_hat",
            value: mu_hat,
        });
    }
    let threshold = threshold(epsilon_safety, epsilon_approx, mode);
    let safe_reachable = threshold <= 1.0 + THRESHOLD_TOLERANCE;
    let verdict = if safe_reachable && meets_threshold(mu_hat, threshold) {
        Verdict::Safe
    } else {
        Verdict::Unsafe
    };
    Ok(Decision {
        verdict,
        threshold,
        safe_reachable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyEstimate {
    pub mu_hat: f64,
    pub samples: usize,
    pub verdict: Verdict,
    pub threshold: f64,
}

/// Estimate and decide in one go.
pub fn check<I, T, V, P>(traces: I, property: &P, cfg: &SmcConfig) -> Result<SafetyEstimate, SmcError>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[V]>,
    V: Valuation,
    P: TraceProperty + ?Sized,
{
    cfg.validate()?;
    let mu_hat = estimate_mu(traces, property, cfg.samples)?;
    let decision = decide(mu_hat, cfg.epsilon_safety, cfg.epsilon_approx, cfg.mode)?;
    Ok(SafetyEstimate {
        mu_hat,
        samples: cfg.samples,
        verdict: decision.verdict,
        threshold: decision.threshold,
    })
}

// ---------------------------------------------------------------------------
// Exact oracle

/// A finite Markov chain `T(s, s')`, e.g. an MDP closed under a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    rows: Vec<Vec<(StateId, f64)>>,
}

impl MarkovChain {
    pub fn new(rows: Vec<Vec<(StateId, f64)>>) -> Result<Self, SmcError> {
        let n = rows.len();
        for (state, row) in rows.iter().enumerate() {
            if let Some(&(s, _)) = row.iter().find(|(s, _)| *s >= n) {
                return Err(SmcError::InvalidState(s));
            }
            let sum: f64 = row.iter().map(|(_, p)| p).sum();
            if libm::fabs(sum - 1.0) > 1e-9 || row.iter().any(|(_, p)| *p < 0.0) {
                return Err(SmcError::RowSum { state, sum });
            }
        }
        Ok(Self { rows })
    }

    /// Closes an MDP under a stochastic policy: `T(s,s') = Σ_a π(a|s) p(s'|s,a)`.
    pub fn from_policy<F>(table: &TransitionTable, mut policy: F) -> Result<Self, SmcError>
    where
        F: FnMut(StateId) -> Vec<f64>,
    {
        let mut rows = Vec::with_capacity(table.num_states);
        for s in 0..table.num_states {
            let probs = policy(s);
            let mut row: Vec<(StateId, f64)> = Vec::new();
            for (a, &pa) in probs.iter().enumerate().take(table.num_actions) {
                if pa == 0.0 {
                    continue;
                }
                for t in table.row(s, a) {
                    match row.iter_mut().find(|(n, _)| *n == t.next) {
                        Some(entry) => entry.1 += pa * t.prob,
                        None => row.push((t.next, pa * t.prob)),
                    }
                }
            }
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, state: StateId) -> &[(StateId, f64)] {
        &self.rows[state]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, state: StateId, rng: &mut R) -> StateId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = &self.rows[state];
        for &(next, p) in row {
            acc += p;
            if u < acc {
                return next;
            }
        }
        row.last().map_or(state, |(s, _)| *s)
    }
}

/// Exact `μ_{s ⊨ G<=n Φ}` by backward recursion:
/// `μ(s, 0) = 1[s ⊨ Φ]`, `μ(s, k) = 1[s ⊨ Φ] · Σ_{s'} T(s, s') μ(s', k-1)`.
pub fn exact_mu_oracle(
    chain: &MarkovChain,
    labels: &[LabelSet],
    invariant: &StateFormula,
    horizon: u64,
    state: StateId,
) -> Result<f64, SmcError> {
    Ok(exact_mu_table(chain, labels, invariant, horizon)?[state])
}

/// `μ(s, n)` for every state at once.
pub fn exact_mu_table(
    chain: &MarkovChain,
    labels: &[LabelSet],
    invariant: &StateFormula,
    horizon: u64,
) -> Result<Vec<f64>, SmcError> {
    let n = chain.num_states();
    if labels.len() != n {
        return Err(SmcError::InvalidState(labels.len()));
    }
    let safe: Vec<f64> = labels
        .iter()
        .map(|l| eval_state(l, invariant).map(|b| if b { 1.0 } else { 0.0 }))
        .collect::<Result<_, _>>()?;
    let mut mu = safe.clone();
    let mut next = vec![0.0; n];
    for _ in 0..horizon {
        for s in 0..n {
            next[s] = if safe[s] == 0.0 {
                0.0
            } else {
                chain.rows[s].iter().map(|&(t, p)| p * mu[t]).sum()
            };
        }
        core::mem::swap(&mut mu, &mut next);
    }
    Ok(mu)
}
