//! Count-based world model, replay buffer and imagined rollouts.
//!
//! The model is the maximum-likelihood tabular estimate of the environment:
//! next-state frequencies and mean rewards per state-action pair, and per
//! state the mean cost, the rate of violations and the rate of termination.
//! Cost, termination and violation statistics are attributed to the state
//! they describe, i.e. the state a transition arrives in.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng;

use crate::agent::Policy;
use crate::env::{ActionId, LabelSet, StateId};
use crate::logic::{eval_state, EvalError, StateFormula, Valuation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("state {0} out of range")]
    InvalidState(StateId),
    #[error("action {0} out of range")]
    InvalidAction(ActionId),
    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,
    #[error("replay capacity must be positive")]
    ZeroCapacity,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("inconsistent count tables")]
    Inconsistent,
}

/// Cost target: `0` if the labels satisfy `Φ`, `C` otherwise.
pub fn make_cost_target<V: Valuation + ?Sized>(
    labels: &V,
    invariant: &StateFormula,
    cost: f64,
) -> Result<f64, EvalError> {
    Ok(if eval_state(labels, invariant)? { 0.0 } else { cost })
}

/// Safety-discount target: `γ` if the labels satisfy `Φ`, `0` otherwise, so
/// that violating states act as terminal states for the safety critics.
pub fn make_safety_discount_target<V: Valuation + ?Sized>(
    labels: &V,
    invariant: &StateFormula,
    gamma: f64,
) -> Result<f64, EvalError> {
    Ok(if eval_state(labels, invariant)? { gamma } else { 0.0 })
}

/// A safety invariant checked once for being free of probabilistic
/// operators, after which labelling is infallible.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLabeller {
    invariant: StateFormula,
    cost: f64,
    gamma: f64,
}

impl CostLabeller {
    pub fn new(invariant: StateFormula, cost: f64, gamma: f64) -> Result<Self, EvalError> {
        if invariant.is_probabilistic() {
            return Err(EvalError::Probabilistic);
        }
        Ok(Self {
            invariant,
            cost,
            gamma,
        })
    }

    pub fn invariant(&self) -> &StateFormula {
        &self.invariant
    }

    pub fn is_safe(&self, labels: &LabelSet) -> bool {
        eval_state(labels, &self.invariant).unwrap_or(false)
    }

    pub fn cost(&self, labels: &LabelSet) -> f64 {
        if self.is_safe(labels) { 0.0 } else { self.cost }
    }

    pub fn safety_discount(&self, labels: &LabelSet) -> f64 {
        if self.is_safe(labels) { self.gamma } else { 0.0 }
    }
}

/// `⟨s, a, r, c, γ^safe, s'⟩`; `cost`, `safety_discount` and `terminal`
/// describe `next_state`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRecord {
    pub state: StateId,
    pub action: ActionId,
    pub reward: f64,
    pub cost: f64,
    pub safety_discount: f64,
    pub next_state: StateId,
    pub terminal: bool,
}

impl TransitionRecord {
    pub fn is_violation(&self) -> bool {
        self.safety_discount == 0.0
    }
}

/// Bounded FIFO of real experience.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    records: VecDeque<TransitionRecord>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, ModelError> {
        if capacity == 0 {
            return Err(ModelError::ZeroCapacity);
        }
        Ok(Self {
            records: VecDeque::new(),
            capacity,
        })
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<TransitionRecord>, ModelError> {
        if self.records.is_empty() {
            return Err(ModelError::EmptyBuffer);
        }
        Ok((0..batch_size)
            .map(|_| self.records[rng.gen_range(0..self.records.len())])
            .collect())
    }
}

/// Prior for state-action pairs and states the model has never seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostPrior {
    /// Unseen states cost nothing.
    #[default]
    Optimistic,
    /// Unseen states are assumed to violate.
    Pessimistic,
}

/// Everything the model predicts for one state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub next: Vec<(StateId, f64)>,
    pub reward: f64,
    pub cost: f64,
    pub discount: f64,
    pub safety_discount: f64,
}

/// Per-state statistics of observed arrivals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StateStats {
    pub visits: u64,
    pub cost_sum: f64,
    pub violations: u64,
    pub terminals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularWorldModel {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    violation_cost: f64,
    prior: CostPrior,
    /// Per (s, a), sorted by next state.
    counts: Vec<Vec<(StateId, u64)>>,
    visits: Vec<u64>,
    reward_sums: Vec<f64>,
    states: Vec<StateStats>,
}

/// Above this termination rate a state is treated as terminal by rollouts.
pub const TERMINAL_RATE_THRESHOLD: f64 = 0.5;

impl TabularWorldModel {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        violation_cost: f64,
        prior: CostPrior,
    ) -> Result<Self, ModelError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(ModelError::InvalidParameter("gamma must lie in (0, 1)"));
        }
        if !(violation_cost > 0.0 && violation_cost.is_finite()) {
            return Err(ModelError::InvalidParameter("violation cost must be positive"));
        }
        if num_states == 0 || num_actions == 0 {
            return Err(ModelError::InvalidParameter("empty state or action space"));
        }
        let pairs = num_states * num_actions;
        Ok(Self {
            num_states,
            num_actions,
            gamma,
            violation_cost,
            prior,
            counts: alloc::vec![Vec::new(); pairs],
            visits: alloc::vec![0; pairs],
            reward_sums: alloc::vec![0.0; pairs],
            states: alloc::vec![StateStats::default(); num_states],
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn violation_cost(&self) -> f64 {
        self.violation_cost
    }

    pub fn prior(&self) -> CostPrior {
        self.prior
    }

    fn pair(&self, state: StateId, action: ActionId) -> usize {
        state * self.num_actions + action
    }

    fn check(&self, state: StateId, action: ActionId) -> Result<(), ModelError> {
        if state >= self.num_states {
            return Err(ModelError::InvalidState(state));
        }
        if action >= self.num_actions {
            return Err(ModelError::InvalidAction(action));
        }
        Ok(())
    }

    pub fn observe(&mut self, record: &TransitionRecord) -> Result<(), ModelError> {
        self.check(record.state, record.action)?;
        if record.next_state >= self.num_states {
            return Err(ModelError::InvalidState(record.next_state));
        }
        let pair = self.pair(record.state, record.action);
        let row = &mut self.counts[pair];
        match row.binary_search_by_key(&record.next_state, |(s, _)| *s) {
            Ok(i) => row[i].1 += 1,
            Err(i) => row.insert(i, (record.next_state, 1)),
        }
        self.visits[pair] += 1;
        self.reward_sums[pair] += record.reward;
        self.observe_state(
            record.next_state,
            record.cost,
            record.safety_discount,
            record.terminal,
        )
    }

    /// Records the labels of a state reached without a transition, e.g. an
    /// initial state.
    pub fn observe_state(
        &mut self,
        state: StateId,
        cost: f64,
        safety_discount: f64,
        terminal: bool,
    ) -> Result<(), ModelError> {
        let stats = self
            .states
            .get_mut(state)
            .ok_or(ModelError::InvalidState(state))?;
        stats.visits += 1;
        stats.cost_sum += cost;
        stats.violations += u64::from(safety_discount == 0.0);
        stats.terminals += u64::from(terminal);
        Ok(())
    }

    pub fn visits(&self, state: StateId, action: ActionId) -> u64 {
        self.visits[self.pair(state, action)]
    }

    pub fn transition_prob(&self, state: StateId, action: ActionId, next: StateId) -> f64 {
        let pair = self.pair(state, action);
        let n = self.visits[pair];
        if n == 0 {
            return if next == state { 1.0 } else { 0.0 };
        }
        self.counts[pair]
            .iter()
            .find(|(s, _)| *s == next)
            .map_or(0.0, |(_, c)| *c as f64 / n as f64)
    }

    pub fn reward(&self, state: StateId, action: ActionId) -> f64 {
        let pair = self.pair(state, action);
        match self.visits[pair] {
            0 => 0.0,
            n => self.reward_sums[pair] / n as f64,
        }
    }

    pub fn state_stats(&self, state: StateId) -> StateStats {
        self.states[state]
    }

    pub fn terminal_rate(&self, state: StateId) -> f64 {
        let s = &self.states[state];
        match s.visits {
            0 => 0.0,
            n => s.terminals as f64 / n as f64,
        }
    }

    pub fn violation_rate(&self, state: StateId) -> f64 {
        let s = &self.states[state];
        match (s.visits, self.prior) {
            (0, CostPrior::Optimistic) => 0.0,
            (0, CostPrior::Pessimistic) => 1.0,
            (n, _) => s.violations as f64 / n as f64,
        }
    }

    /// `ĉ(s)`.
    pub fn cost(&self, state: StateId) -> f64 {
        let s = &self.states[state];
        match (s.visits, self.prior) {
            (0, CostPrior::Optimistic) => 0.0,
            (0, CostPrior::Pessimistic) => self.violation_cost,
            (n, _) => s.cost_sum / n as f64,
        }
    }

    /// `γ̂(s) = γ (1 - terminal rate)`.
    pub fn discount(&self, state: StateId) -> f64 {
        self.gamma * (1.0 - self.terminal_rate(state))
    }

    /// `γ̂^safe(s) = γ (1 - violation rate)`.
    pub fn safety_discount(&self, state: StateId) -> f64 {
        self.gamma * (1.0 - self.violation_rate(state))
    }

    pub fn is_terminal(&self, state: StateId) -> bool {
        self.terminal_rate(state) > TERMINAL_RATE_THRESHOLD
    }

    pub fn predict(&self, state: StateId, action: ActionId) -> Result<Prediction, ModelError> {
        self.check(state, action)?;
        let pair = self.pair(state, action);
        let n = self.visits[pair];
        let next = if n == 0 {
            alloc::vec![(state, 1.0)]
        } else {
            self.counts[pair]
                .iter()
                .map(|&(s, c)| (s, c as f64 / n as f64))
                .collect()
        };
        Ok(Prediction {
            next,
            reward: self.reward(state, action),
            cost: self.cost(state),
            discount: self.discount(state),
            safety_discount: self.safety_discount(state),
        })
    }

    /// Draws `s' ~ p̂(·|s, a)` with an integer draw over the visit count.
    pub fn sample_next<R: Rng + ?Sized>(&self, state: StateId, action: ActionId, rng: &mut R) -> StateId {
        let pair = self.pair(state, action);
        let n = self.visits[pair];
        if n == 0 {
            return state;
        }
        let mut k = rng.gen_range(0..n);
        for &(next, c) in &self.counts[pair] {
            if k < c {
                return next;
            }
            k -= c;
        }
        unreachable!("visit count exceeds row total")
    }

    /// Rolls the model forward from `start` under `policy` for up to
    /// `horizon` steps. Step `t` carries `ŝ_t`, the action taken there,
    /// `r̂(ŝ_t, â_t)` and the per-state predictions for `ŝ_t`. The rollout
    /// stops after the first state the model considers terminal.
    pub fn rollout<P, R>(&self, policy: &P, start: StateId, horizon: usize, rng: &mut R) -> ImaginedTrace
    where
        P: Policy,
        R: Rng + ?Sized,
    {
        let mut trace = ImaginedTrace::with_capacity(horizon);
        self.rollout_into(policy, start, horizon, rng, &mut trace);
        trace
    }

    /// As [`rollout`](Self::rollout), reusing `trace`'s allocation.
    pub fn rollout_into<P, R>(
        &self,
        policy: &P,
        start: StateId,
        horizon: usize,
        rng: &mut R,
        trace: &mut ImaginedTrace,
    ) where
        P: Policy,
        R: Rng + ?Sized,
    {
        trace.steps.clear();
        trace.terminated = false;
        let mut state = start;
        for t in 0..horizon {
            let action = policy.sample(state, rng);
            trace.steps.push(ImaginedStep {
                state,
                action,
                reward: self.reward(state, action),
                cost: self.cost(state),
                discount: self.discount(state),
                safety_discount: self.safety_discount(state),
            });
            if self.is_terminal(state) {
                trace.terminated = true;
                break;
            }
            if t + 1 < horizon {
                state = self.sample_next(state, action, rng);
            }
        }
    }

    /// Sparse view of the transition counts as `(s, a, s', count)`.
    pub fn transition_counts(&self) -> impl Iterator<Item = (StateId, ActionId, StateId, u64)> + '_ {
        self.counts.iter().enumerate().flat_map(move |(pair, row)| {
            let (s, a) = (pair / self.num_actions, pair % self.num_actions);
            row.iter().map(move |&(next, c)| (s, a, next, c))
        })
    }

    /// Sparse view of the reward sums as `(s, a, sum)`.
    pub fn reward_sums(&self) -> impl Iterator<Item = (StateId, ActionId, f64)> + '_ {
        self.reward_sums
            .iter()
            .enumerate()
            .filter(|(pair, _)| self.visits[*pair] > 0)
            .map(move |(pair, &r)| (pair / self.num_actions, pair % self.num_actions, r))
    }

    /// Rebuilds a model from its sparse tables. Visit counts are derived
    /// from the transition counts.
    pub fn from_parts(
        mut model: TabularWorldModel,
        transitions: impl IntoIterator<Item = (StateId, ActionId, StateId, u64)>,
        reward_sums: impl IntoIterator<Item = (StateId, ActionId, f64)>,
        states: impl IntoIterator<Item = (StateId, StateStats)>,
    ) -> Result<Self, ModelError> {
        for (s, a, next, c) in transitions {
            model.check(s, a)?;
            if next >= model.num_states {
                return Err(ModelError::InvalidState(next));
            }
            let pair = model.pair(s, a);
            let row = &mut model.counts[pair];
            match row.binary_search_by_key(&next, |(t, _)| *t) {
                Ok(_) => return Err(ModelError::Inconsistent),
                Err(i) => row.insert(i, (next, c)),
            }
            model.visits[pair] += c;
        }
        for (s, a, r) in reward_sums {
            model.check(s, a)?;
            let pair = model.pair(s, a);
            if model.visits[pair] == 0 {
                return Err(ModelError::Inconsistent);
            }
            model.reward_sums[pair] = r;
        }
        for (s, stats) in states {
            *model
                .states
                .get_mut(s)
                .ok_or(ModelError::InvalidState(s))? = stats;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImaginedStep {
    pub state: StateId,
    pub action: ActionId,
    pub reward: f64,
    pub cost: f64,
    pub discount: f64,
    pub safety_discount: f64,
}

/// `ŝ_{1:H}` with the model's per-step predictions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImaginedTrace {
    pub steps: Vec<ImaginedStep>,
    /// Whether the rollout stopped early at a predicted terminal state.
    pub terminated: bool,
}

impl ImaginedTrace {
    pub fn with_capacity(horizon: usize) -> Self {
        Self {
            steps: Vec::with_capacity(horizon),
            terminated: false,
        }
    }

    pub fn from_steps(steps: Vec<ImaginedStep>, terminated: bool) -> Self {
        Self { steps, terminated }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.steps.iter().map(|s| s.state)
    }

    /// Number of leading steps that learning updates should use: all but
    /// the last, unless the last one is terminal and so has an exact target.
    pub fn trainable_len(&self) -> usize {
        if self.terminated {
            self.steps.len()
        } else {
            self.steps.len().saturating_sub(1)
        }
    }
}
