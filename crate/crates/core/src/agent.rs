//! Tabular actors and critics.
//!
//! Task and safe policies are per-state softmaxes over logits. Critics are
//! value tables regressed towards TD-λ targets computed on imagined traces.
//! The safety critics come as a twin pair with slowly tracking target
//! copies; their targets bootstrap from the smaller of the two targets.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::env::{ActionId, StateId};
use crate::model::ImaginedTrace;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("state {0} out of range")]
    InvalidState(StateId),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// A stochastic policy over a finite action set.
pub trait Policy {
    fn num_actions(&self) -> usize;

    /// Writes `π(·|state)` into `out` (length `num_actions`).
    fn probabilities_into(&self, state: StateId, out: &mut [f64]);

    fn probabilities(&self, state: StateId) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions()];
        self.probabilities_into(state, &mut out);
        out
    }

    fn sample<R: Rng + ?Sized>(&self, state: StateId, rng: &mut R) -> ActionId {
        let probs = self.probabilities(state);
        sample_categorical(&probs, rng)
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> ActionId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// Uniformly random actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformPolicy {
    num_actions: usize,
}

impl UniformPolicy {
    pub fn new(num_actions: usize) -> Self {
        Self { num_actions }
    }
}

impl Policy for UniformPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn probabilities_into(&self, _state: StateId, out: &mut [f64]) {
        out.fill(1.0 / self.num_actions as f64);
    }

    fn sample<R: Rng + ?Sized>(&self, _state: StateId, rng: &mut R) -> ActionId {
        rng.gen_range(0..self.num_actions)
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = libm::exp(l - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>()
}

/// Softmax policy with one logit per state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform policy (all logits zero).
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            logits: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_logits(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self, AgentError> {
        if logits.len() != num_states * num_actions {
            return Err(AgentError::LengthMismatch(logits.len(), num_states * num_actions));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(AgentError::InvalidParameter("logits must be finite"));
        }
        Ok(Self {
            num_states,
            num_actions,
            logits,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn logits(&self, state: StateId) -> &[f64] {
        &self.logits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn logits_mut(&mut self, state: StateId) -> &mut [f64] {
        &mut self.logits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn all_logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn set_logits(&mut self, state: StateId, logits: &[f64]) {
        self.logits_mut(state).copy_from_slice(logits);
    }

    /// Precomputed cumulative distributions for fast sampling while the
    /// policy is frozen.
    pub fn snapshot(&self) -> PolicySnapshot {
        let mut cdf = vec![0.0; self.logits.len()];
        let mut probs = vec![0.0; self.num_actions];
        for s in 0..self.num_states {
            softmax_into(self.logits(s), &mut probs);
            let mut acc = 0.0;
            for (a, p) in probs.iter().enumerate() {
                acc += p;
                cdf[s * self.num_actions + a] = acc;
            }
        }
        PolicySnapshot {
            num_actions: self.num_actions,
            cdf,
        }
    }
}

impl Policy for TabularPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn probabilities_into(&self, state: StateId, out: &mut [f64]) {
        softmax_into(self.logits(state), out);
    }
}

/// Frozen copy of a [`TabularPolicy`] holding per-state CDFs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    num_actions: usize,
    cdf: Vec<f64>,
}

impl Policy for PolicySnapshot {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn probabilities_into(&self, state: StateId, out: &mut [f64]) {
        let row = &self.cdf[state * self.num_actions..(state + 1) * self.num_actions];
        let mut prev = 0.0;
        for (o, &c) in out.iter_mut().zip(row) {
            *o = c - prev;
            prev = c;
        }
    }

    fn sample<R: Rng + ?Sized>(&self, state: StateId, rng: &mut R) -> ActionId {
        let row = &self.cdf[state * self.num_actions..(state + 1) * self.num_actions];
        let u = rng.gen::<f64>() * row[row.len() - 1];
        row.iter().position(|&c| u < c).unwrap_or(row.len() - 1)
    }
}

/// State-value table with its regression step size.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    values: Vec<f64>,
    pub learning_rate: f64,
}

impl ValueTable {
    pub fn zeros(num_states: usize, learning_rate: f64) -> Self {
        Self {
            values: vec![0.0; num_states],
            learning_rate,
        }
    }

    pub fn from_values(values: Vec<f64>, learning_rate: f64) -> Self {
        Self {
            values,
            learning_rate,
        }
    }

    pub fn get(&self, state: StateId) -> f64 {
        self.values[state]
    }

    pub fn set(&mut self, state: StateId, value: f64) {
        self.values[state] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Twin safety critics `v^C_1, v^C_2` and their delayed targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyCriticPair {
    pub online: [ValueTable; 2],
    pub target: [ValueTable; 2],
    /// ν, the soft-update rate.
    pub tau: f64,
}

impl SafetyCriticPair {
    pub fn zeros(num_states: usize, learning_rate: f64, tau: f64) -> Result<Self, AgentError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(AgentError::InvalidParameter("soft-update rate must lie in (0, 1]"));
        }
        let table = ValueTable::zeros(num_states, learning_rate);
        Ok(Self {
            online: [table.clone(), table.clone()],
            target: [table.clone(), table],
            tau,
        })
    }

    /// `min(v^C_1(s), v^C_2(s))` over the online critics.
    pub fn online_min(&self, state: StateId) -> f64 {
        self.online[0].get(state).min(self.online[1].get(state))
    }

    /// `min(v^C_1'(s), v^C_2'(s))` over the target critics.
    pub fn target_min(&self, state: StateId) -> f64 {
        self.target[0].get(state).min(self.target[1].get(state))
    }
}

/// Which per-step quantity a return accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnStream {
    Reward,
    Cost,
}

/// Which per-step discount a return uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscountStream {
    /// `γ̂_t`, zero at terminal states.
    Task,
    /// `γ̂^safe_t`, zero at violating states.
    Safety,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaReturnSpec {
    pub lambda: f64,
    pub stream: ReturnStream,
    pub discount: DiscountStream,
}

impl LambdaReturnSpec {
    pub fn task(lambda: f64) -> Self {
        Self {
            lambda,
            stream: ReturnStream::Reward,
            discount: DiscountStream::Task,
        }
    }

    /// Cost returns discounted with `γ̂_t`, as used for the safe policy.
    pub fn safe(lambda: f64) -> Self {
        Self {
            lambda,
            stream: ReturnStream::Cost,
            discount: DiscountStream::Task,
        }
    }

    /// Cost returns discounted with `γ̂^safe_t`, as used for the safety critics.
    pub fn safety(lambda: f64) -> Self {
        Self {
            lambda,
            stream: ReturnStream::Cost,
            discount: DiscountStream::Safety,
        }
    }
}

/// TD-λ targets over a trace of length `H`:
///
/// `V_H = x_H + d_H v(ŝ_H)` and
/// `V_t = x_t + d_t [(1-λ) v(ŝ_{t+1}) + λ V_{t+1}]` for `t < H`.
pub fn td_lambda_targets<F>(trace: &ImaginedTrace, value: F, spec: &LambdaReturnSpec) -> Vec<f64>
where
    F: Fn(StateId) -> f64,
{
    let steps = &trace.steps;
    let h = steps.len();
    let mut out = vec![0.0; h];
    if h == 0 {
        return out;
    }
    let x = |i: usize| match spec.stream {
        ReturnStream::Reward => steps[i].reward,
        ReturnStream::Cost => steps[i].cost,
    };
    let d = |i: usize| match spec.discount {
        DiscountStream::Task => steps[i].discount,
        DiscountStream::Safety => steps[i].safety_discount,
    };
    let last = h - 1;
    out[last] = x(last) + d(last) * value(steps[last].state);
    for i in (0..last).rev() {
        let next = steps[i + 1].state;
        out[i] = x(i) + d(i) * ((1.0 - spec.lambda) * value(next) + spec.lambda * out[i + 1]);
    }
    out
}

/// Safety-critic targets: cost stream, safety discounts, bootstrapping from
/// the smaller of the two target critics.
pub fn twin_td_lambda_targets(trace: &ImaginedTrace, pair: &SafetyCriticPair, lambda: f64) -> Vec<f64> {
    td_lambda_targets(trace, |s| pair.target_min(s), &LambdaReturnSpec::safety(lambda))
}

/// One regression step per `(state, target)`: `v(s) += α (target - v(s))`.
pub fn critic_update(table: &mut ValueTable, states: &[StateId], targets: &[f64]) -> Result<(), AgentError> {
    if states.len() != targets.len() {
        return Err(AgentError::LengthMismatch(states.len(), targets.len()));
    }
    let alpha = table.learning_rate;
    for (&s, &t) in states.iter().zip(targets) {
        let v = table.values.get_mut(s).ok_or(AgentError::InvalidState(s))?;
        *v += alpha * (t - *v);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Ascend returns (task policy).
    Maximise,
    /// Descend returns (safe policy minimising cost).
    Minimise,
}

impl Objective {
    pub fn sign(self) -> f64 {
        match self {
            Objective::Maximise => 1.0,
            Objective::Minimise => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyUpdate {
    pub learning_rate: f64,
    /// η, the entropy bonus weight.
    pub entropy_coef: f64,
    pub objective: Objective,
}

/// Gradient of `A·log π(a|s) + η·H(π(·|s))` with respect to the logits of
/// `s`: `A (onehot(a) - π) - η π ⊙ (log π + H)`.
pub fn step_gradient(probs: &[f64], action: ActionId, advantage: f64, entropy_coef: f64, out: &mut [f64]) {
    let h = entropy(probs);
    for (j, (o, &p)) in out.iter_mut().zip(probs).enumerate() {
        let onehot = if j == action { 1.0 } else { 0.0 };
        let log_p = if p > 0.0 { libm::log(p) } else { 0.0 };
        *o = advantage * (onehot - p) - entropy_coef * p * (log_p + h);
    }
}

/// Dense gradient of `Σ_t [A_t log π(a_t|s_t) + η H(π(·|s_t))]` over all
/// logits, evaluated at the current parameters.
pub fn surrogate_gradient(
    policy: &TabularPolicy,
    states: &[StateId],
    actions: &[ActionId],
    advantages: &[f64],
    entropy_coef: f64,
) -> Vec<f64> {
    let na = policy.num_actions;
    let mut grad = vec![0.0; policy.logits.len()];
    let mut probs = vec![0.0; na];
    let mut g = vec![0.0; na];
    for ((&s, &a), &adv) in states.iter().zip(actions).zip(advantages) {
        policy.probabilities_into(s, &mut probs);
        step_gradient(&probs, a, adv, entropy_coef, &mut g);
        for (acc, gi) in grad[s * na..(s + 1) * na].iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    grad
}

/// Advantages `sign · (V^λ_t - v(ŝ_t))` for the first `targets.len()` steps.
pub fn advantages<F>(trace: &ImaginedTrace, targets: &[f64], baseline: F, objective: Objective) -> Vec<f64>
where
    F: Fn(StateId) -> f64,
{
    trace
        .steps
        .iter()
        .zip(targets)
        .map(|(step, &v)| objective.sign() * (v - baseline(step.state)))
        .collect()
}

/// Reinforce step with entropy bonus, applied step by step along the trace
/// with advantages fixed beforehand (`targets` and `baseline` are treated as
/// constants).
pub fn policy_update<F>(
    policy: &mut TabularPolicy,
    trace: &ImaginedTrace,
    targets: &[f64],
    baseline: F,
    params: &PolicyUpdate,
) -> Result<(), AgentError>
where
    F: Fn(StateId) -> f64,
{
    if targets.len() > trace.len() {
        return Err(AgentError::LengthMismatch(targets.len(), trace.len()));
    }
    let adv = advantages(trace, targets, baseline, params.objective);
    apply_advantages(policy, trace, &adv, params)
}

/// As [`policy_update`] with precomputed advantages.
pub fn apply_advantages(
    policy: &mut TabularPolicy,
    trace: &ImaginedTrace,
    advantages: &[f64],
    params: &PolicyUpdate,
) -> Result<(), AgentError> {
    if advantages.len() > trace.len() {
        return Err(AgentError::LengthMismatch(advantages.len(), trace.len()));
    }
    let na = policy.num_actions;
    let mut probs = vec![0.0; na];
    let mut g = vec![0.0; na];
    for (step, &adv) in trace.steps.iter().zip(advantages) {
        if step.state >= policy.num_states {
            return Err(AgentError::InvalidState(step.state));
        }
        policy.probabilities_into(step.state, &mut probs);
        step_gradient(&probs, step.action, adv, params.entropy_coef, &mut g);
        for (l, gi) in policy.logits_mut(step.state).iter_mut().zip(&g) {
            *l += params.learning_rate * gi;
        }
    }
    Ok(())
}

/// `v' ← ν v + (1 - ν) v'` for both critics.
pub fn soft_update(pair: &mut SafetyCriticPair) {
    let tau = pair.tau;
    for (online, target) in pair.online.iter().zip(pair.target.iter_mut()) {
        for (t, &o) in target.values.iter_mut().zip(&online.values) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImaginedStep;

    fn step(state: StateId, reward: f64, cost: f64, discount: f64, safety: f64) -> ImaginedStep {
        ImaginedStep {
            state,
            action: 0,
            reward,
            cost,
            discount,
            safety_discount: safety,
        }
    }

    fn reward_trace(rewards: &[f64], discount: f64) -> ImaginedTrace {
        ImaginedTrace::from_steps(
            rewards
                .iter()
                .enumerate()
                .map(|(i, &r)| step(i, r, 0.0, discount, discount))
                .collect(),
            false,
        )
    }

    #[test]
    fn lambda_recursion_by_hand() {
        let trace = reward_trace(&[1.0, 0.0, 2.0], 0.9);
        let v = td_lambda_targets(&trace, |_| 1.0, &LambdaReturnSpec::task(0.5));
        let expected = [2.23975, 1.755, 2.9];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lambda_zero_is_one_step() {
        let trace = reward_trace(&[0.3, 1.0, 0.2, 0.7], 0.8);
        let value = |s: StateId| 0.1 * s as f64 + 0.5;
        let v = td_lambda_targets(&trace, value, &LambdaReturnSpec::task(0.0));
        for t in 0..3 {
            let one_step = trace.steps[t].reward + 0.8 * value(t + 1);
            assert!((v[t] - one_step).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rewards_and_values_give_zero() {
        let trace = reward_trace(&[0.0; 6], 0.99);
        assert!(td_lambda_targets(&trace, |_| 0.0, &LambdaReturnSpec::task(0.95))
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn twin_targets() {
        let mut pair = SafetyCriticPair::zeros(3, 0.1, 0.005).unwrap();
        pair.target[0].set(1, 0.4);
        pair.target[1].set(1, 0.6);
        let trace = ImaginedTrace::from_steps(
            vec![step(0, 0.0, 0.0, 0.9, 0.9), step(1, 0.0, 0.0, 0.9, 0.9)],
            false,
        );
        let v = twin_td_lambda_targets(&trace, &pair, 0.0);
        assert!((v[0] - 0.36).abs() < 1e-15);

        // A violating step is worth exactly C whatever follows.
        pair.target[0].set(2, 0.7);
        pair.target[1].set(2, 0.9);
        let trace = ImaginedTrace::from_steps(
            vec![step(0, 0.0, 0.0, 0.9, 0.9), step(1, 0.0, 2.0, 0.9, 0.0), step(2, 0.0, 0.0, 0.9, 0.9)],
            false,
        );
        let v = twin_td_lambda_targets(&trace, &pair, 0.95);
        assert_eq!(v[1], 2.0);

        let zero = SafetyCriticPair::zeros(3, 0.1, 0.005).unwrap();
        let trace = ImaginedTrace::from_steps(vec![step(0, 0.0, 0.0, 0.9, 0.9); 4], false);
        assert!(twin_td_lambda_targets(&trace, &zero, 0.5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_steps() {
        let mut t = ValueTable::zeros(2, 0.1);
        critic_update(&mut t, &[0], &[1.0]).unwrap();
        assert!((t.get(0) - 0.1).abs() < 1e-15);
        let mut t = ValueTable::from_values(vec![0.3, 0.0], 0.1);
        critic_update(&mut t, &[0], &[0.3]).unwrap();
        assert_eq!(t.get(0), 0.3);
        let mut t = ValueTable::zeros(2, 0.5);
        critic_update(&mut t, &[1, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(t.get(1), 0.75);
        assert_eq!(critic_update(&mut t, &[1], &[]), Err(AgentError::LengthMismatch(1, 0)));
        assert_eq!(critic_update(&mut t, &[5], &[1.0]), Err(AgentError::InvalidState(5)));
    }

    fn one_step(state: StateId, action: ActionId) -> ImaginedTrace {
        ImaginedTrace::from_steps(
            vec![ImaginedStep {
                state,
                action,
                reward: 0.0,
                cost: 0.0,
                discount: 0.0,
                safety_discount: 0.0,
            }],
            false,
        )
    }

    fn params(entropy_coef: f64) -> PolicyUpdate {
        PolicyUpdate {
            learning_rate: 1.0,
            entropy_coef,
            objective: Objective::Maximise,
        }
    }

    #[test]
    fn reinforce_step_uniform() {
        let mut pi = TabularPolicy::zeros(1, 2);
        policy_update(&mut pi, &one_step(0, 0), &[1.0], |_| 0.0, &params(0.0)).unwrap();
        assert!((pi.logits(0)[0] - 0.5).abs() < 1e-15);
        assert!((pi.logits(0)[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform() {
        let mut pi = TabularPolicy::zeros(1, 3);
        policy_update(&mut pi, &one_step(0, 1), &[0.0], |_| 0.0, &params(0.7)).unwrap();
        assert!(pi.logits(0).iter().all(|l| l.abs() < 1e-15));
    }

    #[test]
    fn reinforce_step_skewed() {
        let mut pi = TabularPolicy::zeros(1, 2);
        // π = (0.9, 0.1)
        pi.set_logits(0, &[libm::log(0.9), libm::log(0.1)]);
        let before = pi.logits(0).to_vec();
        policy_update(&mut pi, &one_step(0, 1), &[2.0], |_| 0.0, &params(0.0)).unwrap();
        assert!((pi.logits(0)[0] - before[0] + 1.8).abs() < 1e-12);
        assert!((pi.logits(0)[1] - before[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn minimising_flips_the_step() {
        let mut pi = TabularPolicy::zeros(1, 2);
        let p = PolicyUpdate {
            objective: Objective::Minimise,
            ..params(0.0)
        };
        policy_update(&mut pi, &one_step(0, 0), &[1.0], |_| 0.0, &p).unwrap();
        assert!((pi.logits(0)[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn soft_updates() {
        let mut pair = SafetyCriticPair::zeros(1, 0.1, 0.005).unwrap();
        pair.online[0].set(0, 1.0);
        pair.online[1].set(0, 1.0);
        soft_update(&mut pair);
        assert!((pair.target[0].get(0) - 0.005).abs() < 1e-15);

        let mut same = SafetyCriticPair::zeros(2, 0.1, 0.3).unwrap();
        same.online[0].set(1, 0.4);
        same.target[0].set(1, 0.4);
        let before = same.clone();
        soft_update(&mut same);
        assert!((same.target[0].get(1) - 0.4).abs() < 1e-15);
        assert_eq!(same.target[1], before.target[1]);

        let mut hard = SafetyCriticPair::zeros(2, 0.1, 1.0).unwrap();
        hard.online[1].set(0, 0.77);
        soft_update(&mut hard);
        assert_eq!(hard.target[1].get(0), 0.77);
        assert!(SafetyCriticPair::zeros(2, 0.1, 0.0).is_err());
    }

    #[test]
    fn snapshot_matches_policy() {
        let mut pi = TabularPolicy::zeros(2, 3);
        pi.set_logits(1, &[0.3, -1.0, 2.0]);
        let snap = pi.snapshot();
        for s in 0..2 {
            let a = pi.probabilities(s);
            let b = snap.probabilities(s);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
