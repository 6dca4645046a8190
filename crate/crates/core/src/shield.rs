//! The look-ahead shield.
//!
//! Before every real step the world model is rolled out `m` times under the
//! task policy from the current state. Each imagined trace gets a discounted
//! cost; a trace counts as safe when that cost stays below `γ^{H-1}·C`
//! (or `γ^{T-1}·C` when the tail is bootstrapped with the safety critics).
//! If the fraction of safe traces clears `1 - ε + ϵ` the task policy acts,
//! otherwise the safe policy does.

use alloc::vec::Vec;

use rand::Rng;

use crate::agent::{Policy, SafetyCriticPair};
use crate::env::{ActionId, StateId};
use crate::model::{ImaginedTrace, TabularWorldModel};
use crate::smc::{self, DecisionMode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShieldError {
    #[error("invalid shield config: {0}")]
    InvalidConfig(&'static str),
}

/// How the per-step discount is accumulated along an imagined trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discounting {
    /// `D_t = Π_{k<t} γ̂_k`.
    #[default]
    CumulativeProduct,
    /// `D_t = γ̂_t^{t-1}`.
    LiteralPower,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShieldConfig {
    /// ε, tolerated violation probability.
    pub epsilon_safety: f64,
    /// ϵ, estimation accuracy.
    pub epsilon_approx: f64,
    /// m, rollouts per decision.
    pub samples: usize,
    /// H, imagination horizon.
    pub horizon: usize,
    /// T, effective horizon when bootstrapping with the safety critics.
    pub shield_horizon: usize,
    /// C, cost of a violating state.
    pub violation_cost: f64,
    pub gamma: f64,
    pub use_bootstrap: bool,
    pub discounting: Discounting,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            epsilon_safety: 0.1,
            epsilon_approx: 0.09,
            samples: 185,
            horizon: 15,
            shield_horizon: 30,
            violation_cost: 1.0,
            gamma: 0.999,
            use_bootstrap: true,
            discounting: Discounting::CumulativeProduct,
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<(), ShieldError> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.epsilon_safety) || !unit(self.epsilon_approx) {
            return Err(ShieldError::InvalidConfig("ε and ϵ must lie in (0, 1)"));
        }
        if self.samples == 0 {
            return Err(ShieldError::InvalidConfig("m must be at least 1"));
        }
        if self.horizon == 0 || self.shield_horizon < self.horizon {
            return Err(ShieldError::InvalidConfig("need T ≥ H ≥ 1"));
        }
        if !(self.violation_cost > 0.0 && self.violation_cost.is_finite()) {
            return Err(ShieldError::InvalidConfig("C must be positive"));
        }
        if !unit(self.gamma) {
            return Err(ShieldError::InvalidConfig("γ must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `1 - ε + ϵ`.
    pub fn threshold(&self) -> f64 {
        smc::threshold(self.epsilon_safety, self.epsilon_approx, DecisionMode::NoFalsePositive)
    }

    /// False when `ϵ ≥ ε`: the task policy could then never be trusted and
    /// the safe policy would act forever.
    pub fn safe_reachable(&self) -> bool {
        self.threshold() <= 1.0 + smc::THRESHOLD_TOLERANCE
    }

    /// The cost a trace must stay strictly below to count as safe.
    pub fn cost_threshold(&self) -> f64 {
        let horizon = if self.use_bootstrap {
            self.shield_horizon
        } else {
            self.horizon
        };
        violation_threshold(horizon, self.gamma, self.violation_cost)
    }
}

/// `γ^{horizon-1}·C`.
pub fn violation_threshold(horizon: usize, gamma: f64, cost: f64) -> f64 {
    libm::pow(gamma, horizon.saturating_sub(1) as f64) * cost
}

fn discounted_head(trace: &ImaginedTrace, len: usize, discounting: Discounting) -> (f64, f64) {
    let mut total = 0.0;
    let mut running = 1.0;
    for (i, step) in trace.steps[..len].iter().enumerate() {
        let weight = match discounting {
            Discounting::CumulativeProduct => running,
            Discounting::LiteralPower => libm::pow(step.discount, i as f64),
        };
        total += weight * step.cost;
        running *= step.discount;
    }
    let next_weight = match (discounting, trace.steps.get(len)) {
        (Discounting::CumulativeProduct, _) => running,
        (Discounting::LiteralPower, Some(step)) => libm::pow(step.discount, len as f64),
        (Discounting::LiteralPower, None) => 0.0,
    };
    (total, next_weight)
}

/// `Σ_t D_t ĉ_t` over the whole trace.
pub fn trace_cost(trace: &ImaginedTrace, discounting: Discounting) -> f64 {
    discounted_head(trace, trace.len(), discounting).0
}

/// Whether a trace cost is at or above `γ^{horizon-1}·C`.
pub fn violates(cost: f64, horizon: usize, gamma: f64, violation_cost: f64) -> bool {
    cost >= violation_threshold(horizon, gamma, violation_cost)
}

/// Discounted cost of the first `H-1` steps plus `D_H·min(v^C_1, v^C_2)` at
/// the final state, using the online critics. A trace that stopped at a
/// terminal state has no tail and is costed in full.
pub fn bootstrapped_cost(trace: &ImaginedTrace, critics: &SafetyCriticPair, discounting: Discounting) -> f64 {
    if trace.terminated || trace.is_empty() {
        return trace_cost(trace, discounting);
    }
    let last = trace.len() - 1;
    let (head, weight) = discounted_head(trace, last, discounting);
    head + weight * critics.online_min(trace.steps[last].state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuEstimate {
    pub mu_hat: f64,
    /// Cost of each sampled trace (bootstrapped when configured).
    pub costs: Vec<f64>,
}

/// Fraction of `m` imagined task-policy traces from `start` whose cost stays
/// below the violation threshold.
pub fn estimate_mu_hat<P, R>(
    model: &TabularWorldModel,
    task: &P,
    start: StateId,
    cfg: &ShieldConfig,
    critics: &SafetyCriticPair,
    rng: &mut R,
) -> MuEstimate
where
    P: Policy,
    R: Rng + ?Sized,
{
    let threshold = cfg.cost_threshold();
    let mut costs = Vec::with_capacity(cfg.samples);
    let mut trace = ImaginedTrace::with_capacity(cfg.horizon);
    let mut safe = 0usize;
    for _ in 0..cfg.samples {
        model.rollout_into(task, start, cfg.horizon, rng, &mut trace);
        let cost = if cfg.use_bootstrap {
            bootstrapped_cost(&trace, critics, cfg.discounting)
        } else {
            trace_cost(&trace, cfg.discounting)
        };
        if cost < threshold {
            safe += 1;
        }
        costs.push(cost);
    }
    MuEstimate {
        mu_hat: safe as f64 / cfg.samples.max(1) as f64,
        costs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Task,
    Safe,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Task => "task",
            PolicyKind::Safe => "safe",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShieldDecision {
    pub action: ActionId,
    pub policy_used: PolicyKind,
    pub mu_hat: f64,
    pub threshold: f64,
    pub costs: Vec<f64>,
}

/// Task action if `μ̂ ∈ [1 - ε + ϵ, 1]`, safe action otherwise.
pub fn select_action<P, Q, R>(
    model: &TabularWorldModel,
    task: &P,
    safe: &Q,
    state: StateId,
    cfg: &ShieldConfig,
    critics: &SafetyCriticPair,
    rng: &mut R,
) -> ShieldDecision
where
    P: Policy,
    Q: Policy,
    R: Rng + ?Sized,
{
    let estimate = estimate_mu_hat(model, task, state, cfg, critics, rng);
    let threshold = cfg.threshold();
    let trusted = cfg.safe_reachable() && smc::meets_threshold(estimate.mu_hat, threshold);
    let (action, policy_used) = if trusted {
        (task.sample(state, rng), PolicyKind::Task)
    } else {
        (safe.sample(state, rng), PolicyKind::Safe)
    };
    ShieldDecision {
        action,
        policy_used,
        mu_hat: estimate.mu_hat,
        threshold,
        costs: estimate.costs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::TabularPolicy;
    use crate::model::{CostPrior, ImaginedStep, TransitionRecord};
    use crate::rng::seeded;

    fn steps(costs: &[f64], discount: f64) -> ImaginedTrace {
        ImaginedTrace::from_steps(
            costs
                .iter()
                .enumerate()
                .map(|(i, &c)| ImaginedStep {
                    state: i,
                    action: 0,
                    reward: 0.0,
                    cost: c,
                    discount,
                    safety_discount: if c > 0.0 { 0.0 } else { discount },
                })
                .collect(),
            false,
        )
    }

    #[test]
    fn trace_costs() {
        let d = Discounting::CumulativeProduct;
        assert!((trace_cost(&steps(&[0.0, 0.0, 1.0], 0.999), d) - 0.998001).abs() < 1e-15);
        assert_eq!(trace_cost(&steps(&[0.0; 5], 0.999), d), 0.0);
        assert_eq!(trace_cost(&steps(&[1.0, 0.0, 0.0], 0.3), d), 1.0);
        // Both readings coincide under a constant discount.
        let t = steps(&[0.0, 1.0, 0.0, 1.0], 0.9);
        assert!((trace_cost(&t, d) - trace_cost(&t, Discounting::LiteralPower)).abs() < 1e-15);
    }

    #[test]
    fn literal_power_uses_own_discount() {
        let mut t = steps(&[0.0, 0.0, 1.0], 0.9);
        t.steps[2].discount = 0.5;
        assert!((trace_cost(&t, Discounting::LiteralPower) - 0.25).abs() < 1e-15);
        assert!((trace_cost(&t, Discounting::CumulativeProduct) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn violation_thresholds() {
        assert!(violates(0.998001, 3, 0.999, 1.0));
        assert!(!violates(0.0, 3, 0.999, 1.0));
        assert!(violates(1.0, 1, 0.999, 1.0));
        assert!(!violates(0.998, 3, 0.999, 1.0));
    }

    #[test]
    fn bootstrapped_costs() {
        let mut critics = SafetyCriticPair::zeros(3, 0.1, 0.005).unwrap();
        critics.online[0].set(2, 0.2);
        critics.online[1].set(2, 0.7);
        let d = Discounting::CumulativeProduct;
        let t = steps(&[0.0, 0.0, 0.0], 1.0);
        assert!((bootstrapped_cost(&t, &critics, d) - 0.2).abs() < 1e-12);
        let zero = SafetyCriticPair::zeros(4, 0.1, 0.005).unwrap();
        assert_eq!(bootstrapped_cost(&t, &zero, d), 0.0);
        assert_eq!(bootstrapped_cost(&steps(&[1.0, 0.0, 0.0], 0.9), &zero, d), 1.0);
        // Zero critics reduce the bootstrapped cost to the head sum.
        let t = steps(&[0.0, 1.0, 0.0, 1.0], 0.9);
        let head = trace_cost(&steps(&[0.0, 1.0, 0.0], 0.9), d);
        assert_eq!(bootstrapped_cost(&t, &zero, d), head);
    }

    fn line_model(acid_at: Option<StateId>) -> TabularWorldModel {
        // 0 → 1 → 2 → 3 → 3 … under action 0.
        let mut m = TabularWorldModel::new(4, 1, 0.999, 1.0, CostPrior::Optimistic).unwrap();
        for s in 0..4 {
            let next = (s + 1).min(3);
            let bad = Some(next) == acid_at;
            m.observe(&TransitionRecord {
                state: s,
                action: 0,
                reward: 0.0,
                cost: if bad { 1.0 } else { 0.0 },
                safety_discount: if bad { 0.0 } else { 0.999 },
                next_state: next,
                terminal: bad,
            })
            .unwrap();
        }
        m
    }

    fn cfg(samples: usize, horizon: usize) -> ShieldConfig {
        ShieldConfig {
            samples,
            horizon,
            shield_horizon: horizon,
            use_bootstrap: false,
            ..ShieldConfig::default()
        }
    }

    #[test]
    fn deterministic_models() {
        let pi = TabularPolicy::zeros(4, 1);
        let critics = SafetyCriticPair::zeros(4, 0.1, 0.005).unwrap();
        let safe = estimate_mu_hat(&line_model(None), &pi, 0, &cfg(20, 5), &critics, &mut seeded(0));
        assert_eq!(safe.mu_hat, 1.0);
        let doomed = estimate_mu_hat(&line_model(Some(2)), &pi, 0, &cfg(20, 5), &critics, &mut seeded(0));
        assert_eq!(doomed.mu_hat, 0.0);
        assert_eq!(doomed.costs.len(), 20);
        // Acid beyond the horizon is not seen.
        let far = estimate_mu_hat(&line_model(Some(3)), &pi, 0, &cfg(20, 3), &critics, &mut seeded(0));
        assert_eq!(far.mu_hat, 1.0);
    }

    #[test]
    fn switching_rule() {
        let mut task = TabularPolicy::zeros(4, 2);
        let mut safe = TabularPolicy::zeros(4, 2);
        for s in 0..4 {
            task.set_logits(s, &[40.0, -40.0]);
            safe.set_logits(s, &[-40.0, 40.0]);
        }
        let mut m = TabularWorldModel::new(4, 2, 0.999, 1.0, CostPrior::Optimistic).unwrap();
        m.observe_state(0, 0.0, 0.999, false).unwrap();
        let critics = SafetyCriticPair::zeros(4, 0.1, 0.005).unwrap();
        let d = select_action(&m, &task, &safe, 0, &cfg(10, 4), &critics, &mut seeded(2));
        assert_eq!((d.policy_used, d.action, d.mu_hat), (PolicyKind::Task, 0, 1.0));
        assert!((d.threshold - 0.99).abs() < 1e-12);

        // Make state 0 itself violating: every trace fails.
        m.observe_state(0, 1.0, 0.0, false).unwrap();
        m.observe_state(0, 1.0, 0.0, false).unwrap();
        let d = select_action(&m, &task, &safe, 0, &cfg(10, 4), &critics, &mut seeded(2));
        assert_eq!((d.policy_used, d.action), (PolicyKind::Safe, 1));
    }

    #[test]
    fn closed_interval_boundary() {
        // 99 of 100 traces safe gives μ̂ = 0.99 exactly, which is trusted.
        let c = cfg(100, 2);
        assert!(smc::meets_threshold(99.0 / 100.0, c.threshold()));
        assert!(!smc::meets_threshold(0.98, c.threshold()));
    }

    #[test]
    fn config_validation() {
        assert!(ShieldConfig::default().validate().is_ok());
        let bad = ShieldConfig {
            shield_horizon: 10,
            ..ShieldConfig::default()
        };
        assert!(bad.validate().is_err());
        let unreachable = ShieldConfig {
            epsilon_safety: 0.05,
            ..ShieldConfig::default()
        };
        assert!(!unreachable.safe_reachable());
        assert!(ShieldConfig::default().safe_reachable());
    }

    #[test]
    fn same_seed_same_decision() {
        let mut m = TabularWorldModel::new(4, 2, 0.999, 1.0, CostPrior::Optimistic).unwrap();
        for (s, a, n) in [(0, 0, 1), (0, 0, 2), (0, 1, 3), (1, 0, 0), (2, 1, 3)] {
            m.observe(&TransitionRecord {
                state: s,
                action: a,
                reward: 0.0,
                cost: if n == 3 { 1.0 } else { 0.0 },
                safety_discount: if n == 3 { 0.0 } else { 0.999 },
                next_state: n,
                terminal: n == 3,
            })
            .unwrap();
        }
        let pi = TabularPolicy::zeros(4, 2);
        let critics = SafetyCriticPair::zeros(4, 0.1, 0.005).unwrap();
        let c = cfg(50, 6);
        let a = select_action(&m, &pi, &pi, 0, &c, &critics, &mut seeded(11));
        let b = select_action(&m, &pi, &pi, 0, &c, &critics, &mut seeded(11));
        assert_eq!(a, b);
        assert_eq!(a.costs.len(), 50);
    }
}
