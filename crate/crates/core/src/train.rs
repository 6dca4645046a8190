//! The training loop.
//!
//! One iteration learns the world model from fresh experience, improves the
//! task policy and its critic on imagined rollouts, regresses the twin safety
//! critics on the same rollouts, improves the safe policy on its own
//! rollouts, then takes `K` shielded steps in the real environment.

use alloc::vec::Vec;

use crate::agent::{
    self, AgentError, LambdaReturnSpec, Objective, Policy, PolicySnapshot, PolicyUpdate, SafetyCriticPair,
    TabularPolicy, UniformPolicy, ValueTable,
};
use crate::env::{ActionId, EnvError, Environment, StateId, World};
use crate::logic::{EvalError, StateFormula};
use crate::model::{CostLabeller, CostPrior, ImaginedTrace, ModelError, ReplayBuffer, TabularWorldModel, TransitionRecord};
use crate::rng::{derive_seed, seeded, RngState, ShieldRng};
use crate::shield::{self, PolicyKind, ShieldConfig, ShieldError};
use crate::smc::BoundSide;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
    #[error("formula mentions `{0}`, which the environment never emits")]
    UnknownProposition(alloc::string::String),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Formula(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub shield: ShieldConfig,
    /// δ, only used to derive the default `m`.
    pub delta: f64,
    pub bound_side: BoundSide,
    pub lambda: f64,
    /// ν, soft-update rate of the target safety critics.
    pub tau: f64,
    pub critic_lr: f64,
    pub policy_lr: f64,
    pub entropy_coef: f64,
    /// Start states per imagination batch.
    pub batch_size: usize,
    /// Gradient rounds per iteration.
    pub updates_per_iteration: usize,
    /// K, environment steps per iteration.
    pub steps_per_iteration: usize,
    /// S, uniformly random episodes before learning starts.
    pub warmup_episodes: usize,
    pub iterations: usize,
    /// Stop once this many episodes (warmup included) have finished.
    pub max_episodes: Option<usize>,
    /// Episodes are cut off after this many steps.
    pub max_episode_steps: usize,
    pub replay_capacity: usize,
    pub cost_prior: CostPrior,
    pub shield_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shield: ShieldConfig::default(),
            delta: 0.1,
            bound_side: BoundSide::TwoSided,
            lambda: 0.95,
            tau: 0.005,
            critic_lr: 0.1,
            policy_lr: 0.5,
            entropy_coef: 1e-3,
            batch_size: 16,
            updates_per_iteration: 32,
            steps_per_iteration: 50,
            warmup_episodes: 10,
            iterations: 1000,
            max_episodes: None,
            max_episode_steps: 1000,
            replay_capacity: 100_000,
            cost_prior: CostPrior::Optimistic,
            shield_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.shield.validate()?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(TrainError::InvalidConfig("δ must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::InvalidConfig("λ must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(TrainError::InvalidConfig("ν must lie in (0, 1]"));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.critic_lr) || self.critic_lr > 1.0 {
            return Err(TrainError::InvalidConfig("critic learning rate must lie in (0, 1]"));
        }
        if !positive(self.policy_lr) {
            return Err(TrainError::InvalidConfig("policy learning rate must be positive"));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(TrainError::InvalidConfig("entropy coefficient must be non-negative"));
        }
        if self.batch_size == 0 || self.updates_per_iteration == 0 || self.steps_per_iteration == 0 {
            return Err(TrainError::InvalidConfig("batch size, updates and K must be positive"));
        }
        if self.max_episode_steps == 0 || self.replay_capacity == 0 {
            return Err(TrainError::InvalidConfig("episode length and replay capacity must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    pub ret: f64,
    pub violations: u64,
    pub cum_violations: u64,
    pub shield_interventions: u64,
    /// NaN when no shielded decision was taken.
    pub mean_mu_hat: f64,
}

/// One real environment step, as seen by an observer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub episode: usize,
    pub step: usize,
    pub state: StateId,
    pub action: ActionId,
    pub policy_used: PolicyKind,
    /// `None` when the shield did not run.
    pub mu_hat: Option<f64>,
    pub threshold: Option<f64>,
    pub next_state: StateId,
    pub reward: f64,
    pub violation: bool,
}

/// Everything learned, plus the random streams.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub model: TabularWorldModel,
    pub task_policy: TabularPolicy,
    pub task_critic: ValueTable,
    pub safe_policy: TabularPolicy,
    pub safe_critic: ValueTable,
    pub safety: SafetyCriticPair,
    /// Environment, acting and learning streams.
    pub rngs: [RngState; 3],
}

impl AgentState {
    pub fn fresh(num_states: usize, num_actions: usize, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let seed = cfg.seed;
        Ok(Self {
            model: TabularWorldModel::new(
                num_states,
                num_actions,
                cfg.shield.gamma,
                cfg.shield.violation_cost,
                cfg.cost_prior,
            )?,
            task_policy: TabularPolicy::zeros(num_states, num_actions),
            task_critic: ValueTable::zeros(num_states, cfg.critic_lr),
            safe_policy: TabularPolicy::zeros(num_states, num_actions),
            safe_critic: ValueTable::zeros(num_states, cfg.critic_lr),
            safety: SafetyCriticPair::zeros(num_states, cfg.critic_lr, cfg.tau)?,
            rngs: [0, 1, 2].map(|i| RngState::capture(&seeded(derive_seed(seed, i)))),
        })
    }
}

struct Episode {
    index: usize,
    state: StateId,
    steps: usize,
    ret: f64,
    violations: u64,
    interventions: u64,
    mu_sum: f64,
    decisions: u64,
}

pub struct Trainer {
    env: World,
    labeller: CostLabeller,
    cfg: TrainConfig,
    model: TabularWorldModel,
    task_policy: TabularPolicy,
    task_critic: ValueTable,
    safe_policy: TabularPolicy,
    safe_critic: ValueTable,
    safety: SafetyCriticPair,
    env_rng: ShieldRng,
    act_rng: ShieldRng,
    learn_rng: ShieldRng,
    buffer: ReplayBuffer,
    pending: Vec<TransitionRecord>,
    episode: Option<Episode>,
    episodes_done: usize,
    cum_violations: u64,
    iterations_done: usize,
    metrics: Vec<EpisodeMetrics>,
    rollouts: u64,
}

/// Rejects formulas over propositions the environment cannot emit.
pub fn check_formula_atoms<E: Environment>(env: &E, formula: &StateFormula) -> Result<(), TrainError> {
    for atom in formula.atoms() {
        if !env.propositions().iter().any(|p| p.as_str() == atom) {
            return Err(TrainError::UnknownProposition(atom.into()));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(env: World, formula: StateFormula, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        check_formula_atoms(&env, &formula)?;
        let agent = AgentState::fresh(env.num_states(), env.num_actions(), &cfg)?;
        Self::with_agent(env, formula, cfg, agent)
    }

    /// Resumes from saved agent state. The episode counter starts at zero.
    pub fn with_agent(env: World, formula: StateFormula, cfg: TrainConfig, agent: AgentState) -> Result<Self, TrainError> {
        cfg.validate()?;
        check_formula_atoms(&env, &formula)?;
        if agent.model.num_states() != env.num_states() || agent.model.num_actions() != env.num_actions() {
            return Err(TrainError::InvalidConfig("agent state does not match the environment"));
        }
        let labeller = CostLabeller::new(formula, cfg.shield.violation_cost, cfg.shield.gamma)?;
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.replay_capacity)?,
            env,
            labeller,
            cfg,
            model: agent.model,
            task_policy: agent.task_policy,
            task_critic: agent.task_critic,
            safe_policy: agent.safe_policy,
            safe_critic: agent.safe_critic,
            safety: agent.safety,
            env_rng: agent.rngs[0].restore(),
            act_rng: agent.rngs[1].restore(),
            learn_rng: agent.rngs[2].restore(),
            pending: Vec::new(),
            episode: None,
            episodes_done: 0,
            cum_violations: 0,
            iterations_done: 0,
            metrics: Vec::new(),
            rollouts: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env(&self) -> &World {
        &self.env
    }

    pub fn labeller(&self) -> &CostLabeller {
        &self.labeller
    }

    pub fn metrics(&self) -> &[EpisodeMetrics] {
        &self.metrics
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn model(&self) -> &TabularWorldModel {
        &self.model
    }

    pub fn iterations_done(&self) -> usize {
        self.iterations_done
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn cum_violations(&self) -> u64 {
        self.cum_violations
    }

    pub fn agent_state(&self) -> AgentState {
        AgentState {
            model: self.model.clone(),
            task_policy: self.task_policy.clone(),
            task_critic: self.task_critic.clone(),
            safe_policy: self.safe_policy.clone(),
            safe_critic: self.safe_critic.clone(),
            safety: self.safety.clone(),
            rngs: [
                RngState::capture(&self.env_rng),
                RngState::capture(&self.act_rng),
                RngState::capture(&self.learn_rng),
            ],
        }
    }

    fn budget_exhausted(&self) -> bool {
        self.cfg.max_episodes.is_some_and(|m| self.episodes_done >= m)
    }

    pub fn is_finished(&self) -> bool {
        self.budget_exhausted() || self.iterations_done >= self.cfg.iterations
    }

    /// Runs warmup and every remaining iteration.
    pub fn run(&mut self, observer: &mut dyn FnMut(&StepLog)) -> Result<(), TrainError> {
        self.warmup(observer)?;
        while !self.is_finished() {
            self.iteration(observer)?;
        }
        Ok(())
    }

    /// Plays uniformly random episodes until `S` have finished.
    pub fn warmup(&mut self, observer: &mut dyn FnMut(&StepLog)) -> Result<(), TrainError> {
        let uniform = UniformPolicy::new(self.env.num_actions());
        while self.episodes_done < self.cfg.warmup_episodes && !self.budget_exhausted() {
            let ep = self.episodes_done;
            while self.episodes_done == ep {
                self.env_step(observer, |t, state| {
                    let action = uniform.sample(state, &mut t.act_rng);
                    (action, PolicyKind::Task, None)
                })?;
            }
        }
        Ok(())
    }

    /// One pass of learning followed by `K` environment steps.
    pub fn iteration(&mut self, observer: &mut dyn FnMut(&StepLog)) -> Result<(), TrainError> {
        self.learn()?;
        self.interact(observer)?;
        self.iterations_done += 1;
        Ok(())
    }

    fn absorb(&mut self) -> Result<(), TrainError> {
        for record in self.pending.drain(..) {
            self.model.observe(&record)?;
        }
        Ok(())
    }

    pub fn learn(&mut self) -> Result<(), TrainError> {
        self.absorb()?;
        if self.buffer.is_empty() {
            return Ok(());
        }
        for _ in 0..self.cfg.updates_per_iteration {
            let starts: Vec<StateId> = self
                .buffer
                .sample_batch(self.cfg.batch_size, &mut self.learn_rng)?
                .iter()
                .map(|r| r.state)
                .collect();
            self.task_and_safety_update(&starts)?;
            self.safe_update(&starts)?;
        }
        Ok(())
    }

    fn imagine(&mut self, policy: &PolicySnapshot, starts: &[StateId]) -> Vec<ImaginedTrace> {
        let horizon = self.cfg.shield.horizon;
        starts
            .iter()
            .map(|&s| self.model.rollout(policy, s, horizon, &mut self.learn_rng))
            .collect()
    }

    fn task_and_safety_update(&mut self, starts: &[StateId]) -> Result<(), TrainError> {
        let snapshot = self.task_policy.snapshot();
        let traces = self.imagine(&snapshot, starts);
        let spec = LambdaReturnSpec::task(self.cfg.lambda);
        let params = PolicyUpdate {
            learning_rate: self.cfg.policy_lr,
            entropy_coef: self.cfg.entropy_coef,
            objective: Objective::Maximise,
        };

        // Targets and advantages from the critic as it stood before this round.
        let mut prepared = Vec::with_capacity(traces.len());
        for trace in &traces {
            let critic = &self.task_critic;
            let targets = agent::td_lambda_targets(trace, |s| critic.get(s), &spec);
            let policy_len = trace.len().saturating_sub(1);
            let adv = agent::advantages(trace, &targets[..policy_len], |s| critic.get(s), params.objective);
            prepared.push((targets, adv));
        }
        for (trace, (targets, _)) in traces.iter().zip(&prepared) {
            let n = trace.trainable_len();
            let states: Vec<StateId> = trace.states().take(n).collect();
            agent::critic_update(&mut self.task_critic, &states, &targets[..n])?;
        }
        for (trace, (_, adv)) in traces.iter().zip(&prepared) {
            agent::apply_advantages(&mut self.task_policy, trace, adv, &params)?;
        }

        let safety_targets: Vec<Vec<f64>> = traces
            .iter()
            .map(|t| agent::twin_td_lambda_targets(t, &self.safety, self.cfg.lambda))
            .collect();
        for (trace, targets) in traces.iter().zip(&safety_targets) {
            let n = trace.trainable_len();
            let states: Vec<StateId> = trace.states().take(n).collect();
            let which = (self.rollouts % 2) as usize;
            self.rollouts += 1;
            agent::critic_update(&mut self.safety.online[which], &states, &targets[..n])?;
        }
        agent::soft_update(&mut self.safety);
        Ok(())
    }

    fn safe_update(&mut self, starts: &[StateId]) -> Result<(), TrainError> {
        let snapshot = self.safe_policy.snapshot();
        let traces = self.imagine(&snapshot, starts);
        let spec = LambdaReturnSpec::safe(self.cfg.lambda);
        let params = PolicyUpdate {
            learning_rate: self.cfg.policy_lr,
            entropy_coef: self.cfg.entropy_coef,
            objective: Objective::Minimise,
        };
        let mut prepared = Vec::with_capacity(traces.len());
        for trace in &traces {
            let critic = &self.safe_critic;
            let targets = agent::td_lambda_targets(trace, |s| critic.get(s), &spec);
            let policy_len = trace.len().saturating_sub(1);
            let adv = agent::advantages(trace, &targets[..policy_len], |s| critic.get(s), params.objective);
            prepared.push((targets, adv));
        }
        for (trace, (targets, _)) in traces.iter().zip(&prepared) {
            let n = trace.trainable_len();
            let states: Vec<StateId> = trace.states().take(n).collect();
            agent::critic_update(&mut self.safe_critic, &states, &targets[..n])?;
        }
        for (trace, (_, adv)) in traces.iter().zip(&prepared) {
            agent::apply_advantages(&mut self.safe_policy, trace, adv, &params)?;
        }
        Ok(())
    }

    /// `K` real steps under the shielded policy (or the bare task policy
    /// with the shield off). Policies are frozen for the whole block.
    pub fn interact(&mut self, observer: &mut dyn FnMut(&StepLog)) -> Result<(), TrainError> {
        let task = self.task_policy.snapshot();
        let safe = self.safe_policy.snapshot();
        for _ in 0..self.cfg.steps_per_iteration {
            if self.budget_exhausted() {
                break;
            }
            if self.cfg.shield_enabled {
                self.env_step(observer, |t, state| {
                    let d = shield::select_action(
                        &t.model,
                        &task,
                        &safe,
                        state,
                        &t.cfg.shield,
                        &t.safety,
                        &mut t.act_rng,
                    );
                    (d.action, d.policy_used, Some((d.mu_hat, d.threshold)))
                })?;
            } else {
                self.env_step(observer, |t, state| {
                    (task.sample(state, &mut t.act_rng), PolicyKind::Task, None)
                })?;
            }
        }
        Ok(())
    }

    fn start_episode(&mut self) -> Result<(), TrainError> {
        let start = self.env.reset(&mut self.env_rng);
        let cost = self.labeller.cost(&start.labels);
        let discount = self.labeller.safety_discount(&start.labels);
        self.model.observe_state(start.state, cost, discount, start.terminal)?;
        let violations = u64::from(!self.labeller.is_safe(&start.labels));
        self.episode = Some(Episode {
            index: self.episodes_done,
            state: start.state,
            steps: 0,
            ret: 0.0,
            violations,
            interventions: 0,
            mu_sum: 0.0,
            decisions: 0,
        });
        if start.terminal {
            self.finish_episode();
        }
        Ok(())
    }

    fn env_step<F>(&mut self, observer: &mut dyn FnMut(&StepLog), choose: F) -> Result<(), TrainError>
    where
        F: FnOnce(&mut Self, StateId) -> (ActionId, PolicyKind, Option<(f64, f64)>),
    {
        if self.episode.is_none() {
            self.start_episode()?;
            if self.episode.is_none() {
                return Ok(());
            }
        }
        let state = self.episode.as_ref().map(|e| e.state).unwrap_or_default();
        let (action, policy_used, shield_info) = choose(self, state);
        let next = self.env.step(state, action, &mut self.env_rng)?;
        let cost = self.labeller.cost(&next.labels);
        let record = TransitionRecord {
            state,
            action,
            reward: next.reward,
            cost,
            safety_discount: self.labeller.safety_discount(&next.labels),
            next_state: next.state,
            terminal: next.terminal,
        };
        self.buffer.push(record);
        self.pending.push(record);
        let violation = !self.labeller.is_safe(&next.labels);

        let Some(ep) = self.episode.as_mut() else {
            return Ok(());
        };
        ep.steps += 1;
        ep.ret += next.reward;
        ep.violations += u64::from(violation);
        ep.state = next.state;
        if let Some((mu, _)) = shield_info {
            ep.decisions += 1;
            ep.mu_sum += mu;
            ep.interventions += u64::from(policy_used == PolicyKind::Safe);
        }
        observer(&StepLog {
            episode: ep.index,
            step: ep.steps - 1,
            state,
            action,
            policy_used,
            mu_hat: shield_info.map(|(m, _)| m),
            threshold: shield_info.map(|(_, t)| t),
            next_state: next.state,
            reward: next.reward,
            violation,
        });
        if next.terminal || ep.steps >= self.cfg.max_episode_steps {
            self.finish_episode();
        }
        Ok(())
    }

    fn finish_episode(&mut self) {
        let Some(ep) = self.episode.take() else {
            return;
        };
        self.cum_violations += ep.violations;
        self.metrics.push(EpisodeMetrics {
            episode: ep.index,
            steps: ep.steps,
            ret: ep.ret,
            violations: ep.violations,
            cum_violations: self.cum_violations,
            shield_interventions: ep.interventions,
            mean_mu_hat: if ep.decisions == 0 {
                f64::NAN
            } else {
                ep.mu_sum / ep.decisions as f64
            },
        });
        self.episodes_done += 1;
    }
}

/// Trains from scratch and returns the final agent with its metrics.
pub fn train(
    env: World,
    formula: StateFormula,
    cfg: TrainConfig,
) -> Result<(AgentState, Vec<EpisodeMetrics>), TrainError> {
    let mut trainer = Trainer::new(env, formula, cfg)?;
    trainer.run(&mut |_| {})?;
    Ok((trainer.agent_state(), trainer.metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPolicy {
    Task,
    Safe,
    Shielded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_steps: f64,
    pub violations: u64,
    /// Episodes with positive return.
    pub successes: usize,
    pub interventions: u64,
}

/// Plays `episodes` episodes with fixed policies. Nothing is learned.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    agent: &AgentState,
    env: &World,
    labeller: &CostLabeller,
    shield_cfg: &ShieldConfig,
    policy: EvalPolicy,
    episodes: usize,
    max_episode_steps: usize,
    seed: u64,
) -> Result<EvalSummary, TrainError> {
    if agent.model.num_states() != env.num_states() || agent.model.num_actions() != env.num_actions() {
        return Err(TrainError::InvalidConfig("agent state does not match the environment"));
    }
    let mut env_rng = seeded(derive_seed(seed, 0));
    let mut act_rng = seeded(derive_seed(seed, 1));
    let task = agent.task_policy.snapshot();
    let safe = agent.safe_policy.snapshot();
    let mut total_return = 0.0;
    let mut total_steps = 0usize;
    let mut violations = 0u64;
    let mut successes = 0usize;
    let mut interventions = 0u64;
    for _ in 0..episodes {
        let start = env.reset(&mut env_rng);
        let mut state = start.state;
        let mut terminal = start.terminal;
        let mut ret = 0.0;
        violations += u64::from(!labeller.is_safe(&start.labels));
        let mut steps = 0;
        while !terminal && steps < max_episode_steps {
            let action = match policy {
                EvalPolicy::Task => task.sample(state, &mut act_rng),
                EvalPolicy::Safe => safe.sample(state, &mut act_rng),
                EvalPolicy::Shielded => {
                    let d = shield::select_action(
                        &agent.model,
                        &task,
                        &safe,
                        state,
                        shield_cfg,
                        &agent.safety,
                        &mut act_rng,
                    );
                    interventions += u64::from(d.policy_used == PolicyKind::Safe);
                    d.action
                }
            };
            let next = env.step(state, action, &mut env_rng)?;
            ret += next.reward;
            violations += u64::from(!labeller.is_safe(&next.labels));
            state = next.state;
            terminal = next.terminal;
            steps += 1;
        }
        total_return += ret;
        total_steps += steps;
        successes += usize::from(ret > 0.0);
    }
    let n = episodes.max(1) as f64;
    Ok(EvalSummary {
        episodes,
        mean_return: if episodes == 0 { 0.0 } else { total_return / n },
        mean_steps: if episodes == 0 { 0.0 } else { total_steps as f64 / n },
        violations,
        successes,
        interventions,
    })
}
