//! JSON experiment configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shieldrl_core::env::{Cell, ChainMdp, ChainSpec, ConveyorSpec, ConveyorWorld, World};
use shieldrl_core::model::CostPrior;
use shieldrl_core::shield::{Discounting, ShieldConfig};
use shieldrl_core::smc::{self, BoundSide};
use shieldrl_core::train::TrainConfig;
use shieldrl_core::{parse_state_formula, StateFormula};

use crate::error::AppError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConveyorConfig {
    pub width: usize,
    pub height: usize,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub belt: Vec<[usize; 2]>,
    pub acid: [usize; 2],
    pub slip_prob: f64,
}

impl Default for ConveyorConfig {
    fn default() -> Self {
        let spec = ConveyorSpec::default().with_slip(0.1);
        let xy = |c: Cell| [c.x, c.y];
        Self {
            width: spec.width,
            height: spec.height,
            start: xy(spec.start),
            goal: xy(spec.goal),
            belt: spec.belt.iter().copied().map(xy).collect(),
            acid: xy(spec.acid),
            slip_prob: spec.slip_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub stay_safe: Vec<f64>,
    #[serde(default)]
    pub num_states: Option<usize>,
    #[serde(default)]
    pub labels: Option<BTreeMap<usize, Vec<String>>>,
    #[serde(default)]
    pub start: usize,
    #[serde(default)]
    pub terminal: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EnvConfig {
    Conveyor(ConveyorConfig),
    Chain(ChainConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Conveyor(ConveyorConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<World, AppError> {
        let world = match self {
            EnvConfig::Conveyor(c) => {
                let cell = |[x, y]: [usize; 2]| Cell::new(x, y);
                let spec = ConveyorSpec {
                    width: c.width,
                    height: c.height,
                    start: cell(c.start),
                    goal: cell(c.goal),
                    belt: c.belt.iter().copied().map(cell).collect(),
                    acid: cell(c.acid),
                    slip_prob: c.slip_prob,
                };
                World::Conveyor(ConveyorWorld::new(spec)?)
            }
            EnvConfig::Chain(c) => {
                let mut spec = ChainSpec::new(c.stay_safe.clone());
                if let Some(n) = c.num_states {
                    spec.num_states = n;
                }
                if let Some(labels) = &c.labels {
                    spec.labels = labels.clone();
                }
                spec.start = c.start;
                spec.terminal = c.terminal.clone();
                World::Chain(ChainMdp::new(spec)?)
            }
        };
        Ok(world)
    }

    /// Reads `conveyor`, `chain`, inline JSON or a path to a JSON file.
    pub fn from_arg(arg: &str) -> Result<Self, AppError> {
        match arg {
            "conveyor" => Ok(EnvConfig::default()),
            "chain" => Ok(EnvConfig::Chain(ChainConfig {
                stay_safe: vec![0.9],
                num_states: None,
                labels: None,
                start: 0,
                terminal: Vec::new(),
            })),
            s if s.trim_start().starts_with('{') => {
                serde_json::from_str(s).map_err(|e| AppError::Usage(format!("environment spec: {e}")))
            }
            path => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| AppError::Usage(format!("cannot read environment file {path}: {e}")))?;
                serde_json::from_str(&text).map_err(|e| AppError::Usage(format!("environment file {path}: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    #[default]
    TwoSided,
    OneSided,
}

impl From<Side> for BoundSide {
    fn from(s: Side) -> Self {
        match s {
            Side::TwoSided => BoundSide::TwoSided,
            Side::OneSided => BoundSide::OneSided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiscountingMode {
    #[default]
    CumulativeProduct,
    LiteralPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Prior {
    #[default]
    Optimistic,
    Pessimistic,
}

/// One training run. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    /// Φ, the state invariant the shield protects.
    pub formula: String,
    pub seed: u64,
    pub epsilon_safety: f64,
    pub epsilon_approx: f64,
    pub delta: f64,
    /// m; derived from ϵ, δ and the bound side when absent.
    pub samples: Option<usize>,
    pub bound_side: Side,
    pub horizon: usize,
    pub shield_horizon: usize,
    pub violation_cost: f64,
    pub gamma: f64,
    pub use_bootstrap: bool,
    pub discounting: DiscountingMode,
    pub lambda: f64,
    pub tau: f64,
    pub critic_lr: f64,
    pub policy_lr: f64,
    pub entropy_coef: f64,
    pub batch_size: usize,
    pub updates_per_iteration: usize,
    pub steps_per_iteration: usize,
    pub warmup_episodes: usize,
    pub iterations: usize,
    pub max_episodes: Option<usize>,
    pub max_episode_steps: usize,
    pub replay_capacity: usize,
    pub cost_prior: Prior,
    pub shield_enabled: bool,
    /// Write an intermediate checkpoint every this many episodes.
    pub checkpoint_every: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = t.shield;
        Self {
            env: EnvConfig::default(),
            formula: "!acid".into(),
            seed: t.seed,
            epsilon_safety: s.epsilon_safety,
            epsilon_approx: s.epsilon_approx,
            delta: t.delta,
            samples: None,
            bound_side: Side::TwoSided,
            horizon: s.horizon,
            shield_horizon: s.shield_horizon,
            violation_cost: s.violation_cost,
            gamma: s.gamma,
            use_bootstrap: s.use_bootstrap,
            discounting: DiscountingMode::CumulativeProduct,
            lambda: t.lambda,
            tau: t.tau,
            critic_lr: t.critic_lr,
            policy_lr: t.policy_lr,
            entropy_coef: t.entropy_coef,
            batch_size: t.batch_size,
            updates_per_iteration: t.updates_per_iteration,
            steps_per_iteration: t.steps_per_iteration,
            warmup_episodes: t.warmup_episodes,
            iterations: t.iterations,
            max_episodes: t.max_episodes,
            max_episode_steps: t.max_episode_steps,
            replay_capacity: t.replay_capacity,
            cost_prior: Prior::Optimistic,
            shield_enabled: t.shield_enabled,
            checkpoint_every: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, AppError> {
        serde_json::from_str(text).map_err(|e| AppError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn parse_formula(&self) -> Result<StateFormula, AppError> {
        let f = parse_state_formula(&self.formula)
            .map_err(|e| AppError::Usage(format!("formula `{}`: {e}", self.formula)))?;
        if f.is_probabilistic() {
            return Err(AppError::Usage("the shielded invariant must not contain P[..]".into()));
        }
        Ok(f)
    }

    pub fn samples(&self) -> Result<usize, AppError> {
        match self.samples {
            Some(m) => Ok(m),
            None => smc::required_samples(self.epsilon_approx, self.delta, self.bound_side.into())
                .map_err(|e| AppError::Usage(format!("config: {e}"))),
        }
    }

    pub fn shield_config(&self) -> Result<ShieldConfig, AppError> {
        Ok(ShieldConfig {
            epsilon_safety: self.epsilon_safety,
            epsilon_approx: self.epsilon_approx,
            samples: self.samples()?,
            horizon: self.horizon,
            shield_horizon: self.shield_horizon,
            violation_cost: self.violation_cost,
            gamma: self.gamma,
            use_bootstrap: self.use_bootstrap,
            discounting: match self.discounting {
                DiscountingMode::CumulativeProduct => Discounting::CumulativeProduct,
                DiscountingMode::LiteralPower => Discounting::LiteralPower,
            },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, AppError> {
        let cfg = TrainConfig {
            shield: self.shield_config()?,
            delta: self.delta,
            bound_side: self.bound_side.into(),
            lambda: self.lambda,
            tau: self.tau,
            critic_lr: self.critic_lr,
            policy_lr: self.policy_lr,
            entropy_coef: self.entropy_coef,
            batch_size: self.batch_size,
            updates_per_iteration: self.updates_per_iteration,
            steps_per_iteration: self.steps_per_iteration,
            warmup_episodes: self.warmup_episodes,
            iterations: self.iterations,
            max_episodes: self.max_episodes,
            max_episode_steps: self.max_episode_steps,
            replay_capacity: self.replay_capacity,
            cost_prior: match self.cost_prior {
                Prior::Optimistic => CostPrior::Optimistic,
                Prior::Pessimistic => CostPrior::Pessimistic,
            },
            shield_enabled: self.shield_enabled,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| AppError::Usage(format!("config: {e}")))?;
        if self.checkpoint_every == Some(0) {
            return Err(AppError::Usage("config: checkpoint_every must be positive".into()));
        }
        Ok(cfg)
    }

    /// Environment, invariant and core config, all validated.
    pub fn resolve(&self) -> Result<(World, StateFormula, TrainConfig), AppError> {
        let cfg = self.train_config()?;
        let env = self.env.build()?;
        let formula = self.parse_formula()?;
        shieldrl_core::train::check_formula_atoms(&env, &formula)
            .map_err(|e| AppError::Usage(format!("config: {e}")))?;
        Ok((env, formula, cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.samples().unwrap(), 185);
        let (env, _, cfg) = c.resolve().unwrap();
        assert!(matches!(env, World::Conveyor(_)));
        assert_eq!(cfg.shield.samples, 185);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"epsilon": 0.1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": {"type": "conveyor", "lava": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"env": {"type": "maze"}}"#).is_err());
    }

    #[test]
    fn chain_env_and_round_trip() {
        let text = r#"{"env": {"type": "chain", "stay_safe": [0.9, 0.9]}, "formula": "!unsafe", "samples": 512}"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(c.samples().unwrap(), 512);
        let (env, _, _) = c.resolve().unwrap();
        assert!(matches!(env, World::Chain(_)));
        let again = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let bad = ExperimentConfig::from_json(r#"{"lambda": 2.0}"#).unwrap();
        assert!(matches!(bad.resolve(), Err(AppError::Usage(_))));
        let bad = ExperimentConfig::from_json(r#"{"formula": "!acid &"}"#).unwrap();
        assert!(matches!(bad.resolve(), Err(AppError::Usage(_))));
        let bad = ExperimentConfig::from_json(r#"{"formula": "!lava"}"#).unwrap();
        assert!(matches!(bad.resolve(), Err(AppError::Usage(_))));
    }
}
