//! Versioned JSON checkpoints.
//!
//! Count tables are stored sparsely with `"s,a,s'"` keys. Floats go through
//! shortest round-trip formatting, so save, load, save gives identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shieldrl_core::agent::{SafetyCriticPair, TabularPolicy, ValueTable};
use shieldrl_core::env::Environment;
use shieldrl_core::model::{StateStats, TabularWorldModel};
use shieldrl_core::rng::RngState;
use shieldrl_core::train::{AgentState, Trainer};

use crate::config::ExperimentConfig;
use crate::error::AppError;

pub const FORMAT: &str = "shieldrl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    visits: u64,
    cost_sum: f64,
    violations: u64,
    terminals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    transitions: BTreeMap<String, u64>,
    reward_sums: BTreeMap<String, f64>,
    states: BTreeMap<String, StatsFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngFile {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub episodes: usize,
    pub iterations: usize,
    pub cum_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ExperimentConfig,
    progress: Progress,
    num_states: usize,
    num_actions: usize,
    model: ModelFile,
    task_policy: Vec<f64>,
    task_critic: Vec<f64>,
    safe_policy: Vec<f64>,
    safe_critic: Vec<f64>,
    safety_online: [Vec<f64>; 2],
    safety_target: [Vec<f64>; 2],
    rng: [RngFile; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub progress: Progress,
    pub agent: AgentState,
}

fn bad(msg: impl Into<String>) -> AppError {
    AppError::Checkpoint(msg.into())
}

fn parse_key<const N: usize>(key: &str) -> Result<[usize; N], AppError> {
    let mut out = [0usize; N];
    let mut parts = key.split(',');
    for slot in out.iter_mut() {
        *slot = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| bad(format!("malformed key `{key}`")))?;
    }
    if parts.next().is_some() {
        return Err(bad(format!("malformed key `{key}`")));
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(text: &str) -> Result<[u8; 32], AppError> {
    if text.len() != 64 || !text.is_ascii() {
        return Err(bad("rng seed must be 64 hex digits"));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&text[2 * i..2 * i + 2], 16).map_err(|_| bad("rng seed must be hex"))?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_trainer(config: &ExperimentConfig, trainer: &Trainer) -> Self {
        Self {
            config: config.clone(),
            progress: Progress {
                episodes: trainer.episodes_done(),
                iterations: trainer.iterations_done(),
                cum_violations: trainer.cum_violations(),
            },
            agent: trainer.agent_state(),
        }
    }

    /// A checkpoint of an untrained agent.
    pub fn fresh(config: &ExperimentConfig) -> Result<Self, AppError> {
        let (env, _, cfg) = config.resolve()?;
        Ok(Self {
            config: config.clone(),
            progress: Progress {
                episodes: 0,
                iterations: 0,
                cum_violations: 0,
            },
            agent: AgentState::fresh(env.num_states(), env.num_actions(), &cfg)?,
        })
    }

    fn to_file(&self) -> CheckpointFile {
        let a = &self.agent;
        let m = &a.model;
        let transitions = m
            .transition_counts()
            .map(|(s, act, next, c)| (format!("{s},{act},{next}"), c))
            .collect();
        let reward_sums = m
            .reward_sums()
            .map(|(s, act, r)| (format!("{s},{act}"), r))
            .collect();
        let states = (0..m.num_states())
            .filter_map(|s| {
                let st = m.state_stats(s);
                (st != StateStats::default()).then(|| {
                    (
                        s.to_string(),
                        StatsFile {
                            visits: st.visits,
                            cost_sum: st.cost_sum,
                            violations: st.violations,
                            terminals: st.terminals,
                        },
                    )
                })
            })
            .collect();
        let rng = a.rngs.map(|r| RngFile {
            seed: hex(&r.seed),
            stream: r.stream,
            word_pos: r.word_pos.to_string(),
        });
        CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            progress: self.progress.clone(),
            num_states: m.num_states(),
            num_actions: m.num_actions(),
            model: ModelFile {
                transitions,
                reward_sums,
                states,
            },
            task_policy: a.task_policy.all_logits().to_vec(),
            task_critic: a.task_critic.values().to_vec(),
            safe_policy: a.safe_policy.all_logits().to_vec(),
            safe_critic: a.safe_critic.values().to_vec(),
            safety_online: [
                a.safety.online[0].values().to_vec(),
                a.safety.online[1].values().to_vec(),
            ],
            safety_target: [
                a.safety.target[0].values().to_vec(),
                a.safety.target[1].values().to_vec(),
            ],
            rng,
        }
    }

    fn from_file(f: CheckpointFile) -> Result<Self, AppError> {
        let (ns, na) = (f.num_states, f.num_actions);
        let (env, _, cfg) = f.config.resolve()?;
        if env.num_states() != ns || env.num_actions() != na {
            return Err(bad("state or action count does not match the configured environment"));
        }
        let mut transitions = Vec::with_capacity(f.model.transitions.len());
        for (k, c) in &f.model.transitions {
            let [s, a, next] = parse_key::<3>(k)?;
            transitions.push((s, a, next, *c));
        }
        let mut rewards = Vec::with_capacity(f.model.reward_sums.len());
        for (k, r) in &f.model.reward_sums {
            let [s, a] = parse_key::<2>(k)?;
            rewards.push((s, a, *r));
        }
        let mut states = Vec::with_capacity(f.model.states.len());
        for (k, st) in &f.model.states {
            let [s] = parse_key::<1>(k)?;
            states.push((
                s,
                StateStats {
                    visits: st.visits,
                    cost_sum: st.cost_sum,
                    violations: st.violations,
                    terminals: st.terminals,
                },
            ));
        }
        let empty = TabularWorldModel::new(ns, na, cfg.shield.gamma, cfg.shield.violation_cost, cfg.cost_prior)
            .map_err(|e| bad(e.to_string()))?;
        let model =
            TabularWorldModel::from_parts(empty, transitions, rewards, states).map_err(|e| bad(e.to_string()))?;

        let policy = |logits: Vec<f64>| TabularPolicy::from_logits(ns, na, logits).map_err(|e| bad(e.to_string()));
        let values = |v: Vec<f64>| {
            if v.len() == ns {
                Ok(ValueTable::from_values(v, cfg.critic_lr))
            } else {
                Err(bad("value table has the wrong length"))
            }
        };
        let [o0, o1] = f.safety_online;
        let [t0, t1] = f.safety_target;
        let mut safety = SafetyCriticPair::zeros(ns, cfg.critic_lr, cfg.tau).map_err(|e| bad(e.to_string()))?;
        safety.online = [values(o0)?, values(o1)?];
        safety.target = [values(t0)?, values(t1)?];

        let mut rngs = [RngState {
            seed: [0; 32],
            stream: 0,
            word_pos: 0,
        }; 3];
        for (slot, r) in rngs.iter_mut().zip(&f.rng) {
            *slot = RngState {
                seed: unhex(&r.seed)?,
                stream: r.stream,
                word_pos: r.word_pos.parse().map_err(|_| bad("rng word position must be an integer"))?,
            };
        }
        let agent = AgentState {
            model,
            task_policy: policy(f.task_policy)?,
            task_critic: values(f.task_critic)?,
            safe_policy: policy(f.safe_policy)?,
            safe_critic: values(f.safe_critic)?,
            safety,
            rngs,
        };
        Ok(Self {
            config: f.config,
            progress: f.progress,
            agent,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("checkpoint serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, AppError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        match (value.get("format").and_then(|v| v.as_str()), value.get("version").and_then(|v| v.as_u64())) {
            (Some(FORMAT), Some(v)) if v == u64::from(VERSION) => {}
            (Some(FORMAT), Some(v)) => return Err(bad(format!("unsupported version {v}, expected {VERSION}"))),
            _ => return Err(bad("not a shieldrl checkpoint")),
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        Self::from_file(file)
    }

    /// Writes via a temporary file so a crash never leaves half a checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), AppError> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            iterations: 3,
            warmup_episodes: 2,
            samples: Some(10),
            steps_per_iteration: 20,
            ..ExperimentConfig::default()
        }
    }

    fn trained() -> Checkpoint {
        let c = small();
        let (env, f, cfg) = c.resolve().unwrap();
        let mut t = Trainer::new(env, f, cfg).unwrap();
        t.run(&mut |_| {}).unwrap();
        Checkpoint::from_trainer(&c, &t)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = trained();
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn fresh_has_empty_counts() {
        let ck = Checkpoint::fresh(&small()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
        assert_eq!(v["model"]["transitions"], serde_json::json!({}));
        assert_eq!(v["model"]["states"], serde_json::json!({}));
    }

    #[test]
    fn corrupt_and_mismatched_files_rejected() {
        let text = trained().to_json();
        assert!(Checkpoint::from_json(&text[..text.len() / 2]).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
        let newer = text.replacen("\"version\": 1", "\"version\": 99", 1);
        let err = Checkpoint::from_json(&newer).unwrap_err();
        assert!(err.to_string().contains("version"));
        let broken = text.replacen("\"task_policy\": [", "\"task_policy\": [1.0, ", 1);
        assert!(Checkpoint::from_json(&broken).is_err());
    }
}
