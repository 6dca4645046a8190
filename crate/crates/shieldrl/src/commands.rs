//! What each subcommand does, minus argument parsing.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use shieldrl_core::agent::{Policy, UniformPolicy};
use shieldrl_core::env::{enumerate_transitions, simulate_labels, Environment, StateId, World};
use shieldrl_core::logic::bounded_always;
use shieldrl_core::model::CostLabeller;
use shieldrl_core::rng::seeded;
use shieldrl_core::smc::{self, BoundSide, DecisionMode, MarkovChain, SmcConfig};
use shieldrl_core::train::{evaluate, EvalPolicy, EvalSummary, EpisodeMetrics, Trainer};
use shieldrl_core::StateFormula;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::decisions::DecisionLog;
use crate::error::AppError;
use crate::metrics;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub episodes: usize,
    pub iterations: usize,
    pub cum_violations: u64,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains and writes `metrics.csv`, `checkpoint.json` and `config.json`
/// (plus `decisions.jsonl` when asked) into `out`.
pub fn train(config: &ExperimentConfig, out: &Path, log_decisions: bool) -> Result<(TrainReport, Vec<EpisodeMetrics>), AppError> {
    let (env, formula, cfg) = config.resolve()?;
    let mut trainer = Trainer::new(env, formula, cfg)?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(config).expect("config serialises") + "\n",
    )?;
    let mut log = if log_decisions {
        Some(DecisionLog::new(BufWriter::new(File::create(out.join("decisions.jsonl"))?)))
    } else {
        None
    };
    let mut observe = |step: &shieldrl_core::train::StepLog| {
        if let Some(l) = log.as_mut() {
            l.record(step);
        }
    };

    trainer.warmup(&mut observe)?;
    let mut saved = 0;
    while !trainer.is_finished() {
        trainer.iteration(&mut observe)?;
        if let Some(every) = config.checkpoint_every {
            let due = trainer.episodes_done() / every;
            if due > saved {
                saved = due;
                let path = out.join(format!("checkpoint-{:06}.json", due * every));
                Checkpoint::from_trainer(config, &trainer).save(&path)?;
            }
        }
    }
    if let Some(l) = log {
        l.finish()?;
    }

    let metrics_path = out.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&metrics_path)?);
    metrics::write_csv(&mut csv, trainer.metrics())?;
    drop(csv);
    let checkpoint_path = out.join("checkpoint.json");
    Checkpoint::from_trainer(config, &trainer).save(&checkpoint_path)?;
    Ok((
        TrainReport {
            episodes: trainer.episodes_done(),
            iterations: trainer.iterations_done(),
            cum_violations: trainer.cum_violations(),
            metrics: metrics_path,
            checkpoint: checkpoint_path,
        },
        trainer.metrics().to_vec(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub policy: &'static str,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_steps: f64,
    pub violations: u64,
    pub successes: usize,
    pub shield_interventions: u64,
}

pub fn eval(
    checkpoint: &Checkpoint,
    episodes: usize,
    policy: EvalPolicy,
    seed: u64,
    max_steps: Option<usize>,
) -> Result<EvalReport, AppError> {
    let config = &checkpoint.config;
    let (env, formula, cfg) = config.resolve()?;
    let labeller = CostLabeller::new(formula, cfg.shield.violation_cost, cfg.shield.gamma)
        .map_err(|e| AppError::Usage(e.to_string()))?;
    let s: EvalSummary = evaluate(
        &checkpoint.agent,
        &env,
        &labeller,
        &cfg.shield,
        policy,
        episodes,
        max_steps.unwrap_or(cfg.max_episode_steps),
        seed,
    )?;
    Ok(EvalReport {
        policy: match policy {
            EvalPolicy::Task => "task",
            EvalPolicy::Safe => "safe",
            EvalPolicy::Shielded => "shielded",
        },
        episodes: s.episodes,
        mean_return: s.mean_return,
        mean_steps: s.mean_steps,
        violations: s.violations,
        successes: s.successes,
        shield_interventions: s.interventions,
    })
}

fn check_state(env: &World, state: Option<StateId>) -> Result<StateId, AppError> {
    let s = match state {
        Some(s) => s,
        None => env.initial_distribution()[0].0,
    };
    if s >= env.num_states() {
        return Err(AppError::Usage(format!("state {s} out of range (0..{})", env.num_states())));
    }
    Ok(s)
}

fn invariant(formula: &StateFormula) -> Result<(), AppError> {
    if formula.is_probabilistic() {
        return Err(AppError::Usage("give the invariant Φ; the bound comes from --horizon".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub state: StateId,
    pub horizon: u64,
    pub samples: usize,
    pub mu_hat: f64,
    pub threshold: f64,
    pub verdict: &'static str,
}

/// Estimates `P(G<=n Φ)` from `state` under uniformly random actions.
pub fn check(
    env: &World,
    formula: &StateFormula,
    horizon: u64,
    cfg: &SmcConfig,
    state: Option<StateId>,
    seed: u64,
) -> Result<CheckReport, AppError> {
    invariant(formula)?;
    cfg.validate().map_err(|e| AppError::Usage(e.to_string()))?;
    let start = check_state(env, state)?;
    let property = bounded_always(horizon, formula.clone());
    let policy = UniformPolicy::new(env.num_actions());
    let mut rng = seeded(seed);
    let mut traces = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let trace = simulate_labels(env, start, horizon as usize, |s, r| policy.sample(s, r), &mut rng)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        traces.push(trace);
    }
    let est = smc::check(traces.iter(), &property, cfg).map_err(|e| AppError::Runtime(e.to_string()))?;
    Ok(CheckReport {
        state: start,
        horizon,
        samples: est.samples,
        mu_hat: est.mu_hat,
        threshold: est.threshold,
        verdict: est.verdict.as_str(),
    })
}

/// Exact `P(G<=n Φ)` from `state` under uniformly random actions.
pub fn oracle(env: &World, formula: &StateFormula, horizon: u64, state: Option<StateId>) -> Result<f64, AppError> {
    invariant(formula)?;
    let start = check_state(env, state)?;
    let table = enumerate_transitions(env);
    let uniform = UniformPolicy::new(env.num_actions());
    let chain = MarkovChain::from_policy(&table, |s| uniform.probabilities(s))
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    let labels: Vec<_> = (0..env.num_states()).map(|s| env.labels(s).clone()).collect();
    smc::exact_mu_oracle(&chain, &labels, formula, horizon, start).map_err(|e| AppError::Runtime(e.to_string()))
}

pub fn samplesize(epsilon_approx: f64, delta: f64, side: BoundSide) -> Result<usize, AppError> {
    smc::required_samples(epsilon_approx, delta, side).map_err(|e| AppError::Usage(e.to_string()))
}

pub fn smc_config(
    epsilon_safety: f64,
    epsilon_approx: f64,
    delta: f64,
    horizon: u64,
    samples: Option<usize>,
    mode: DecisionMode,
    side: BoundSide,
) -> Result<SmcConfig, AppError> {
    let mut cfg = SmcConfig::new(epsilon_safety, epsilon_approx, delta, horizon).map_err(|e| AppError::Usage(e.to_string()))?;
    cfg.mode = mode;
    cfg.bound_side = side;
    cfg.samples = match samples {
        Some(m) => m,
        None => samplesize(epsilon_approx, delta, side)?,
    };
    cfg.validate().map_err(|e| AppError::Usage(e.to_string()))?;
    Ok(cfg)
}
