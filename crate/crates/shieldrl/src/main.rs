use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use shieldrl::commands;
use shieldrl::{AppError, Checkpoint, EnvConfig, ExperimentConfig};
use shieldrl_core::parse_state_formula;
use shieldrl_core::smc::{BoundSide, DecisionMode};
use shieldrl_core::train::EvalPolicy;

#[derive(Parser)]
#[command(name = "shieldrl", version, about = "Shielded safe exploration on small labelled MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Task,
    Safe,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    TwoSided,
    OneSided,
}

impl From<SideArg> for BoundSide {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::TwoSided => BoundSide::TwoSided,
            SideArg::OneSided => BoundSide::OneSided,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NoFalsePositive,
    NoFalseNegative,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write decisions.jsonl with one line per real step.
        #[arg(long)]
        decisions: bool,
    },
    /// Run a saved agent without learning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "on")]
        shield: OnOff,
        /// Policy to run when the shield is off.
        #[arg(long, value_enum, default_value = "task")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Estimate P(G<=n Φ) by sampling under uniformly random actions.
    Check {
        /// `conveyor`, `chain`, inline JSON or a path to a JSON spec.
        #[arg(long, default_value = "conveyor")]
        env: String,
        /// The invariant Φ.
        #[arg(long)]
        formula: String,
        #[arg(long)]
        horizon: u64,
        /// Sample count; derived from --eps-approx and --delta when absent.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, value_enum, default_value = "no-false-positive")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 0.09)]
        eps_approx: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, value_enum, default_value = "two-sided")]
        side: SideArg,
        /// Start state; the initial state when absent.
        #[arg(long)]
        state: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the Hoeffding sample count m.
    Samplesize {
        #[arg(long)]
        eps_approx: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, value_enum, default_value = "two-sided")]
        side: SideArg,
    },
    /// Exact P(G<=n Φ) under uniformly random actions.
    Oracle {
        #[arg(long, default_value = "conveyor")]
        env: String,
        #[arg(long)]
        formula: String,
        #[arg(long)]
        horizon: u64,
        #[arg(long)]
        state: Option<usize>,
    },
}

fn formula(text: &str) -> Result<shieldrl_core::StateFormula, AppError> {
    parse_state_formula(text).map_err(|e| AppError::Usage(format!("formula `{text}`: {e}")))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report serialises")
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            decisions,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (report, _) = commands::train(&cfg, &out, decisions)?;
            println!("{}", json(&report));
        }
        Command::Eval {
            checkpoint,
            episodes,
            shield,
            policy,
            seed,
            max_steps,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let which = match (shield, policy) {
                (OnOff::On, _) => EvalPolicy::Shielded,
                (OnOff::Off, PolicyArg::Task) => EvalPolicy::Task,
                (OnOff::Off, PolicyArg::Safe) => EvalPolicy::Safe,
            };
            println!("{}", json(&commands::eval(&ck, episodes, which, seed, max_steps)?));
        }
        Command::Check {
            env,
            formula: text,
            horizon,
            m,
            mode,
            eps,
            eps_approx,
            delta,
            side,
            state,
            seed,
        } => {
            let world = EnvConfig::from_arg(&env)?.build()?;
            let f = formula(&text)?;
            let mode = match mode {
                ModeArg::NoFalsePositive => DecisionMode::NoFalsePositive,
                ModeArg::NoFalseNegative => DecisionMode::NoFalseNegative,
            };
            let cfg = commands::smc_config(eps, eps_approx, delta, horizon, m, mode, side.into())?;
            println!("{}", json(&commands::check(&world, &f, horizon, &cfg, state, seed)?));
        }
        Command::Samplesize { eps_approx, delta, side } => {
            println!("{}", commands::samplesize(eps_approx, delta, side.into())?);
        }
        Command::Oracle {
            env,
            formula: text,
            horizon,
            state,
        } => {
            let world = EnvConfig::from_arg(&env)?.build()?;
            let f = formula(&text)?;
            let mu = commands::oracle(&world, &f, horizon, state)?;
            println!("{}", json(&serde_json::json!({ "mu": mu })));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
