//! Approximate look-ahead shielding for safe exploration.
//!
//! The crate is `no_std` (it needs `alloc`) and carries only the algorithmic
//! pieces: labelled environments, the bounded-safety temporal logic fragment,
//! statistical model checking, a count-based world model, tabular
//! actor-critic updates with twin safety critics, the shield itself, and the
//! training loop that ties them together. File formats and the command line
//! live in the `shieldrl` crate.

#![no_std]

extern crate alloc;

pub mod agent;
pub mod env;
pub mod logic;
pub mod model;
pub mod rng;
pub mod shield;
pub mod smc;
pub mod train;

pub use agent::{Objective, Policy, SafetyCriticPair, TabularPolicy, ValueTable};
pub use env::{Environment, LabelSet, LabeledStep, World};
pub use logic::{parse_state_formula, BoundedAlways, PathFormula, StateFormula};
pub use model::{ImaginedTrace, ReplayBuffer, TabularWorldModel, TransitionRecord};
pub use shield::{ShieldConfig, ShieldDecision};
pub use smc::{BoundSide, DecisionMode, SafetyEstimate, SmcConfig, Verdict};
pub use train::{EpisodeMetrics, TrainConfig, Trainer};
