//! Iterated-learning chains over pluggable decision backends, exact analysis
//! of chains driven by deterministic policies, and an initial-value sweep
//! diagnostic that separates posterior sampling from deterministic answering.

pub mod agents;
pub mod backend;
pub mod diagnostics;
pub mod engine;
pub mod llm;
pub mod markov;
pub mod rng;
pub mod types;

pub use agents::{Agent, AgentSpec, BetaPrior, LifespanPrior};
pub use backend::{Decision, DecisionBackend, DecisionRequest, StepNonce};
pub use engine::{run_chain, run_sweep, ChainSpec, SweepSpec};
pub use types::{
    make_histogram, ChainRecord, ChainState, Histogram, LifeTask, ProportionTask, Task, Theta,
};
