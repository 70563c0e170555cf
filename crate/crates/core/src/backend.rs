//! The decision-backend contract: map the previous observation to an estimate.

use thiserror::Error;

use crate::rng::ChainRng;
use crate::types::{Task, Theta};

/// Identifies one step of one chain. Remote backends fold it into their cache
/// key so repeated prompts at non-zero temperature stay distinct draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepNonce {
    pub chain_seed: u64,
    pub step: u64,
}

impl std::fmt::Display for StepNonce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}:{}", self.chain_seed, self.step)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecisionRequest<'a> {
    pub task: &'a Task,
    pub observation: u64,
    pub nonce: StepNonce,
}

/// A backend's answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    /// Ω for the proportion task, L for the life task.
    pub estimate: u64,
    /// Overrides `estimate / M` as the sampling probability. Only the
    /// unrounded Gibbs agent sets this.
    pub theta: Option<Theta>,
    pub loose_parse: bool,
    pub repaired: bool,
}

impl Decision {
    pub fn plain(estimate: u64) -> Self {
        Self { estimate, theta: None, loose_parse: false, repaired: false }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend {backend} does not support the {task} task")]
    UnsupportedTask { backend: String, task: &'static str },
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
    #[error(transparent)]
    Remote(#[from] crate::llm::LlmError),
}

/// Anything that can play the learner in an iterated-learning chain.
pub trait DecisionBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Deterministic backends never consume randomness and always give the
    /// same answer for the same observation.
    fn is_deterministic(&self) -> bool;

    fn decide(&self, req: &DecisionRequest<'_>, rng: &mut ChainRng)
        -> Result<Decision, BackendError>;
}
