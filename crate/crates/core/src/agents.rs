//! Simulated decision backends covering the behaviour taxonomy: posterior
//! samplers (stochastic), maximum-likelihood responders (deterministic) and
//! boundary-avoiding variants of the latter.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Decision, DecisionBackend, DecisionRequest};
use crate::rng::ChainRng;
use crate::types::{LifeTask, ProportionTask, Task, Theta};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("observation {omega} outside [0, {n}]")]
    OmegaOutOfRange { omega: u64, n: u64 },
    #[error("age must be at least 1")]
    AgeTooSmall,
    #[error("age {age} exceeds the prior grid cap {cap}")]
    AgeAboveCap { age: u64, cap: u64 },
    #[error("prior puts no mass on lifespans >= {age}")]
    ZeroPosteriorMass { age: u64 },
    #[error("boundary avoidance needs at least one boundary flag")]
    NoBoundaryFlag,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, AgentError> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(AgentError::InvalidPrior(format!(
                "beta prior needs positive finite parameters, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn uniform() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Prior over integer lifespans on a grid `[min..=cap]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifespanPrior {
    grid: Vec<u64>,
    weights: Vec<f64>,
}

impl LifespanPrior {
    /// Weights are normalized here; they must be non-negative with positive sum.
    pub fn new(grid: Vec<u64>, weights: Vec<f64>) -> Result<Self, AgentError> {
        if grid.is_empty() || grid.len() != weights.len() {
            return Err(AgentError::InvalidPrior("grid and weights must align".into()));
        }
        if grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AgentError::InvalidPrior(
                "grid must be positive and strictly increasing".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AgentError::InvalidPrior("weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(AgentError::InvalidPrior("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { grid, weights })
    }

    /// Gaussian density evaluated on every integer of `[min, cap]`.
    pub fn discretized_gaussian(mean: f64, sd: f64, min: u64, cap: u64) -> Result<Self, AgentError> {
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(AgentError::InvalidPrior(format!("bad gaussian ({mean}, {sd})")));
        }
        if min == 0 || min > cap {
            return Err(AgentError::InvalidPrior(format!("bad grid [{min}, {cap}]")));
        }
        let grid: Vec<u64> = (min..=cap).collect();
        let weights = grid
            .iter()
            .map(|&l| {
                let z = (l as f64 - mean) / sd;
                (-0.5 * z * z).exp()
            })
            .collect();
        Self::new(grid, weights)
    }

    /// Mean 78, sd 10 on `[1, 120]`.
    pub fn default_for(task: &LifeTask) -> Result<Self, AgentError> {
        Self::discretized_gaussian(78.0, 10.0, task.min_age, task.max_lifespan)
    }

    pub fn grid(&self) -> &[u64] {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cap(&self) -> u64 {
        *self.grid.last().expect("grid is non-empty")
    }

    /// Posterior over the grid after seeing someone aged `age`: prior(L)/L on
    /// `L >= age`, renormalized. Returns `(grid index offset, probabilities)`.
    pub fn posterior(&self, age: u64) -> Result<(usize, Vec<f64>), AgentError> {
        if age < 1 {
            return Err(AgentError::AgeTooSmall);
        }
        if age > self.cap() {
            return Err(AgentError::AgeAboveCap { age, cap: self.cap() });
        }
        let start = self.grid.partition_point(|&l| l < age);
        let unnorm: Vec<f64> = self.grid[start..]
            .iter()
            .zip(&self.weights[start..])
            .map(|(&l, &w)| w / l as f64)
            .collect();
        let total: f64 = unnorm.iter().sum();
        if total <= 0.0 {
            return Err(AgentError::ZeroPosteriorMass { age });
        }
        Ok((start, unnorm.into_iter().map(|w| w / total).collect()))
    }
}

fn check_omega(omega: u64, task: &ProportionTask) -> Result<(), AgentError> {
    if omega > task.n_obs {
        return Err(AgentError::OmegaOutOfRange { omega, n: task.n_obs });
    }
    Ok(())
}

/// Rounds `m * θ` half away from zero.
pub fn round_to_grid(theta: f64, m_pred: u64) -> u64 {
    (m_pred as f64 * theta).round().clamp(0.0, m_pred as f64) as u64
}

/// Maximum-likelihood answer `round(M·ω/N)`, computed in integers.
pub fn mle_decide(omega: u64, task: &ProportionTask) -> Result<u64, AgentError> {
    check_omega(omega, task)?;
    let (n, m) = (task.n_obs as u128, task.m_pred as u128);
    // floor((2Mω + N) / 2N) is round-half-up, which is half-away-from-zero
    // for non-negative values.
    Ok(((2 * m * omega as u128 + n) / (2 * n)) as u64)
}

/// Draws θ from the conjugate Beta posterior and reports `round(M·θ)`.
pub fn posterior_sample_decide<R: Rng + ?Sized>(
    omega: u64,
    task: &ProportionTask,
    prior: &BetaPrior,
    rng: &mut R,
) -> Result<u64, AgentError> {
    let theta = sample_posterior_theta(omega, task, prior, rng)?;
    Ok(round_to_grid(theta, task.m_pred))
}

fn sample_posterior_theta<R: Rng + ?Sized>(
    omega: u64,
    task: &ProportionTask,
    prior: &BetaPrior,
    rng: &mut R,
) -> Result<f64, AgentError> {
    check_omega(omega, task)?;
    let a = prior.alpha + omega as f64;
    let b = prior.beta + (task.n_obs - omega) as f64;
    let dist = Beta::new(a, b).map_err(|e| AgentError::InvalidPrior(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// MLE answer clamped away from the flagged boundaries.
pub fn boundary_avoid_decide(
    omega: u64,
    task: &ProportionTask,
    avoid_zero: bool,
    avoid_full: bool,
) -> Result<u64, AgentError> {
    if !avoid_zero && !avoid_full {
        return Err(AgentError::NoBoundaryFlag);
    }
    let (lo, hi) = clamp_interval(task, avoid_zero, avoid_full);
    Ok(mle_decide(omega, task)?.clamp(lo, hi))
}

fn clamp_interval(task: &ProportionTask, avoid_zero: bool, avoid_full: bool) -> (u64, u64) {
    let lo = if avoid_zero { 1 } else { 0 };
    let hi = if avoid_full { task.m_pred - 1 } else { task.m_pred };
    // M = 1 with both flags leaves no legal value; the clamp is then a no-op.
    (lo.min(hi), hi.max(lo))
}

/// Naive lifespan MLE: the current age itself.
pub fn life_mle_decide(age: u64) -> Result<u64, AgentError> {
    if age < 1 {
        return Err(AgentError::AgeTooSmall);
    }
    Ok(age)
}

/// Samples a lifespan from the grid posterior given the current age.
pub fn life_posterior_decide<R: Rng + ?Sized>(
    age: u64,
    prior: &LifespanPrior,
    rng: &mut R,
) -> Result<u64, AgentError> {
    let (start, probs) = prior.posterior(age)?;
    let idx = WeightedIndex::new(&probs)
        .map_err(|_| AgentError::ZeroPosteriorMass { age })?
        .sample(rng);
    Ok(prior.grid[start + idx])
}

/// Agent selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAgentSpec", into = "RawAgentSpec")]
pub enum AgentSpec {
    Mle,
    BetaPosterior { alpha: f64, beta: f64 },
    ExactGibbs { alpha: f64, beta: f64 },
    AvoidZero,
    AvoidFull,
    AvoidBoth,
    LifeMle,
    LifePosterior { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgentSpec {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sd: Option<f64>,
}

impl TryFrom<RawAgentSpec> for AgentSpec {
    type Error = String;

    fn try_from(raw: RawAgentSpec) -> Result<Self, String> {
        let beta_fields = raw.alpha.is_some() || raw.beta.is_some();
        let life_fields = raw.mean.is_some() || raw.sd.is_some();
        let reject = |field: &str| Err(format!("agent {:?} does not accept field `{field}`", raw.id));
        let plain = |spec: AgentSpec| {
            if beta_fields {
                reject(if raw.alpha.is_some() { "alpha" } else { "beta" })
            } else if life_fields {
                reject(if raw.mean.is_some() { "mean" } else { "sd" })
            } else {
                Ok(spec)
            }
        };
        match raw.id.as_str() {
            "mle" => plain(AgentSpec::Mle),
            "avoid-zero" => plain(AgentSpec::AvoidZero),
            "avoid-full" => plain(AgentSpec::AvoidFull),
            "avoid-both" => plain(AgentSpec::AvoidBoth),
            "life-mle" => plain(AgentSpec::LifeMle),
            "beta-posterior" | "exact-gibbs" => {
                if life_fields {
                    return reject(if raw.mean.is_some() { "mean" } else { "sd" });
                }
                let (alpha, beta) = (raw.alpha.unwrap_or(1.0), raw.beta.unwrap_or(1.0));
                Ok(if raw.id == "exact-gibbs" {
                    AgentSpec::ExactGibbs { alpha, beta }
                } else {
                    AgentSpec::BetaPosterior { alpha, beta }
                })
            }
            "life-posterior" => {
                if beta_fields {
                    return reject(if raw.alpha.is_some() { "alpha" } else { "beta" });
                }
                Ok(AgentSpec::LifePosterior {
                    mean: raw.mean.unwrap_or(78.0),
                    sd: raw.sd.unwrap_or(10.0),
                })
            }
            other => Err(format!("unknown agent id {other:?}")),
        }
    }
}

impl From<AgentSpec> for RawAgentSpec {
    fn from(spec: AgentSpec) -> Self {
        let mut raw = RawAgentSpec { id: spec.id().to_string(), ..Default::default() };
        match spec {
            AgentSpec::BetaPosterior { alpha, beta } | AgentSpec::ExactGibbs { alpha, beta } => {
                raw.alpha = Some(alpha);
                raw.beta = Some(beta);
            }
            AgentSpec::LifePosterior { mean, sd } => {
                raw.mean = Some(mean);
                raw.sd = Some(sd);
            }
            _ => {}
        }
        raw
    }
}

impl AgentSpec {
    pub fn id(&self) -> &'static str {
        match self {
            AgentSpec::Mle => "mle",
            AgentSpec::BetaPosterior { .. } => "beta-posterior",
            AgentSpec::ExactGibbs { .. } => "exact-gibbs",
            AgentSpec::AvoidZero => "avoid-zero",
            AgentSpec::AvoidFull => "avoid-full",
            AgentSpec::AvoidBoth => "avoid-both",
            AgentSpec::LifeMle => "life-mle",
            AgentSpec::LifePosterior { .. } => "life-posterior",
        }
    }

    /// Builds the agent for `task`, rejecting task/agent mismatches.
    pub fn build(&self, task: &Task) -> Result<Agent, AgentBuildError> {
        let mismatch = || AgentBuildError::TaskMismatch { agent: self.id(), task: task.name() };
        let agent = match (self, task) {
            (AgentSpec::Mle, Task::Proportion(_)) => Agent::Mle,
            (AgentSpec::BetaPosterior { alpha, beta }, Task::Proportion(_)) => {
                Agent::BetaPosterior(BetaPrior::new(*alpha, *beta)?)
            }
            (AgentSpec::ExactGibbs { alpha, beta }, Task::Proportion(_)) => {
                Agent::ExactGibbs(BetaPrior::new(*alpha, *beta)?)
            }
            (AgentSpec::AvoidZero, Task::Proportion(_)) => {
                Agent::BoundaryAvoid { avoid_zero: true, avoid_full: false }
            }
            (AgentSpec::AvoidFull, Task::Proportion(_)) => {
                Agent::BoundaryAvoid { avoid_zero: false, avoid_full: true }
            }
            (AgentSpec::AvoidBoth, Task::Proportion(_)) => {
                Agent::BoundaryAvoid { avoid_zero: true, avoid_full: true }
            }
            (AgentSpec::LifeMle, Task::Life(_)) => Agent::LifeMle,
            (AgentSpec::LifePosterior { mean, sd }, Task::Life(t)) => Agent::LifePosterior(
                LifespanPrior::discretized_gaussian(*mean, *sd, t.min_age, t.max_lifespan)?,
            ),
            _ => return Err(mismatch()),
        };
        Ok(agent)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentBuildError {
    #[error("agent {agent} cannot run the {task} task")]
    TaskMismatch { agent: &'static str, task: &'static str },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// A ready-to-run simulated backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Agent {
    Mle,
    BetaPosterior(BetaPrior),
    /// Posterior sampler that hands the unrounded θ to the chain, making the
    /// `(θ, ω)` pair an exact Gibbs sampler on `p(θ)p(ω|θ)`.
    ExactGibbs(BetaPrior),
    BoundaryAvoid { avoid_zero: bool, avoid_full: bool },
    LifeMle,
    LifePosterior(LifespanPrior),
}

impl Agent {
    pub fn id(&self) -> &'static str {
        match self {
            Agent::Mle => "mle",
            Agent::BetaPosterior(_) => "beta-posterior",
            Agent::ExactGibbs(_) => "exact-gibbs",
            Agent::BoundaryAvoid { avoid_zero: true, avoid_full: false } => "avoid-zero",
            Agent::BoundaryAvoid { avoid_zero: false, avoid_full: true } => "avoid-full",
            Agent::BoundaryAvoid { .. } => "avoid-both",
            Agent::LifeMle => "life-mle",
            Agent::LifePosterior(_) => "life-posterior",
        }
    }

    /// The proportion-task policy `ω ↦ Ω` when the agent is deterministic.
    pub fn proportion_policy(&self, omega: u64, task: &ProportionTask) -> Option<Result<u64, AgentError>> {
        match *self {
            Agent::Mle => Some(mle_decide(omega, task)),
            Agent::BoundaryAvoid { avoid_zero, avoid_full } => {
                Some(boundary_avoid_decide(omega, task, avoid_zero, avoid_full))
            }
            _ => None,
        }
    }
}

impl DecisionBackend for Agent {
    fn id(&self) -> &str {
        Agent::id(self)
    }

    fn is_deterministic(&self) -> bool {
        matches!(self, Agent::Mle | Agent::BoundaryAvoid { .. } | Agent::LifeMle)
    }

    fn decide(&self, req: &DecisionRequest<'_>, rng: &mut ChainRng) -> Result<Decision, BackendError> {
        let unsupported = || BackendError::UnsupportedTask {
            backend: Agent::id(self).to_string(),
            task: req.task.name(),
        };
        let omega = req.observation;
        let decision = match (self, req.task) {
            (Agent::Mle, Task::Proportion(t)) => Decision::plain(mle_decide(omega, t)?),
            (Agent::BoundaryAvoid { avoid_zero, avoid_full }, Task::Proportion(t)) => {
                Decision::plain(boundary_avoid_decide(omega, t, *avoid_zero, *avoid_full)?)
            }
            (Agent::BetaPosterior(prior), Task::Proportion(t)) => {
                Decision::plain(posterior_sample_decide(omega, t, prior, rng)?)
            }
            (Agent::ExactGibbs(prior), Task::Proportion(t)) => {
                let theta = sample_posterior_theta(omega, t, prior, rng)?;
                Decision {
                    theta: Some(Theta::from_unit_f64(theta)),
                    ..Decision::plain(round_to_grid(theta, t.m_pred))
                }
            }
            (Agent::LifeMle, Task::Life(_)) => Decision::plain(life_mle_decide(omega)?),
            (Agent::LifePosterior(prior), Task::Life(_)) => {
                Decision::plain(life_posterior_decide(omega, prior, rng)?)
            }
            _ => return Err(unsupported()),
        };
        Ok(decision)
    }
}
