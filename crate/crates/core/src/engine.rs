//! Iterated-learning chain execution.
//!
//! A proportion step asks the backend for Ω given the previous heads count,
//! sets θ = Ω/M and draws the next heads count from Binomial(N, θ). A life
//! step asks for a lifespan L given the current age, clamps it to
//! `[age, max_lifespan]` and draws the next age uniformly from `[min_age, L]`.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Decision, DecisionBackend, DecisionRequest, StepNonce};
use crate::rng::{chain_rng, derive_seed, ChainRng};
use crate::types::{ChainRecord, ChainState, LifeTask, ProportionTask, RecordFlags, Task, Theta};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run parameters: {0}")]
    InvalidRun(String),
    #[error("backend returned estimate {estimate} outside [0, {max}]")]
    EstimateOutOfRange { estimate: u64, max: u64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

/// A chain that stopped early. `record` holds the states produced so far and
/// is marked truncated.
#[derive(Debug, Error)]
#[error("chain (seed {seed:#x}) stopped at step {step}: {source}")]
pub struct ChainFailure {
    pub seed: u64,
    pub step: u64,
    pub record: Box<ChainRecord>,
    #[source]
    pub source: EngineError,
}

/// Error of a whole sweep. `records` holds every chain that ran, including
/// the truncated ones, in sweep order.
#[derive(Debug, Error)]
#[error("{} of {} chains failed; first: {first}", failures, records.len())]
pub struct SweepFailure {
    pub records: Vec<ChainRecord>,
    pub failures: usize,
    pub first: Box<ChainFailure>,
}

fn request<'a>(task: &'a Task, observation: u64, nonce: StepNonce) -> DecisionRequest<'a> {
    DecisionRequest { task, observation, nonce }
}

/// One proportion round from `omega_prev`.
pub fn step_proportion(
    omega_prev: u64,
    backend: &dyn DecisionBackend,
    task: &ProportionTask,
    nonce: StepNonce,
    rng: &mut ChainRng,
) -> Result<(ChainState, Decision), EngineError> {
    if omega_prev > task.n_obs {
        return Err(EngineError::InvalidRun(format!(
            "observation {omega_prev} outside [0, {}]",
            task.n_obs
        )));
    }
    let wrapped = Task::Proportion(*task);
    let decision = backend.decide(&request(&wrapped, omega_prev, nonce), rng)?;
    if decision.estimate > task.m_pred {
        return Err(EngineError::EstimateOutOfRange {
            estimate: decision.estimate,
            max: task.m_pred,
        });
    }
    let theta = match decision.theta {
        Some(t) => t,
        None => Theta::new(decision.estimate, task.m_pred).expect("estimate <= M"),
    };
    let observation = sample_binomial(task.n_obs, theta, rng);
    Ok((
        ChainState { step: nonce.step, observation, estimate: decision.estimate, theta: Some(theta) },
        decision,
    ))
}

fn sample_binomial(n: u64, theta: Theta, rng: &mut ChainRng) -> u64 {
    if theta.is_zero() {
        return 0;
    }
    if theta.is_one() {
        return n;
    }
    Binomial::new(n, theta.as_f64())
        .expect("theta lies in (0, 1)")
        .sample(rng)
}

/// One life-expectancy round from `age_prev`.
pub fn step_life(
    age_prev: u64,
    backend: &dyn DecisionBackend,
    task: &LifeTask,
    nonce: StepNonce,
    rng: &mut ChainRng,
) -> Result<(ChainState, Decision), EngineError> {
    if !(task.min_age..=task.max_lifespan).contains(&age_prev) {
        return Err(EngineError::InvalidRun(format!(
            "age {age_prev} outside [{}, {}]",
            task.min_age, task.max_lifespan
        )));
    }
    let wrapped = Task::Life(*task);
    let decision = backend.decide(&request(&wrapped, age_prev, nonce), rng)?;
    let lifespan = decision.estimate.clamp(age_prev, task.max_lifespan);
    let observation = rng.random_range(task.min_age..=lifespan);
    Ok((
        ChainState { step: nonce.step, observation, estimate: lifespan, theta: None },
        decision,
    ))
}

/// The next observation is certain given this state.
fn transition_is_degenerate(task: &Task, state: &ChainState) -> bool {
    match task {
        Task::Proportion(_) => state.theta.is_some_and(|t| t.is_zero() || t.is_one()),
        Task::Life(t) => state.estimate == t.min_age,
    }
}

/// Parameters of a single chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSpec {
    pub task: Task,
    pub initial_observation: u64,
    pub steps: u64,
    pub burn_in: u64,
    pub seed: u64,
}

impl ChainSpec {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.task
            .validate()
            .map_err(|e| EngineError::InvalidRun(e.to_string()))?;
        if self.steps == 0 {
            return Err(EngineError::InvalidRun("steps must be positive".into()));
        }
        if self.burn_in >= self.steps {
            return Err(EngineError::InvalidRun(format!(
                "burn_in ({}) must be smaller than steps ({})",
                self.burn_in, self.steps
            )));
        }
        if !self.task.contains_observation(self.initial_observation) {
            return Err(EngineError::InvalidRun(format!(
                "initial observation {} is outside the task range",
                self.initial_observation
            )));
        }
        Ok(())
    }
}

/// Runs one chain to completion.
///
/// Deterministic backends stop querying once the chain sits in an absorbing
/// state (the state repeats and its successor is certain); the remaining
/// steps are filled by repetition and `absorbed_at` records where the fill
/// started.
pub fn run_chain(spec: &ChainSpec, backend: &dyn DecisionBackend) -> Result<ChainRecord, ChainFailure> {
    let mut record = ChainRecord {
        task: spec.task,
        backend: backend.id().to_string(),
        seed: spec.seed,
        initial_observation: spec.initial_observation,
        burn_in: spec.burn_in,
        states: Vec::with_capacity(spec.steps as usize),
        absorbed_at: None,
        truncated: false,
        flags: RecordFlags::default(),
    };
    if let Err(source) = spec.validate() {
        record.truncated = true;
        return Err(ChainFailure { seed: spec.seed, step: 0, record: Box::new(record), source });
    }
    let mut rng = chain_rng(spec.seed);
    let deterministic = backend.is_deterministic();
    let mut prev_obs = spec.initial_observation;

    for step in 0..spec.steps {
        let nonce = StepNonce { chain_seed: spec.seed, step };
        let result = match &spec.task {
            Task::Proportion(t) => step_proportion(prev_obs, backend, t, nonce, &mut rng),
            Task::Life(t) => step_life(prev_obs, backend, t, nonce, &mut rng),
        };
        let (state, decision) = match result {
            Ok(v) => v,
            Err(source) => {
                record.truncated = true;
                return Err(ChainFailure { seed: spec.seed, step, record: Box::new(record), source });
            }
        };
        if decision.loose_parse {
            record.flags.loose_parse_steps.push(step);
        }
        if decision.repaired {
            record.flags.repaired_steps.push(step);
        }
        let repeats = record.states.last().is_some_and(|last: &ChainState| {
            last.observation == state.observation
                && last.estimate == state.estimate
                && last.theta == state.theta
        });
        prev_obs = state.observation;
        record.states.push(state);

        if deterministic && repeats && transition_is_degenerate(&spec.task, &state) {
            let fill_from = step + 1;
            if fill_from < spec.steps {
                record.absorbed_at = Some(fill_from);
                record
                    .states
                    .extend((fill_from..spec.steps).map(|k| ChainState { step: k, ..state }));
            }
            break;
        }
    }
    Ok(record)
}

/// A batch of chains: `chains_per_init` chains from each initial value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub task: Task,
    pub initial_values: Vec<u64>,
    pub chains_per_init: u64,
    pub steps: u64,
    pub burn_in: u64,
    pub master_seed: u64,
}

impl SweepSpec {
    /// Seed of chain `chain_index` started from `initial_values[init_index]`.
    pub fn chain_seed(&self, init_index: usize, chain_index: u64) -> u64 {
        derive_seed(self.master_seed, init_index as u64, chain_index)
    }

    pub fn chain_specs(&self) -> Vec<ChainSpec> {
        self.initial_values
            .iter()
            .enumerate()
            .flat_map(|(i, &init)| {
                (0..self.chains_per_init).map(move |c| ChainSpec {
                    task: self.task,
                    initial_observation: init,
                    steps: self.steps,
                    burn_in: self.burn_in,
                    seed: self.chain_seed(i, c),
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.initial_values.is_empty() {
            return Err(EngineError::InvalidRun("initial value list is empty".into()));
        }
        if self.chains_per_init == 0 {
            return Err(EngineError::InvalidRun("chains_per_init must be positive".into()));
        }
        for &init in &self.initial_values {
            ChainSpec {
                task: self.task,
                initial_observation: init,
                steps: self.steps,
                burn_in: self.burn_in,
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }
}

/// Runs every chain of the sweep, at most `parallelism` at a time (all cores
/// when `None`). Records come back in `(init index, chain index)` order and
/// do not depend on scheduling.
pub fn run_sweep(
    spec: &SweepSpec,
    backend: &dyn DecisionBackend,
    parallelism: Option<usize>,
) -> Result<Vec<ChainRecord>, SweepFailure> {
    if let Err(source) = spec.validate() {
        return Err(setup_failure(spec, backend, source));
    }
    let specs = spec.chain_specs();
    let run_all = || -> Vec<Result<ChainRecord, ChainFailure>> {
        specs.par_iter().map(|c| run_chain(c, backend)).collect()
    };
    let results = match parallelism {
        Some(threads) => match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
            Ok(pool) => pool.install(run_all),
            Err(e) => return Err(setup_failure(spec, backend, EngineError::Pool(e.to_string()))),
        },
        None => run_all(),
    };

    let mut records = Vec::with_capacity(results.len());
    let mut first = None;
    let mut failures = 0;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(fail) => {
                failures += 1;
                records.push((*fail.record).clone());
                first.get_or_insert(fail);
            }
        }
    }
    match first {
        None => Ok(records),
        Some(first) => Err(SweepFailure { records, failures, first: Box::new(first) }),
    }
}

fn setup_failure(spec: &SweepSpec, backend: &dyn DecisionBackend, source: EngineError) -> SweepFailure {
    let record = ChainRecord {
        task: spec.task,
        backend: backend.id().to_string(),
        seed: spec.master_seed,
        initial_observation: spec.initial_values.first().copied().unwrap_or(0),
        burn_in: spec.burn_in,
        states: Vec::new(),
        absorbed_at: None,
        truncated: true,
        flags: RecordFlags::default(),
    };
    SweepFailure {
        records: Vec::new(),
        failures: 1,
        first: Box::new(ChainFailure { seed: spec.master_seed, step: 0, record: Box::new(record), source }),
    }
}
