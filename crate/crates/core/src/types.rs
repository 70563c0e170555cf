//! Domain types shared across the crate: task descriptors, chain states and
//! records, exact θ values and probability histograms.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while constructing or (de)serializing core types.
#[derive(Debug, Error)]
pub enum TypesError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("cannot build a histogram from an empty sample list")]
    EmptySamples,
    #[error("histogram support must be non-empty and strictly increasing")]
    BadSupport,
    #[error("sample {0} lies outside the histogram support")]
    OutsideSupport(u64),
    #[error("malformed chain record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coin-flip proportion task: `n_obs` tosses are shown, `m_pred` are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProportionTask {
    pub n_obs: u64,
    pub m_pred: u64,
}

impl ProportionTask {
    pub fn new(n_obs: u64, m_pred: u64) -> Result<Self, TypesError> {
        let task = Self { n_obs, m_pred };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TypesError> {
        if self.n_obs == 0 {
            return Err(TypesError::InvalidTask("n_obs must be at least 1".into()));
        }
        if self.m_pred == 0 {
            return Err(TypesError::InvalidTask("m_pred must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for ProportionTask {
    /// Ten observed tosses, one hundred predicted.
    fn default() -> Self {
        Self { n_obs: 10, m_pred: 100 }
    }
}

/// Life-expectancy task. Ages are resampled uniformly from `[min_age, L]`
/// and accepted lifespans are capped at `max_lifespan`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifeTask {
    pub min_age: u64,
    pub max_lifespan: u64,
}

impl LifeTask {
    pub fn new(min_age: u64, max_lifespan: u64) -> Result<Self, TypesError> {
        let task = Self { min_age, max_lifespan };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TypesError> {
        if self.min_age == 0 {
            return Err(TypesError::InvalidTask("min_age must be at least 1".into()));
        }
        if self.min_age > self.max_lifespan {
            return Err(TypesError::InvalidTask(
                "min_age must not exceed max_lifespan".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LifeTask {
    fn default() -> Self {
        Self { min_age: 1, max_lifespan: 120 }
    }
}

/// Either of the two iterated-learning tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Proportion(ProportionTask),
    Life(LifeTask),
}

impl Task {
    pub fn validate(&self) -> Result<(), TypesError> {
        match self {
            Task::Proportion(t) => t.validate(),
            Task::Life(t) => t.validate(),
        }
    }

    /// Whether `obs` is a legal observation (heads count or current age).
    pub fn contains_observation(&self, obs: u64) -> bool {
        match self {
            Task::Proportion(t) => obs <= t.n_obs,
            Task::Life(t) => (t.min_age..=t.max_lifespan).contains(&obs),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Proportion(_) => "proportion",
            Task::Life(_) => "life",
        }
    }
}

/// An exact non-negative rational `num / den` with `num <= den`.
///
/// Estimates on the `1/M` grid are stored as `Ω / M`. Continuous draws are
/// stored on the dyadic grid `k / 2^53`, which every `f64` in `[0, 1]` with
/// exponent at least `-53` already lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Theta {
    num: u64,
    den: u64,
}

/// Denominator used for continuous θ draws.
pub const DYADIC_DEN: u64 = 1 << 53;

impl Theta {
    pub const ZERO: Theta = Theta { num: 0, den: 1 };
    pub const ONE: Theta = Theta { num: 1, den: 1 };

    /// Returns `None` unless `den > 0` and `num <= den`.
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0 && num <= den).then_some(Self { num, den })
    }

    /// Rounds a real `p ∈ [0, 1]` to the nearest multiple of `2^-53`.
    pub fn from_unit_f64(p: f64) -> Self {
        let p = p.clamp(0.0, 1.0);
        let num = (p * DYADIC_DEN as f64).round() as u64;
        Self { num: num.min(DYADIC_DEN), den: DYADIC_DEN }
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// One round of a chain.
///
/// `estimate` is the backend's answer to the previous observation and
/// `observation` is the data sampled from that answer, so state `k` of a
/// proportion chain holds `(ω_{k+1}, Ω_{k+1}, θ_{k+1})`. Life chains leave
/// `theta` empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainState {
    pub step: u64,
    pub observation: u64,
    pub estimate: u64,
    pub theta: Option<Theta>,
}

/// Per-step audit flags raised by remote backends.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFlags {
    /// Steps whose reply needed the first-integer fallback parse.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loose_parse_steps: Vec<u64>,
    /// Steps whose reply was clamped into the legal range.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repaired_steps: Vec<u64>,
}

impl RecordFlags {
    pub fn is_empty(&self) -> bool {
        self.loose_parse_steps.is_empty() && self.repaired_steps.is_empty()
    }
}

/// Header of a serialized [`ChainRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub task: Task,
    pub backend: String,
    pub seed: u64,
    pub initial_observation: u64,
    pub burn_in: u64,
    /// First step of the repetition fill after an absorbing state was reached.
    #[serde(default)]
    pub absorbed_at: Option<u64>,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "RecordFlags::is_empty")]
    pub flags: RecordFlags,
}

/// Full trajectory of one iterated-learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub task: Task,
    pub backend: String,
    pub seed: u64,
    pub initial_observation: u64,
    pub burn_in: u64,
    pub states: Vec<ChainState>,
    pub absorbed_at: Option<u64>,
    pub truncated: bool,
    pub flags: RecordFlags,
}

const CSV_COLUMNS: &str = "step,observation,estimate,theta_num,theta_den";

impl ChainRecord {
    pub fn header(&self) -> RecordHeader {
        RecordHeader {
            task: self.task,
            backend: self.backend.clone(),
            seed: self.seed,
            initial_observation: self.initial_observation,
            burn_in: self.burn_in,
            absorbed_at: self.absorbed_at,
            truncated: self.truncated,
            flags: self.flags.clone(),
        }
    }

    /// States with `step >= burn_in`.
    pub fn stationary(&self) -> &[ChainState] {
        let start = (self.burn_in as usize).min(self.states.len());
        &self.states[start..]
    }

    /// Stationary states keeping every `thin`-th one, counted from the end of
    /// burn-in.
    pub fn stationary_thinned(&self, thin: usize) -> impl Iterator<Item = &ChainState> {
        self.stationary().iter().step_by(thin.max(1))
    }

    /// Writes the record as one JSON header line followed by a CSV table.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), TypesError> {
        serde_json::to_writer(&mut out, &self.header())?;
        writeln!(out)?;
        writeln!(out, "{CSV_COLUMNS}")?;
        for s in &self.states {
            match s.theta {
                Some(t) => writeln!(
                    out,
                    "{},{},{},{},{}",
                    s.step,
                    s.observation,
                    s.estimate,
                    t.num(),
                    t.den()
                )?,
                None => writeln!(out, "{},{},{},,", s.step, s.observation, s.estimate)?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses the format produced by [`ChainRecord::write_to`].
    pub fn read_from<R: BufRead>(input: R) -> Result<Self, TypesError> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| TypesError::MalformedRecord("missing header".into()))??;
        let header: RecordHeader = serde_json::from_str(&header_line)?;
        let columns = lines
            .next()
            .ok_or_else(|| TypesError::MalformedRecord("missing column line".into()))??;
        if columns.trim_end() != CSV_COLUMNS {
            return Err(TypesError::MalformedRecord(format!(
                "unexpected columns {columns:?}"
            )));
        }
        let mut states = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let state = parse_state_row(&line)?;
            if state.step != k as u64 {
                return Err(TypesError::MalformedRecord(format!(
                    "row {k} has step {}",
                    state.step
                )));
            }
            states.push(state);
        }
        Ok(Self {
            task: header.task,
            backend: header.backend,
            seed: header.seed,
            initial_observation: header.initial_observation,
            burn_in: header.burn_in,
            states,
            absorbed_at: header.absorbed_at,
            truncated: header.truncated,
            flags: header.flags,
        })
    }
}

fn parse_state_row(line: &str) -> Result<ChainState, TypesError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 5 {
        return Err(TypesError::MalformedRecord(format!("bad row {line:?}")));
    }
    let int = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| TypesError::MalformedRecord(format!("bad integer {s:?} in {line:?}")))
    };
    let theta = match (fields[3], fields[4]) {
        ("", "") => None,
        (n, d) => Some(
            Theta::new(int(n)?, int(d)?)
                .ok_or_else(|| TypesError::MalformedRecord(format!("bad theta in {line:?}")))?,
        ),
    };
    Ok(ChainState {
        step: int(fields[0])?,
        observation: int(fields[1])?,
        estimate: int(fields[2])?,
        theta,
    })
}

/// Empirical probability mass over an ordered set of integer bin labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub support: Vec<u64>,
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Normalizes raw counts aligned with `support`.
    pub fn from_counts(support: Vec<u64>, counts: &[u64]) -> Result<Self, TypesError> {
        check_support(&support)?;
        assert_eq!(support.len(), counts.len(), "counts must align with support");
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(TypesError::EmptySamples);
        }
        let mass = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { support, mass })
    }

    pub fn point_mass(support: Vec<u64>, at: u64) -> Result<Self, TypesError> {
        make_histogram(&[at], &support)
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn mass_at(&self, label: u64) -> f64 {
        self.support
            .binary_search(&label)
            .map(|i| self.mass[i])
            .unwrap_or(0.0)
    }

    /// Label and mass of the heaviest bin (first one on ties).
    pub fn mode(&self) -> Option<(u64, f64)> {
        let mut best: Option<(u64, f64)> = None;
        for (&l, &m) in self.support.iter().zip(&self.mass) {
            if best.is_none_or(|(_, bm)| m > bm) {
                best = Some((l, m));
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,mass\n");
        for (l, m) in self.support.iter().zip(&self.mass) {
            s.push_str(&format!("{l},{m}\n"));
        }
        s
    }
}

fn check_support(support: &[u64]) -> Result<(), TypesError> {
    if support.is_empty() || support.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TypesError::BadSupport);
    }
    Ok(())
}

/// Counts `samples` into the bins of `support` and normalizes.
pub fn make_histogram(samples: &[u64], support: &[u64]) -> Result<Histogram, TypesError> {
    check_support(support)?;
    if samples.is_empty() {
        return Err(TypesError::EmptySamples);
    }
    let mut counts = vec![0u64; support.len()];
    for &s in samples {
        let idx = support
            .binary_search(&s)
            .map_err(|_| TypesError::OutsideSupport(s))?;
        counts[idx] += 1;
    }
    Histogram::from_counts(support.to_vec(), &counts)
}
