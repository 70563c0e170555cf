//! Initial-value sweep diagnostic.
//!
//! A posterior sampler forgets where its chain started, so its stationary
//! distribution is the same for every initial observation. A deterministic
//! responder such as the MLE keeps a memory of the start (absorption
//! probabilities depend on ω₀). The report compares per-init stationary
//! histograms pairwise with total variation and a permutation test, fits the
//! θ = 1 mass against the initial value and labels the backend.
//!
//! Init-dependence is sufficient evidence against posterior sampling.
//! Init-invariance is not proof of it: a deterministic process can also
//! forget its start, which is why a near point-mass outcome gets its own
//! label.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Hypergeometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{chain_rng, derive_seed};
use crate::types::{ChainRecord, ChainState, Histogram, Task, TypesError};

#[derive(Debug, Error)]
pub enum DiagnosticError {
    #[error("histograms have different supports")]
    SupportMismatch,
    #[error("sample list is empty")]
    EmptySamples,
    #[error("at least 100 resamples are required, got {0}")]
    TooFewResamples(usize),
    #[error("need at least 3 distinct initial values for a boundary fit")]
    DegenerateFit,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("state {0:?} cannot be binned")]
    Unbinnable(ChainState),
    #[error(transparent)]
    Types(#[from] TypesError),
}

/// Half the L1 distance between two histograms on the same support.
pub fn total_variation(a: &Histogram, b: &Histogram) -> Result<f64, DiagnosticError> {
    if a.support != b.support {
        return Err(DiagnosticError::SupportMismatch);
    }
    Ok(tv_of_masses(&a.mass, &b.mass))
}

fn tv_of_masses(a: &[f64], b: &[f64]) -> f64 {
    let half_l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
    half_l1.clamp(0.0, 1.0)
}

fn tv_of_counts(a: &[u64], na: u64, b: &[u64], nb: u64) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    let half_l1: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs())
        .sum::<f64>()
        / 2.0;
    half_l1.clamp(0.0, 1.0)
}

/// Outcome of a two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// Statistics that differ by less than this are treated as ties.
const TIE_EPS: f64 = 1e-12;

/// Permutation test of equal distributions with the histogram TV as the
/// statistic. The p-value is the fraction of label-shuffled resamples whose
/// statistic is at least the observed one.
///
/// Shuffling labels only changes how many items of each category land in
/// the first group, and that split is multivariate hypergeometric. Drawing
/// it directly gives the same resampling distribution in `O(categories)`
/// per resample.
pub fn equality_test<R: Rng + ?Sized>(
    a: &[u64],
    b: &[u64],
    resamples: usize,
    rng: &mut R,
) -> Result<TestOutcome, DiagnosticError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticError::EmptySamples);
    }
    let mut index = BTreeMap::new();
    for &x in a.iter().chain(b) {
        let next = index.len();
        index.entry(x).or_insert(next);
    }
    let mut ca = vec![0u64; index.len()];
    let mut cb = vec![0u64; index.len()];
    for x in a {
        ca[index[x]] += 1;
    }
    for x in b {
        cb[index[x]] += 1;
    }
    equality_test_counts(&ca, &cb, resamples, rng)
}

/// [`equality_test`] on per-category counts of the two groups.
pub fn equality_test_counts<R: Rng + ?Sized>(
    a_counts: &[u64],
    b_counts: &[u64],
    resamples: usize,
    rng: &mut R,
) -> Result<TestOutcome, DiagnosticError> {
    if resamples < 100 {
        return Err(DiagnosticError::TooFewResamples(resamples));
    }
    if a_counts.len() != b_counts.len() {
        return Err(DiagnosticError::SupportMismatch);
    }
    let na: u64 = a_counts.iter().sum();
    let nb: u64 = b_counts.iter().sum();
    if na == 0 || nb == 0 {
        return Err(DiagnosticError::EmptySamples);
    }
    let pooled: Vec<u64> = a_counts.iter().zip(b_counts).map(|(x, y)| x + y).collect();
    let observed = tv_of_counts(a_counts, na, b_counts, nb);

    let mut ra = vec![0u64; pooled.len()];
    let mut rb = vec![0u64; pooled.len()];
    let mut at_least = 0usize;
    for _ in 0..resamples {
        let mut remaining_pool = na + nb;
        let mut remaining_draws = na;
        for (j, &c) in pooled.iter().enumerate() {
            let x = if remaining_draws == 0 || c == 0 {
                0
            } else if c == remaining_pool {
                remaining_draws
            } else {
                Hypergeometric::new(remaining_pool, c, remaining_draws)
                    .expect("valid hypergeometric parameters")
                    .sample(rng)
            };
            ra[j] = x;
            rb[j] = c - x;
            remaining_pool -= c;
            remaining_draws -= x;
        }
        if tv_of_counts(&ra, na, &rb, nb) >= observed - TIE_EPS {
            at_least += 1;
        }
    }
    Ok(TestOutcome { statistic: observed, p_value: at_least as f64 / resamples as f64 })
}

/// Ordinary least-squares line through `(init, mass at θ = 1)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFit {
    pub slope: f64,
    pub intercept: f64,
    /// 1 when the points lie exactly on the line, including a flat line.
    pub r_squared: f64,
}

impl BoundaryFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

pub fn fit_boundary_mass(points: &[(f64, f64)]) -> Result<BoundaryFit, DiagnosticError> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(DiagnosticError::DegenerateFit);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if ss_tot <= f64::EPSILON * n {
        if ss_res <= f64::EPSILON * n { 1.0 } else { 0.0 }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(BoundaryFit { slope, intercept, r_squared })
}

/// How stationary states are mapped to histogram bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// θ rounded to the nearest of `bins` equally spaced points on `[0, 1]`.
    Theta { bins: u64 },
    /// Raw estimates on `[lo, hi]`.
    Range { lo: u64, hi: u64 },
}

impl Binning {
    /// 21 θ bins for the proportion task, one bin per lifespan otherwise.
    pub fn default_for(task: &Task) -> Self {
        match task {
            Task::Proportion(_) => Binning::Theta { bins: 21 },
            Task::Life(t) => Binning::Range { lo: t.min_age, hi: t.max_lifespan },
        }
    }

    pub fn support(&self) -> Vec<u64> {
        match *self {
            Binning::Theta { bins } => (0..bins).collect(),
            Binning::Range { lo, hi } => (lo..=hi).collect(),
        }
    }

    pub fn bin(&self, state: &ChainState) -> Result<usize, DiagnosticError> {
        match *self {
            Binning::Theta { bins } => {
                let theta = state.theta.ok_or(DiagnosticError::Unbinnable(*state))?;
                let (num, den, k) = (theta.num() as u128, theta.den() as u128, (bins - 1) as u128);
                // nearest of k+1 grid points, halves rounded up
                Ok(((2 * k * num + den) / (2 * den)) as usize)
            }
            Binning::Range { lo, hi } => {
                if !(lo..=hi).contains(&state.estimate) {
                    return Err(DiagnosticError::Unbinnable(*state));
                }
                Ok((state.estimate - lo) as usize)
            }
        }
    }
}

/// Stationary samples from all chains that started at one initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSamples {
    pub init: u64,
    /// Bin counts over every post-burn-in state.
    pub counts: Vec<u64>,
    /// Bin counts over the thinned states used by the permutation test.
    pub test_counts: Vec<u64>,
    /// Fraction of post-burn-in states with θ exactly 1 (proportion task).
    pub boundary_mass: Option<f64>,
}

impl InitSamples {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Groups stationary states by initial observation, ascending.
pub fn collect_samples(
    records: &[ChainRecord],
    binning: &Binning,
    thin: usize,
) -> Result<Vec<InitSamples>, DiagnosticError> {
    let width = binning.support().len();
    let mut groups: BTreeMap<u64, (Vec<u64>, Vec<u64>, u64, u64)> = BTreeMap::new();
    for rec in records {
        let g = groups
            .entry(rec.initial_observation)
            .or_insert_with(|| (vec![0; width], vec![0; width], 0, 0));
        for (k, s) in rec.stationary().iter().enumerate() {
            let b = binning.bin(s)?;
            g.0[b] += 1;
            if k % thin.max(1) == 0 {
                g.1[b] += 1;
            }
            g.2 += 1;
            if s.theta.is_some_and(|t| t.is_one()) {
                g.3 += 1;
            }
        }
    }
    let proportion = records.first().is_some_and(|r| matches!(r.task, Task::Proportion(_)));
    Ok(groups
        .into_iter()
        .map(|(init, (counts, test_counts, total, full))| InitSamples {
            init,
            counts,
            test_counts,
            boundary_mass: (proportion && total > 0).then(|| full as f64 / total as f64),
        })
        .collect())
}

/// Classification of a backend's decision pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Stochastic,
    Deterministic,
    DegenerateAbsorbing,
    Inconclusive,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Stochastic => "stochastic",
            Label::Deterministic => "deterministic",
            Label::DegenerateAbsorbing => "degenerate-absorbing",
            Label::Inconclusive => "inconclusive",
        })
    }
}

/// Thresholds and resampling settings of the diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticConfig {
    pub tv_threshold: f64,
    /// Family-wise level; each pair is tested at `alpha / pairs`.
    pub alpha: f64,
    pub resamples: usize,
    /// Minimum post-burn-in states per initial value.
    pub min_samples: u64,
    /// Keep every `thin`-th stationary state for the permutation test.
    pub thin: usize,
    /// Pooled mass on one bin at or above which a consistent sweep is
    /// labelled degenerate.
    pub degenerate_mass: f64,
    /// Minimum r² for the boundary fit to count as init-dependence.
    pub boundary_r_squared: f64,
    pub seed: u64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            tv_threshold: 0.1,
            alpha: 0.01,
            resamples: 1000,
            min_samples: 1000,
            thin: 50,
            degenerate_mass: 0.95,
            boundary_r_squared: 0.9,
            seed: 0,
        }
    }
}

impl DiagnosticConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tv_threshold > 0.0 && self.tv_threshold <= 1.0) {
            return Err("tv_threshold must lie in (0, 1]".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err("alpha must lie in (0, 1)".into());
        }
        if self.resamples < 100 {
            return Err("resamples must be at least 100".into());
        }
        if self.thin == 0 {
            return Err("thin must be at least 1".into());
        }
        if !(self.degenerate_mass > 0.0 && self.degenerate_mass <= 1.0) {
            return Err("degenerate_mass must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.boundary_r_squared) {
            return Err("boundary_r_squared must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub init_a: u64,
    pub init_b: u64,
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitHistogram {
    pub init: u64,
    pub samples: u64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub binning: Binning,
    pub per_init: Vec<InitHistogram>,
    pub pooled: Histogram,
    pub pairwise_tv: Vec<Vec<f64>>,
    pub tests: Vec<PairTest>,
    /// `(init, mass at θ = 1)`; empty for the life task.
    pub boundary_points: Vec<(u64, f64)>,
    pub boundary_fit: Option<BoundaryFit>,
    pub label: Label,
    pub thresholds: DiagnosticConfig,
    pub per_pair_alpha: f64,
    pub scope: String,
}

const SCOPE_NOTE: &str = "init-dependent stationary distributions rule out posterior sampling; \
init-invariant ones are consistent with it but do not prove it";

impl DiagnosticReport {
    pub fn max_tv(&self) -> f64 {
        self.pairwise_tv.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// `init,label,mass` rows for every per-init histogram.
    pub fn histograms_csv(&self) -> String {
        let mut s = String::from("init,label,mass\n");
        for h in &self.per_init {
            for (l, m) in h.histogram.support.iter().zip(&h.histogram.mass) {
                s.push_str(&format!("{},{l},{m}\n", h.init));
            }
        }
        s
    }

    /// `init,mass_at_boundary,fitted` rows for plotting the boundary fit.
    pub fn plot_data_csv(&self) -> String {
        let mut s = String::from("init,mass_at_boundary,fitted\n");
        for &(init, mass) in &self.boundary_points {
            let fitted = self
                .boundary_fit
                .map(|f| f.predict(init as f64).to_string())
                .unwrap_or_default();
            s.push_str(&format!("{init},{mass},{fitted}\n"));
        }
        s
    }
}

/// Applies the decision rules to the computed statistics.
///
/// 1. `deterministic`: some pair is significant with TV at or above the
///    threshold, or the boundary fit moves by at least the threshold across
///    the init range with r² at or above `boundary_r_squared`.
/// 2. `degenerate-absorbing`: all pairs below the TV threshold and the
///    pooled histogram puts at least `degenerate_mass` on one bin.
/// 3. `stochastic`: no significant pair and all pairs below the threshold.
/// 4. `inconclusive` otherwise.
pub fn classify(
    pairwise_tv: &[Vec<f64>],
    tests: &[PairTest],
    boundary_fit: Option<&BoundaryFit>,
    init_span: f64,
    pooled: &Histogram,
    config: &DiagnosticConfig,
) -> Label {
    let max_tv = pairwise_tv.iter().flatten().copied().fold(0.0, f64::max);
    let divergent_pair = tests
        .iter()
        .any(|t| t.significant && t.statistic >= config.tv_threshold);
    let boundary_trend = boundary_fit.is_some_and(|f| {
        f.r_squared >= config.boundary_r_squared && (f.slope * init_span).abs() >= config.tv_threshold
    });
    if divergent_pair || boundary_trend {
        return Label::Deterministic;
    }
    let consistent = max_tv < config.tv_threshold;
    let peak = pooled.mode().map_or(0.0, |(_, m)| m);
    if consistent && peak >= config.degenerate_mass {
        return Label::DegenerateAbsorbing;
    }
    if consistent && tests.iter().all(|t| !t.significant) {
        return Label::Stochastic;
    }
    Label::Inconclusive
}

/// Builds the full report from grouped stationary samples.
pub fn diagnose(
    groups: &[InitSamples],
    binning: &Binning,
    config: &DiagnosticConfig,
) -> Result<DiagnosticReport, DiagnosticError> {
    config.validate().map_err(DiagnosticError::InsufficientSamples)?;
    if groups.len() < 2 {
        return Err(DiagnosticError::InsufficientSamples(format!(
            "need at least 2 initial values, got {}",
            groups.len()
        )));
    }
    for g in groups {
        if g.total() < config.min_samples {
            return Err(DiagnosticError::InsufficientSamples(format!(
                "init {} has {} stationary samples, need {}",
                g.init,
                g.total(),
                config.min_samples
            )));
        }
    }
    let support = binning.support();
    let per_init = groups
        .iter()
        .map(|g| {
            Ok(InitHistogram {
                init: g.init,
                samples: g.total(),
                histogram: Histogram::from_counts(support.clone(), &g.counts)?,
            })
        })
        .collect::<Result<Vec<_>, DiagnosticError>>()?;

    let k = groups.len();
    let mut pairwise_tv = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let tv = tv_of_masses(&per_init[i].histogram.mass, &per_init[j].histogram.mass);
            pairwise_tv[i][j] = tv;
            pairwise_tv[j][i] = tv;
        }
    }

    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect();
    let per_pair_alpha = config.alpha / pairs.len() as f64;
    let tests = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut rng = chain_rng(derive_seed(config.seed, i as u64, j as u64));
            let out = equality_test_counts(
                &groups[i].test_counts,
                &groups[j].test_counts,
                config.resamples,
                &mut rng,
            )?;
            Ok(PairTest {
                init_a: groups[i].init,
                init_b: groups[j].init,
                test: "permutation-tv".into(),
                statistic: out.statistic,
                p_value: out.p_value,
                significant: out.p_value < per_pair_alpha,
            })
        })
        .collect::<Result<Vec<_>, DiagnosticError>>()?;

    let boundary_points: Vec<(u64, f64)> = groups
        .iter()
        .filter_map(|g| g.boundary_mass.map(|m| (g.init, m)))
        .collect();
    let boundary_fit = if boundary_points.len() == groups.len() {
        let pts: Vec<(f64, f64)> = boundary_points.iter().map(|&(i, m)| (i as f64, m)).collect();
        fit_boundary_mass(&pts).ok()
    } else {
        None
    };
    let init_span = (groups[k - 1].init - groups[0].init) as f64;

    let mut pooled_counts = vec![0u64; support.len()];
    for g in groups {
        for (p, c) in pooled_counts.iter_mut().zip(&g.counts) {
            *p += c;
        }
    }
    let pooled = Histogram::from_counts(support, &pooled_counts)?;
    let label = classify(&pairwise_tv, &tests, boundary_fit.as_ref(), init_span, &pooled, config);

    Ok(DiagnosticReport {
        binning: *binning,
        per_init,
        pooled,
        pairwise_tv,
        tests,
        boundary_points,
        boundary_fit,
        label,
        thresholds: *config,
        per_pair_alpha,
        scope: SCOPE_NOTE.into(),
    })
}

/// Convenience: group `records` with the task's default binning and diagnose.
pub fn diagnose_records(
    records: &[ChainRecord],
    config: &DiagnosticConfig,
) -> Result<DiagnosticReport, DiagnosticError> {
    let task = records
        .first()
        .map(|r| r.task)
        .ok_or_else(|| DiagnosticError::InsufficientSamples("no chain records".into()))?;
    let binning = Binning::default_for(&task);
    let groups = collect_samples(records, &binning, config.thin)?;
    diagnose(&groups, &binning, config)
}
