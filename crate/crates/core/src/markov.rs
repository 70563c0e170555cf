//! Exact analysis of proportion chains driven by a deterministic policy.
//!
//! With a deterministic policy `ω ↦ Ω`, the heads count alone is a Markov
//! chain on `{0..N}` with rows `Binomial(N, Ω(k)/M)`. For the MLE policy
//! this is the neutral Wright–Fisher chain: `0` and `N` absorb, the mean is
//! conserved and the probability of fixing at `N` equals `k / N`.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::agents::{Agent, AgentError};
use crate::types::ProportionTask;

const ABSORBING_TOL: f64 = 1e-14;

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("agent {0} is stochastic; exact analysis needs a deterministic policy")]
    NotDeterministic(&'static str),
    #[error("policy returned {estimate} for ω={omega}, outside [0, {max}]")]
    PolicyOutOfRange { omega: u64, estimate: u64, max: u64 },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("the chain has no absorbing state")]
    NoAbsorbingState,
    #[error("transient states {0:?} cannot reach any absorbing state")]
    ClosedTransientClass(Vec<usize>),
    #[error("the transient system is singular")]
    Singular,
    #[error("initial vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("initial vector is not a probability vector")]
    NotAProbabilityVector,
    #[error("no convergence after {iterations} iterations (last L1 change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },
}

/// Probability of `k` successes in `n` trials, evaluated in log space.
pub fn binomial_pmf(k: u64, n: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let ln = ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p();
    ln.exp()
}

/// Row-stochastic matrix over the heads counts `{0..n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub n: u64,
    pub rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Largest `|Σ_j P[k][j] − 1|` over the rows.
    pub fn max_row_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_absorbing(&self, k: usize) -> bool {
        let row = &self.rows[k];
        (row[k] - 1.0).abs() <= ABSORBING_TOL
            && row.iter().enumerate().all(|(j, &p)| j == k || p <= ABSORBING_TOL)
    }

    pub fn absorbing_states(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| self.is_absorbing(k)).collect()
    }

    /// `v ↦ vP`.
    pub fn step_distribution(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (vi, row) in v.iter().zip(&self.rows) {
            if *vi == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(row) {
                *o += vi * p;
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("from");
        for j in 0..self.dim() {
            s.push_str(&format!(",to_{j}"));
        }
        s.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            s.push_str(&k.to_string());
            for p in row {
                s.push_str(&format!(",{p}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Transition matrix of the heads count when each round answers `policy(ω)`.
pub fn build_transition_matrix_with<F>(task: &ProportionTask, mut policy: F) -> Result<TransitionMatrix, MarkovError>
where
    F: FnMut(u64) -> Result<u64, AgentError>,
{
    let n = task.n_obs;
    let rows = (0..=n)
        .map(|omega| {
            let estimate = policy(omega)?;
            if estimate > task.m_pred {
                return Err(MarkovError::PolicyOutOfRange { omega, estimate, max: task.m_pred });
            }
            let p = estimate as f64 / task.m_pred as f64;
            Ok((0..=n).map(|j| binomial_pmf(j, n, p)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, MarkovError>>()?;
    Ok(TransitionMatrix { n, rows })
}

/// Transition matrix for a deterministic agent; stochastic agents are rejected.
pub fn build_transition_matrix(agent: &Agent, task: &ProportionTask) -> Result<TransitionMatrix, MarkovError> {
    if agent.proportion_policy(0, task).is_none() {
        return Err(MarkovError::NotDeterministic(agent.id()));
    }
    build_transition_matrix_with(task, |omega| {
        agent.proportion_policy(omega, task).expect("checked deterministic")
    })
}

/// Absorption probabilities and mean absorption times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionResult {
    pub absorbing_states: Vec<usize>,
    pub transient_states: Vec<usize>,
    /// start state → absorbing state → probability.
    pub probs: BTreeMap<usize, BTreeMap<usize, f64>>,
    /// start state → expected number of steps until absorption.
    pub expected_steps: BTreeMap<usize, f64>,
}

impl AbsorptionResult {
    pub fn prob(&self, start: usize, absorbing: usize) -> f64 {
        self.probs
            .get(&start)
            .and_then(|m| m.get(&absorbing))
            .copied()
            .unwrap_or(0.0)
    }

    /// One row per start state: `start,P(absorb at a1),...,expected_steps`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("start");
        for a in &self.absorbing_states {
            s.push_str(&format!(",p_absorb_{a}"));
        }
        s.push_str(",expected_steps\n");
        for (start, probs) in &self.probs {
            s.push_str(&start.to_string());
            for a in &self.absorbing_states {
                s.push_str(&format!(",{}", probs[a]));
            }
            s.push_str(&format!(",{}\n", self.expected_steps[start]));
        }
        s
    }
}

/// Transient states with no path to any absorbing state.
fn closed_transient(p: &TransitionMatrix, absorbing: &[usize]) -> Vec<usize> {
    let dim = p.dim();
    let mut reaches = vec![false; dim];
    let mut queue: VecDeque<usize> = absorbing.iter().copied().collect();
    for &a in absorbing {
        reaches[a] = true;
    }
    while let Some(j) = queue.pop_front() {
        for (k, seen) in reaches.iter_mut().enumerate() {
            if !*seen && p.rows[k][j] > 0.0 {
                *seen = true;
                queue.push_back(k);
            }
        }
    }
    (0..dim).filter(|&k| !reaches[k]).collect()
}

/// Solves `(I − Q) B = R` and `(I − Q) t = 1` on the transient block.
pub fn absorption_analysis(p: &TransitionMatrix) -> Result<AbsorptionResult, MarkovError> {
    let absorbing = p.absorbing_states();
    if absorbing.is_empty() {
        return Err(MarkovError::NoAbsorbingState);
    }
    let stuck = closed_transient(p, &absorbing);
    if !stuck.is_empty() {
        return Err(MarkovError::ClosedTransientClass(stuck));
    }
    let transient: Vec<usize> = (0..p.dim()).filter(|k| !absorbing.contains(k)).collect();

    let mut probs = BTreeMap::new();
    let mut expected_steps = BTreeMap::new();
    for &a in &absorbing {
        probs.insert(a, absorbing.iter().map(|&b| (b, if a == b { 1.0 } else { 0.0 })).collect());
        expected_steps.insert(a, 0.0);
    }

    if !transient.is_empty() {
        let t = transient.len();
        let lhs = DMatrix::from_fn(t, t, |i, j| {
            let q = p.rows[transient[i]][transient[j]];
            if i == j { 1.0 - q } else { -q }
        });
        let mut rhs = DMatrix::from_fn(t, absorbing.len() + 1, |i, j| {
            if j < absorbing.len() { p.rows[transient[i]][absorbing[j]] } else { 1.0 }
        });
        let lu = lhs.lu();
        if !lu.solve_mut(&mut rhs) {
            return Err(MarkovError::Singular);
        }
        if rhs.iter().any(|x| !x.is_finite()) {
            return Err(MarkovError::Singular);
        }
        for (i, &k) in transient.iter().enumerate() {
            probs.insert(k, absorbing.iter().enumerate().map(|(j, &a)| (a, rhs[(i, j)])).collect());
            expected_steps.insert(k, rhs[(i, absorbing.len())]);
        }
    }

    Ok(AbsorptionResult { absorbing_states: absorbing, transient_states: transient, probs, expected_steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryResult {
    pub distribution: Vec<f64>,
    pub iterations: usize,
    /// L1 change of the final iteration.
    pub last_change: f64,
}

/// Iterates `v ← vP` until the L1 change drops below `tol`.
pub fn stationary_by_power_iteration(
    p: &TransitionMatrix,
    init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<StationaryResult, MarkovError> {
    if init.len() != p.dim() {
        return Err(MarkovError::DimensionMismatch { got: init.len(), expected: p.dim() });
    }
    let total: f64 = init.iter().sum();
    if init.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(MarkovError::NotAProbabilityVector);
    }
    let mut v = init.to_vec();
    let mut last_change = f64::INFINITY;
    for iteration in 1..=max_iters {
        let next = p.step_distribution(&v);
        last_change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if last_change < tol {
            return Ok(StationaryResult { distribution: v, iterations: iteration, last_change });
        }
    }
    Err(MarkovError::NotConverged { iterations: max_iters, last_change })
}

/// `max_k |E[ω' | ω = k] − k|`: zero exactly when the heads count is a martingale.
pub fn martingale_defect(p: &TransitionMatrix) -> f64 {
    p.rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let mean: f64 = row.iter().enumerate().map(|(j, &pj)| j as f64 * pj).sum();
            (mean - k as f64).abs()
        })
        .fold(0.0, f64::max)
}

/// Transient class of a deterministic-policy matrix drains into the
/// absorbing states, which is what makes `E[ω₀] = N · p̂(N)` hold in the limit.
pub fn transient_class_is_leaky(p: &TransitionMatrix) -> bool {
    let absorbing = p.absorbing_states();
    !absorbing.is_empty() && closed_transient(p, &absorbing).is_empty()
}

/// `(analytic absorption probability at N, expected ω₀ / N)` for each start,
/// checking the mean-conservation identity state by state.
pub fn fixation_vs_initial_frequency(p: &TransitionMatrix) -> Result<Vec<(usize, f64, f64)>, MarkovError> {
    let result = absorption_analysis(p)?;
    let n = p.dim() - 1;
    Ok((0..=n)
        .map(|k| (k, result.prob(k, n), k as f64 / n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mle(n: u64, m: u64) -> TransitionMatrix {
        build_transition_matrix(&Agent::Mle, &ProportionTask::new(n, m).unwrap()).unwrap()
    }

    fn avoid_zero() -> TransitionMatrix {
        let agent = Agent::BoundaryAvoid { avoid_zero: true, avoid_full: false };
        build_transition_matrix(&agent, &ProportionTask::default()).unwrap()
    }

    #[test]
    fn binomial_pmf_by_hand() {
        assert!((binomial_pmf(1, 2, 0.5) - 0.5).abs() < 1e-15);
        assert!((binomial_pmf(5, 10, 0.5) - 252.0 / 1024.0).abs() < 1e-14);
        assert!((binomial_pmf(0, 10, 0.01) - 0.99f64.powi(10)).abs() < 1e-14);
        assert_eq!(binomial_pmf(0, 5, 0.0), 1.0);
        assert_eq!(binomial_pmf(5, 5, 1.0), 1.0);
        assert_eq!(binomial_pmf(6, 5, 0.3), 0.0);
    }

    #[test]
    fn transition_rows() {
        let p = mle(2, 2);
        for (a, b) in p.rows[1].iter().zip([0.25, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        for n in [1, 2, 5, 10, 30] {
            let p = mle(n, 10 * n);
            let last = n as usize;
            assert_eq!(p.rows[0][0], 1.0);
            assert_eq!(p.rows[last][last], 1.0);
            assert_eq!(p.absorbing_states(), vec![0, last]);
            assert!(p.max_row_error() < 1e-12);
        }
        let p = avoid_zero();
        assert!((p.rows[0][0] - 0.99f64.powi(10)).abs() < 1e-14);
        assert!((p.rows[0][0] - 0.9044).abs() < 1e-4);
        assert_eq!(p.absorbing_states(), vec![10]);
    }

    #[test]
    fn stochastic_agents_rejected() {
        let agent = Agent::BetaPosterior(crate::agents::BetaPrior::uniform());
        assert_eq!(
            build_transition_matrix(&agent, &ProportionTask::default()),
            Err(MarkovError::NotDeterministic("beta-posterior"))
        );
        let err = build_transition_matrix_with(&ProportionTask::default(), |_| Ok(101));
        assert!(matches!(err, Err(MarkovError::PolicyOutOfRange { .. })));
    }

    #[test]
    fn fixation_probability_equals_initial_frequency() {
        let r = absorption_analysis(&mle(10, 100)).unwrap();
        assert!((r.prob(3, 10) - 0.3).abs() < 1e-10);
        assert!((r.prob(3, 0) - 0.7).abs() < 1e-10);
        for k in 0..=10 {
            assert!((r.prob(k, 10) - k as f64 / 10.0).abs() < 1e-10);
            let total: f64 = r.probs[&k].values().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
        assert_eq!(r.prob(0, 0), 1.0);
        assert_eq!(r.expected_steps[&0], 0.0);

        let r = absorption_analysis(&mle(2, 2)).unwrap();
        assert!((r.prob(1, 2) - 0.5).abs() < 1e-10);
        assert!((r.prob(1, 0) - 0.5).abs() < 1e-10);
        // from 1 the chain leaves with probability 1/2 per step
        assert!((r.expected_steps[&1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn single_toss_chain_is_all_absorbing() {
        let r = absorption_analysis(&mle(1, 10)).unwrap();
        assert_eq!(r.absorbing_states, vec![0, 1]);
        assert!(r.transient_states.is_empty());
        assert_eq!(r.prob(0, 0), 1.0);
        assert_eq!(r.prob(1, 1), 1.0);
    }

    #[test]
    fn absorption_errors() {
        let periodic = TransitionMatrix { n: 1, rows: vec![vec![0.0, 1.0], vec![1.0, 0.0]] };
        assert_eq!(absorption_analysis(&periodic), Err(MarkovError::NoAbsorbingState));
        let closed = TransitionMatrix {
            n: 2,
            rows: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
        };
        assert_eq!(absorption_analysis(&closed), Err(MarkovError::ClosedTransientClass(vec![1, 2])));
        assert!(!transient_class_is_leaky(&closed));
        assert!(transient_class_is_leaky(&mle(10, 100)));
    }

    #[test]
    fn avoid_zero_absorbs_at_full() {
        let r = absorption_analysis(&avoid_zero()).unwrap();
        assert_eq!(r.absorbing_states, vec![10]);
        for k in 0..=10 {
            assert!((r.prob(k, 10) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn power_iteration() {
        let p = mle(2, 2);
        let s = stationary_by_power_iteration(&p, &[0.0, 1.0, 0.0], 1e-12, 10_000).unwrap();
        for (a, b) in s.distribution.iter().zip([0.5, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-11);
        }
        let s = stationary_by_power_iteration(&p, &[1.0, 0.0, 0.0], 1e-12, 10_000).unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.distribution, vec![1.0, 0.0, 0.0]);

        let p = avoid_zero();
        let mut init = vec![0.0; 11];
        init[0] = 1.0;
        let s = stationary_by_power_iteration(&p, &init, 1e-12, 100_000).unwrap();
        assert!(s.distribution[10] > 0.99);
        let residual: f64 = p
            .step_distribution(&s.distribution)
            .iter()
            .zip(&s.distribution)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(residual < 1e-12);

        let periodic = TransitionMatrix { n: 1, rows: vec![vec![0.0, 1.0], vec![1.0, 0.0]] };
        assert!(matches!(
            stationary_by_power_iteration(&periodic, &[1.0, 0.0], 1e-9, 50),
            Err(MarkovError::NotConverged { iterations: 50, .. })
        ));
        assert!(stationary_by_power_iteration(&periodic, &[0.5, 0.6], 1e-9, 50).is_err());
        assert!(stationary_by_power_iteration(&periodic, &[1.0], 1e-9, 50).is_err());
    }

    #[test]
    fn martingale_defects() {
        assert!(martingale_defect(&mle(10, 100)) < 1e-12);
        assert!(martingale_defect(&mle(7, 70)) < 1e-12);
        assert!((martingale_defect(&avoid_zero()) - 0.1).abs() < 1e-12);

        // Brute force: row mean of Binomial(N, p) is N p, so the defect is
        // max_k |N round(M k / N) / M - k|.
        let (n, m) = (3u64, 10u64);
        let brute = (0..=n)
            .map(|k| {
                let est = ((m * k) as f64 / n as f64).round();
                (n as f64 * est / m as f64 - k as f64).abs()
            })
            .fold(0.0, f64::max);
        let d = martingale_defect(&mle(n, m));
        assert!((d - brute).abs() < 1e-12);
        assert!((d - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fixation_table() {
        for (k, analytic, freq) in fixation_vs_initial_frequency(&mle(10, 100)).unwrap() {
            assert!((analytic - freq).abs() < 1e-10, "k={k}");
        }
    }
}
