//! Subcommand implementations.

use std::path::{Path, PathBuf};

use priorprobe_core::diagnostics::{collect_samples, diagnose_records, Binning, DiagnosticReport};
use priorprobe_core::llm::{Mode, RemoteBackend};
use priorprobe_core::markov::{
    absorption_analysis, build_transition_matrix, martingale_defect, stationary_by_power_iteration,
    transient_class_is_leaky, AbsorptionResult, MarkovError,
};
use priorprobe_core::{run_sweep, ChainRecord, DecisionBackend, Histogram, Task};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{read_records, RunDir};

/// Settings shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub seed_override: Option<u64>,
}

/// What a subcommand produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub message: String,
}

fn load(config_path: &Path, opts: &RunOptions) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = opts.seed_override {
        match &mut config.sweep {
            Some(s) => s.seed = seed,
            None => return Err(CliError::config("--seed-override needs a `sweep` section in the config")),
        }
    }
    if let Some(p) = opts.parallelism {
        if p == 0 {
            return Err(CliError::config("--parallelism must be at least 1"));
        }
    }
    Ok(config)
}

fn open_run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunDir, CliError> {
    let root = opts.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let run = RunDir::create(&root, &config.hash())?;
    run.write("config.json", config.canonical_json())?;
    Ok(run)
}

#[derive(Debug, Serialize)]
struct InitSummary {
    init: u64,
    chains: usize,
    stationary_samples: usize,
    absorbed_chains: usize,
    truncated_chains: usize,
    mean: f64,
    loose_parse_steps: usize,
    repaired_steps: usize,
}

#[derive(Debug, Serialize)]
struct PooledSummary {
    samples: usize,
    mean: f64,
    variance: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    command: String,
    config_hash: String,
    task: Task,
    backend: String,
    /// `theta` for the proportion task, `lifespan` for the life task.
    quantity: &'static str,
    chains: usize,
    per_init: Vec<InitSummary>,
    pooled: PooledSummary,
}

fn quantity(task: &Task) -> &'static str {
    match task {
        Task::Proportion(_) => "theta",
        Task::Life(_) => "lifespan",
    }
}

fn sample_values(rec: &ChainRecord) -> impl Iterator<Item = f64> + '_ {
    let proportion = matches!(rec.task, Task::Proportion(_));
    rec.stationary().iter().map(move |s| {
        if proportion {
            s.theta.map(|t| t.as_f64()).unwrap_or(f64::NAN)
        } else {
            s.estimate as f64
        }
    })
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

fn summarize(command: &str, config: &ExperimentConfig, backend: &str, records: &[ChainRecord]) -> Summary {
    let sweep = config.sweep.as_ref().expect("sweep validated");
    let per_init = sweep
        .initial_values
        .iter()
        .map(|&init| {
            let group: Vec<&ChainRecord> = records.iter().filter(|r| r.initial_observation == init).collect();
            let values: Vec<f64> = group.iter().flat_map(|r| sample_values(r)).collect();
            InitSummary {
                init,
                chains: group.len(),
                stationary_samples: values.len(),
                absorbed_chains: group.iter().filter(|r| r.absorbed_at.is_some()).count(),
                truncated_chains: group.iter().filter(|r| r.truncated).count(),
                mean: mean_var(&values).0,
                loose_parse_steps: group.iter().map(|r| r.flags.loose_parse_steps.len()).sum(),
                repaired_steps: group.iter().map(|r| r.flags.repaired_steps.len()).sum(),
            }
        })
        .collect();
    let all: Vec<f64> = records.iter().flat_map(sample_values).collect();
    let (mean, variance) = mean_var(&all);
    Summary {
        command: command.into(),
        config_hash: config.hash(),
        task: config.task,
        backend: backend.into(),
        quantity: quantity(&config.task),
        chains: records.len(),
        per_init,
        pooled: PooledSummary { samples: all.len(), mean, variance },
    }
}

/// `init,label,mass` rows for each initial value followed by `pooled` rows.
fn histograms_csv(records: &[ChainRecord], task: &Task) -> Result<String, CliError> {
    let binning = Binning::default_for(task);
    let groups = collect_samples(records, &binning, 1).map_err(|e| CliError::other(e.to_string()))?;
    let support = binning.support();
    let mut pooled = vec![0u64; support.len()];
    let mut out = String::from("init,label,mass\n");
    let mut push = |init: &str, counts: &[u64]| -> Result<(), CliError> {
        if counts.iter().sum::<u64>() == 0 {
            return Ok(());
        }
        let h = Histogram::from_counts(support.clone(), counts).map_err(|e| CliError::other(e.to_string()))?;
        for (l, m) in h.support.iter().zip(&h.mass) {
            out.push_str(&format!("{init},{l},{m}\n"));
        }
        Ok(())
    };
    for g in &groups {
        push(&g.init.to_string(), &g.counts)?;
        for (p, c) in pooled.iter_mut().zip(&g.counts) {
            *p += c;
        }
    }
    push("pooled", &pooled)?;
    Ok(out)
}

fn run_and_write(
    command: &str,
    config: &ExperimentConfig,
    backend: &dyn DecisionBackend,
    opts: &RunOptions,
) -> Result<(RunDir, Vec<ChainRecord>), CliError> {
    let spec = config.sweep_spec(command)?;
    let records = run_sweep(&spec, backend, opts.parallelism)?;
    let run = open_run(config, opts)?;
    run.write_records(&records, spec.chains_per_init)?;
    run.write("histograms.csv", histograms_csv(&records, &config.task)?)?;
    run.write_json("summary.json", &summarize(command, config, backend.id(), &records))?;
    Ok((run, records))
}

pub fn simulate(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    let config = load(config_path, opts)?;
    let (run, records) = simulate_config(&config, opts)?;
    Ok(Outcome {
        message: format!("{} chains written to {}", records.len(), run.path().display()),
        run_dir: run.path().to_path_buf(),
    })
}

fn simulate_config(config: &ExperimentConfig, opts: &RunOptions) -> Result<(RunDir, Vec<ChainRecord>), CliError> {
    let spec = config
        .agent
        .as_ref()
        .ok_or_else(|| CliError::config("config field `agent`: required by simulate"))?;
    let agent = spec
        .build(&config.task)
        .map_err(|e| CliError::config(format!("config field `agent`: {e}")))?;
    run_and_write("simulate", config, &agent, opts)
}

fn remote(command: &str, config: &ExperimentConfig, mode: Mode, opts: &RunOptions) -> Result<Outcome, CliError> {
    let mut backend_config = config
        .backend
        .clone()
        .ok_or_else(|| CliError::config(format!("config field `backend`: required by {command}")))?;
    backend_config.mode = mode;
    let backend = RemoteBackend::from_config(backend_config)?;
    let (run, records) = run_and_write(command, config, &backend, opts)?;
    Ok(Outcome {
        message: format!("{} chains written to {}", records.len(), run.path().display()),
        run_dir: run.path().to_path_buf(),
    })
}

pub fn elicit(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    remote("elicit", &load(config_path, opts)?, Mode::Live, opts)
}

pub fn replay(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    remote("replay", &load(config_path, opts)?, Mode::Replay, opts)
}

fn write_report(run: &RunDir, report: &DiagnosticReport) -> Result<(), CliError> {
    run.write_json("report.json", report)?;
    run.write("plot_data.csv", report.plot_data_csv())?;
    run.write("report_histograms.csv", report.histograms_csv())
}

fn diagnose_into(run: &RunDir, config: &ExperimentConfig, records: &[ChainRecord]) -> Result<Outcome, CliError> {
    let report = diagnose_records(records, &config.diagnostics()).map_err(|e| CliError::other(e.to_string()))?;
    write_report(run, &report)?;
    Ok(Outcome {
        message: format!(
            "label: {} (max pairwise TV {:.4}); report written to {}",
            report.label,
            report.max_tv(),
            run.path().display()
        ),
        run_dir: run.path().to_path_buf(),
    })
}

/// Diagnoses an existing run directory.
pub fn diagnose_run(run_dir: &Path) -> Result<Outcome, CliError> {
    let run = RunDir::existing(run_dir)?;
    let config_path = run_dir.join("config.json");
    let text = std::fs::read_to_string(&config_path).map_err(|e| CliError::io(&config_path, e))?;
    let config = ExperimentConfig::parse(&text)?;
    let records = read_records(run_dir)?;
    diagnose_into(&run, &config, &records)
}

/// Simulates the configured agent and diagnoses the result in one run.
pub fn diagnose_config(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    let config = load(config_path, opts)?;
    let (run, records) = simulate_config(&config, opts)?;
    diagnose_into(&run, &config, &records)
}

#[derive(Debug, Serialize)]
struct StationaryEntry {
    init: u64,
    distribution: Vec<f64>,
    iterations: usize,
}

#[derive(Debug, Serialize)]
struct Analysis {
    task: Task,
    agent: String,
    states: usize,
    absorbing_states: Vec<usize>,
    non_absorbing_states: Vec<usize>,
    max_row_error: f64,
    martingale_defect: f64,
    transient_class_is_leaky: bool,
    absorption: Option<AbsorptionResult>,
    absorption_note: Option<String>,
    stationary: Vec<StationaryEntry>,
}

const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 1_000_000;

pub fn analyze(config_path: &Path, opts: &RunOptions) -> Result<Outcome, CliError> {
    let config = load(config_path, opts)?;
    let Task::Proportion(task) = config.task else {
        return Err(CliError::config("config field `task`: exact analysis supports the proportion task only"));
    };
    let spec = config
        .agent
        .as_ref()
        .ok_or_else(|| CliError::config("config field `agent`: required by analyze"))?;
    let agent = spec
        .build(&config.task)
        .map_err(|e| CliError::config(format!("config field `agent`: {e}")))?;
    let p = build_transition_matrix(&agent, &task).map_err(|e| match e {
        MarkovError::NotDeterministic(id) => CliError::config(format!(
            "config field `agent`: analysis unsupported for stochastic agent \"{id}\"; use simulate or diagnose"
        )),
        other => CliError::other(other.to_string()),
    })?;

    let absorbing = p.absorbing_states();
    let (absorption, absorption_note) = match absorption_analysis(&p) {
        Ok(a) => (Some(a), None),
        Err(e @ (MarkovError::NoAbsorbingState | MarkovError::ClosedTransientClass(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(CliError::other(e.to_string())),
    };
    let inits: Vec<u64> = match &config.sweep {
        Some(s) => s.initial_values.clone(),
        None => (0..p.dim() as u64).collect(),
    };
    let stationary = inits
        .iter()
        .map(|&init| {
            let mut v = vec![0.0; p.dim()];
            v[init as usize] = 1.0;
            let r = stationary_by_power_iteration(&p, &v, POWER_TOL, POWER_MAX_ITERS)
                .map_err(|e| CliError::other(format!("power iteration from {init}: {e}")))?;
            Ok(StationaryEntry { init, distribution: r.distribution, iterations: r.iterations })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let analysis = Analysis {
        task: config.task,
        agent: agent.id().into(),
        states: p.dim(),
        non_absorbing_states: (0..p.dim()).filter(|k| !absorbing.contains(k)).collect(),
        absorbing_states: absorbing,
        max_row_error: p.max_row_error(),
        martingale_defect: martingale_defect(&p),
        transient_class_is_leaky: transient_class_is_leaky(&p),
        absorption,
        absorption_note,
        stationary,
    };
    let run = open_run(&config, opts)?;
    run.write_json("analysis.json", &analysis)?;
    run.write("transition.csv", p.to_csv())?;
    if let Some(a) = &analysis.absorption {
        run.write("absorption.csv", a.to_csv())?;
    }
    let mut stationary_csv = String::from("init,state,probability\n");
    for s in &analysis.stationary {
        for (k, q) in s.distribution.iter().enumerate() {
            stationary_csv.push_str(&format!("{},{k},{q}\n", s.init));
        }
    }
    run.write("stationary.csv", stationary_csv)?;
    Ok(Outcome {
        message: format!(
            "absorbing states {:?}; martingale defect {:.3e}; written to {}",
            analysis.absorbing_states,
            analysis.martingale_defect,
            run.path().display()
        ),
        run_dir: run.path().to_path_buf(),
    })
}
