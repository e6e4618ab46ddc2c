//! Config-driven experiment runs.
//!
//! [`run_experiment`] runs every seed (in parallel), writes one CSV record
//! file and a JSON summary next to it. Both files are written under a
//! `.partial` name and renamed only once complete; on failure nothing is left
//! under the final names.

mod config;
mod record;
mod run;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{
    parse_config, parse_config_str, AcrossGamesParams, ConfigError, ExperimentConfig, ExperimentKind, KellyParams,
    KindParams, MdpModel, MdpParams, MmmParams, MmmStrategy, QLearningParams,
};
pub use record::{format_decimal, RecordTable, RunRecord, SIGNIFICANT_DIGITS};
pub use run::{metric_columns, RunError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("seed {seed}: {source}")]
    Run {
        seed: u64,
        #[source]
        source: RunError,
    },
    #[error("reference values: {0}")]
    Reference(#[source] RunError),
    #[error("final metric {name} = {value} for seed {seed} is not finite")]
    NonFinite { name: String, seed: u64, value: f64 },
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mean and sample standard deviation of one final metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub kind: String,
    pub seeds: Vec<u64>,
    pub records: String,
    pub rows: usize,
    /// Seed-independent quantities computed from the config alone.
    pub reference: BTreeMap<String, f64>,
    pub labels: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl Summary {
    /// Human-readable `name: mean ± std` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} over {} seed(s), {} rows -> {}\n", self.kind, self.seeds.len(), self.rows, self.records);
        for (name, value) in &self.reference {
            out.push_str(&format!("  {name} = {}\n", format_decimal(*value).unwrap_or_else(|| value.to_string())));
        }
        for (name, label) in &self.labels {
            out.push_str(&format!("  {name} = {label}\n"));
        }
        for (name, m) in &self.metrics {
            let fmt = |x: f64| format_decimal(x).unwrap_or_else(|| x.to_string());
            out.push_str(&format!("  {name}: {} ± {}\n", fmt(m.mean), fmt(m.std)));
        }
        out
    }
}

/// Path of the summary written next to `records`.
pub fn summary_path(records: &Path) -> PathBuf {
    let mut name = records.as_os_str().to_owned();
    name.push(".summary.json");
    PathBuf::from(name)
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Runs all seeds and collects records in `(seed position, step)` order.
pub fn collect_records(config: &ExperimentConfig) -> Result<(RecordTable, Summary), ExperimentError> {
    let (reference, labels) = run::reference_values(config).map_err(ExperimentError::Reference)?;
    let outputs: Vec<run::SeedOutput> = config
        .seeds
        .par_iter()
        .map(|&seed| run::run_seed(config, seed).map_err(|source| ExperimentError::Run { seed, source }))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut finals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (run_id, (seed, output)) in config.seeds.iter().zip(outputs).enumerate() {
        for (step, metrics) in output.rows {
            rows.push(RunRecord {
                run_id,
                seed: *seed,
                step,
                metrics,
            });
        }
        for (name, value) in output.finals {
            if !value.is_finite() {
                return Err(ExperimentError::NonFinite { name, seed: *seed, value });
            }
            finals.entry(name).or_default().push(value);
        }
    }
    let table = RecordTable {
        metric_columns: metric_columns(&config.params),
        rows,
    };
    let summary = Summary {
        kind: config.kind.name().into(),
        seeds: config.seeds.clone(),
        records: config.out.display().to_string(),
        rows: table.rows.len(),
        reference,
        labels,
        metrics: finals
            .into_iter()
            .map(|(k, v)| (k, MetricSummary::from_values(v)))
            .collect(),
    };
    Ok((table, summary))
}

fn write_atomically<F>(path: &Path, write: F) -> Result<(), ExperimentError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let partial = partial_path(path);
    let io_err = |source| ExperimentError::Output {
        path: path.to_path_buf(),
        source,
    };
    let result = (|| {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut file = BufWriter::new(fs::File::create(&partial)?);
        write(&mut file)?;
        file.flush()?;
        file.get_ref().sync_all()?;
        drop(file);
        fs::rename(&partial, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&partial);
    }
    result.map_err(io_err)
}

/// Runs the experiment and writes `config.out` plus its summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary, ExperimentError> {
    let records = &config.out;
    let summary_file = summary_path(records);
    // a summary only exists next to records from a run that completed
    let _ = fs::remove_file(&summary_file);
    let (table, summary) = collect_records(config)?;
    write_atomically(records, |w| table.write_csv(w))?;
    let written = write_atomically(&summary_file, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary).map_err(std::io::Error::other)?;
        writeln!(w)
    });
    if let Err(e) = written {
        let _ = fs::remove_file(records);
        return Err(e);
    }
    Ok(summary)
}

/// One entry of the experiment registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryEntry {
    pub kind: ExperimentKind,
    pub module: &'static str,
    pub description: &'static str,
    pub required_keys: &'static [&'static str],
}

/// The five experiment kinds in listing order.
pub fn registry() -> [RegistryEntry; 5] {
    [
        RegistryEntry {
            kind: ExperimentKind::MdpSolve,
            module: "marketlab::mdp",
            description: "value and policy iteration on a random or explicit tabular MDP",
            required_keys: &["seeds", "mdp.discount", "mdp.states + mdp.actions | mdp.rewards + mdp.transitions"],
        },
        RegistryEntry {
            kind: ExperimentKind::QLearning,
            module: "marketlab::qlearning",
            description: "Watkins Q-learning on an MDP, tracking the sup error against Q*",
            required_keys: &[
                "seeds",
                "mdp.discount",
                "mdp.states + mdp.actions | mdp.rewards + mdp.transitions",
                "qlearning.episodes",
                "qlearning.horizon",
            ],
        },
        RegistryEntry {
            kind: ExperimentKind::Kelly,
            module: "marketlab::kelly",
            description: "bankroll growth under fixed, Kelly or online-estimated stakes",
            required_keys: &["seeds", "kelly.win_probability", "kelly.payout_ratio", "kelly.bets", "kelly.fraction"],
        },
        RegistryEntry {
            kind: ExperimentKind::Mmm,
            module: "marketlab::mmm",
            description: "withdrawal-price buy/sell cycles with fixed, optimal or adaptive threshold",
            required_keys: &["seeds", "mmm.density", "mmm.strategy", "mmm.rounds | mmm.max_cycles"],
        },
        RegistryEntry {
            kind: ExperimentKind::AcrossGames,
            module: "marketlab::across_games",
            description: "reinforcement over partitions of a game set with reasoning costs",
            required_keys: &["seeds", "across_games.rounds", "across_games.games[].payoffs"],
        },
    ]
}

/// Text printed by `list`.
pub fn list_experiments() -> String {
    let mut out = String::new();
    for e in registry() {
        out.push_str(&format!("{:<13} {:<24} {}\n", e.kind.name(), e.module, e.description));
        out.push_str(&format!("{:<13} required: {}\n", "", e.required_keys.join(", ")));
    }
    out
}
