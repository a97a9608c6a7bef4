//! Config-driven experiment runner.
//!
//! A single JSON document describes the data source, the shared federation
//! settings, a list of runs (mode labels), and the seeds. Every (run, seed)
//! pair executes an independent federation and writes its own directory:
//!
//! ```text
//! <out>/
//!   config.json            effective experiment config
//!   combined.csv           (mode, seed, round, client) -> mse, f1
//!   <mode>/<seed>/
//!     config.json          resolved single-run config
//!     rounds.jsonl         one RoundLog object per line
//!     cohorts.json         cohort assignment plus cohorting config echo
//!     summary.json         final per-client metrics
//! ```
//!
//! Mode labels: `fl` (no cohorting), `ifl` (moment baseline), `licfl`,
//! `alicfl` (adaptive aggregation), and `licfl+<strategy>` for fixed
//! strategy sweeps. A `primary_keys` list upgrades `fl` to metadata
//! cohorting and `licfl`-family modes to two-level cohorting.

use crate::aggregation::StrategyKind;
use crate::cohorting::{CohortAssignment, CohortConfig};
use crate::data::{build_client_datasets, load_csv, synth_generate, SynthSpec, WINDOW_SIZE};
use crate::error::{Error, Result};
use crate::orchestrator::{
    run_federation, AggregationMode, Client, CohortingMode, FederationConfig, RoundLog, RunHooks,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "LICFL_OUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        telemetry: PathBuf,
        failures: PathBuf,
        meta: PathBuf,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    Synthetic(SynthSpec),
}

fn default_train_fraction() -> f64 {
    0.8
}

/// One experiment row: a mode label plus its cohorting knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub mode: String,
    #[serde(default)]
    pub cohort: Option<CohortConfig>,
    #[serde(default)]
    pub primary_keys: Option<Vec<String>>,
    #[serde(default)]
    pub moments_k: Option<usize>,
}

impl RunSpec {
    pub fn plain(mode: &str) -> RunSpec {
        RunSpec {
            mode: mode.to_string(),
            cohort: None,
            primary_keys: None,
            moments_k: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub federation: FederationConfig,
    pub runs: Vec<RunSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint cadence in rounds; absent disables checkpoints.
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| e.with_context(&path.display().to_string()))
    }

    /// Full validation: every named field error points at its config path.
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::config("runs: need at least one run"));
        }
        let mut labels: Vec<&str> = self.runs.iter().map(|r| r.mode.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(
                "runs: duplicate mode labels would write into the same directory",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds: need at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds: duplicate seeds"));
        }
        match &self.data {
            DataSource::Csv {
                telemetry,
                failures,
                meta,
                train_fraction,
            } => {
                for (field, path) in [
                    ("data.telemetry", telemetry),
                    ("data.failures", failures),
                    ("data.meta", meta),
                ] {
                    if !path.exists() {
                        return Err(Error::config(format!(
                            "{field}: file {} does not exist",
                            path.display()
                        )));
                    }
                }
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(Error::config("data.train_fraction: must lie in (0, 1)"));
                }
            }
            DataSource::Synthetic(spec) => {
                if spec.num_clients != self.federation.num_clients {
                    return Err(Error::config(format!(
                        "data.synthetic.num_clients ({}) must equal federation.num_clients ({})",
                        spec.num_clients, self.federation.num_clients
                    )));
                }
            }
        }
        self.federation.validate()?;
        for (i, run) in self.runs.iter().enumerate() {
            resolve_run(&self.federation, run, 0)
                .map_err(|e| e.with_context(&format!("runs[{i}]")))?;
        }
        Ok(())
    }
}

/// Expands a mode label into concrete cohorting and aggregation settings.
pub fn resolve_run(
    base: &FederationConfig,
    run: &RunSpec,
    seed: u64,
) -> Result<FederationConfig> {
    let cohort_cfg = run.cohort.clone().unwrap_or_default();
    let (mut cohorting, aggregation) = match run.mode.as_str() {
        "fl" => (
            CohortingMode::None,
            AggregationMode::Fixed(StrategyKind::FedAvg),
        ),
        "ifl" => (
            CohortingMode::Moments {
                k: run.moments_k.unwrap_or(2),
            },
            AggregationMode::Fixed(StrategyKind::FedAvg),
        ),
        "licfl" => (
            CohortingMode::Licfl(cohort_cfg),
            AggregationMode::Fixed(StrategyKind::FedAvg),
        ),
        "alicfl" => (CohortingMode::Licfl(cohort_cfg), AggregationMode::Adaptive),
        label => match label.strip_prefix("licfl+") {
            Some(strategy) => (
                CohortingMode::Licfl(cohort_cfg),
                AggregationMode::Fixed(StrategyKind::parse(strategy)?),
            ),
            None => {
                return Err(Error::config(format!(
                    "mode: unknown label {label:?} (expected fl, ifl, licfl, alicfl, licfl+<strategy>)"
                )))
            }
        },
    };
    if let Some(keys) = &run.primary_keys {
        cohorting = match cohorting {
            CohortingMode::None => CohortingMode::Primary { keys: keys.clone() },
            CohortingMode::Licfl(c) => CohortingMode::PrimaryLicfl {
                keys: keys.clone(),
                cohort: c,
            },
            _ => {
                return Err(Error::config(format!(
                    "primary_keys: not supported for mode {:?}",
                    run.mode
                )))
            }
        };
    }
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.cohorting = cohorting;
    cfg.aggregation = aggregation;
    Ok(cfg)
}

/// CLI-level options layered over the config file.
#[derive(Debug, Default)]
pub struct RunOptions {
    pub dry_run: bool,
    pub seed_override: Option<u64>,
    pub out_override: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub mode: String,
    pub seed: u64,
    pub final_mse: f64,
    pub run_dir: PathBuf,
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub results: Vec<RunResult>,
}

/// Resolved single-run config, echoed into each run directory. Contains
/// everything needed to reproduce the run.
#[derive(Debug, Serialize, Deserialize)]
struct RunConfigEcho {
    mode: String,
    seed: u64,
    data: DataSource,
    federation: FederationConfig,
}

/// Cohort assignment export with its config echo.
#[derive(Debug, Serialize, Deserialize)]
pub struct CohortExport {
    pub cohorting: CohortingMode,
    pub assignment: CohortAssignment,
}

#[derive(Debug, Serialize)]
struct SummaryFile<'a> {
    mode: &'a str,
    seed: u64,
    rounds: usize,
    final_global_mse: f64,
    strategy_histogram: BTreeMap<StrategyKind, usize>,
    clients: &'a [crate::orchestrator::ClientEval],
}

fn resolve_out_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out_override
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("licfl-runs"))
}

fn build_clients(data: &DataSource, federation: &FederationConfig, seed: u64) -> Result<Vec<Client>> {
    let datasets = match data {
        DataSource::Csv {
            telemetry,
            failures,
            meta,
            train_fraction,
        } => {
            let raw = load_csv(telemetry, failures, meta)?;
            build_client_datasets(&raw, WINDOW_SIZE, *train_fraction)?
        }
        DataSource::Synthetic(spec) => synth_generate(spec, seed)?.0,
    };
    if datasets.len() != federation.num_clients {
        return Err(Error::config(format!(
            "num_clients: config says {} but the data source produced {}",
            federation.num_clients,
            datasets.len()
        )));
    }
    Ok(datasets
        .into_iter()
        .map(|data| Client {
            id: data.machine_id,
            data,
        })
        .collect())
}

/// Runs every (run, seed) pair and writes all artifacts. Pairs execute in
/// parallel; each writes only its own directory, and the combined CSV is
/// assembled afterwards in deterministic order.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    let mut effective = cfg.clone();
    if let Some(seed) = opts.seed_override {
        effective.seeds = vec![seed];
    }
    effective.validate()?;
    let out_dir = resolve_out_dir(&effective, opts);
    if opts.dry_run {
        return Ok(ExperimentSummary {
            out_dir,
            results: Vec::new(),
        });
    }

    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&effective)?,
    )?;

    // Synthetic data depends on the seed; build each seed's fleet once and
    // share it across modes so comparisons see identical data.
    let mut fleets: BTreeMap<u64, Arc<Vec<Client>>> = BTreeMap::new();
    for &seed in &effective.seeds {
        let clients = build_clients(&effective.data, &effective.federation, seed)?;
        fleets.insert(seed, Arc::new(clients));
    }

    let pairs: Vec<(&RunSpec, u64)> = effective
        .runs
        .iter()
        .flat_map(|r| effective.seeds.iter().map(move |&s| (r, s)))
        .collect();

    let results: Vec<(RunResult, Vec<CsvRow>)> = pairs
        .par_iter()
        .map(|(run, seed)| {
            let clients = Arc::clone(&fleets[seed]);
            execute_single(&effective, run, *seed, &clients, &out_dir)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<CsvRow> = Vec::new();
    let mut run_results = Vec::new();
    for (result, mut run_rows) in results {
        rows.append(&mut run_rows);
        run_results.push(result);
    }
    rows.sort_by(|a, b| {
        (&a.mode, a.seed, a.round, a.client).cmp(&(&b.mode, b.seed, b.round, b.client))
    });
    let mut csv = String::from("mode,seed,round,client,cohort,mse,f1\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.mode, r.seed, r.round, r.client, r.cohort, r.mse, r.f1
        ));
    }
    std::fs::write(out_dir.join("combined.csv"), csv)?;

    run_results.sort_by(|a, b| (&a.mode, a.seed).cmp(&(&b.mode, b.seed)));
    Ok(ExperimentSummary {
        out_dir,
        results: run_results,
    })
}

struct CsvRow {
    mode: String,
    seed: u64,
    round: usize,
    client: crate::ClientId,
    cohort: usize,
    mse: f64,
    f1: f64,
}

fn execute_single(
    cfg: &ExperimentConfig,
    run: &RunSpec,
    seed: u64,
    clients: &[Client],
    out_dir: &Path,
) -> Result<(RunResult, Vec<CsvRow>)> {
    let federation = resolve_run(&cfg.federation, run, seed)?;
    let run_dir = out_dir.join(&run.mode).join(seed.to_string());
    std::fs::create_dir_all(&run_dir)?;

    let hooks = RunHooks {
        checkpoint: cfg
            .checkpoint_interval
            .map(|n| (run_dir.join("checkpoints"), n)),
    };
    let outcome = run_federation(&federation, clients, &hooks)
        .map_err(|e| e.with_context(&format!("run {} seed {seed}", run.mode)))?;

    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(&RunConfigEcho {
            mode: run.mode.clone(),
            seed,
            data: cfg.data.clone(),
            federation: federation.clone(),
        })?,
    )?;

    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(run_dir.join("rounds.jsonl"))?);
    for round in &outcome.rounds {
        serde_json::to_writer(&mut jsonl, round)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;

    std::fs::write(
        run_dir.join("cohorts.json"),
        serde_json::to_string_pretty(&CohortExport {
            cohorting: federation.cohorting.clone(),
            assignment: outcome.assignment.clone(),
        })?,
    )?;

    let last = outcome.rounds.last().expect("at least one round");
    let histogram = strategy_histogram(&outcome.rounds);
    std::fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&SummaryFile {
            mode: &run.mode,
            seed,
            rounds: outcome.rounds.len(),
            final_global_mse: last.global_mse,
            strategy_histogram: histogram,
            clients: &last.clients,
        })?,
    )?;

    let mut rows = Vec::new();
    for round in &outcome.rounds {
        for c in &round.clients {
            rows.push(CsvRow {
                mode: run.mode.clone(),
                seed,
                round: round.round,
                client: c.client_id,
                cohort: outcome.assignment.cohort_of(c.client_id).unwrap_or(0),
                mse: c.mse,
                f1: c.f1,
            });
        }
    }
    Ok((
        RunResult {
            mode: run.mode.clone(),
            seed,
            final_mse: last.global_mse,
            run_dir,
        },
        rows,
    ))
}

/// Counts the strategy applied per cohort per round (the bootstrap round
/// counts as plain averaging), so the histogram totals rounds x cohorts.
pub fn strategy_histogram(rounds: &[RoundLog]) -> BTreeMap<StrategyKind, usize> {
    let mut hist = BTreeMap::new();
    for round in rounds {
        for c in &round.cohorts {
            *hist.entry(c.chosen).or_insert(0) += 1;
        }
    }
    hist
}

/// Parses a JSONL round log; errors carry the 1-based line number.
pub fn parse_round_logs(bytes: &[u8]) -> Result<Vec<RoundLog>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::parse(1, "round log is not UTF-8"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let log: RoundLog = serde_json::from_str(line)
            .map_err(|e| Error::parse(i + 1, format!("bad round log: {e}")))?;
        out.push(log);
    }
    Ok(out)
}

/// Everything `compare` knows about one log file.
#[derive(Debug, Clone, Serialize)]
pub struct LogSummary {
    pub label: String,
    pub path: PathBuf,
    pub rounds: usize,
    pub final_mse: f64,
    /// First round whose global MSE dropped to the threshold.
    pub rounds_to_threshold: Option<usize>,
    pub mean_final_f1: f64,
    pub strategy_histogram: BTreeMap<StrategyKind, usize>,
    pub final_clients: Vec<crate::orchestrator::ClientEval>,
}

/// Summarizes one rounds.jsonl file.
pub fn summarize_log(path: &Path, mse_threshold: f64) -> Result<LogSummary> {
    let bytes = std::fs::read(path)?;
    let rounds = parse_round_logs(&bytes)
        .map_err(|e| e.with_context(&format!("{}", path.display())))?;
    if rounds.is_empty() {
        return Err(Error::parse(1, format!("{}: empty log", path.display())));
    }
    let last = rounds.last().unwrap();
    let mean_final_f1 =
        last.clients.iter().map(|c| c.f1).sum::<f64>() / last.clients.len().max(1) as f64;
    Ok(LogSummary {
        label: label_for(path),
        path: path.to_path_buf(),
        rounds: rounds.len(),
        final_mse: last.global_mse,
        rounds_to_threshold: rounds
            .iter()
            .find(|r| r.global_mse <= mse_threshold)
            .map(|r| r.round),
        mean_final_f1,
        strategy_histogram: strategy_histogram(&rounds),
        final_clients: last.clients.clone(),
    })
}

/// `<mode>/<seed>` when the log sits in the runner's layout, else the stem.
fn label_for(path: &Path) -> String {
    let mut parts = Vec::new();
    for ancestor in path.ancestors().skip(1).take(2) {
        if let Some(name) = ancestor.file_name() {
            parts.push(name.to_string_lossy().to_string());
        }
    }
    parts.reverse();
    if parts.is_empty() {
        path.file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| path.display().to_string())
    } else {
        parts.join("/")
    }
}

/// Compares logs, best (lowest) final loss first.
pub fn compare(paths: &[PathBuf], mse_threshold: f64) -> Result<Vec<LogSummary>> {
    if paths.is_empty() {
        return Err(Error::contract("compare needs at least one log"));
    }
    let mut summaries = paths
        .iter()
        .map(|p| summarize_log(p, mse_threshold))
        .collect::<Result<Vec<_>>>()?;
    summaries.sort_by(|a, b| a.final_mse.partial_cmp(&b.final_mse).unwrap());
    Ok(summaries)
}

/// Human-readable comparison table.
pub fn render_table(summaries: &[LogSummary], mse_threshold: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>7} {:>12} {:>10} {:>9}\n",
        "run", "rounds", "final_mse", "to_thresh", "mean_f1"
    ));
    for s in summaries {
        let to_t = s
            .rounds_to_threshold
            .map(|r| r.to_string())
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<28} {:>7} {:>12.6} {:>10} {:>9.4}\n",
            s.label, s.rounds, s.final_mse, to_t, s.mean_final_f1
        ));
    }
    // Per-client detail inline for small fleets; the CSV carries it always.
    let max_clients = summaries
        .iter()
        .map(|s| s.final_clients.len())
        .max()
        .unwrap_or(0);
    if max_clients <= 16 {
        out.push_str("\nper-client F1 (final round)\n");
        for s in summaries {
            out.push_str(&format!("  {}:", s.label));
            for c in &s.final_clients {
                out.push_str(&format!(" {}={:.3}", c.client_id, c.f1));
            }
            out.push('\n');
        }
    }
    let adaptive: Vec<&LogSummary> = summaries
        .iter()
        .filter(|s| s.strategy_histogram.len() > 1)
        .collect();
    if !adaptive.is_empty() {
        out.push_str(&format!(
            "\nstrategy selection frequency (threshold for to_thresh: {mse_threshold})\n"
        ));
        for s in adaptive {
            out.push_str(&format!("  {}:\n", s.label));
            for (kind, count) in &s.strategy_histogram {
                out.push_str(&format!("    {:<12} {count}\n", kind.as_str()));
            }
        }
    }
    out
}

/// Per-client CSV for the compared logs.
pub fn comparison_csv(summaries: &[LogSummary]) -> String {
    let mut out = String::from("run,client,mse,f1\n");
    for s in summaries {
        for c in &s.final_clients {
            out.push_str(&format!("{},{},{},{}\n", s.label, c.client_id, c.mse, c.f1));
        }
    }
    out
}
