//! Shared fixtures for the integration suites: the planted two-regime
//! benchmark and a CSV fleet generator.

#![allow(dead_code)]

use licfl::aggregation::{ServerHyper, StrategyKind};
use licfl::data::{RegimeParams, SynthSpec};
use licfl::experiment::{resolve_run, RunSpec};
use licfl::orchestrator::{
    run_federation, AggregationMode, Client, CohortingMode, FederationConfig, FederationOutcome,
    RunHooks,
};
use licfl::ClientId;
use std::path::{Path, PathBuf};

/// Two planted regimes with identical sensor statistics and opposite
/// labeling rules: invisible to moment sharing, visible to
/// parameter-based cohorting.
pub fn two_regime_spec(num_clients: usize, samples_per_client: usize) -> SynthSpec {
    SynthSpec {
        num_clients,
        planted_cohorts: vec![
            RegimeParams {
                mean: [170.0, 450.0, 100.0, 40.0],
                std: [15.0, 50.0, 10.0, 5.0],
                rule: Some([1.0, -0.5, 0.8, -0.2]),
            },
            RegimeParams {
                mean: [170.0, 450.0, 100.0, 40.0],
                std: [15.0, 50.0, 10.0, 5.0],
                rule: Some([-1.0, 0.5, -0.8, 0.2]),
            },
        ],
        samples_per_client,
        noise_level: 0.1,
        train_fraction: 0.8,
    }
}

/// Shared federation settings for the benchmark runs.
pub fn benchmark_federation(num_clients: usize, rounds: usize) -> FederationConfig {
    FederationConfig {
        num_clients,
        rounds,
        local_lr: 0.25,
        local_epochs: 2,
        batch_size: 32,
        aggregation: AggregationMode::Fixed(StrategyKind::FedAvg),
        cohorting: CohortingMode::None,
        seed: 0,
        network: Default::default(),
        server: ServerHyper::default(),
        q_param: 0.1,
        lipschitz: 1.0,
        weighted_delta: false,
    }
}

pub fn clients_from_spec(spec: &SynthSpec, seed: u64) -> (Vec<Client>, Vec<usize>) {
    let (datasets, planted) = licfl::data::synth_generate(spec, seed).unwrap();
    let clients = datasets
        .into_iter()
        .map(|data| Client {
            id: data.machine_id,
            data,
        })
        .collect();
    (clients, planted)
}

/// Runs one mode label (as the CLI would resolve it) on the given fleet.
pub fn run_mode(
    base: &FederationConfig,
    mode: &str,
    seed: u64,
    clients: &[Client],
) -> FederationOutcome {
    let mut run = RunSpec::plain(mode);
    run.cohort = Some(licfl::cohorting::CohortConfig {
        n: 5,
        q: 2,
        sigma: None,
        k_cohorts: Some(2),
        seed,
        squared_kernel: false,
    });
    let cfg = resolve_run(base, &run, seed).unwrap();
    run_federation(&cfg, clients, &RunHooks::default()).unwrap()
}

/// Writes a synthetic fleet as the three CSV files and returns their paths.
/// Roughly one failure per 80 hours per machine.
pub fn write_fleet_csv(
    dir: &Path,
    machines: u64,
    rows_per_machine: usize,
    seed: u64,
) -> (PathBuf, PathBuf, PathBuf) {
    let telemetry = dir.join("telemetry.csv");
    let failures = dir.join("failures.csv");
    let meta = dir.join("meta.csv");

    let mut tele = String::from("datetime,machineID,volt,rotate,pressure,vibration\n");
    let mut fail = String::from("datetime,machineID,failure\n");
    let mut meta_s = String::from("machineID,model,age\n");

    // Small deterministic generator, no external RNG needed here.
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };

    for m in 1..=machines {
        for t in 0..rows_per_machine {
            let ts = timestamp(t);
            let volt = 170.0 + 12.0 * (next() - 0.5) + (m as f64 % 5.0);
            let rot = 450.0 + 40.0 * (next() - 0.5);
            let pres = 100.0 + 9.0 * (next() - 0.5);
            let vib = 40.0 + 4.0 * (next() - 0.5);
            tele.push_str(&format!("{ts},{m},{volt:.4},{rot:.4},{pres:.4},{vib:.4}\n"));
            if next() < 1.0 / 80.0 {
                let comp = ["comp1", "comp2", "comp3", "comp4"][(next() * 4.0) as usize % 4];
                fail.push_str(&format!("{ts},{m},{comp}\n"));
            }
        }
        meta_s.push_str(&format!("{m},model{},{}\n", m % 3, 5 + m % 12));
    }
    std::fs::write(&telemetry, tele).unwrap();
    std::fs::write(&failures, fail).unwrap();
    std::fs::write(&meta, meta_s).unwrap();
    (telemetry, failures, meta)
}

/// Hourly timestamps starting 2015-01-01 00:00:00.
pub fn timestamp(hour: usize) -> String {
    let base = chrono::NaiveDateTime::parse_from_str("2015-01-01 00:00:00", "%Y-%m-%d %H:%M:%S")
        .unwrap();
    (base + chrono::Duration::hours(hour as i64))
        .format("%Y-%m-%d %H:%M:%S")
        .to_string()
}

pub fn client_ids(clients: &[Client]) -> Vec<ClientId> {
    clients.iter().map(|c| c.id).collect()
}
