//! Telemetry ingestion, sliding-window labeling, and synthetic
//! heterogeneous-client generation.
//!
//! The CSV layout follows the public predictive-maintenance dataset:
//! hourly sensor readings per machine (`datetime,machineID,volt,rotate,
//! pressure,vibration`), component failure events (`datetime,machineID,
//! failure`), and machine metadata (`machineID,model,age`).

use crate::error::{Error, Result};
use crate::model::LabeledWindow;
use crate::ClientId;
use chrono::{Duration, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Sliding-window length in hours.
pub const WINDOW_SIZE: usize = 24;
/// Sensor channels per record: voltage, rotation, pressure, vibration.
pub const NUM_FEATURES: usize = 4;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// One hourly telemetry reading.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineRecord {
    pub machine_id: ClientId,
    pub timestamp: NaiveDateTime,
    pub voltage: f64,
    pub rotate: f64,
    pub pressure: f64,
    pub vibration: f64,
}

impl MachineRecord {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [self.voltage, self.rotate, self.pressure, self.vibration]
    }
}

/// Machine components that can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Cp1,
    Cp2,
    Cp3,
    Cp4,
}

impl Component {
    fn parse(s: &str) -> Option<Component> {
        match s {
            "comp1" => Some(Component::Cp1),
            "comp2" => Some(Component::Cp2),
            "comp3" => Some(Component::Cp3),
            "comp4" => Some(Component::Cp4),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Cp1 => "comp1",
            Component::Cp2 => "comp2",
            Component::Cp3 => "comp3",
            Component::Cp4 => "comp4",
        }
    }
}

/// A component failure event.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureEvent {
    pub machine_id: ClientId,
    pub timestamp: NaiveDateTime,
    pub component: Component,
}

/// Machine metadata used for primary-level cohorting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaInfo {
    pub machine_id: ClientId,
    pub model: String,
    pub age: u32,
}

impl MetaInfo {
    /// Metadata field by name, as a string for grouping.
    pub fn field(&self, key: &str) -> Option<String> {
        match key {
            "model" => Some(self.model.clone()),
            "age" => Some(self.age.to_string()),
            _ => None,
        }
    }
}

/// Parsed but not yet windowed data for a whole fleet.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub telemetry: BTreeMap<ClientId, Vec<MachineRecord>>,
    pub failures: BTreeMap<ClientId, Vec<FailureEvent>>,
    pub meta: BTreeMap<ClientId, MetaInfo>,
}

/// Per-feature normalization statistics, computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population statistics over the feature positions of raw windows.
    fn from_windows(windows: &[LabeledWindow]) -> Result<FeatureStats> {
        let mut mean = vec![0.0; NUM_FEATURES];
        let mut count = 0usize;
        for w in windows {
            if w.x.len() % NUM_FEATURES != 0 {
                return Err(Error::contract(
                    "window length is not a multiple of the feature count",
                ));
            }
            for (i, v) in w.x.iter().enumerate() {
                mean[i % NUM_FEATURES] += v;
            }
            count += w.x.len() / NUM_FEATURES;
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = [0.0; NUM_FEATURES];
        for w in windows {
            for (i, v) in w.x.iter().enumerate() {
                let d = v - mean[i % NUM_FEATURES];
                var[i % NUM_FEATURES] += d * d;
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        Ok(FeatureStats { mean, std })
    }

    /// z-scores a window in place; zero-variance features map to 0.
    fn normalize(&self, w: &mut LabeledWindow) {
        for (i, v) in w.x.iter_mut().enumerate() {
            let f = i % NUM_FEATURES;
            *v = if self.std[f] == 0.0 {
                0.0
            } else {
                (*v - self.mean[f]) / self.std[f]
            };
        }
    }
}

/// One client's windowed, normalized dataset with a chronological
/// train/test split.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub machine_id: ClientId,
    /// Normalized windows in time order; `[..split_at]` is the train side.
    pub windows: Vec<LabeledWindow>,
    pub split_at: usize,
    pub meta: MetaInfo,
    pub stats: FeatureStats,
}

impl ClientDataset {
    /// Splits raw windows chronologically, computes normalization
    /// statistics on the train side only, and applies them to both sides.
    pub fn from_raw_windows(
        machine_id: ClientId,
        raw_windows: Vec<LabeledWindow>,
        meta: MetaInfo,
        train_fraction: f64,
    ) -> Result<ClientDataset> {
        let (train, test) = split(&raw_windows, train_fraction)?;
        let stats = FeatureStats::from_windows(&train)?;
        let split_at = train.len();
        let mut windows = train;
        windows.extend(test);
        for w in windows.iter_mut() {
            stats.normalize(w);
        }
        Ok(ClientDataset {
            machine_id,
            windows,
            split_at,
            meta,
            stats,
        })
    }

    pub fn train(&self) -> &[LabeledWindow] {
        &self.windows[..self.split_at]
    }

    pub fn test(&self) -> &[LabeledWindow] {
        &self.windows[self.split_at..]
    }
}

fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

fn parse_timestamp(s: &str, line: usize) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .map_err(|e| Error::parse(line, format!("bad timestamp {s:?}: {e}")))
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("bad {name} value {s:?}")))
}

fn expect_headers(headers: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != want {
        return Err(Error::parse(
            1,
            format!("unexpected header {got:?}, want {want:?}"),
        ));
    }
    Ok(())
}

/// Parses telemetry CSV bytes into per-machine records (unsorted).
pub fn parse_telemetry_csv(bytes: &[u8]) -> Result<BTreeMap<ClientId, Vec<MachineRecord>>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    expect_headers(
        &headers,
        &["datetime", "machineID", "volt", "rotate", "pressure", "vibration"],
    )?;
    let mut out: BTreeMap<ClientId, Vec<MachineRecord>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            Error::parse(e.position().map_or(0, |p| p.line() as usize), e.to_string())
        })?;
        let line = line_of(&record);
        if record.len() != 6 {
            return Err(Error::parse(line, "expected 6 fields"));
        }
        let machine_id: ClientId = parse_field(&record[1], "machineID", line)?;
        let reading = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = parse_field(&record[i], name, line)?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("non-finite {name}")));
            }
            Ok(v)
        };
        out.entry(machine_id).or_default().push(MachineRecord {
            machine_id,
            timestamp: parse_timestamp(&record[0], line)?,
            voltage: reading(2, "volt")?,
            rotate: reading(3, "rotate")?,
            pressure: reading(4, "pressure")?,
            vibration: reading(5, "vibration")?,
        });
    }
    Ok(out)
}

/// Parses failure-event CSV bytes.
pub fn parse_failures_csv(bytes: &[u8]) -> Result<Vec<FailureEvent>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    expect_headers(&headers, &["datetime", "machineID", "failure"])?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            Error::parse(e.position().map_or(0, |p| p.line() as usize), e.to_string())
        })?;
        let line = line_of(&record);
        if record.len() != 3 {
            return Err(Error::parse(line, "expected 3 fields"));
        }
        let component = Component::parse(record[2].trim())
            .ok_or_else(|| Error::parse(line, format!("bad failure component {:?}", &record[2])))?;
        out.push(FailureEvent {
            machine_id: parse_field(&record[1], "machineID", line)?,
            timestamp: parse_timestamp(&record[0], line)?,
            component,
        });
    }
    Ok(out)
}

/// Parses machine metadata CSV bytes.
pub fn parse_meta_csv(bytes: &[u8]) -> Result<BTreeMap<ClientId, MetaInfo>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    expect_headers(&headers, &["machineID", "model", "age"])?;
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            Error::parse(e.position().map_or(0, |p| p.line() as usize), e.to_string())
        })?;
        let line = line_of(&record);
        if record.len() != 3 {
            return Err(Error::parse(line, "expected 3 fields"));
        }
        let machine_id: ClientId = parse_field(&record[0], "machineID", line)?;
        let model = record[1].trim().to_string();
        if model.is_empty() {
            return Err(Error::parse(line, "empty model type"));
        }
        out.insert(
            machine_id,
            MetaInfo {
                machine_id,
                model,
                age: parse_field(&record[2], "age", line)?,
            },
        );
    }
    Ok(out)
}

/// Loads and cross-checks the three CSV files.
///
/// Telemetry is grouped by machine and sorted by time (out-of-order rows
/// are re-sorted with a warning). Failures must reference known machines;
/// metadata must cover every machine that has telemetry.
pub fn load_csv(
    telemetry_path: &Path,
    failures_path: &Path,
    meta_path: &Path,
) -> Result<RawDataset> {
    let telemetry_bytes = std::fs::read(telemetry_path)?;
    let failures_bytes = std::fs::read(failures_path)?;
    let meta_bytes = std::fs::read(meta_path)?;

    let mut telemetry = parse_telemetry_csv(&telemetry_bytes)?;
    for (machine, records) in telemetry.iter_mut() {
        let sorted = records.windows(2).all(|w| w[0].timestamp < w[1].timestamp);
        if !sorted {
            log::warn!("machine {machine}: telemetry out of order, re-sorting");
            records.sort_by_key(|r| r.timestamp);
        }
        if records.windows(2).any(|w| w[0].timestamp == w[1].timestamp) {
            return Err(Error::contract(format!(
                "machine {machine}: duplicate telemetry timestamps"
            )));
        }
        log::debug!("machine {machine}: {} telemetry rows", records.len());
    }

    let mut failures: BTreeMap<ClientId, Vec<FailureEvent>> = BTreeMap::new();
    for event in parse_failures_csv(&failures_bytes)? {
        if !telemetry.contains_key(&event.machine_id) {
            return Err(Error::Referential(format!(
                "failure event references unknown machine {}",
                event.machine_id
            )));
        }
        failures.entry(event.machine_id).or_default().push(event);
    }
    for events in failures.values_mut() {
        events.sort_by_key(|e| e.timestamp);
    }

    let meta = parse_meta_csv(&meta_bytes)?;
    for machine in telemetry.keys() {
        if !meta.contains_key(machine) {
            return Err(Error::Referential(format!(
                "machine {machine} has telemetry but no metadata row"
            )));
        }
    }

    Ok(RawDataset {
        telemetry,
        failures,
        meta,
    })
}

/// Slides a length-`w` window (stride 1) over the records and labels each
/// window positive when any component failure falls in the half-open
/// interval `(t_end - w hours, t_end]`.
///
/// Windows are raw (unnormalized); normalization happens at split time so
/// no test statistics leak into training.
pub fn window_and_label(
    records: &[MachineRecord],
    failures: &[FailureEvent],
    w: usize,
) -> Result<Vec<LabeledWindow>> {
    if w == 0 {
        return Err(Error::contract("window size must be >= 1"));
    }
    if records.len() < w {
        return Err(Error::contract(format!(
            "need at least {w} records, got {}",
            records.len()
        )));
    }
    let mut failure_times: Vec<NaiveDateTime> = failures.iter().map(|f| f.timestamp).collect();
    failure_times.sort_unstable();
    let lookback = Duration::hours(w as i64);

    let mut out = Vec::with_capacity(records.len() - w + 1);
    for end in (w - 1)..records.len() {
        let t_end = records[end].timestamp;
        let t_start = t_end - lookback;
        // Any failure with t_start < t <= t_end?
        let idx = failure_times.partition_point(|&t| t <= t_start);
        let failed = failure_times.get(idx).is_some_and(|&t| t <= t_end);
        let mut x = Vec::with_capacity(w * NUM_FEATURES);
        for r in &records[end + 1 - w..=end] {
            x.extend_from_slice(&r.features());
        }
        out.push(LabeledWindow::new(x, failed));
    }
    Ok(out)
}

/// Chronological train/test split. No shuffling: test windows are strictly
/// later in time.
pub fn split(
    windows: &[LabeledWindow],
    train_fraction: f64,
) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract("train fraction must lie in (0, 1)"));
    }
    let n = windows.len();
    let n_train = (n as f64 * train_fraction + 1e-9).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::contract(format!(
            "split of {n} windows at fraction {train_fraction} leaves an empty side"
        )));
    }
    Ok((windows[..n_train].to_vec(), windows[n_train..].to_vec()))
}

/// Builds per-client datasets from parsed CSVs, ascending machine id.
pub fn build_client_datasets(
    raw: &RawDataset,
    w: usize,
    train_fraction: f64,
) -> Result<Vec<ClientDataset>> {
    let mut out = Vec::with_capacity(raw.telemetry.len());
    for (machine, records) in &raw.telemetry {
        let no_failures = Vec::new();
        let failures = raw.failures.get(machine).unwrap_or(&no_failures);
        let windows = window_and_label(records, failures, w)?;
        let meta = raw.meta[machine].clone();
        out.push(ClientDataset::from_raw_windows(
            *machine,
            windows,
            meta,
            train_fraction,
        )?);
    }
    Ok(out)
}

/// Distribution parameters for one planted cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeParams {
    /// Raw per-sensor baselines.
    pub mean: [f64; NUM_FEATURES],
    /// Raw per-sensor scales.
    pub std: [f64; NUM_FEATURES],
    /// Linear-threshold labeling weights; drawn from the seed when absent.
    #[serde(default)]
    pub rule: Option<[f64; NUM_FEATURES]>,
}

/// Synthetic fleet specification with planted cohort structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_clients: usize,
    pub planted_cohorts: Vec<RegimeParams>,
    /// Hourly records generated per client.
    pub samples_per_client: usize,
    /// Observation noise added on top of the label-relevant signal.
    pub noise_level: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

/// Standard-normal draw via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates a synthetic fleet with planted cohorts.
///
/// Clients are assigned to cohorts round-robin. Each cohort owns a feature
/// mixing matrix and a linear-threshold labeling rule, both drawn from the
/// master seed (unless the rule is pinned in [`RegimeParams`]), so clients
/// within a cohort share a data distribution and clients across cohorts do
/// not. Windows are labeled by the rule applied to the window-mean of the
/// clean signal; `noise_level` controls how much observation noise hides
/// the signal. Returns the datasets plus the planted cohort labels.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(Vec<ClientDataset>, Vec<usize>)> {
    let num_cohorts = spec.planted_cohorts.len();
    if num_cohorts == 0 {
        return Err(Error::contract("need at least one planted cohort"));
    }
    if spec.num_clients == 0 || spec.samples_per_client < WINDOW_SIZE + 2 {
        return Err(Error::contract(format!(
            "need >= 1 client and >= {} samples per client",
            WINDOW_SIZE + 2
        )));
    }
    if !(spec.noise_level >= 0.0) {
        return Err(Error::contract("noise level must be >= 0"));
    }

    // Per-cohort mixing matrices and labeling rules.
    let mut mixings = Vec::with_capacity(num_cohorts);
    let mut rules = Vec::with_capacity(num_cohorts);
    for (c, regime) in spec.planted_cohorts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(seed, c as u64, 0xC0));
        let mut mixing = [[0.0; NUM_FEATURES]; NUM_FEATURES];
        for row in mixing.iter_mut() {
            for v in row.iter_mut() {
                *v = gaussian(&mut rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        mixings.push(mixing);
        let rule = regime.rule.unwrap_or_else(|| {
            let mut r = [0.0; NUM_FEATURES];
            for v in r.iter_mut() {
                *v = gaussian(&mut rng);
            }
            r
        });
        let norm = rule.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::contract("labeling rule must be non-zero"));
        }
        rules.push(rule.map(|v| v / norm));
    }

    let base = NaiveDateTime::parse_from_str("2015-01-01 00:00:00", TIMESTAMP_FORMAT)
        .expect("static timestamp");
    let mut datasets = Vec::with_capacity(spec.num_clients);
    let mut planted = Vec::with_capacity(spec.num_clients);
    for i in 0..spec.num_clients {
        let cohort = i % num_cohorts;
        planted.push(cohort);
        let regime = &spec.planted_cohorts[cohort];
        let mixing = &mixings[cohort];
        let rule = &rules[cohort];
        let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(seed, i as ClientId, 0xDA));

        // Clean signal drives the labels; observations add noise on top.
        let n = spec.samples_per_client;
        let mut signal = vec![[0.0; NUM_FEATURES]; n];
        let mut observed = Vec::with_capacity(n);
        for t in 0..n {
            let eps: [f64; NUM_FEATURES] = std::array::from_fn(|_| gaussian(&mut rng));
            for f in 0..NUM_FEATURES {
                signal[t][f] = mixing[f].iter().zip(&eps).map(|(m, e)| m * e).sum();
            }
            let features: [f64; NUM_FEATURES] = std::array::from_fn(|f| {
                regime.mean[f]
                    + regime.std[f] * (signal[t][f] + spec.noise_level * gaussian(&mut rng))
            });
            observed.push(MachineRecord {
                machine_id: i as ClientId,
                timestamp: base + Duration::hours(t as i64),
                voltage: features[0],
                rotate: features[1],
                pressure: features[2],
                vibration: features[3],
            });
        }

        let mut windows = Vec::with_capacity(n - WINDOW_SIZE + 1);
        for end in (WINDOW_SIZE - 1)..n {
            let mut x = Vec::with_capacity(WINDOW_SIZE * NUM_FEATURES);
            let mut signal_mean = [0.0; NUM_FEATURES];
            for t in end + 1 - WINDOW_SIZE..=end {
                x.extend_from_slice(&observed[t].features());
                for f in 0..NUM_FEATURES {
                    signal_mean[f] += signal[t][f] / WINDOW_SIZE as f64;
                }
            }
            let score: f64 = rule.iter().zip(&signal_mean).map(|(r, s)| r * s).sum();
            windows.push(LabeledWindow::new(x, score > 0.0));
        }

        let meta = MetaInfo {
            machine_id: i as ClientId,
            model: format!("m{cohort}"),
            age: 5 + (i as u32 % 15),
        };
        datasets.push(ClientDataset::from_raw_windows(
            i as ClientId,
            windows,
            meta,
            spec.train_fraction,
        )?);
    }
    Ok((datasets, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{client_update, forward, init_params, NetworkSpec};

    fn hourly_records(
        machine: ClientId,
        n: usize,
        value: impl Fn(usize) -> f64,
    ) -> Vec<MachineRecord> {
        let base = NaiveDateTime::parse_from_str("2015-01-01 00:00:00", TIMESTAMP_FORMAT).unwrap();
        (0..n)
            .map(|t| MachineRecord {
                machine_id: machine,
                timestamp: base + Duration::hours(t as i64),
                voltage: value(t),
                rotate: 2.0 * value(t),
                pressure: -value(t),
                vibration: 0.5,
            })
            .collect()
    }

    fn failure_at(machine: ClientId, records: &[MachineRecord], hour: usize) -> FailureEvent {
        FailureEvent {
            machine_id: machine,
            timestamp: records[hour].timestamp,
            component: Component::Cp1,
        }
    }

    #[test]
    fn window_count_is_records_minus_w_plus_one() {
        let records = hourly_records(1, 8761, |t| t as f64);
        let windows = window_and_label(&records, &[], 24).unwrap();
        assert_eq!(windows.len(), 8738);
        for n in [24usize, 25, 100] {
            let records = hourly_records(1, n, |t| t as f64);
            assert_eq!(window_and_label(&records, &[], 24).unwrap().len(), n - 23);
        }
        let short = hourly_records(1, 23, |t| t as f64);
        assert!(window_and_label(&short, &[], 24).is_err());
    }

    #[test]
    fn no_failures_means_all_negative_labels() {
        let records = hourly_records(1, 100, |t| t as f64);
        let windows = window_and_label(&records, &[], 24).unwrap();
        assert!(windows.iter().all(|w| w.y == 0.0));
    }

    #[test]
    fn single_failure_labels_exactly_24_windows() {
        let records = hourly_records(1, 200, |t| t as f64);
        let failures = vec![failure_at(1, &records, 100)];
        let windows = window_and_label(&records, &failures, 24).unwrap();
        // Window ending at hour i covers (i - 24, i]: positives for
        // i in 100..=123. Window list index = end hour - 23.
        for (idx, w) in windows.iter().enumerate() {
            let end_hour = idx + 23;
            let want = (100..=123).contains(&end_hour);
            assert_eq!(w.y == 1.0, want, "end hour {end_hour}");
        }
    }

    #[test]
    fn label_positivity_matches_interval_oracle() {
        let records = hourly_records(1, 500, |t| (t as f64).sin());
        let failures: Vec<FailureEvent> = [37usize, 141, 142, 300, 499]
            .iter()
            .map(|&h| failure_at(1, &records, h))
            .collect();
        let windows = window_and_label(&records, &failures, 24).unwrap();

        // Brute-force oracle: scan every window end against every failure.
        let mut expected = 0usize;
        for end in 23..500usize {
            let t_end = records[end].timestamp;
            let t_start = t_end - Duration::hours(24);
            if failures
                .iter()
                .any(|f| f.timestamp > t_start && f.timestamp <= t_end)
            {
                expected += 1;
            }
        }
        let got = windows.iter().filter(|w| w.y == 1.0).count();
        assert_eq!(got, expected);
    }

    #[test]
    fn window_x_layout_is_time_major() {
        let records = hourly_records(1, 24, |t| t as f64);
        let windows = window_and_label(&records, &[], 24).unwrap();
        let x = &windows[0].x;
        assert_eq!(x.len(), 96);
        // step t contributes [volt, rotate, pressure, vibration]
        assert_eq!(&x[0..4], &[0.0, 0.0, -0.0, 0.5]);
        assert_eq!(&x[4..8], &[1.0, 2.0, -1.0, 0.5]);
    }

    #[test]
    fn split_examples() {
        let windows: Vec<LabeledWindow> = (0..10)
            .map(|i| LabeledWindow::new(vec![i as f64; 4], false))
            .collect();
        let (train, test) = split(&windows, 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        // test strictly later in time
        assert_eq!(test[0].x[0], 8.0);
        assert!(split(&windows, 0.0).is_err());
        assert!(split(&windows, 1.0).is_err());
        assert!(split(&windows[..1], 0.5).is_err());

        let many: Vec<LabeledWindow> = (0..8738)
            .map(|_| LabeledWindow::new(vec![0.0; 4], false))
            .collect();
        let (train, test) = split(&many, 0.5).unwrap();
        assert_eq!((train.len(), test.len()), (4369, 4369));
    }

    #[test]
    fn normalization_uses_train_stats_only() {
        // Train side near 1.0, test side at 100.0: with train-only stats the
        // test windows must sit far from zero, not re-centered onto their
        // own mean.
        let mut windows: Vec<LabeledWindow> = (0..8)
            .map(|i| LabeledWindow::new(vec![1.0 + 0.1 * (i % 2) as f64; 8], false))
            .collect();
        windows.push(LabeledWindow::new(vec![100.0; 8], false));
        windows.push(LabeledWindow::new(vec![100.0; 8], false));
        let meta = MetaInfo {
            machine_id: 0,
            model: "m0".into(),
            age: 1,
        };
        let ds = ClientDataset::from_raw_windows(0, windows, meta, 0.8).unwrap();
        assert_eq!(ds.train().len(), 8);
        assert_eq!(ds.test().len(), 2);
        let max_train = ds
            .train()
            .iter()
            .flat_map(|w| w.x.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let max_test = ds
            .test()
            .iter()
            .flat_map(|w| w.x.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max_train < 2.0);
        assert!(max_test > 50.0, "test side was re-centered: {max_test}");
    }

    #[test]
    fn load_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let tele = dir.path().join("telemetry.csv");
        let fail = dir.path().join("failures.csv");
        let meta = dir.path().join("meta.csv");
        std::fs::write(
            &tele,
            "datetime,machineID,volt,rotate,pressure,vibration\n\
             2015-01-01 01:00:00,1,170.1,449.5,95.0,40.1\n\
             2015-01-01 00:00:00,1,168.0,445.0,96.2,39.9\n",
        )
        .unwrap();
        std::fs::write(
            &fail,
            "datetime,machineID,failure\n2015-01-01 01:00:00,1,comp2\n",
        )
        .unwrap();
        std::fs::write(&meta, "machineID,model,age\n1,model3,9\n").unwrap();

        let raw = load_csv(&tele, &fail, &meta).unwrap();
        // out-of-order rows were re-sorted
        let records = &raw.telemetry[&1];
        assert_eq!(records.len(), 2);
        assert!(records[0].timestamp < records[1].timestamp);
        assert_eq!(raw.failures[&1].len(), 1);
        assert_eq!(raw.meta[&1].model, "model3");

        // failure for unknown machine
        std::fs::write(
            &fail,
            "datetime,machineID,failure\n2015-01-01 01:00:00,7,comp1\n",
        )
        .unwrap();
        assert!(matches!(
            load_csv(&tele, &fail, &meta),
            Err(Error::Referential(_))
        ));

        // malformed row reports its line number
        std::fs::write(
            &fail,
            "datetime,machineID,failure\n2015-01-01 01:00:00,1,comp2\n",
        )
        .unwrap();
        std::fs::write(
            &tele,
            "datetime,machineID,volt,rotate,pressure,vibration\n\
             2015-01-01 00:00:00,1,170.1,449.5,95.0,40.1\n\
             2015-01-01 01:00:00,1,not-a-number,449.5,95.0,40.1\n",
        )
        .unwrap();
        match load_csv(&tele, &fail, &meta) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_failures_file_gives_all_negative_labels() {
        let dir = tempfile::tempdir().unwrap();
        let tele = dir.path().join("telemetry.csv");
        let fail = dir.path().join("failures.csv");
        let meta = dir.path().join("meta.csv");
        let mut rows = String::from("datetime,machineID,volt,rotate,pressure,vibration\n");
        for r in hourly_records(1, 40, |t| t as f64) {
            rows.push_str(&format!(
                "{},1,{},{},{},{}\n",
                r.timestamp.format("%Y-%m-%d %H:%M:%S"),
                r.voltage,
                r.rotate,
                r.pressure,
                r.vibration
            ));
        }
        std::fs::write(&tele, rows).unwrap();
        std::fs::write(&fail, "datetime,machineID,failure\n").unwrap();
        std::fs::write(&meta, "machineID,model,age\n1,model1,3\n").unwrap();
        let raw = load_csv(&tele, &fail, &meta).unwrap();
        let datasets = build_client_datasets(&raw, 24, 0.8).unwrap();
        assert!(datasets[0].windows.iter().all(|w| w.y == 0.0));
    }

    #[test]
    fn parse_rejects_wrong_headers_and_bad_fields() {
        assert!(parse_telemetry_csv(b"a,b,c\n").is_err());
        assert!(
            parse_failures_csv(b"datetime,machineID,failure\n2015-01-01 00:00:00,1,comp9\n")
                .is_err()
        );
        assert!(parse_meta_csv(b"machineID,model,age\n1,,3\n").is_err());
    }

    fn two_regime_spec(opposite: bool) -> SynthSpec {
        let rule_a = [1.0, -0.5, 0.8, -0.2];
        let rule_b = if opposite {
            [-1.0, 0.5, -0.8, 0.2]
        } else {
            rule_a
        };
        SynthSpec {
            num_clients: 4,
            planted_cohorts: vec![
                RegimeParams {
                    mean: [170.0, 450.0, 100.0, 40.0],
                    std: [15.0, 50.0, 10.0, 5.0],
                    rule: Some(rule_a),
                },
                RegimeParams {
                    mean: [170.0, 450.0, 100.0, 40.0],
                    std: [15.0, 50.0, 10.0, 5.0],
                    rule: Some(rule_b),
                },
            ],
            samples_per_client: 400,
            noise_level: 0.1,
            train_fraction: 0.8,
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let spec = two_regime_spec(true);
        let (a, pa) = synth_generate(&spec, 9).unwrap();
        let (b, pb) = synth_generate(&spec, 9).unwrap();
        assert_eq!(pa, pb);
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.windows, db.windows);
        }
        let (c, _) = synth_generate(&spec, 10).unwrap();
        assert_ne!(a[0].windows, c[0].windows);
    }

    #[test]
    fn single_cohort_clients_are_exchangeable() {
        let spec = SynthSpec {
            num_clients: 6,
            planted_cohorts: vec![RegimeParams {
                mean: [10.0, 20.0, 30.0, 40.0],
                std: [1.0, 2.0, 3.0, 4.0],
                rule: None,
            }],
            samples_per_client: 2000,
            noise_level: 0.0,
            train_fraction: 0.8,
        };
        let (datasets, planted) = synth_generate(&spec, 4).unwrap();
        assert!(planted.iter().all(|&c| c == 0));
        // raw feature means recovered from stats agree across clients
        for f in 0..NUM_FEATURES {
            let means: Vec<f64> = datasets.iter().map(|d| d.stats.mean[f]).collect();
            let spread = means.iter().cloned().fold(f64::MIN, f64::max)
                - means.iter().cloned().fold(f64::MAX, f64::min);
            assert!(
                spread < 0.5 * spec.planted_cohorts[0].std[f],
                "feature {f} means too spread: {means:?}"
            );
        }
    }

    #[test]
    fn opposite_rules_make_cross_cohort_models_fail() {
        let mut spec = two_regime_spec(true);
        spec.samples_per_client = 600;
        let (datasets, planted) = synth_generate(&spec, 21).unwrap();
        let a = datasets
            .iter()
            .zip(&planted)
            .find(|(_, &c)| c == 0)
            .unwrap()
            .0;
        let b = datasets
            .iter()
            .zip(&planted)
            .find(|(_, &c)| c == 1)
            .unwrap()
            .0;

        let net = NetworkSpec::default();
        let mut params = init_params(&net, 5).unwrap();
        for _ in 0..10 {
            params = client_update(&params, a.train(), 0.5, 1, 32, 3).unwrap();
        }
        let eval = |data: &[LabeledWindow]| {
            let preds: Vec<f64> = data
                .iter()
                .map(|w| forward(&params, &w.x).unwrap())
                .collect();
            let labels: Vec<f64> = data.iter().map(|w| w.y).collect();
            crate::metrics::f1(&preds, &labels, 0.5).unwrap()
        };
        let own = eval(a.test());
        let cross = eval(b.test());
        assert!(own > 0.5, "model failed to learn its own cohort: F1 {own}");
        assert!(cross < 0.5, "cross-cohort F1 unexpectedly high: {cross}");
    }
}
