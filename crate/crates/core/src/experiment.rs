//! Single runs with on-disk outputs, and parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::config::{ConfigError, ConsensusMode, ScenarioConfig};
use crate::metrics::{MetricsReport, SimEvent};
use crate::simnet::{run, run_with_events, SimError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sweep needs at least one {0}")]
    EmptySweep(&'static str),
}

impl ExperimentError {
    /// 1 for configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::EmptySweep(_) => 1,
            ExperimentError::Sim(SimError::Config(_)) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const EVENTS_CSV_HEADER: &str = "at_us,kind,node,detail";
pub const SWEEP_CSV_HEADER: &str = "axis_value,mode,metric,mean,stddev";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn events_csv(events: &[SimEvent]) -> String {
    let mut out = String::from(EVENTS_CSV_HEADER);
    out.push('\n');
    for e in events {
        let node = e.node().map(|n| n.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", e.at_us(), e.kind(), node, csv_field(&e.detail()));
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// One line for the terminal.
pub fn summary_line(r: &MetricsReport) -> String {
    format!(
        "mode={} seed={} height={} bth={:.2}tx/s bth_readings={:.2}/s tla_mean={}ms ct_mean={}ms adr={} mgdr={} nt_data={:.3} nt_control={:.3} energy={:.5}J chains_identical={}",
        r.mode,
        r.seed,
        r.chain_height,
        r.bth,
        r.bth_readings,
        opt(r.tla_mean),
        opt(r.ct_mean),
        opt(r.adr),
        opt(r.mgdr),
        r.nt_data,
        r.nt_control,
        r.energy_per_sensor,
        r.chains_identical,
    )
}

/// Runs one scenario and writes `report.json` (and `events.csv` when asked)
/// into `out_dir`.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: &Path, dump_events: bool) -> Result<MetricsReport, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let output = run_with_events(cfg)?;
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&output.report).expect("report serializes");
    fs::write(&report_path, json + "\n").map_err(io_err(&report_path))?;
    if dump_events {
        let path = out_dir.join("events.csv");
        fs::write(&path, events_csv(&output.events)).map_err(io_err(&path))?;
    }
    Ok(output.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Reading payload in bytes.
    TxSize,
    Pmn,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::TxSize => "tx_size",
            SweepAxis::Pmn => "pmn",
        }
    }

    pub fn apply(&self, cfg: &mut ScenarioConfig, value: f64) {
        match self {
            SweepAxis::TxSize => cfg.tx_payload_size = value.round() as u32,
            SweepAxis::Pmn => cfg.adversary.pmn = value,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tx_size" => Ok(SweepAxis::TxSize),
            "pmn" => Ok(SweepAxis::Pmn),
            other => Err(format!("unknown sweep axis {other:?}; expected tx_size or pmn")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub modes: Vec<ConsensusMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub axis_value: f64,
    pub mode: ConsensusMode,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub mode: ConsensusMode,
    pub metric: &'static str,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub stddev: f64,
}

/// Metrics aggregated by a sweep, in CSV order.
pub const SWEEP_METRICS: [&str; 12] = [
    "bth",
    "bth_readings",
    "tla_mean",
    "tla_p95",
    "ct_mean",
    "confirmed_within_bound",
    "adr",
    "mgdr",
    "nt_data",
    "nt_control",
    "energy_per_sensor",
    "false_positive_count",
];

pub fn metric_value(r: &MetricsReport, metric: &str) -> Option<f64> {
    match metric {
        "bth" => Some(r.bth),
        "bth_readings" => Some(r.bth_readings),
        "tla_mean" => r.tla_mean,
        "tla_p95" => r.tla_p95,
        "ct_mean" => r.ct_mean,
        "confirmed_within_bound" => r.confirmed_within_bound,
        "adr" => r.adr,
        "mgdr" => r.mgdr,
        "nt_data" => Some(r.nt_data),
        "nt_control" => Some(r.nt_control),
        "energy_per_sensor" => Some(r.energy_per_sensor),
        "false_positive_count" => Some(r.false_positive_count as f64),
        _ => None,
    }
}

pub fn mean_stddev(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Runs every (value, mode, seed) cell on up to `workers` threads. Results
/// come back in spec order regardless of scheduling.
pub fn run_sweep(base: &ScenarioConfig, spec: &SweepSpec, workers: usize) -> Result<Vec<SweepRun>, ExperimentError> {
    if spec.values.is_empty() {
        return Err(ExperimentError::EmptySweep("value"));
    }
    if spec.seeds.is_empty() {
        return Err(ExperimentError::EmptySweep("seed"));
    }
    if spec.modes.is_empty() {
        return Err(ExperimentError::EmptySweep("mode"));
    }
    let mut cells = Vec::new();
    for &value in &spec.values {
        for &mode in &spec.modes {
            for &seed in &spec.seeds {
                let mut cfg = base.clone();
                spec.axis.apply(&mut cfg, value);
                cfg.consensus = mode;
                cfg.seed = seed;
                cfg.validate()?;
                cells.push((value, mode, seed, cfg));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsReport, SimError>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = workers.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else {
                    break;
                };
                let r = run(&cell.3);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    cells
        .into_iter()
        .zip(results)
        .map(|((axis_value, mode, seed, _), r)| {
            Ok(SweepRun {
                axis_value,
                mode,
                seed,
                report: r.expect("every cell ran")?,
            })
        })
        .collect()
}

/// Mean and standard deviation per (value, mode, metric) over seeds.
/// Metrics undefined in every run of a cell are left out.
pub fn aggregate(runs: &[SweepRun]) -> Vec<SweepRow> {
    let mut keys: Vec<(f64, ConsensusMode)> = Vec::new();
    for r in runs {
        if !keys.iter().any(|k| k.0 == r.axis_value && k.1 == r.mode) {
            keys.push((r.axis_value, r.mode));
        }
    }
    let mut rows = Vec::new();
    for (value, mode) in keys {
        let cell: Vec<&SweepRun> = runs.iter().filter(|r| r.axis_value == value && r.mode == mode).collect();
        for metric in SWEEP_METRICS {
            let vals: Vec<f64> = cell.iter().filter_map(|r| metric_value(&r.report, metric)).collect();
            if let Some((mean, stddev)) = mean_stddev(&vals) {
                rows.push(SweepRow {
                    axis_value: value,
                    mode,
                    metric,
                    mean,
                    stddev,
                });
            }
        }
    }
    rows
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.axis_value, r.mode.as_str(), r.metric, r.mean, r.stddev);
    }
    out
}

/// Runs the sweep and writes `sweep.csv` into `out_dir`.
pub fn sweep(
    base: &ScenarioConfig,
    spec: &SweepSpec,
    workers: usize,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, ExperimentError> {
    base.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let runs = run_sweep(base, spec, workers)?;
    let rows = aggregate(&runs);
    let path = out_dir.join("sweep.csv");
    fs::write(&path, sweep_csv(&rows)).map_err(io_err(&path))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.topology.sensors = 200;
        c.topology.stations = 1;
        c.sim_time = 2_000;
        c.drain_time = 1_000;
        c.adversary.pmn = 0.0;
        c
    }

    #[test]
    fn stddev_is_zero_only_for_identical_values() {
        assert_eq!(mean_stddev(&[2.0]), Some((2.0, 0.0)));
        assert_eq!(mean_stddev(&[3.0, 3.0, 3.0]), Some((3.0, 0.0)));
        let (m, s) = mean_stddev(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_stddev(&[]), None);
    }

    #[test]
    fn csv_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [SweepAxis::TxSize, SweepAxis::Pmn] {
            assert_eq!(a.as_str().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("latency".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn single_cell_sweep_has_one_row_per_metric() {
        let spec = SweepSpec {
            axis: SweepAxis::TxSize,
            values: vec![100.0],
            seeds: vec![1],
            modes: vec![ConsensusMode::Quico],
        };
        let runs = run_sweep(&small(), &spec, 1).unwrap();
        assert_eq!(runs.len(), 1);
        let rows = aggregate(&runs);
        assert!(rows.iter().all(|r| r.axis_value == 100.0 && r.stddev == 0.0));
        let metrics: Vec<&str> = rows.iter().map(|r| r.metric).collect();
        assert!(metrics.contains(&"bth") && !metrics.contains(&"adr"));
    }

    #[test]
    fn duplicate_seeds_give_zero_spread() {
        let spec = SweepSpec {
            axis: SweepAxis::Pmn,
            values: vec![0.0],
            seeds: vec![4, 4],
            modes: vec![ConsensusMode::PbftBaseline],
        };
        let rows = aggregate(&run_sweep(&small(), &spec, 2).unwrap());
        assert!(rows.iter().all(|r| r.stddev == 0.0));
    }

    #[test]
    fn empty_sweep_is_a_config_error() {
        let spec = SweepSpec {
            axis: SweepAxis::Pmn,
            values: vec![],
            seeds: vec![1],
            modes: vec![ConsensusMode::Quico],
        };
        let err = run_sweep(&small(), &spec, 1).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unwritable_out_dir_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, "x").unwrap();
        let err = run_scenario(&small(), &file.join("sub"), false).unwrap_err();
        assert!(matches!(err, ExperimentError::Io { .. }));
        assert_eq!(err.exit_code(), 2);
    }
}
