//! Running one experiment cell: master and stream preparation, repetitions,
//! aggregation.

use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use cachejoin_core::engines::{run_engine, EngineKind, RunReport};
use cachejoin_core::master_store::{generate_master, MasterStore};
use cachejoin_core::stream_source::{read_replay, ReplaySource, StreamRecord, StreamSource, ZipfSpec, ZipfStream};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Iteration count below which averages are reported with a warning.
pub const MIN_STEADY_ITERATIONS: usize = 1000;

/// Opens the configured master file, generating it first if it is a generated
/// one that does not exist yet.
pub fn open_master(cfg: &ExperimentConfig) -> Result<Arc<MasterStore>> {
    let path = cfg.master_path();
    if cfg.master.is_none() && !path.exists() {
        std::fs::create_dir_all(&cfg.data_dir)
            .with_context(|| format!("master_store: creating {}", cfg.data_dir.display()))?;
        let tmp = path.with_extension("partial");
        generate_master(cfg.r_size, cfg.master_seed, &tmp)
            .with_context(|| format!("master_store: generating {}", path.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("master_store: renaming to {}", path.display()))?;
    }
    let store = MasterStore::open(&path, cfg.io).with_context(|| format!("master_store: opening {}", path.display()))?;
    Ok(Arc::new(store))
}

/// Stream for repetition `rep`: the replay file, or `stream_records` Zipf draws
/// seeded by `seed + rep`. `None` means an unbounded generated stream (duration
/// runs).
pub fn build_stream(cfg: &ExperimentConfig, store: &MasterStore, rep: usize) -> Result<Option<Arc<[StreamRecord]>>> {
    if let Some(path) = &cfg.replay {
        let recs = read_replay(path).with_context(|| format!("stream_source: reading {}", path.display()))?;
        let n = cfg.stream_records.map_or(recs.len(), |n| (n as usize).min(recs.len()));
        return Ok(Some(recs[..n].to_vec().into()));
    }
    let Some(n) = cfg.stream_records else { return Ok(None) };
    if n == 0 {
        return Ok(Some(Vec::new().into()));
    }
    Ok(Some(zipf_stream(cfg, store, rep)?.next_batch(n as usize).into()))
}

fn zipf_stream(cfg: &ExperimentConfig, store: &MasterStore, rep: usize) -> Result<ZipfStream> {
    let mut spec = ZipfSpec::new(cfg.zipf, cfg.seed.wrapping_add(rep as u64));
    spec.orphan_rate = cfg.orphan_rate;
    let keys = store.key_space().context("master_store: reading key space")?;
    Ok(ZipfStream::new(spec, keys).context("stream_source")?)
}

/// Runs `cfg.engine` once over `stream` (or a live generator when `None`).
pub fn run_once(
    cfg: &ExperimentConfig,
    store: &Arc<MasterStore>,
    stream: Option<&Arc<[StreamRecord]>>,
    rep: usize,
) -> Result<RunReport> {
    let engine_cfg = cfg.engine_config().context("budget")?;
    let source: Box<dyn StreamSource> = match stream {
        Some(s) => Box::new(ReplaySource::new(s.clone())),
        None => Box::new(zipf_stream(cfg, store, rep)?),
    };
    run_engine(cfg.engine, store.clone(), source, &engine_cfg).with_context(|| format!("engine {}", cfg.engine))
}

/// Reports of every repetition of one cell, per engine. Repetitions are
/// interleaved across engines (rep 0 of each engine, then rep 1, ...) so slow
/// drift in the machine spreads evenly; all engines see the same stream in a
/// given repetition. An engine that fails is not retried in later reps.
pub fn run_cell(
    cfg: &ExperimentConfig,
    engines: &[EngineKind],
    mut on_report: impl FnMut(EngineKind, usize, &RunReport),
) -> Vec<(EngineKind, Result<Vec<RunReport>>)> {
    let mut results: Vec<(EngineKind, Result<Vec<RunReport>>)> =
        engines.iter().map(|&e| (e, Ok(Vec::new()))).collect();
    let store = match open_master(cfg) {
        Ok(s) => s,
        Err(e) => {
            let msg = format!("{e:#}");
            return engines.iter().map(|&k| (k, Err(anyhow::anyhow!(msg.clone())))).collect();
        }
    };
    for rep in 0..cfg.reps {
        let stream = match build_stream(cfg, &store, rep) {
            Ok(s) => s,
            Err(e) => {
                let msg = format!("{e:#}");
                for r in results.iter_mut() {
                    if r.1.is_ok() {
                        r.1 = Err(anyhow::anyhow!(msg.clone()));
                    }
                }
                break;
            }
        };
        for (kind, slot) in results.iter_mut() {
            let Ok(reports) = slot else { continue };
            let mut c = cfg.clone();
            c.engine = *kind;
            match c.validate().and_then(|_| run_once(&c, &store, stream.as_ref(), rep)) {
                Ok(r) => {
                    on_report(*kind, rep, &r);
                    reports.push(r);
                }
                Err(e) => *slot = Err(e),
            }
        }
    }
    results
}

/// One CSV row: an engine's aggregate over the repetitions of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub axis_value: f64,
    pub engine: String,
    pub reps: usize,
    pub mu_mean: f64,
    pub mu_std: f64,
    pub omega_n_mean: f64,
    pub omega_s_mean: f64,
    pub c_loop_mean_s: f64,
    pub cache_hit_ratio: f64,
    pub dp_stall_ns: f64,
    pub orphans: f64,
    /// Empty unless the cell failed; numeric cells are then zero.
    pub error: String,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "axis_value",
    "engine",
    "reps",
    "mu_mean",
    "mu_std",
    "omega_n_mean",
    "omega_s_mean",
    "c_loop_mean_s",
    "cache_hit_ratio",
    "dp_stall_ns",
    "orphans",
    "error",
];

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl Row {
    pub fn from_reports(axis_value: f64, engine: EngineKind, reports: &[RunReport]) -> Row {
        let per = |f: fn(&RunReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        let mus = per(RunReport::mu);
        Row {
            axis_value,
            engine: engine.name().into(),
            reps: reports.len(),
            mu_mean: mean(&mus),
            mu_std: sample_std(&mus),
            omega_n_mean: mean(&per(RunReport::mean_omega_n)),
            omega_s_mean: mean(&per(RunReport::mean_omega_s)),
            c_loop_mean_s: mean(&per(RunReport::mean_c_loop_s)),
            cache_hit_ratio: mean(&per(RunReport::cache_hit_ratio)),
            dp_stall_ns: mean(&per(RunReport::mean_stall_ns)),
            orphans: mean(&per(|r| r.orphans_dropped as f64)),
            error: String::new(),
        }
    }

    pub fn failed(axis_value: f64, engine: EngineKind, error: &anyhow::Error) -> Row {
        Row {
            axis_value,
            engine: engine.name().into(),
            reps: 0,
            mu_mean: 0.0,
            mu_std: 0.0,
            omega_n_mean: 0.0,
            omega_s_mean: 0.0,
            c_loop_mean_s: 0.0,
            cache_hit_ratio: 0.0,
            dp_stall_ns: 0.0,
            orphans: 0.0,
            error: format!("{error:#}").replace(['\n', '\r'], " "),
        }
    }

    pub fn is_error(&self) -> bool {
        !self.error.is_empty()
    }

    pub fn numeric_cells(&self) -> [f64; 10] {
        [
            self.axis_value,
            self.reps as f64,
            self.mu_mean,
            self.mu_std,
            self.omega_n_mean,
            self.omega_s_mean,
            self.c_loop_mean_s,
            self.cache_hit_ratio,
            self.dp_stall_ns,
            self.orphans,
        ]
    }
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        debug_assert!(r.numeric_cells().iter().all(|x| x.is_finite()));
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Warnings about a report: too few post-warmup iterations, invariant failures.
pub fn report_warnings(report: &RunReport) -> Vec<String> {
    let mut w = Vec::new();
    let steady = report.steady_iterations();
    if steady < MIN_STEADY_ITERATIONS {
        w.push(format!(
            "{}: only {steady} post-warmup iterations (want at least {MIN_STEADY_ITERATIONS}); the stream ended first",
            report.engine
        ));
    }
    for v in &report.invariant_violations {
        w.push(format!("{}: invariant violated: {v}", report.engine));
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_matches_textbook() {
        assert_eq!(sample_std(&[5.0]), 0.0);
        let s = sample_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn failed_rows_are_finite_and_single_line() {
        let r = Row::failed(1.0, EngineKind::CacheJoin, &anyhow::anyhow!("a\nb"));
        assert!(r.is_error());
        assert!(r.numeric_cells().iter().all(|x| x.is_finite()));
        assert_eq!(r.error, "a b");
    }
}
