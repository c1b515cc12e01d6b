//! One-parameter sweeps over |R|, M, Zipf exponent or I_B size.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Result};
use cachejoin_core::engines::EngineKind;
use cachejoin_core::join_structs::budget::MB;

use crate::config::ExperimentConfig;
use crate::experiment::{report_warnings, run_cell, write_rows, Row};
use crate::plot::write_plot_data;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Master relation size, in records.
    RSize,
    /// Total memory budget, in MB.
    Memory,
    /// Zipf exponent of the stream.
    Skew,
    /// Intermediate buffer size, in MB.
    Ib,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsize" => Ok(Axis::RSize),
            "memory" => Ok(Axis::Memory),
            "skew" => Ok(Axis::Skew),
            "ib" => Ok(Axis::Ib),
            _ => bail!("unknown axis {s:?} (expected rsize, memory, skew or ib)"),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::RSize => "rsize",
            Axis::Memory => "memory",
            Axis::Skew => "skew",
            Axis::Ib => "ib",
        }
    }

    /// The config key this axis varies.
    pub fn key(self) -> &'static str {
        match self {
            Axis::RSize => "r_size",
            Axis::Memory => "memory",
            Axis::Skew => "zipf",
            Axis::Ib => "i_b",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::RSize => "size of R (records)",
            Axis::Memory => "memory budget M (MB)",
            Axis::Skew => "Zipf exponent",
            Axis::Ib => "I_B size (MB)",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Axis::RSize => vec![500_000.0, 1_000_000.0, 1_500_000.0, 2_000_000.0],
            Axis::Memory => vec![50.0, 100.0, 150.0, 200.0, 250.0],
            Axis::Skew => vec![0.5, 0.75, 1.0],
            Axis::Ib => vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }

    /// Engines the axis applies to: I_B only exists in the parallel engines.
    pub fn default_engines(self) -> Vec<EngineKind> {
        match self {
            Axis::Ib => vec![EngineKind::PCacheJoin, EngineKind::OpCacheJoin],
            _ => EngineKind::ALL.to_vec(),
        }
    }

    /// Memory budget used when the I_B study is run without an explicit one.
    pub const IB_STUDY_MEMORY: u64 = 100 * MB;

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        ensure!(value.is_finite() && value >= 0.0, "{} value {value} must be finite and >= 0", self.name());
        match self {
            Axis::RSize => {
                ensure!(cfg.master.is_none(), "an rsize sweep generates its master files; unset master");
                ensure!(value >= 1.0 && value.fract() == 0.0, "rsize value {value} must be a positive integer");
                cfg.r_size = value as u64;
            }
            Axis::Memory => cfg.memory_bytes = (value * MB as f64).round() as u64,
            Axis::Skew => cfg.zipf = value,
            Axis::Ib => cfg.i_b_bytes = (value * MB as f64).round() as u64,
        }
        Ok(())
    }
}

/// The config with the swept key blanked, for checking that only it varies.
fn fixed_part(cfg: &ExperimentConfig, axis: Axis) -> String {
    cfg.to_text().lines().filter(|l| !l.starts_with(&format!("{}=", axis.key()))).collect::<Vec<_>>().join("\n")
}

pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub engines: Vec<EngineKind>,
    pub base: ExperimentConfig,
}

pub struct SweepOutput {
    pub rows: Vec<Row>,
    pub warnings: Vec<String>,
}

/// Runs every (value × engine) cell one at a time. Failed cells become error
/// rows and the sweep goes on. When `csv` is given it is rewritten after every
/// cell, and a plot-data file is written next to it at the end.
pub fn run_sweep(spec: &SweepSpec, csv: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<SweepOutput> {
    ensure!(!spec.values.is_empty(), "sweep needs at least one value");
    ensure!(!spec.engines.is_empty(), "sweep needs at least one engine");
    spec.base.validate()?;
    let fixed = fixed_part(&spec.base, spec.axis);
    let mut out = SweepOutput {
        rows: Vec::new(),
        warnings: Vec::new(),
    };
    for &v in &spec.values {
        let mut cfg = spec.base.clone();
        let cells = match spec.axis.apply(&mut cfg, v) {
            Ok(()) => {
                assert_eq!(fixed_part(&cfg, spec.axis), fixed, "sweep changed a fixed parameter");
                run_cell(&cfg, &spec.engines, |kind, rep, r| {
                    progress(&format!(
                        "{}={v} {kind} rep {}/{}: mu={:.0}",
                        spec.axis.name(),
                        rep + 1,
                        cfg.reps,
                        r.mu()
                    ))
                })
            }
            Err(e) => {
                let msg = format!("{e:#}");
                spec.engines.iter().map(|&k| (k, Err(anyhow::anyhow!(msg.clone())))).collect()
            }
        };
        for (kind, res) in cells {
            match res {
                Ok(reports) => {
                    for r in &reports {
                        out.warnings.extend(report_warnings(r).into_iter().map(|w| format!("{}={v}: {w}", spec.axis.name())));
                    }
                    out.rows.push(Row::from_reports(v, kind, &reports));
                }
                Err(e) => {
                    progress(&format!("{}={v} {kind}: failed: {e:#}", spec.axis.name()));
                    out.rows.push(Row::failed(v, kind, &e));
                }
            }
        }
        if let Some(path) = csv {
            write_rows(path, &out.rows)?;
        }
    }
    if let Some(path) = csv {
        write_plot_data(&out.rows, &plot_data_path(path))?;
    }
    Ok(out)
}

pub fn plot_data_path(csv: &Path) -> PathBuf {
    csv.with_extension("dat")
}
