//! Prediction files for the predict / compare commands.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cachejoin_core::cost_model::{compare, predict_c_loop, Comparison, CostConstants, CostPrediction, Variant};
use cachejoin_core::engines::{EngineKind, RunReport};

pub fn variant_of(engine: EngineKind) -> Result<Variant> {
    match engine {
        EngineKind::PCacheJoin => Ok(Variant::P),
        EngineKind::OpCacheJoin => Ok(Variant::Op),
        EngineKind::CacheJoin => bail!("the cost model covers pcachejoin and opcachejoin only"),
    }
}

/// A prediction together with the inputs it was made for.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub engine: EngineKind,
    pub d_b: u64,
    pub omega_n: f64,
    pub omega_s: f64,
    pub prediction: CostPrediction,
}

impl PredictionFile {
    pub fn new(k: &CostConstants, engine: EngineKind, d_b: u64, omega_n: f64, omega_s: f64) -> Result<Self> {
        if !(omega_n >= 0.0 && omega_s >= 0.0 && omega_n.is_finite() && omega_s.is_finite()) {
            bail!("omega_n and omega_s must be finite and >= 0");
        }
        if d_b == 0 {
            bail!("d_b must be at least 1");
        }
        let prediction = predict_c_loop(k, d_b, omega_n, omega_s, variant_of(engine)?);
        Ok(Self {
            engine,
            d_b,
            omega_n,
            omega_s,
            prediction,
        })
    }

    pub fn to_text(&self) -> String {
        let p = &self.prediction;
        let mut s = String::new();
        let _ = writeln!(s, "engine={}", self.engine);
        let _ = writeln!(s, "d_b={}", self.d_b);
        let _ = writeln!(s, "omega_n={}", self.omega_n);
        let _ = writeln!(s, "omega_s={}", self.omega_s);
        let _ = writeln!(s, "c_loop_s={}", p.c_loop_s);
        let _ = writeln!(s, "mu={}", p.mu);
        let _ = writeln!(s, "io_term_s={}", p.io_term_s);
        let _ = writeln!(s, "probe_term_s={}", p.probe_term_s);
        let _ = writeln!(s, "omega_s_term_s={}", p.omega_s_term_s);
        let _ = writeln!(s, "omega_n_term_s={}", p.omega_n_term_s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut engine = None;
        let mut vals = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("line {}: expected key=value", i + 1))?;
            if k == "engine" {
                engine = Some(v.parse::<EngineKind>().with_context(|| format!("line {}", i + 1))?);
            } else {
                let x: f64 = v.parse().with_context(|| format!("line {}: {k} is not a number", i + 1))?;
                vals.insert(k.to_string(), x);
            }
        }
        let get = |k: &str| vals.get(k).copied().with_context(|| format!("prediction file lacks {k}"));
        Ok(Self {
            engine: engine.context("prediction file lacks engine")?,
            d_b: get("d_b")? as u64,
            omega_n: get("omega_n")?,
            omega_s: get("omega_s")?,
            prediction: CostPrediction {
                c_loop_s: get("c_loop_s")?,
                mu: get("mu")?,
                io_term_s: get("io_term_s")?,
                probe_term_s: get("probe_term_s")?,
                omega_s_term_s: get("omega_s_term_s")?,
                omega_n_term_s: get("omega_n_term_s")?,
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading prediction {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn compare(&self, report: &RunReport) -> Result<Comparison> {
        if report.engine != self.engine {
            bail!("prediction is for {} but the report is from {}", self.engine, report.engine);
        }
        Ok(compare(&self.prediction, report))
    }
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    RunReport::from_text(&text).with_context(|| format!("parsing report {}", path.display()))
}

pub fn format_comparison(c: &Comparison) -> String {
    format!(
        "c_loop predicted={:.3e}s measured={:.3e}s error={:.1}%\nmu     predicted={:.0} measured={:.0} error={:.1}%\n",
        c.predicted_c_loop_s,
        c.measured_c_loop_s,
        100.0 * c.c_loop_error,
        c.predicted_mu,
        c.measured_mu,
        100.0 * c.mu_error
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants() -> CostConstants {
        CostConstants {
            c_io: vec![(850, 70_000.0)],
            c_h: 30.0,
            c_o: 40.0,
            c_e: 300.0,
            c_s: 20.0,
            c_a: 130.0,
            c_f: 5.0,
            c_ab: 10.0,
        }
    }

    #[test]
    fn round_trip_and_ordering() {
        let k = constants();
        let p = PredictionFile::new(&k, EngineKind::PCacheJoin, 850, 200.0, 150.0).unwrap();
        let op = PredictionFile::new(&k, EngineKind::OpCacheJoin, 850, 200.0, 150.0).unwrap();
        assert!(op.prediction.c_loop_s < p.prediction.c_loop_s);
        assert_eq!(PredictionFile::from_text(&p.to_text()).unwrap(), p);
        assert!(PredictionFile::new(&k, EngineKind::CacheJoin, 850, 1.0, 1.0).is_err());
    }

    #[test]
    fn missing_fields_are_reported() {
        let e = PredictionFile::from_text("engine=pcachejoin\nd_b=850\n").unwrap_err();
        assert!(e.to_string().contains("omega_n"), "{e}");
        let e = PredictionFile::from_text("engine=pcachejoin\nd_b=x\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }
}
