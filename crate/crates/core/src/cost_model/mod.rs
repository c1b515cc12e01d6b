//! Analytical cost model for the parallel engines: per-iteration processing time,
//! service rate and memory, plus host calibration of the per-record costs.

mod calibrate;

use std::fmt::Write as _;
use std::path::Path;

pub use calibrate::{calibrate, Calibration, CalibrationOptions};

use crate::engines::RunReport;
use crate::error::{Error, Result};
use crate::join_structs::{plan_budget, BudgetRequest, MemoryBudget};

/// Per-record costs in nanoseconds, and partition load times per calibrated d_B.
#[derive(Debug, Clone, PartialEq)]
pub struct CostConstants {
    /// (d_B, nanoseconds to load d_B records), sorted by d_B.
    pub c_io: Vec<(u64, f64)>,
    /// Hash probe.
    pub c_h: f64,
    /// Emit one output record.
    pub c_o: f64,
    /// Delete from H_S and Q.
    pub c_e: f64,
    /// Read one record from a stream buffer.
    pub c_s: f64,
    /// Append to H_S and Q.
    pub c_a: f64,
    /// Frequency threshold comparison.
    pub c_f: f64,
    /// Append to I_B.
    pub c_ab: f64,
}

impl CostConstants {
    /// Load time for `d_b` records. Between calibrated sizes the value is
    /// interpolated linearly; outside them it scales per record from the nearest one.
    pub fn c_io(&self, d_b: u64) -> f64 {
        let pts = &self.c_io;
        match pts.iter().position(|&(d, _)| d >= d_b) {
            None => pts.last().map_or(0.0, |&(d, ns)| ns * d_b as f64 / d.max(1) as f64),
            Some(i) if pts[i].0 == d_b => pts[i].1,
            Some(0) => {
                let (d, ns) = pts[0];
                ns * d_b as f64 / d as f64
            }
            Some(i) => {
                let ((d0, n0), (d1, n1)) = (pts[i - 1], pts[i]);
                n0 + (n1 - n0) * (d_b - d0) as f64 / (d1 - d0) as f64
            }
        }
    }

    pub fn set_c_io(&mut self, d_b: u64, ns: f64) {
        match self.c_io.binary_search_by_key(&d_b, |&(d, _)| d) {
            Ok(i) => self.c_io[i].1 = ns,
            Err(i) => self.c_io.insert(i, (d_b, ns)),
        }
    }

    fn scalars(&self) -> [(&'static str, f64); 7] {
        [
            ("c_h", self.c_h),
            ("c_o", self.c_o),
            ("c_e", self.c_e),
            ("c_s", self.c_s),
            ("c_a", self.c_a),
            ("c_f", self.c_f),
            ("c_ab", self.c_ab),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# per-record costs in nanoseconds\n");
        for (k, v) in self.scalars() {
            let _ = writeln!(s, "{k}={v}");
        }
        for (d, ns) in &self.c_io {
            let _ = writeln!(s, "c_io.{d}={ns}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut k = CostConstants {
            c_io: Vec::new(),
            c_h: f64::NAN,
            c_o: f64::NAN,
            c_e: f64::NAN,
            c_s: f64::NAN,
            c_a: f64::NAN,
            c_f: f64::NAN,
            c_ab: f64::NAN,
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| Error::Config(format!("calibration line {}: {why}: {line:?}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let v: f64 = value.trim().parse().map_err(|_| bad("not a number"))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad("costs must be finite and non-negative"));
            }
            let slot = match key.trim() {
                "c_h" => &mut k.c_h,
                "c_o" => &mut k.c_o,
                "c_e" => &mut k.c_e,
                "c_s" => &mut k.c_s,
                "c_a" => &mut k.c_a,
                "c_f" => &mut k.c_f,
                "c_ab" => &mut k.c_ab,
                other => {
                    let d = other
                        .strip_prefix("c_io.")
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| bad("unknown key"))?;
                    k.set_c_io(d, v);
                    continue;
                }
            };
            *slot = v;
        }
        if let Some((name, _)) = k.scalars().into_iter().find(|(_, v)| v.is_nan()) {
            return Err(Error::Config(format!("calibration is missing {name}")));
        }
        if k.c_io.is_empty() {
            return Err(Error::Config("calibration has no c_io.<d_B> entry".into()));
        }
        Ok(k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!(
                "cannot read calibration file {}: {e} (run the calibrate command first)",
                path.display()
            ))
        })?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Synchronous partition loads.
    P,
    /// Double-buffered loads: half the I/O term.
    Op,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostPrediction {
    pub c_loop_s: f64,
    pub mu: f64,
    pub io_term_s: f64,
    pub probe_term_s: f64,
    pub omega_s_term_s: f64,
    pub omega_n_term_s: f64,
}

/// Processing time of one loop iteration.
pub fn predict_c_loop(k: &CostConstants, d_b: u64, omega_n: f64, omega_s: f64, variant: Variant) -> CostPrediction {
    let io = match variant {
        Variant::P => k.c_io(d_b),
        Variant::Op => 0.5 * k.c_io(d_b),
    };
    let io_term_s = 1e-9 * io;
    let probe_term_s = 1e-9 * d_b as f64 * (k.c_h + k.c_f);
    let omega_s_term_s = 1e-9 * omega_s * (k.c_o + k.c_s + k.c_a + k.c_e + k.c_ab);
    let omega_n_term_s = 1e-9 * omega_n * (k.c_h + k.c_o + k.c_s);
    let c_loop_s = io_term_s + probe_term_s + omega_s_term_s + omega_n_term_s;
    CostPrediction {
        c_loop_s,
        mu: predict_mu(omega_n, omega_s, c_loop_s).unwrap_or(0.0),
        io_term_s,
        probe_term_s,
        omega_s_term_s,
        omega_n_term_s,
    }
}

/// Service rate in records per second.
pub fn predict_mu(omega_n: f64, omega_s: f64, c_loop_s: f64) -> Result<f64> {
    if c_loop_s <= 0.0 || !c_loop_s.is_finite() {
        return Err(Error::Domain(format!("c_loop must be positive, got {c_loop_s}")));
    }
    Ok((omega_n + omega_s) / c_loop_s)
}

/// Memory breakdown of a variant: one disk buffer for P, two for OP.
pub fn predict_memory(total_bytes: u64, d_b: u64, h_r: u64, i_b_bytes: u64, variant: Variant) -> Result<MemoryBudget> {
    let n = match variant {
        Variant::P => 1,
        Variant::Op => 2,
    };
    plan_budget(&BudgetRequest::new(total_bytes, d_b, n, h_r, i_b_bytes))
}

/// |p - m| / m
pub fn relative_error(predicted: f64, measured: f64) -> f64 {
    if measured == 0.0 {
        return if predicted == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (predicted - measured).abs() / measured.abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub predicted_c_loop_s: f64,
    pub measured_c_loop_s: f64,
    pub c_loop_error: f64,
    pub predicted_mu: f64,
    pub measured_mu: f64,
    pub mu_error: f64,
}

pub fn compare(prediction: &CostPrediction, report: &RunReport) -> Comparison {
    let (mc, mm) = (report.mean_c_loop_s(), report.mu());
    Comparison {
        predicted_c_loop_s: prediction.c_loop_s,
        measured_c_loop_s: mc,
        c_loop_error: relative_error(prediction.c_loop_s, mc),
        predicted_mu: prediction.mu,
        measured_mu: mm,
        mu_error: relative_error(prediction.mu, mm),
    }
}

/// Prediction at the mean ω_N and ω_S a run actually observed.
pub fn predict_for_report(k: &CostConstants, report: &RunReport, d_b: u64, variant: Variant) -> CostPrediction {
    predict_c_loop(k, d_b, report.mean_omega_n(), report.mean_omega_s(), variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example() -> CostConstants {
        CostConstants {
            c_io: vec![(850, 1e7)],
            c_h: 100.0,
            c_o: 100.0,
            c_e: 100.0,
            c_s: 100.0,
            c_a: 100.0,
            c_f: 50.0,
            c_ab: 100.0,
        }
    }

    #[test]
    fn worked_examples() {
        let k = example();
        let p = predict_c_loop(&k, 850, 2000.0, 1000.0, Variant::P);
        assert!((p.c_loop_s - 0.0112275).abs() < 1e-12);
        let sum = p.io_term_s + p.probe_term_s + p.omega_s_term_s + p.omega_n_term_s;
        assert_eq!(sum, p.c_loop_s);
        let op = predict_c_loop(&k, 850, 2000.0, 1000.0, Variant::Op);
        assert!((op.c_loop_s - 0.0062275).abs() < 1e-12);
        let idle = predict_c_loop(&k, 850, 0.0, 0.0, Variant::P);
        assert!((idle.c_loop_s - 1e-9 * (1e7 + 850.0 * 150.0)).abs() < 1e-15);
        assert_eq!(idle.mu, 0.0);
    }

    #[test]
    fn mu_examples() {
        let mu = predict_mu(2000.0, 1000.0, 0.0112275).unwrap();
        assert!((mu - 267_201.07).abs() < 0.1);
        assert_eq!(predict_mu(0.0, 0.0, 0.5).unwrap(), 0.0);
        assert_eq!(predict_mu(4.0, 2.0, 0.5).unwrap(), 2.0 * predict_mu(2.0, 1.0, 0.5).unwrap());
        assert!(matches!(predict_mu(1.0, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn memory_variants() {
        let p = predict_memory(50 << 20, 850, 8738, 2 << 20, Variant::P).unwrap();
        let op = predict_memory(50 << 20, 850, 8738, 2 << 20, Variant::Op).unwrap();
        assert_eq!(p.disk_buffer_bytes(), 102_000);
        assert_eq!(op.disk_buffer_bytes(), 204_000);
        for b in [p, op] {
            let parts = b.disk_buffer_bytes() + b.cache_bytes() + b.ib_bytes() + b.hs_bytes() + b.queue_bytes();
            assert_eq!(parts + b.slack(), b.total_bytes);
        }
    }

    #[test]
    fn comparison_errors() {
        assert_eq!(relative_error(3.0, 3.0), 0.0);
        assert_eq!(relative_error(6.0, 3.0), 1.0);
        assert_eq!(relative_error(1.5, 3.0), 0.5);
    }

    #[test]
    fn io_interpolation() {
        let mut k = example();
        k.set_c_io(100, 2e6);
        assert_eq!(k.c_io(850), 1e7);
        assert_eq!(k.c_io(100), 2e6);
        assert_eq!(k.c_io(50), 1e6);
        assert_eq!(k.c_io(1700), 2e7);
        assert!((k.c_io(475) - 6e6).abs() < 1e-6);
    }

    #[test]
    fn text_round_trip() {
        let mut k = example();
        k.set_c_io(100, 123.5);
        assert_eq!(CostConstants::from_text(&k.to_text()).unwrap(), k);
        assert!(CostConstants::from_text("c_h=1\n").is_err());
        let err = CostConstants::from_text("c_h=x").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn missing_file_is_instructive() {
        let err = CostConstants::load("/nonexistent/cal.txt").unwrap_err().to_string();
        assert!(err.contains("calibrate"), "{err}");
    }

    fn constants() -> impl Strategy<Value = CostConstants> {
        (1e3..1e8f64, proptest::array::uniform7(0.0..1e3f64)).prop_map(|(io, c)| CostConstants {
            c_io: vec![(850, io)],
            c_h: c[0],
            c_o: c[1],
            c_e: c[2],
            c_s: c[3],
            c_a: c[4],
            c_f: c[5],
            c_ab: c[6],
        })
    }

    proptest! {
        #[test]
        fn op_cheaper_than_p(k in constants(), wn in 0.0..1e5f64, ws in 0.0..1e5f64) {
            let p = predict_c_loop(&k, 850, wn, ws, Variant::P);
            let op = predict_c_loop(&k, 850, wn, ws, Variant::Op);
            prop_assert!(op.c_loop_s < p.c_loop_s);
        }

        #[test]
        fn mu_decreases_in_every_constant(k in constants(), which in 0usize..8, bump in 1.0..1e3f64,
                                          wn in 1.0..1e5f64, ws in 1.0..1e5f64) {
            let mut k2 = k.clone();
            match which {
                0 => k2.c_io[0].1 += bump,
                1 => k2.c_h += bump,
                2 => k2.c_o += bump,
                3 => k2.c_e += bump,
                4 => k2.c_s += bump,
                5 => k2.c_a += bump,
                6 => k2.c_f += bump,
                _ => k2.c_ab += bump,
            }
            for v in [Variant::P, Variant::Op] {
                let a = predict_c_loop(&k, 850, wn, ws, v).mu;
                let b = predict_c_loop(&k2, 850, wn, ws, v).mu;
                prop_assert!(b < a);
            }
        }
    }
}
