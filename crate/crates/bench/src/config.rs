//! Experiment configuration: line-oriented `key=value` files with overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use cachejoin_core::engines::{EngineConfig, EngineKind, StopCondition};
use cachejoin_core::join_structs::budget::{
    DEFAULT_CACHE_RECORDS, DEFAULT_IB_BYTES, DEFAULT_PARTITION_RECORDS, MB, V_S,
};
use cachejoin_core::join_structs::{plan_budget, Alpha, BudgetRequest, MemoryBudget};
use cachejoin_core::master_store::IoMode;
use cachejoin_core::stream_source::DEFAULT_STREAM_BUFFER_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small enough for CI: R = 100k, M = 20 MB, 500k stream records.
    Desk,
    /// R = 2M, M = 50 MB, 10M stream records.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => bail!("unknown preset {s:?} (expected desk or full)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub engine: EngineKind,
    /// Existing master file. When unset, one with `r_size` records is generated
    /// (once) under `data_dir`.
    pub master: Option<PathBuf>,
    pub r_size: u64,
    pub master_seed: u64,
    pub data_dir: PathBuf,
    pub memory_bytes: u64,
    pub d_b: u64,
    pub h_r: u64,
    pub i_b_bytes: u64,
    pub alpha: Alpha,
    pub threshold: u64,
    pub accumulate_frequency: bool,
    pub zipf: f64,
    pub orphan_rate: f64,
    /// Replay this stream file instead of generating one.
    pub replay: Option<PathBuf>,
    pub stream_records: Option<u64>,
    pub duration_s: Option<f64>,
    pub warmup: usize,
    pub seed: u64,
    pub reps: usize,
    pub io: IoMode,
    pub stream_buffer_bytes: u64,
    pub check_invariants: bool,
    /// Run SP at the lowest scheduling priority.
    pub sp_background: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Parses a byte size: a plain integer, or a number with a `B`, `KB`, `MB` or `GB`
/// suffix (powers of 1024). Fractions are allowed with a suffix.
pub fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let upper = t.to_ascii_uppercase();
    let (num, mult) = [("GB", 1u64 << 30), ("MB", 1 << 20), ("KB", 1 << 10), ("B", 1)]
        .iter()
        .find_map(|(suf, m)| upper.strip_suffix(suf).map(|n| (n.trim().to_string(), *m)))
        .unwrap_or((upper.clone(), 1));
    if let Ok(v) = num.parse::<u64>() {
        return v.checked_mul(mult).with_context(|| format!("size {s:?} overflows"));
    }
    let v: f64 = num.parse().with_context(|| format!("invalid size {s:?}"))?;
    if !(v >= 0.0 && v.is_finite()) {
        bail!("invalid size {s:?}");
    }
    Ok((v * mult as f64).round() as u64)
}

fn format_size(bytes: u64) -> String {
    if bytes > 0 && bytes % MB == 0 {
        format!("{}MB", bytes / MB)
    } else if bytes > 0 && bytes % 1024 == 0 {
        format!("{}KB", bytes / 1024)
    } else {
        bytes.to_string()
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("expected a boolean, got {v:?}"),
    }
}

fn parse_opt<T: std::str::FromStr>(v: &str) -> Result<Option<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        Ok(Some(v.parse()?))
    }
}

pub const KEYS: &[&str] = &[
    "engine",
    "master",
    "r_size",
    "master_seed",
    "data_dir",
    "memory",
    "d_b",
    "h_r",
    "i_b",
    "alpha",
    "threshold",
    "accumulate_frequency",
    "zipf",
    "orphan_rate",
    "replay",
    "stream_records",
    "duration_s",
    "warmup",
    "seed",
    "reps",
    "io",
    "stream_buffer",
    "check_invariants",
    "sp_background",
];

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            engine: EngineKind::OpCacheJoin,
            master: None,
            r_size: 100_000,
            master_seed: 1,
            data_dir: PathBuf::from("data"),
            memory_bytes: 20 * MB,
            d_b: DEFAULT_PARTITION_RECORDS,
            h_r: DEFAULT_CACHE_RECORDS,
            i_b_bytes: DEFAULT_IB_BYTES,
            alpha: Alpha::Auto,
            threshold: 2,
            accumulate_frequency: false,
            zipf: 1.0,
            orphan_rate: 0.0,
            replay: None,
            stream_records: Some(500_000),
            duration_s: None,
            warmup: 100,
            seed: 42,
            reps: 3,
            io: IoMode::Direct,
            stream_buffer_bytes: DEFAULT_STREAM_BUFFER_BYTES,
            check_invariants: false,
            sp_background: false,
        };
        if preset == Preset::Full {
            c.r_size = 2_000_000;
            c.memory_bytes = 50 * MB;
            c.stream_records = Some(10_000_000);
        }
        c
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "engine" => self.engine = v.parse()?,
            "master" => self.master = parse_opt(v)?,
            "r_size" => self.r_size = v.parse()?,
            "master_seed" => self.master_seed = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "memory" => self.memory_bytes = parse_size(v)?,
            "d_b" => self.d_b = v.parse()?,
            "h_r" => self.h_r = v.parse()?,
            "i_b" => self.i_b_bytes = parse_size(v)?,
            "alpha" => {
                self.alpha = if v == "auto" {
                    Alpha::Auto
                } else {
                    Alpha::Fixed(v.parse()?)
                }
            }
            "threshold" => self.threshold = v.parse()?,
            "accumulate_frequency" => self.accumulate_frequency = parse_bool(v)?,
            "zipf" => self.zipf = v.parse()?,
            "orphan_rate" => self.orphan_rate = v.parse()?,
            "replay" => self.replay = parse_opt(v)?,
            "stream_records" => self.stream_records = parse_opt(v)?,
            "duration_s" => self.duration_s = parse_opt(v)?,
            "warmup" => self.warmup = v.parse()?,
            "seed" => self.seed = v.parse()?,
            "reps" => self.reps = v.parse()?,
            "io" => {
                self.io = match v {
                    "direct" => IoMode::Direct,
                    "buffered" => IoMode::Buffered,
                    _ => bail!("expected direct or buffered, got {v:?}"),
                }
            }
            "stream_buffer" => self.stream_buffer_bytes = parse_size(v)?,
            "check_invariants" => self.check_invariants = parse_bool(v)?,
            "sp_background" => self.sp_background = parse_bool(v)?,
            other => bail!("unknown key {other:?} (known: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .with_context(|| format!("expected key=value, got {assignment:?}"))?;
        self.set(k, v).with_context(|| format!("setting {}", k.trim()))
    }

    /// Layers a config file over `self`. Blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply(line).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key));
        }
        s
    }

    /// The textual value of one setting, as accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
        match key {
            "engine" => self.engine.name().into(),
            "master" => opt(&self.master),
            "r_size" => self.r_size.to_string(),
            "master_seed" => self.master_seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "memory" => format_size(self.memory_bytes),
            "d_b" => self.d_b.to_string(),
            "h_r" => self.h_r.to_string(),
            "i_b" => format_size(self.i_b_bytes),
            "alpha" => match self.alpha {
                Alpha::Auto => "auto".into(),
                Alpha::Fixed(a) => a.to_string(),
            },
            "threshold" => self.threshold.to_string(),
            "accumulate_frequency" => self.accumulate_frequency.to_string(),
            "zipf" => self.zipf.to_string(),
            "orphan_rate" => self.orphan_rate.to_string(),
            "replay" => opt(&self.replay),
            "stream_records" => self.stream_records.map_or("none".into(), |n| n.to_string()),
            "duration_s" => self.duration_s.map_or("none".into(), |n| n.to_string()),
            "warmup" => self.warmup.to_string(),
            "seed" => self.seed.to_string(),
            "reps" => self.reps.to_string(),
            "io" => match self.io {
                IoMode::Direct => "direct".into(),
                IoMode::Buffered => "buffered".into(),
            },
            "stream_buffer" => format_size(self.stream_buffer_bytes),
            "check_invariants" => self.check_invariants.to_string(),
            "sp_background" => self.sp_background.to_string(),
            _ => String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.memory_bytes == 0 {
            bail!("memory must be positive");
        }
        if self.d_b == 0 {
            bail!("d_b must be at least 1");
        }
        if self.engine.uses_intermediate_buffer() && self.i_b_bytes < V_S {
            bail!("i_b must hold at least one stream record for {}", self.engine);
        }
        if self.master.is_none() && self.replay.is_none() && self.r_size == 0 {
            bail!("r_size must be positive when generating a master file");
        }
        if self.stream_records.is_none() && self.duration_s.is_none() && self.replay.is_none() {
            bail!("set stream_records, duration_s or replay so the run ends");
        }
        if let Some(d) = self.duration_s {
            if !(d > 0.0 && d.is_finite()) {
                bail!("duration_s must be positive");
            }
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            bail!("zipf exponent must be >= 0");
        }
        if !(0.0..1.0).contains(&self.orphan_rate) {
            bail!("orphan_rate must be in [0, 1)");
        }
        if self.reps == 0 {
            bail!("reps must be at least 1");
        }
        if self.stream_buffer_bytes < V_S {
            bail!("stream_buffer must hold at least one record");
        }
        Ok(())
    }

    /// I_B only exists in the parallel engines; CACHEJOIN gets that memory for H_S.
    pub fn effective_i_b_bytes(&self) -> u64 {
        if self.engine.uses_intermediate_buffer() {
            self.i_b_bytes
        } else {
            0
        }
    }

    pub fn budget(&self) -> Result<MemoryBudget> {
        let mut req = BudgetRequest::new(
            self.memory_bytes,
            self.d_b,
            self.engine.disk_buffers(),
            self.h_r,
            self.effective_i_b_bytes(),
        );
        req.alpha = self.alpha;
        Ok(plan_budget(&req)?)
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let mut c = EngineConfig::new(self.budget()?);
        c.threshold = self.threshold;
        c.accumulate_frequency = self.accumulate_frequency;
        c.warmup_iterations = self.warmup;
        c.stream_buffer_bytes = self.stream_buffer_bytes;
        c.check_invariants = self.check_invariants;
        c.sp_background = self.sp_background;
        c.stop = StopCondition {
            records: None,
            duration: self.duration_s.map(Duration::from_secs_f64),
        };
        Ok(c)
    }

    /// Path of the generated master file for the current `r_size` and seed.
    pub fn generated_master_path(&self) -> PathBuf {
        self.data_dir.join(format!("master_{}_{}.cjm", self.r_size, self.master_seed))
    }

    pub fn master_path(&self) -> PathBuf {
        self.master.clone().unwrap_or_else(|| self.generated_master_path())
    }
}
