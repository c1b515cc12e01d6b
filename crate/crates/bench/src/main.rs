use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cachejoin_bench::config::{ExperimentConfig, Preset};
use cachejoin_bench::experiment::{report_warnings, run_cell, write_rows, Row};
use cachejoin_bench::model::{format_comparison, load_report, PredictionFile};
use cachejoin_bench::plot::plot_csv;
use cachejoin_bench::sweep::{plot_data_path, run_sweep, Axis, SweepSpec};
use cachejoin_core::cost_model::{calibrate, CalibrationOptions, CostConstants};
use cachejoin_core::engines::EngineKind;
use cachejoin_core::master_store::generate_master;
use cachejoin_core::stream_source::{write_replay, ZipfSpec, ZipfStream};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cachejoin-bench", version, about = "Benchmark harness for the CACHEJOIN engine family")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a master file, and optionally a stream replay file.
    Gen(GenArgs),
    /// Run one engine on one configuration.
    Run(RunArgs),
    /// Vary one parameter and run every engine at each value.
    Sweep(SweepArgs),
    /// Measure the cost-model constants on this machine.
    Calibrate(CalibrateArgs),
    /// Predict c_loop and the service rate from a calibration file.
    Predict(PredictArgs),
    /// Compare a prediction with a measured run report.
    Compare(CompareArgs),
    /// Render a sweep CSV into a plot-data file and an SVG chart.
    Plot(PlotArgs),
}

/// Experiment settings: preset, then config file, then flags, then `--set`.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Starting point: desk (CI scale) or full.
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// key=value config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Extra key=value settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    engine: Option<EngineKind>,
    /// Existing master file (otherwise one of --r-size records is generated).
    #[arg(long)]
    master: Option<PathBuf>,
    #[arg(long)]
    r_size: Option<u64>,
    /// Total memory, e.g. 20MB.
    #[arg(long)]
    memory: Option<String>,
    /// Intermediate buffer size, e.g. 2MB.
    #[arg(long)]
    i_b: Option<String>,
    #[arg(long)]
    zipf: Option<f64>,
    #[arg(long)]
    stream_records: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// direct (bypass the page cache) or buffered.
    #[arg(long)]
    io: Option<String>,
    /// Where generated master files are kept.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl ConfigArgs {
    /// The resolved config and the keys that were set explicitly.
    fn resolve(&self) -> Result<(ExperimentConfig, BTreeSet<String>)> {
        let mut c = ExperimentConfig::preset(self.preset);
        let mut explicit = BTreeSet::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            c.merge_text(&text).with_context(|| format!("in {}", path.display()))?;
            explicit.extend(text.lines().filter_map(|l| l.split_once('=')).map(|(k, _)| k.trim().to_string()));
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        if let Some(v) = self.engine {
            flags.push(("engine", v.name().into()));
        }
        if let Some(v) = &self.master {
            flags.push(("master", v.display().to_string()));
        }
        if let Some(v) = self.r_size {
            flags.push(("r_size", v.to_string()));
        }
        if let Some(v) = &self.memory {
            flags.push(("memory", v.clone()));
        }
        if let Some(v) = &self.i_b {
            flags.push(("i_b", v.clone()));
        }
        if let Some(v) = self.zipf {
            flags.push(("zipf", v.to_string()));
        }
        if let Some(v) = self.stream_records {
            flags.push(("stream_records", v.to_string()));
        }
        if let Some(v) = self.reps {
            flags.push(("reps", v.to_string()));
        }
        if let Some(v) = self.seed {
            flags.push(("seed", v.to_string()));
        }
        if let Some(v) = &self.io {
            flags.push(("io", v.clone()));
        }
        if let Some(v) = &self.data_dir {
            flags.push(("data_dir", v.display().to_string()));
        }
        for (k, v) in flags {
            c.set(k, &v).with_context(|| format!("--{}", k.replace('_', "-")))?;
            explicit.insert(k.to_string());
        }
        for s in &self.sets {
            c.apply(s)?;
            if let Some((k, _)) = s.split_once('=') {
                explicit.insert(k.trim().to_string());
            }
        }
        Ok((c, explicit))
    }
}

#[derive(Args)]
struct GenArgs {
    /// Number of master records (keys 1..=N).
    #[arg(long)]
    records: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a Zipf stream replay file over the new master file.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, default_value_t = 500_000)]
    stream_records: u64,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long, default_value_t = 42)]
    stream_seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Append the aggregate row to this CSV (created with a header if new).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write each repetition's run report here (`.repN` inserted when reps > 1).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// rsize, memory (MB), skew or ib (MB).
    #[arg(long)]
    axis: Axis,
    /// Comma-separated axis values; defaults depend on the axis.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Comma-separated engines; defaults to every engine the axis applies to.
    #[arg(long, value_delimiter = ',')]
    engines: Vec<EngineKind>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Partition sizes to time loads for (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "850")]
    d_b: Vec<u64>,
    #[arg(long, default_value_t = 31)]
    trials: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Calibration file written by `calibrate`.
    #[arg(long)]
    calibration: PathBuf,
    /// pcachejoin or opcachejoin.
    #[arg(long)]
    engine: EngineKind,
    #[arg(long, default_value_t = 850)]
    d_b: u64,
    /// Mean cache hits per iteration.
    #[arg(long, requires = "omega_s", conflicts_with = "report")]
    omega_n: Option<f64>,
    /// Mean disk matches per iteration.
    #[arg(long, requires = "omega_n")]
    omega_s: Option<f64>,
    /// Take ω_N and ω_S from a run report instead.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    prediction: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Axis the CSV was swept over, for the x label.
    #[arg(long)]
    axis: Option<Axis>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Calibrate(a) => cmd_calibrate(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    if a.replay.is_some() && a.records == 0 {
        bail!("cannot generate a stream over an empty master relation (--records 0)");
    }
    let summary = generate_master(a.records, a.seed, &a.out).context("master_store")?;
    println!(
        "master {}: {} records, {} bytes, crc32 {:08x}",
        summary.path.display(),
        summary.record_count,
        summary.file_bytes,
        summary.checksum
    );
    if let Some(path) = a.replay {
        let store = cachejoin_core::master_store::open_master(&a.out).context("master_store")?;
        let mut z = ZipfStream::new(ZipfSpec::new(a.zipf, a.stream_seed), store.key_space()?).context("stream_source")?;
        let recs = z.next_batch(a.stream_records as usize);
        write_replay(&path, &recs).context("stream_source")?;
        println!("stream {}: {} records", path.display(), recs.len());
    }
    Ok(())
}

fn rep_path(path: &Path, rep: usize, reps: usize) -> PathBuf {
    if reps == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.rep{rep}.{ext}"),
        None => format!("{stem}.rep{rep}"),
    };
    path.with_file_name(name)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let (cfg, _) = a.cfg.resolve()?;
    cfg.validate()?;
    let mut written = Vec::new();
    let results = run_cell(&cfg, &[cfg.engine], |kind, rep, r| {
        eprintln!("{kind} rep {}/{}: mu={:.0} iterations={}", rep + 1, cfg.reps, r.mu(), r.iterations.len());
        for w in report_warnings(r) {
            eprintln!("warning: {w}");
        }
        if let Some(p) = &a.report {
            let path = rep_path(p, rep, cfg.reps);
            written.push(std::fs::write(&path, r.to_text()).with_context(|| format!("writing {}", path.display())));
        }
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let (kind, res) = results.into_iter().next().expect("one engine");
    let reports = res?;
    let row = Row::from_reports(0.0, kind, &reports);
    println!(
        "{kind}: mu={:.0} ±{:.0} rec/s, c_loop={:.3e}s, omega_n={:.1}, omega_s={:.1}, hit={:.3}, stall={:.0}ns, output={}",
        row.mu_mean,
        row.mu_std,
        row.c_loop_mean_s,
        row.omega_n_mean,
        row.omega_s_mean,
        row.cache_hit_ratio,
        row.dp_stall_ns,
        reports.iter().map(|r| r.total_output).sum::<u64>()
    );
    if let Some(path) = &a.csv {
        let mut rows = if path.exists() {
            cachejoin_bench::plot::read_rows(path)?
        } else {
            Vec::new()
        };
        rows.push(row);
        write_rows(path, &rows)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (mut base, explicit) = a.cfg.resolve()?;
    if a.axis == Axis::Ib && !explicit.contains("memory") {
        base.memory_bytes = Axis::IB_STUDY_MEMORY;
    }
    let values = if a.values.is_empty() { a.axis.default_values() } else { a.values };
    let engines = if a.engines.is_empty() { a.axis.default_engines() } else { a.engines };
    let spec = SweepSpec {
        axis: a.axis,
        values,
        engines,
        base,
    };
    let out = run_sweep(&spec, Some(&a.out), |m| eprintln!("{m}"))?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let failed = out.rows.iter().filter(|r| r.is_error()).count();
    println!(
        "wrote {} ({} rows, {failed} failed) and {}",
        a.out.display(),
        out.rows.len(),
        plot_data_path(&a.out).display()
    );
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let (cfg, _) = a.cfg.resolve()?;
    let store = cachejoin_bench::experiment::open_master(&cfg)?;
    let opts = CalibrationOptions {
        d_b_values: a.d_b,
        trials: a.trials,
        exponent: cfg.zipf,
        h_r: cfg.h_r as usize,
        probe_d_b: cfg.d_b,
        seed: cfg.seed,
        ..CalibrationOptions::default()
    };
    let cal = calibrate(&store, &opts).context("cost_model")?;
    for w in &cal.warnings {
        eprintln!("warning: {w}");
    }
    cal.constants.save(&a.out).context("cost_model")?;
    print!("{}", cal.constants.to_text());
    println!("# clock resolution {:.0} ns; wrote {}", cal.clock_resolution_ns, a.out.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let k = CostConstants::load(&a.calibration).context("cost_model")?;
    let (omega_n, omega_s) = match (&a.report, a.omega_n, a.omega_s) {
        (Some(p), _, _) => {
            let r = load_report(p)?;
            (r.mean_omega_n(), r.mean_omega_s())
        }
        (None, Some(n), Some(s)) => (n, s),
        _ => bail!("give --omega-n and --omega-s, or --report"),
    };
    let p = PredictionFile::new(&k, a.engine, a.d_b, omega_n, omega_s)?;
    let text = p.to_text();
    if let Some(out) = &a.out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let p = PredictionFile::load(&a.prediction)?;
    let r = load_report(&a.report)?;
    print!("{}", format_comparison(&p.compare(&r)?));
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let label = a.axis.map_or("axis value", |x| x.label());
    let (dat, svg) = plot_csv(&a.csv, &a.out_dir, label)?;
    println!("wrote {} and {}", dat.display(), svg.display());
    Ok(())
}
