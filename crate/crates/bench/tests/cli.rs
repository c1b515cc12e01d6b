use std::path::Path;
use std::process::{Command, Output};

fn bench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cachejoin-bench"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cachejoin-bench")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bench(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = bench(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error:"), "diagnostic missing: {err}");
    err
}

const SMALL: &[&str] = &["--memory", "3MB", "--i-b", "128KB", "--io", "buffered", "--reps", "1"];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

fn csv_lines(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_is_reproducible_and_validates() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--records", "2000", "--seed", "5", "--out", "a.cjm", "--replay", "a.rep", "--stream-records", "1000"]);
    ok(d.path(), &["gen", "--records", "2000", "--seed", "5", "--out", "b.cjm", "--replay", "b.rep", "--stream-records", "1000"]);
    let read = |n: &str| std::fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.cjm"), read("b.cjm"));
    assert_eq!(read("a.rep"), read("b.rep"));
    assert_eq!(read("a.rep").len(), 1000 * 20);
    ok(d.path(), &["gen", "--records", "2000", "--seed", "6", "--out", "c.cjm"]);
    assert_ne!(read("a.cjm"), read("c.cjm"));

    let err = fails(d.path(), &["gen", "--records", "0", "--out", "z.cjm", "--replay", "z.rep"]);
    assert!(err.contains("empty master"), "{err}");
}

#[test]
fn run_with_empty_stream_reports_zero_outputs() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--records", "1000", "--out", "m.cjm"]);
    let args = with(
        &["run", "--master", "m.cjm", "--engine", "opcachejoin", "--stream-records", "0", "--report", "r.txt"],
        SMALL,
    );
    let out = ok(d.path(), &args);
    assert!(out.contains("output=0"), "{out}");
    let report = std::fs::read_to_string(d.path().join("r.txt")).unwrap();
    assert!(report.contains("total_output=0"));
}

#[test]
fn cachejoin_rows_repeat_except_timing() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--records", "5000", "--out", "m.cjm"]);
    let args = with(
        &["run", "--master", "m.cjm", "--engine", "cachejoin", "--stream-records", "60000", "--seed", "9", "--csv", "out.csv"],
        SMALL,
    );
    ok(d.path(), &args);
    ok(d.path(), &args);
    let rows = csv_lines(&d.path().join("out.csv"));
    assert_eq!(rows.len(), 3);
    // axis_value, engine, reps, omega_n_mean, omega_s_mean, cache_hit_ratio, orphans, error
    for col in [0, 1, 2, 5, 6, 8, 10, 11] {
        assert_eq!(rows[1][col], rows[2][col], "column {}", rows[0][col]);
    }
}

/// μ in the report equals Σ(ω_N+ω_S)/Σ loop time recomputed from its iteration log.
#[test]
fn reported_mu_matches_iteration_log() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--records", "50000", "--out", "m.cjm"]);
    let args = with(
        &["run", "--master", "m.cjm", "--engine", "pcachejoin", "--stream-records", "600000", "--report", "r.txt"],
        SMALL,
    );
    ok(d.path(), &args);
    let text = std::fs::read_to_string(d.path().join("r.txt")).unwrap();
    let mut reported = None;
    let (mut done, mut ns, mut steady) = (0u64, 0u64, 0usize);
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("mu=") {
            reported = Some(v.parse::<f64>().unwrap());
        }
        if let Some(v) = line.strip_prefix("iter=") {
            let f: Vec<&str> = v.split(',').collect();
            if f[1] == "steady" {
                steady += 1;
                done += f[2].parse::<u64>().unwrap() + f[3].parse::<u64>().unwrap();
                ns += f[8].parse::<u64>().unwrap();
            }
        }
    }
    assert!(steady > 0, "run too short to have steady iterations");
    let recomputed = done as f64 / (ns as f64 * 1e-9);
    let reported = reported.unwrap();
    assert!((reported - recomputed).abs() <= 1e-3 * recomputed, "{reported} vs {recomputed}");
}

#[test]
fn sweep_writes_series_and_error_rows() {
    let d = tempfile::tempdir().unwrap();
    // 0.5 MB cannot hold H_R, so that cell fails and the sweep carries on.
    let args = with(
        &[
            "sweep", "--axis", "memory", "--values", "0.5,3,4", "--r-size", "4000", "--data-dir", "data",
            "--stream-records", "40000", "--out", "sw.csv",
        ],
        &["--i-b", "128KB", "--io", "buffered", "--reps", "2"],
    );
    ok(d.path(), &args);
    let rows = csv_lines(&d.path().join("sw.csv"));
    assert_eq!(rows[0].join(","), "axis_value,engine,reps,mu_mean,mu_std,omega_n_mean,omega_s_mean,c_loop_mean_s,cache_hit_ratio,dp_stall_ns,orphans,error");
    assert_eq!(rows.len(), 1 + 3 * 3);
    for r in &rows[1..] {
        let failed = r[0] == "0.5";
        assert_eq!(!r[11].is_empty(), failed, "{r:?}");
        if failed {
            assert!(r[11].contains("insufficient memory"), "{r:?}");
        } else {
            assert_eq!(r[2], "2");
        }
        for cell in r.iter().enumerate().filter(|(i, _)| *i != 1 && *i != 11).map(|(_, c)| c) {
            assert!(cell.parse::<f64>().unwrap().is_finite());
        }
    }
    let dat = std::fs::read_to_string(d.path().join("sw.dat")).unwrap();
    assert_eq!(dat.matches("# series").count(), 3);

    let out = ok(d.path(), &["plot", "--csv", "sw.csv", "--out-dir", "plots", "--axis", "memory"]);
    assert!(out.contains("sw.svg"));
    let svg1 = std::fs::read(d.path().join("plots/sw.svg")).unwrap();
    let dat1 = std::fs::read(d.path().join("plots/sw.dat")).unwrap();
    ok(d.path(), &["plot", "--csv", "sw.csv", "--out-dir", "plots", "--axis", "memory"]);
    assert_eq!(std::fs::read(d.path().join("plots/sw.svg")).unwrap(), svg1);
    assert_eq!(std::fs::read(d.path().join("plots/sw.dat")).unwrap(), dat1);
    let svg = String::from_utf8(svg1).unwrap();
    for e in ["cachejoin", "pcachejoin", "opcachejoin"] {
        assert!(svg.lines().any(|l| l.trim() == e), "legend lacks {e}");
    }
}

#[test]
fn plot_rejects_bad_csv() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("empty.csv"), "").unwrap();
    let err = fails(d.path(), &["plot", "--csv", "empty.csv", "--out-dir", "p"]);
    assert!(err.contains("empty"), "{err}");
    std::fs::write(
        d.path().join("bad.csv"),
        "axis_value,engine,reps,mu_mean,mu_std,omega_n_mean,omega_s_mean,c_loop_mean_s,cache_hit_ratio,dp_stall_ns,orphans,error\n\
         1,cachejoin,3,10,1,1,1,0.1,0.5,0,0,\n\
         2,cachejoin,3,10,1,1,1,0.1,0.5,0,0,\n\
         3,cachejoin,3,10,1,1\n",
    )
    .unwrap();
    let err = fails(d.path(), &["plot", "--csv", "bad.csv", "--out-dir", "p"]);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn predict_and_compare() {
    let d = tempfile::tempdir().unwrap();
    let err = fails(d.path(), &["predict", "--calibration", "missing.txt", "--engine", "pcachejoin", "--omega-n", "1", "--omega-s", "1"]);
    assert!(err.contains("calibrate"), "{err}");

    std::fs::write(
        d.path().join("cal.txt"),
        "c_h=30\nc_o=40\nc_e=300\nc_s=20\nc_a=130\nc_f=5\nc_ab=10\nc_io.850=70000\n",
    )
    .unwrap();
    let c_loop = |out: &str| -> f64 {
        out.lines().find_map(|l| l.strip_prefix("c_loop_s=")).unwrap().parse().unwrap()
    };
    let base = ["predict", "--calibration", "cal.txt", "--omega-n", "200", "--omega-s", "100", "--engine"];
    let p = c_loop(&ok(d.path(), &with(&base, &["pcachejoin"])));
    let op = c_loop(&ok(d.path(), &with(&base, &["opcachejoin"])));
    assert!(op < p);
    // 70µs + 850·35ns + 100·500ns + 200·90ns
    assert!((p - (70_000.0 + 850.0 * 35.0 + 100.0 * 500.0 + 200.0 * 90.0) * 1e-9).abs() < 1e-12);
    fails(d.path(), &with(&base, &["cachejoin"]));

    // A prediction equal to the measurement compares at zero error.
    ok(d.path(), &["gen", "--records", "3000", "--out", "m.cjm"]);
    let args = with(
        &["run", "--master", "m.cjm", "--engine", "pcachejoin", "--stream-records", "30000", "--report", "r.txt"],
        SMALL,
    );
    ok(d.path(), &args);
    let report = std::fs::read_to_string(d.path().join("r.txt")).unwrap();
    let field = |k: &str| report.lines().find_map(|l| l.strip_prefix(&format!("{k}="))).unwrap().to_string();
    let pred = format!(
        "engine=pcachejoin\nd_b=850\nomega_n={}\nomega_s={}\nc_loop_s={}\nmu={}\nio_term_s=0\nprobe_term_s=0\nomega_s_term_s=0\nomega_n_term_s=0\n",
        field("mean_omega_n"),
        field("mean_omega_s"),
        field("mean_c_loop_s"),
        field("mu")
    );
    std::fs::write(d.path().join("pred.txt"), pred).unwrap();
    let out = ok(d.path(), &["compare", "--prediction", "pred.txt", "--report", "r.txt"]);
    assert_eq!(out.matches("error=0.0%").count(), 2, "{out}");

    let err = fails(d.path(), &["compare", "--prediction", "nope.txt", "--report", "r.txt"]);
    assert!(err.contains("nope.txt"), "{err}");
}

#[test]
fn bad_config_is_reported() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.txt"), "engine=pcachejoin\nd_b=eight\n").unwrap();
    let err = fails(d.path(), &["run", "--config", "c.txt"]);
    assert!(err.contains("line 2"), "{err}");
    let err = fails(d.path(), &["run", "--set", "zipf=-1", "--stream-records", "10"]);
    assert!(err.contains("zipf"), "{err}");
}
