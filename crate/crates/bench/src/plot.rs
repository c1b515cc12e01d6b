//! Sweep CSV reading, plot-data files and SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cachejoin_core::engines::EngineKind;
use plotters::prelude::*;

use crate::experiment::{Row, CSV_COLUMNS};

/// Reads a sweep CSV. Errors carry the 1-based line number of the offending row.
pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_rows(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_rows(text: &str) -> Result<Vec<Row>> {
    if text.trim().is_empty() {
        bail!("line 1: empty CSV (expected header {})", CSV_COLUMNS.join(","));
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| anyhow!("line 1: {e}"))?.clone();
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        bail!("line 1: unexpected header {:?} (expected {})", header.iter().collect::<Vec<_>>(), CSV_COLUMNS.join(","));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("line {line}: {e}")
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: Row = rec.deserialize(Some(&header)).map_err(|e| anyhow!("line {line}: {e}"))?;
        if row.numeric_cells().iter().any(|x| !x.is_finite()) {
            bail!("line {line}: non-finite numeric cell");
        }
        if row.engine.parse::<EngineKind>().is_err() {
            bail!("line {line}: unknown engine {:?}", row.engine);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("line 2: CSV has a header but no data rows");
    }
    Ok(rows)
}

/// Successful rows grouped by engine (in engine order), sorted by axis value.
pub fn series(rows: &[Row]) -> Vec<(EngineKind, Vec<(f64, f64, f64)>)> {
    let mut by: BTreeMap<usize, (EngineKind, Vec<(f64, f64, f64)>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_error()) {
        let Ok(kind) = r.engine.parse::<EngineKind>() else { continue };
        let idx = EngineKind::ALL.iter().position(|&k| k == kind).unwrap_or(usize::MAX);
        by.entry(idx).or_insert((kind, Vec::new())).1.push((r.axis_value, r.mu_mean, r.mu_std));
    }
    by.into_values()
        .map(|(k, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, pts)
        })
        .collect()
}

/// Whitespace-separated columns, one block per engine, blocks separated by a
/// blank line.
pub fn plot_data(rows: &[Row]) -> String {
    let mut s = String::from("# axis_value mu_mean mu_std\n");
    for (i, (kind, pts)) in series(rows).iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "# series {kind}");
        for (x, y, e) in pts {
            let _ = writeln!(s, "{x} {y:.3} {e:.3}");
        }
    }
    s
}

pub fn write_plot_data(rows: &[Row], path: &Path) -> Result<()> {
    std::fs::write(path, plot_data(rows)).with_context(|| format!("writing {}", path.display()))
}

fn color(kind: EngineKind) -> RGBColor {
    match kind {
        EngineKind::CacheJoin => RGBColor(0x1f, 0x77, 0xb4),
        EngineKind::PCacheJoin => RGBColor(0xff, 0x7f, 0x0e),
        EngineKind::OpCacheJoin => RGBColor(0x2c, 0xa0, 0x2c),
    }
}

/// Service rate against the swept value, one line per engine, with ±1 std bars.
pub fn render_svg(rows: &[Row], title: &str, x_label: &str, path: &Path) -> Result<()> {
    let series = series(rows);
    if series.is_empty() {
        bail!("no successful rows to plot");
    }
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y, e) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y + e);
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = (x1 - x0) * 0.05;
    let y1 = if y1 > 0.0 { y1 * 1.1 } else { 1.0 };

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    let err = |e: DrawingAreaErrorKind<_>| anyhow!("rendering {}: {e}", path.display());
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d((x0 - pad)..(x1 + pad), 0.0..y1)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("service rate (records/s)")
        .draw()
        .map_err(err)?;
    for (kind, pts) in &series {
        let c = color(*kind);
        chart
            .draw_series(LineSeries::new(pts.iter().map(|&(x, y, _)| (x, y)), c.stroke_width(2)))
            .map_err(err)?
            .label(kind.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&(x, y, _)| Circle::new((x, y), 3, c.filled())))
            .map_err(err)?;
        chart
            .draw_series(pts.iter().filter(|p| p.2 > 0.0).map(|&(x, y, e)| {
                PathElement::new(vec![(x, (y - e).max(0.0)), (x, y + e)], c)
            }))
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Renders a sweep CSV into `<out_dir>/<stem>.dat` and `<out_dir>/<stem>.svg`.
pub fn plot_csv(csv: &Path, out_dir: &Path, x_label: &str) -> Result<(PathBuf, PathBuf)> {
    let rows = read_rows(csv)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    let dat = out_dir.join(format!("{stem}.dat"));
    let svg = out_dir.join(format!("{stem}.svg"));
    write_plot_data(&rows, &dat)?;
    render_svg(&rows, stem, x_label, &svg)?;
    Ok((dat, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "axis_value,engine,reps,mu_mean,mu_std,omega_n_mean,omega_s_mean,c_loop_mean_s,cache_hit_ratio,dp_stall_ns,orphans,error\n";

    #[test]
    fn parse_errors_name_the_line() {
        let text = format!("{HEADER}1,cachejoin,3,10,1,1,1,0.1,0.5,0,0,\n2,cachejoin,3,ten,1,1,1,0.1,0.5,0,0,\n");
        let e = parse_rows(&text).unwrap_err().to_string();
        assert!(e.starts_with("line 3"), "{e}");
        assert!(parse_rows("").unwrap_err().to_string().contains("empty"));
        assert!(parse_rows(HEADER).unwrap_err().to_string().contains("no data rows"));
        let e = parse_rows("a,b\n1,2\n").unwrap_err().to_string();
        assert!(e.starts_with("line 1"), "{e}");
        let bad_engine = format!("{HEADER}1,hashjoin,3,10,1,1,1,0.1,0.5,0,0,\n");
        assert!(parse_rows(&bad_engine).unwrap_err().to_string().starts_with("line 2"));
    }

    #[test]
    fn series_skip_errors_and_sort() {
        let text = format!(
            "{HEADER}2,pcachejoin,3,20,1,1,1,0.1,0.5,0,0,\n1,pcachejoin,3,10,1,1,1,0.1,0.5,0,0,\n1,cachejoin,0,0,0,0,0,0,0,0,0,boom\n"
        );
        let rows = parse_rows(&text).unwrap();
        let s = series(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].1.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1.0, 2.0]);
    }
}
