//! Delimited tables, plot-ready curves and plain-text summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{RateReport, SmallBallEstimate};
use crate::metrics::MetricReport;

use super::fmt_f64;

pub enum Report<'a> {
    Rate(&'a RateReport),
    Metrics(&'a [MetricReport]),
    SmallBall(&'a [SmallBallEstimate]),
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt_f64)
}

/// Writes the files for `report` into `dir` and returns their paths.
pub fn emit_report(report: Report<'_>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match report {
        Report::Rate(r) => emit_rate(r, dir),
        Report::Metrics(m) => emit_metrics(m, dir),
        Report::SmallBall(s) => emit_smallball(s, dir),
    }
}

fn emit_rate(r: &RateReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let d = r.inclusion.first().map_or(0, Vec::len);
    let mut header: Vec<String> = ["n", "median_err", "q90_err", "joint_median_err", "proj_err", "replicates_ok"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=d).map(|k| format!("inclusion_{k}")));
    let rows: Vec<Vec<String>> = r
        .n_grid
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut row = vec![
                n.to_string(),
                fmt_f64(r.median_err[i]),
                fmt_f64(r.q90_err[i]),
                opt(r.joint_median_err.as_ref().map(|j| j[i])),
                fmt_f64(r.proj_err[i]),
                r.successes_at(i).len().to_string(),
            ];
            row.extend(r.inclusion[i].iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    let table = dir.join("rate_table.csv");
    write_table(&table, &header, &rows)?;

    let cell_header: Vec<String> = ["n", "replicate", "data_seed", "chain_seed", "median_err", "q90_err", "proj_err", "error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cell_rows: Vec<Vec<String>> = r
        .cells
        .iter()
        .map(|c| {
            let (med, q90, proj, err) = match &c.outcome {
                Ok(s) => (fmt_f64(s.median_err), fmt_f64(s.q90_err), fmt_f64(s.proj_err), String::new()),
                Err(e) => (String::new(), String::new(), String::new(), e.clone()),
            };
            vec![c.n.to_string(), c.replicate.to_string(), c.data_seed.to_string(), c.chain_seed.to_string(), med, q90, proj, err]
        })
        .collect();
    let cells = dir.join("rate_cells.csv");
    write_table(&cells, &cell_header, &cell_rows)?;

    let mut curve = String::new();
    for (n, e) in r.n_grid.iter().zip(&r.median_err) {
        writeln!(curve, "{} {}", fmt_f64((*n as f64).ln()), fmt_f64(e.ln())).expect("writing to a String");
    }
    let dat = dir.join("rate_curve.dat");
    write_text(&dat, &curve)?;

    let mut summary = String::new();
    let w = &mut summary;
    writeln!(w, "model: {}", r.kind).expect("writing to a String");
    writeln!(w, "metric: {}", r.metric).expect("writing to a String");
    writeln!(w, "theory exponent: {}", fmt_f64(r.theory_exponent)).expect("writing to a String");
    writeln!(w, "fitted slope: {}", fmt_f64(r.slope)).expect("writing to a String");
    writeln!(w, "slope 95% bootstrap interval: [{}, {}]", fmt_f64(r.slope_ci.0), fmt_f64(r.slope_ci.1))
        .expect("writing to a String");
    writeln!(w, "replicate success rate: {}", fmt_f64(r.success_rate)).expect("writing to a String");
    let txt = dir.join("summary.txt");
    write_text(&txt, &summary)?;
    Ok(vec![table, cells, dat, txt])
}

fn emit_metrics(m: &[MetricReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let header: Vec<String> = ["name", "value", "mc_se"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = m
        .iter()
        .map(|r| vec![r.name.clone(), fmt_f64(r.value), opt(r.mc_se)])
        .collect();
    let table = dir.join("metrics.csv");
    write_table(&table, &header, &rows)?;
    let mut summary = String::new();
    for r in m {
        match r.mc_se {
            Some(se) => writeln!(summary, "{}: {} (s.e. {})", r.name, fmt_f64(r.value), fmt_f64(se)),
            None => writeln!(summary, "{}: {}", r.name, fmt_f64(r.value)),
        }
        .expect("writing to a String");
    }
    let txt = dir.join("metrics_summary.txt");
    write_text(&txt, &summary)?;
    Ok(vec![table, txt])
}

fn emit_smallball(s: &[SmallBallEstimate], dir: &Path) -> Result<Vec<PathBuf>> {
    if let Some(w) = s.windows(2).find(|w| w[1].estimate < w[0].estimate) {
        return Err(Error::Domain(format!(
            "small-ball estimates decrease from ε = {} to ε = {}",
            w[0].eps, w[1].eps
        )));
    }
    let header: Vec<String> = ["eps", "estimate", "ci_lo", "ci_hi"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = s
        .iter()
        .map(|e| vec![fmt_f64(e.eps), fmt_f64(e.estimate), fmt_f64(e.ci.0), fmt_f64(e.ci.1)])
        .collect();
    let table = dir.join("smallball.csv");
    write_table(&table, &header, &rows)?;
    let mut curve = String::new();
    for e in s {
        writeln!(curve, "{} {}", fmt_f64(e.eps), fmt_f64(e.estimate)).expect("writing to a String");
    }
    let dat = dir.join("smallball.dat");
    write_text(&dat, &curve)?;
    Ok(vec![table, dat])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_smallball_curve_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let s = [
            SmallBallEstimate { eps: 0.1, estimate: 0.5, ci: (0.4, 0.6) },
            SmallBallEstimate { eps: 0.2, estimate: 0.4, ci: (0.3, 0.5) },
        ];
        assert!(emit_report(Report::SmallBall(&s), dir.path()).is_err());
    }

    #[test]
    fn metric_table_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m = [
            MetricReport::exact("norm_n", 0.5),
            MetricReport { name: "L2(G_x)".into(), value: 0.25, mc_se: Some(0.01) },
        ];
        let files = emit_report(Report::Metrics(&m), dir.path()).unwrap();
        let table = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(table.lines().count(), 3);
    }
}
