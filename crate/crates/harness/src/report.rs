//! Batch report: per-cell results, per-grid-point aggregates, and the CSV
//! table layout.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{CellResult, PhaseResult};
use crate::stats::{mean, median};
use crate::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub schema_version: u32,
    pub rng_algorithm: String,
    pub config: RunConfig,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    pub phase: Option<PhaseReport>,
    /// Set when the phase stage could not run at all.
    pub phase_error: Option<String>,
}

impl ErrorReport {
    pub fn failures(&self) -> usize {
        let phase = self
            .phase
            .as_ref()
            .map_or(0, |p| p.results.iter().filter(|r| r.error.is_some()).count());
        self.cells.iter().filter(|c| c.error.is_some()).count() + phase + usize::from(self.phase_error.is_some())
    }
}

/// Statistics over the systems of one `(N, Ne)` grid point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub ne: u64,
    pub systems: usize,
    pub failures: usize,
    pub mean_eps_max_omega0_pct: Option<f64>,
    pub median_eps_max_omega0_pct: Option<f64>,
    pub mean_eps_max_omega_opt_pct: Option<f64>,
    pub median_eps_max_omega_opt_pct: Option<f64>,
    pub mean_eps_med_a_pct: Option<f64>,
    pub mean_eps_med_b_pct: Option<f64>,
    pub mean_eps_med_c_pct: Option<f64>,
    pub mean_sigma2: Option<f64>,
    pub median_h_error_pct: Option<f64>,
    pub h_over_1pct: usize,
    pub h_over_5pct: usize,
    pub arrangements_correct: usize,
    pub refined: usize,
}

fn collect<F: Fn(&CellResult) -> Option<f64>>(cells: &[&CellResult], f: F) -> Vec<f64> {
    cells.iter().filter_map(|c| f(c)).filter(|x| x.is_finite()).collect()
}

pub fn aggregate_cells(cells: &[CellResult], n_list: &[usize], ne_list: &[u64]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &n in n_list {
        for &ne in ne_list {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.n == n && c.ne == ne).collect();
            let w0 = collect(&group, |c| c.eps_max_omega0_pct);
            let wo = collect(&group, |c| c.eps_max_omega_opt_pct);
            let h = collect(&group, |c| c.h_error_pct);
            out.push(Aggregate {
                n,
                ne,
                systems: group.len(),
                failures: group.iter().filter(|c| c.error.is_some()).count(),
                mean_eps_max_omega0_pct: mean(&w0),
                median_eps_max_omega0_pct: median(&w0),
                mean_eps_max_omega_opt_pct: mean(&wo),
                median_eps_max_omega_opt_pct: median(&wo),
                mean_eps_med_a_pct: mean(&collect(&group, |c| c.eps_med_a_pct)),
                mean_eps_med_b_pct: mean(&collect(&group, |c| c.eps_med_b_pct)),
                mean_eps_med_c_pct: mean(&collect(&group, |c| c.eps_med_c_pct)),
                mean_sigma2: mean(&collect(&group, |c| c.mean_sigma2)),
                median_h_error_pct: median(&h),
                h_over_1pct: h.iter().filter(|&&e| e > 1.0).count(),
                h_over_5pct: h.iter().filter(|&&e| e > 5.0).count(),
                arrangements_correct: group.iter().filter(|c| c.arrangement_correct == Some(true)).count(),
                refined: group.iter().filter(|c| c.refined).count(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Reconstruction error of the reference prior, in percent.
    pub reference_error_pct: Option<f64>,
    pub t_star: f64,
    pub imbalance: f64,
    pub results: Vec<PhaseResult>,
    pub aggregates: Vec<PhaseAggregate>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseAggregate {
    pub n: usize,
    pub ne: u64,
    pub systems: usize,
    pub failures: usize,
    pub median_h_error_pct: Option<f64>,
    pub h_over_1pct: usize,
    pub h_over_5pct: usize,
    pub low_confidence: usize,
}

pub fn aggregate_phase(results: &[PhaseResult], n_list: &[usize]) -> Vec<PhaseAggregate> {
    n_list
        .iter()
        .map(|&n| {
            let group: Vec<&PhaseResult> = results.iter().filter(|r| r.n == n).collect();
            let h: Vec<f64> = group.iter().filter_map(|r| r.h_error_pct).filter(|x| x.is_finite()).collect();
            PhaseAggregate {
                n,
                ne: group.first().map_or(0, |r| r.ne),
                systems: group.len(),
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                median_h_error_pct: median(&h),
                h_over_1pct: h.iter().filter(|&&e| e > 1.0).count(),
                h_over_5pct: h.iter().filter(|&&e| e > 5.0).count(),
                low_confidence: group.iter().filter(|r| r.low_confidence).count(),
            }
        })
        .collect()
}

/// One row of `tables.csv`; `table` is `grid` or `phase`.
#[derive(Debug, Serialize)]
struct TableRow {
    table: &'static str,
    n: usize,
    ne: u64,
    systems: usize,
    failures: usize,
    mean_eps_max_omega0_pct: Option<f64>,
    median_eps_max_omega0_pct: Option<f64>,
    mean_eps_max_omega_opt_pct: Option<f64>,
    median_eps_max_omega_opt_pct: Option<f64>,
    mean_eps_med_a_pct: Option<f64>,
    mean_eps_med_b_pct: Option<f64>,
    mean_eps_med_c_pct: Option<f64>,
    mean_sigma2: Option<f64>,
    median_h_error_pct: Option<f64>,
    h_over_1pct: usize,
    h_over_5pct: usize,
    arrangements_correct: Option<usize>,
}

pub fn write_tables(report: &ErrorReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for a in &report.aggregates {
        w.serialize(TableRow {
            table: "grid",
            n: a.n,
            ne: a.ne,
            systems: a.systems,
            failures: a.failures,
            mean_eps_max_omega0_pct: a.mean_eps_max_omega0_pct,
            median_eps_max_omega0_pct: a.median_eps_max_omega0_pct,
            mean_eps_max_omega_opt_pct: a.mean_eps_max_omega_opt_pct,
            median_eps_max_omega_opt_pct: a.median_eps_max_omega_opt_pct,
            mean_eps_med_a_pct: a.mean_eps_med_a_pct,
            mean_eps_med_b_pct: a.mean_eps_med_b_pct,
            mean_eps_med_c_pct: a.mean_eps_med_c_pct,
            mean_sigma2: a.mean_sigma2,
            median_h_error_pct: a.median_h_error_pct,
            h_over_1pct: a.h_over_1pct,
            h_over_5pct: a.h_over_5pct,
            arrangements_correct: Some(a.arrangements_correct),
        })?;
    }
    if let Some(p) = &report.phase {
        for a in &p.aggregates {
            w.serialize(TableRow {
                table: "phase",
                n: a.n,
                ne: a.ne,
                systems: a.systems,
                failures: a.failures,
                mean_eps_max_omega0_pct: None,
                median_eps_max_omega0_pct: None,
                mean_eps_max_omega_opt_pct: None,
                median_eps_max_omega_opt_pct: None,
                mean_eps_med_a_pct: None,
                mean_eps_med_b_pct: None,
                mean_eps_med_c_pct: None,
                mean_sigma2: None,
                median_h_error_pct: a.median_h_error_pct,
                h_over_1pct: a.h_over_1pct,
                h_over_5pct: a.h_over_5pct,
                arrangements_correct: None,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Human-readable summary of the aggregates.
pub fn write_summary<W: Write>(report: &ErrorReport, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "{:>6} {:>5} {:>4} {:>4} {:>10} {:>10} {:>8} {:>8} {:>8} {:>9} {:>4} {:>4} {:>5}",
        "N", "Ne", "sys", "fail", "w0 %", "wopt %", "a %", "b %", "c %", "H med %", ">1%", ">5%", "arr"
    )?;
    for a in &report.aggregates {
        writeln!(
            w,
            "{:>6} {:>5} {:>4} {:>4} {:>10} {:>10} {:>8} {:>8} {:>8} {:>9} {:>4} {:>4} {:>5}",
            a.n,
            a.ne,
            a.systems,
            a.failures,
            fmt(a.mean_eps_max_omega0_pct),
            fmt(a.mean_eps_max_omega_opt_pct),
            fmt(a.mean_eps_med_a_pct),
            fmt(a.mean_eps_med_b_pct),
            fmt(a.mean_eps_med_c_pct),
            fmt(a.median_h_error_pct),
            a.h_over_1pct,
            a.h_over_5pct,
            a.arrangements_correct
        )?;
    }
    if let Some(p) = &report.phase {
        writeln!(w, "phase stage: t* = {:.4}, imbalance = {:.4}", p.t_star, p.imbalance)?;
        for a in &p.aggregates {
            writeln!(
                w,
                "  N-1 = {:>5}, Ne = {:>5}: median {} %, >1%: {}, >5%: {}, failures {}",
                a.n - 1,
                a.ne,
                fmt(a.median_h_error_pct),
                a.h_over_1pct,
                a.h_over_5pct,
                a.failures
            )?;
        }
    }
    if let Some(e) = &report.phase_error {
        writeln!(w, "phase stage failed: {e}")?;
    }
    Ok(())
}
