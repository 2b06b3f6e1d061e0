//! `report`: summary tables computed purely from stored run records.

use super::run::{runs_dir, StoredRun};
use super::{write_atomic, CommandError};
use crate::trainer::Method;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format `{s}` (csv or json)")),
        }
    }
}

/// Per-method averages over every stored run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub runs: usize,
    pub avg_dice: f64,
    /// Mean per-task forgetting in percent.
    pub avg_forgetting_pct: f64,
    /// Summed per-task forgetting (Dice units).
    pub total_forgetting: f64,
    pub wall_time_s: f64,
}

/// Forgetting of one task position in one order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderTaskRow {
    pub order: String,
    pub method: Method,
    pub position: usize,
    pub task_id: usize,
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub tiers: String,
    pub method: Method,
    pub runs: usize,
    pub avg_forgetting_pct: f64,
    pub total_forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub table3: Vec<MethodRow>,
    pub table4: Vec<OrderTaskRow>,
    pub fig2: Vec<TierRow>,
}

/// Complete runs below `root/runs`, sorted by id.
pub fn load_runs(root: &Path) -> Vec<StoredRun> {
    let Ok(entries) = std::fs::read_dir(runs_dir(root)) else {
        return Vec::new();
    };
    let mut runs: Vec<StoredRun> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| super::run::read_stored(&e.path().join("record.json")))
        .collect();
    runs.sort_by(|a, b| a.id.cmp(&b.id));
    runs
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn build_report(runs: &[StoredRun]) -> Report {
    let mut by_method: BTreeMap<Method, Vec<&StoredRun>> = BTreeMap::new();
    let mut by_order_task: BTreeMap<(String, Method, usize, usize), Vec<f64>> = BTreeMap::new();
    let mut by_tier: BTreeMap<(String, Method), Vec<&StoredRun>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.cell.method).or_default().push(r);
        by_tier.entry((r.cell.tiers.name().to_string(), r.cell.method)).or_default().push(r);
        for (pos, &f) in r.record.eval.per_task_forgetting.iter().enumerate() {
            by_order_task
                .entry((r.cell.order.clone(), r.cell.method, pos, r.record.order[pos]))
                .or_default()
                .push(f);
        }
    }
    let table3 = by_method
        .into_iter()
        .map(|(method, rs)| MethodRow {
            method,
            runs: rs.len(),
            avg_dice: mean(rs.iter().map(|r| r.record.eval.average_dice)),
            avg_forgetting_pct: mean(rs.iter().map(|r| r.record.eval.forgetting_mean_pct)),
            total_forgetting: mean(rs.iter().map(|r| r.record.eval.forgetting_total)),
            wall_time_s: mean(rs.iter().map(|r| r.record.wall_time_s)),
        })
        .collect();
    let table4 = by_order_task
        .into_iter()
        .map(|((order, method, position, task_id), fs)| OrderTaskRow {
            order,
            method,
            position,
            task_id,
            forgetting: mean(fs.into_iter()),
        })
        .collect();
    let fig2 = by_tier
        .into_iter()
        .map(|((tiers, method), rs)| TierRow {
            tiers,
            method,
            runs: rs.len(),
            avg_forgetting_pct: mean(rs.iter().map(|r| r.record.eval.forgetting_mean_pct)),
            total_forgetting: mean(rs.iter().map(|r| r.record.eval.forgetting_total)),
        })
        .collect();
    Report { table3, table4, fig2 }
}

impl Report {
    pub fn table3_csv(&self) -> String {
        let mut s = String::from("method,runs,avg_dice,avg_forgetting_pct,total_forgetting,wall_time_s\n");
        for r in &self.table3 {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.3}",
                r.method, r.runs, r.avg_dice, r.avg_forgetting_pct, r.total_forgetting, r.wall_time_s
            );
        }
        s
    }

    pub fn table4_csv(&self) -> String {
        let mut s = String::from("order,method,position,task_id,forgetting\n");
        for r in &self.table4 {
            let _ = writeln!(s, "{},{},{},{},{:.6}", r.order, r.method, r.position, r.task_id, r.forgetting);
        }
        s
    }

    pub fn fig2_csv(&self) -> String {
        let mut s = String::from("tiers,method,runs,avg_forgetting_pct,total_forgetting\n");
        for r in &self.fig2 {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.tiers, r.method, r.runs, r.avg_forgetting_pct, r.total_forgetting);
        }
        s
    }
}

/// Writes the tables to `root/report/` and returns the files written.
pub fn cmd_report(root: &Path, format: ReportFormat) -> Result<(Report, Vec<PathBuf>), CommandError> {
    let runs = load_runs(root);
    if runs.is_empty() {
        return Err(CommandError::NoRuns(root.to_path_buf()));
    }
    let report = build_report(&runs);
    let dir = root.join("report");
    std::fs::create_dir_all(&dir)?;
    let files: Vec<(PathBuf, String)> = match format {
        ReportFormat::Csv => vec![
            (dir.join("table3.csv"), report.table3_csv()),
            (dir.join("table4.csv"), report.table4_csv()),
            (dir.join("fig2.csv"), report.fig2_csv()),
        ],
        ReportFormat::Json => vec![(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")],
    };
    for (path, body) in &files {
        write_atomic(path, body.as_bytes())?;
    }
    Ok((report, files.into_iter().map(|(p, _)| p).collect()))
}
