//! Correlation analysis of an ablation: teacher and student prediction
//! correlation matrices and their Frobenius distances.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::experiments::AblationTable;
use crate::error::{Error, Result};
use crate::metrics::correlation_diff;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub row: String,
    pub seed: u64,
    pub matrix: Vec<Vec<f64>>,
    pub teacher_matrix: Vec<Vec<f64>>,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiff {
    pub row: String,
    pub mean_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// The first entries compare each teacher with itself (row "teacher").
    pub entries: Vec<CorrelationEntry>,
    pub rows: Vec<RowDiff>,
    /// Row with the smallest mean distance to the teacher.
    pub closest_row: String,
    pub augmentation_note: String,
}

fn matrix(m: &Option<Vec<Vec<f64>>>, what: &str) -> Result<Vec<Vec<f64>>> {
    m.clone().ok_or_else(|| Error::config(format!("{what} has no correlation matrix")))
}

pub fn correlation_report(table: &AblationTable) -> Result<CorrelationReport> {
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let teachers: Vec<Vec<Vec<f64>>> = table
        .teacher
        .iter()
        .map(|t| matrix(&t.test.correlation, "teacher run"))
        .collect::<Result<_>>()?;
    let mut push_row = |row: String, mats: Vec<(u64, Vec<Vec<f64>>)>| -> Result<()> {
        let mut sum = 0.0;
        for ((seed, m), t) in mats.iter().zip(&teachers) {
            let diff = correlation_diff(&m.concat(), &t.concat())?;
            sum += diff;
            entries.push(CorrelationEntry {
                row: row.clone(),
                seed: *seed,
                matrix: m.clone(),
                teacher_matrix: t.clone(),
                diff,
            });
        }
        rows.push(RowDiff {
            row,
            mean_diff: sum / mats.len().max(1) as f64,
        });
        Ok(())
    };
    push_row(
        "teacher".into(),
        table.teacher.iter().zip(&teachers).map(|(r, m)| (r.seed, m.clone())).collect(),
    )?;
    for r in &table.rows {
        let mats = r
            .runs
            .iter()
            .map(|run| Ok((run.seed, matrix(&run.test.correlation, "student run")?)))
            .collect::<Result<Vec<_>>>()?;
        push_row(r.label(), mats)?;
    }
    let closest_row = rows[1..]
        .iter()
        .min_by(|a, b| a.mean_diff.total_cmp(&b.mean_diff))
        .map(|r| r.row.clone())
        .unwrap_or_default();
    Ok(CorrelationReport {
        entries,
        rows,
        closest_row,
        augmentation_note: "strong augmentation uses flip, cutout and one of brightness shift, channel scale or translation in place of RandAugment".into(),
    })
}

impl CorrelationReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Correlation analysis\n\n| row | mean ||C_s - C_t||_F |\n|---|---|\n");
        for r in &self.rows {
            writeln!(out, "| {} | {:.6} |", r.row, r.mean_diff).unwrap();
        }
        writeln!(out, "\nClosest to the teacher: {}\n\nNote: {}.", self.closest_row, self.augmentation_note).unwrap();
        out
    }
}
