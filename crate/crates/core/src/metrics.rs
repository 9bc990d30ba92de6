//! Multi-label evaluation: per-class average precision and mAP, micro/macro
//! F1, prediction correlation matrices, and k-nearest-neighbour retrieval.
//!
//! All matrices are row-major slices: `[n, q]` for scores and labels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision threshold for F1 scores unless overridden.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Non-interpolated AP: mean of precision@r over the ranks r of positives,
/// scores sorted descending with ties broken by ascending index. `None` when
/// there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep ascending index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

fn column<T: Copy>(m: &[T], q: usize, k: usize) -> Vec<T> {
    m.iter().skip(k).step_by(q).copied().collect()
}

fn check_matrix(name: &str, len: usize, n: usize, q: usize) -> Result<()> {
    if len != n * q {
        return Err(Error::config(format!("{name}: {len} entries for a {n}x{q} matrix")));
    }
    Ok(())
}

/// Per-class AP and their mean over classes that have at least one positive.
pub fn mean_average_precision(scores: &[f64], labels: &[u8], n: usize, q: usize) -> Result<(f64, Vec<Option<f64>>)> {
    check_matrix("scores", scores.len(), n, q)?;
    check_matrix("labels", labels.len(), n, q)?;
    let per_class: Vec<Option<f64>> = (0..q)
        .map(|k| average_precision(&column(scores, q, k), &column(labels, q, k)))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok((map, per_class))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Micro F1 over all (instance, class) decisions.
    pub of1: f64,
    /// Macro F1: per-class F1 averaged over all classes.
    pub cf1: f64,
    /// Classes with no true and no predicted positives; they score 0.
    pub zero_division_classes: usize,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Predictions are `probs >= threshold`.
pub fn f1_scores(probs: &[f64], labels: &[u8], n: usize, q: usize, threshold: f64) -> Result<F1Scores> {
    check_matrix("probs", probs.len(), n, q)?;
    check_matrix("labels", labels.len(), n, q)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut per_class = vec![(0usize, 0usize, 0usize); q];
    for (idx, (&p, &y)) in probs.iter().zip(labels).enumerate() {
        let c = &mut per_class[idx % q];
        match (p >= threshold, y == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    let (tp, fp, fn_) = per_class
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let mut zero_division_classes = 0;
    let cf1 = per_class
        .iter()
        .map(|&(tp, fp, fn_)| {
            f1(tp, fp, fn_).unwrap_or_else(|| {
                zero_division_classes += 1;
                0.0
            })
        })
        .sum::<f64>()
        / q as f64;
    Ok(F1Scores {
        of1: f1(tp, fp, fn_).unwrap_or(0.0),
        cf1,
        zero_division_classes,
    })
}

/// Pearson correlation between the class columns of `[n, q]` probabilities.
/// A constant column correlates 0 with others and 1 with itself.
pub fn correlation_matrix(probs: &[f64], n: usize, q: usize) -> Result<Vec<f64>> {
    check_matrix("probs", probs.len(), n, q)?;
    if n < 2 {
        return Err(Error::config("correlation needs at least 2 rows"));
    }
    let centered: Vec<Vec<f64>> = (0..q)
        .map(|k| {
            let col = column(probs, q, k);
            let mean = col.iter().sum::<f64>() / n as f64;
            col.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0; q * q];
    for j in 0..q {
        out[j * q + j] = 1.0;
        for k in j + 1..q {
            let r = if norms[j] > 0.0 && norms[k] > 0.0 {
                let dot: f64 = centered[j].iter().zip(&centered[k]).map(|(a, b)| a * b).sum();
                (dot / (norms[j] * norms[k])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out[j * q + k] = r;
            out[k * q + j] = r;
        }
    }
    Ok(out)
}

/// Frobenius norm of `a − b`.
pub fn correlation_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(crate::tensor::TensorError::Shape {
            op: "correlation_diff",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        }
        .into());
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    /// Classes positive for both the query and this neighbour.
    pub shared_labels: Vec<usize>,
}

/// The `k` database rows nearest to `query` (Euclidean), ascending by
/// distance with ties broken by ascending index.
pub fn knn_retrieve(
    db: &[f64],
    db_labels: &[u8],
    n: usize,
    dim: usize,
    q: usize,
    query: &[f64],
    query_labels: Option<&[u8]>,
    k: usize,
) -> Result<Vec<Neighbor>> {
    check_matrix("database", db.len(), n, dim)?;
    check_matrix("database labels", db_labels.len(), n, q)?;
    if query.len() != dim {
        return Err(Error::config(format!("query has {} dims, database has {dim}", query.len())));
    }
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds database size {n}")));
    }
    let mut ranked: Vec<(f64, usize)> = db
        .chunks(dim)
        .enumerate()
        .map(|(i, row)| {
            let d = row.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (d, i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(distance, index)| {
            let row = &db_labels[index * q..(index + 1) * q];
            let shared_labels = match query_labels {
                Some(ql) => (0..q).filter(|&c| row[c] == 1 && ql[c] == 1).collect(),
                None => Vec::new(),
            };
            Neighbor {
                index,
                distance,
                shared_labels,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    /// `None` for classes without positives (excluded from `map`).
    pub per_class_ap: Vec<Option<f64>>,
    pub of1: f64,
    pub cf1: f64,
    pub threshold: f64,
    pub ap_convention: String,
    pub f1_zero_division_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_diff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<Vec<RetrievalRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub query: usize,
    pub neighbors: Vec<Neighbor>,
}

impl MetricsReport {
    pub fn compute(probs: &[f64], labels: &[u8], n: usize, q: usize, threshold: f64) -> Result<Self> {
        let (map, per_class_ap) = mean_average_precision(probs, labels, n, q)?;
        let f1 = f1_scores(probs, labels, n, q, threshold)?;
        Ok(Self {
            map,
            per_class_ap,
            of1: f1.of1,
            cf1: f1.cf1,
            threshold,
            ap_convention: "non-interpolated".to_string(),
            f1_zero_division_classes: f1.zero_division_classes,
            correlation: None,
            correlation_diff: None,
            retrieval: None,
        })
    }

    /// Per-class AP table (`class,ap` rows, `mAP` footer).
    pub fn ap_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,ap\n");
        for (k, ap) in self.per_class_ap.iter().enumerate() {
            let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            match ap {
                Some(v) => writeln!(out, "{name},{v:.6}").unwrap(),
                None => writeln!(out, "{name},undefined").unwrap(),
            }
        }
        writeln!(out, "mAP,{:.6}", self.map).unwrap();
        out
    }
}

/// Reshapes a flat `[q, q]` matrix into rows.
pub fn to_rows(m: &[f64], q: usize) -> Vec<Vec<f64>> {
    m.chunks(q).map(<[f64]>::to_vec).collect()
}
