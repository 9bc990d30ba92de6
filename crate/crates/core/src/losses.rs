//! Training objectives: BCE, multi-label logits distillation (binary KL per
//! class), class-aware and instance-aware label-wise embedding distillation,
//! their weighted combination, and the MSE / partial-softmax baselines.
//!
//! Every distillation loss detaches the teacher inputs itself, so callers may
//! pass live teacher tensors without leaking gradient into the teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelWiseEmbeddingSet;
use crate::tensor::{Real, Tensor, TensorError};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    #[default]
    None,
    Mse,
    Ps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda_mld: f64,
    pub lambda_cd: f64,
    pub lambda_id: f64,
    pub baseline: BaselineMode,
    /// Weight of the baseline term when `baseline` is not `none`.
    pub baseline_weight: f64,
    pub ps_temperature: f64,
    /// Divide CD/ID by their number of valid ordered pairs.
    pub normalize_pairs: bool,
    /// L2-normalize label-wise embeddings before taking distances.
    pub normalize_embeddings: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_mld: 10.0,
            lambda_cd: 100.0,
            lambda_id: 1000.0,
            baseline: BaselineMode::None,
            baseline_weight: 1.0,
            ps_temperature: 1.0,
            normalize_pairs: false,
            normalize_embeddings: false,
        }
    }
}

impl DistillConfig {
    /// All distillation weights zero: plain BCE.
    pub fn none() -> Self {
        Self {
            lambda_mld: 0.0,
            lambda_cd: 0.0,
            lambda_id: 0.0,
            ..Self::default()
        }
    }

    pub fn baseline(mode: BaselineMode) -> Self {
        Self {
            baseline: mode,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mld", self.lambda_mld),
            ("lambda_cd", self.lambda_cd),
            ("lambda_id", self.lambda_id),
            ("baseline_weight", self.baseline_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.ps_temperature.is_finite() && self.ps_temperature > 0.0) {
            return Err(Error::config(format!(
                "ps_temperature must be positive, got {}",
                self.ps_temperature
            )));
        }
        if self.baseline != BaselineMode::None && self.uses_l2d_terms() {
            return Err(Error::config(
                "a baseline distillation run cannot also enable MLD/CD/ID weights",
            ));
        }
        Ok(())
    }

    pub fn uses_l2d_terms(&self) -> bool {
        self.lambda_mld > 0.0 || self.lambda_cd > 0.0 || self.lambda_id > 0.0
    }
}

/// Binary ground truth `[b, q]`; every row has at least one positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    classes: usize,
    bits: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(bits: Vec<u8>, rows: usize, classes: usize) -> Result<Self> {
        if bits.len() != rows * classes || rows == 0 || classes == 0 {
            return Err(Error::config(format!(
                "label matrix: {} entries for {rows}x{classes}",
                bits.len()
            )));
        }
        if bits.iter().any(|&v| v > 1) {
            return Err(Error::config("label entries must be 0 or 1"));
        }
        if let Some(r) = bits.chunks(classes).position(|row| row.iter().all(|&v| v == 0)) {
            return Err(Error::config(format!("label row {r} has no positive label")));
        }
        Ok(Self { rows, classes, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize, k: usize) -> bool {
        self.bits[i * self.classes + k] == 1
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            self.bits.iter().map(|&v| T::lit(v as f64)).collect(),
            &[self.rows, self.classes],
        )
        .expect("validated shape")
    }

    fn check<T: Real>(&self, op: &'static str, t: &Tensor<T>) -> Result<()> {
        if t.shape().len() < 2 || t.shape()[..2] != [self.rows, self.classes] {
            return Err(TensorError::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![self.rows, self.classes],
            }
            .into());
        }
        Ok(())
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

fn clamp_prob<T: Real>(p: &Tensor<T>) -> Tensor<T> {
    p.clamp(T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS))
}

/// `−(1/b) Σᵢ Σₖ [y log ŷ + (1−y) log(1−ŷ)]`; classes are summed.
pub fn bce_loss<T: Real>(probs: &Tensor<T>, y: &LabelMatrix) -> Result<Tensor<T>> {
    y.check("bce_loss", probs)?;
    if probs.rank() != 2 {
        return Err(TensorError::Shape { op: "bce_loss", lhs: probs.shape().to_vec(), rhs: vec![y.rows, y.classes] }.into());
    }
    let p = clamp_prob(probs);
    let yt = y.to_tensor::<T>();
    let pos = yt.mul(&p.log()?)?;
    let neg = yt.rsub_scalar(T::one()).mul(&p.rsub_scalar(T::one()).log()?)?;
    let b = T::lit(y.rows as f64);
    Ok(pos.add(&neg)?.sum().mul_scalar(-T::one() / b))
}

/// `KL([p_t, 1−p_t] ‖ [p_s, 1−p_s])` in nats, after clamping.
pub fn binary_kl(p_t: f64, p_s: f64) -> f64 {
    let c = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (t, s) = (c(p_t), c(p_s));
    t * (t / s).ln() + (1.0 - t) * ((1.0 - t) / (1.0 - s)).ln()
}

/// `(1/b) Σᵢ Σₖ KL(ŷᵢₖᵀ ‖ ŷᵢₖˢ)` over per-class Bernoulli distributions.
pub fn mld_loss<T: Real>(probs_t: &Tensor<T>, probs_s: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mld_loss", probs_t, probs_s)?;
    if probs_s.rank() != 2 {
        return Err(TensorError::Shape { op: "mld_loss", lhs: probs_s.shape().to_vec(), rhs: vec![0, 0] }.into());
    }
    let b = T::lit(probs_s.shape()[0] as f64);
    let pt = clamp_prob(&probs_t.detach());
    let ps = clamp_prob(probs_s);
    let qt = pt.rsub_scalar(T::one());
    let qs = ps.rsub_scalar(T::one());
    let pos = pt.mul(&pt.log()?.sub(&ps.log()?)?)?;
    let neg = qt.mul(&qt.log()?.sub(&qs.log()?)?)?;
    Ok(pos.add(&neg)?.sum().mul_scalar(T::one() / b))
}

/// Unit-threshold Huber: ½(a−b)² if |a−b| ≤ 1, else |a−b| − ½.
pub fn huber(a: f64, b: f64) -> f64 {
    let r = (a - b).abs();
    if r <= 1.0 {
        0.5 * r * r
    } else {
        r - 0.5
    }
}

fn masked_distance(a: &[f64], b: &[f64], pos_a: bool, pos_b: bool) -> f64 {
    if pos_a && pos_b {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    } else {
        0.0
    }
}

/// Distance between two embeddings of one class from instances i and j;
/// zero unless both labels are positive.
pub fn phi_cd(e_i: &[f64], e_j: &[f64], y_ik: bool, y_jk: bool) -> f64 {
    masked_distance(e_i, e_j, y_ik, y_jk)
}

/// Distance between the embeddings of classes k and l of one instance;
/// zero unless both labels are positive.
pub fn phi_id(e_k: &[f64], e_l: &[f64], y_ik: bool, y_il: bool) -> f64 {
    masked_distance(e_k, e_l, y_ik, y_il)
}

fn l2_normalize<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = 1;
    let norm = x.norm_lastdim()?.reshape(&shape)?.add_scalar(T::lit(1e-12));
    Ok(x.div(&norm)?)
}

/// Huber consistency of masked pairwise distances within each group.
///
/// `teacher`, `student`: `[g, n, d]`; `mask`: `[g, n]` (1 = valid).
/// Sums over all ordered pairs (i, j) of every group.
fn structural_loss<T: Real>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    mask: &[u8],
    normalize_pairs: bool,
    normalize_embeddings: bool,
) -> Result<Tensor<T>> {
    let &[g, n, d] = student.shape() else {
        unreachable!("callers pass rank-3 embeddings")
    };
    let pair_mask: Vec<T> = (0..g)
        .flat_map(|gi| {
            let m = &mask[gi * n..(gi + 1) * n];
            (0..n).flat_map(move |i| (0..n).map(move |j| T::lit((m[i] & m[j]) as f64)))
        })
        .collect();
    let valid_pairs = (0..g)
        .map(|gi| {
            let c = mask[gi * n..(gi + 1) * n].iter().filter(|&&v| v == 1).count();
            c * c.saturating_sub(1)
        })
        .sum::<usize>();
    let pair_mask = Tensor::new(pair_mask, &[g, n, n])?;
    let phi = |e: &Tensor<T>| -> Result<Tensor<T>> {
        let e = if normalize_embeddings { l2_normalize(e)? } else { e.clone() };
        let dist = e.reshape(&[g, n, 1, d])?.l2_distance(&e.reshape(&[g, 1, n, d])?)?;
        Ok(dist.mul(&pair_mask)?)
    };
    let loss = phi(&teacher.detach())?.huber(&phi(student)?)?.sum();
    if normalize_pairs {
        if valid_pairs == 0 {
            return Ok(loss.mul_scalar(T::zero()));
        }
        return Ok(loss.mul_scalar(T::one() / T::lit(valid_pairs as f64)));
    }
    Ok(loss)
}

fn check_embeddings<T: Real>(
    op: &'static str,
    t: &LabelWiseEmbeddingSet<T>,
    s: &LabelWiseEmbeddingSet<T>,
    y: &LabelMatrix,
) -> Result<()> {
    same_shape(op, &t.0, &s.0)?;
    if s.0.rank() != 3 {
        return Err(TensorError::Shape { op, lhs: s.0.shape().to_vec(), rhs: vec![y.rows, y.classes, 0] }.into());
    }
    y.check(op, &s.0)
}

/// Class-aware structural loss: `Σₖ Σ_{i,j} huber(φᵀ(e_ik, e_jk), φˢ(e_ik, e_jk))`.
pub fn cd_loss<T: Real>(
    embs_t: &LabelWiseEmbeddingSet<T>,
    embs_s: &LabelWiseEmbeddingSet<T>,
    y: &LabelMatrix,
    cfg: &DistillConfig,
) -> Result<Tensor<T>> {
    check_embeddings("cd_loss", embs_t, embs_s, y)?;
    let (b, q) = (y.rows, y.classes);
    // group by class: [q, b, d]
    let mask: Vec<u8> = (0..q).flat_map(|k| (0..b).map(move |i| (i, k))).map(|(i, k)| y.get(i, k) as u8).collect();
    structural_loss(
        &embs_t.0.permute(&[1, 0, 2])?,
        &embs_s.0.permute(&[1, 0, 2])?,
        &mask,
        cfg.normalize_pairs,
        cfg.normalize_embeddings,
    )
}

/// Instance-aware structural loss: `Σᵢ Σ_{k,l} huber(φᵀ(e_ik, e_il), φˢ(e_ik, e_il))`.
pub fn id_loss<T: Real>(
    embs_t: &LabelWiseEmbeddingSet<T>,
    embs_s: &LabelWiseEmbeddingSet<T>,
    y: &LabelMatrix,
    cfg: &DistillConfig,
) -> Result<Tensor<T>> {
    check_embeddings("id_loss", embs_t, embs_s, y)?;
    structural_loss(&embs_t.0, &embs_s.0, y.bits(), cfg.normalize_pairs, cfg.normalize_embeddings)
}

/// Mean squared difference of teacher and student logits over all entries.
pub fn mse_baseline<T: Real>(logits_t: &Tensor<T>, logits_s: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mse_baseline", logits_t, logits_s)?;
    Ok(logits_t.detach().sub(logits_s)?.powi(2).mean())
}

/// Partial-softmax KL: for every (instance, positive label) pair, a softmax
/// over that positive together with all negatives of the instance, teacher
/// against student at temperature `t`, averaged over pairs. Instances with
/// no negatives contribute nothing.
pub fn ps_baseline<T: Real>(
    logits_t: &Tensor<T>,
    logits_s: &Tensor<T>,
    y: &LabelMatrix,
    temperature: f64,
) -> Result<Tensor<T>> {
    same_shape("ps_baseline", logits_t, logits_s)?;
    y.check("ps_baseline", logits_s)?;
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let q = y.classes;
    let excluded = T::lit(-1e9);
    let mut rows = Vec::new();
    let mut bias = Vec::new();
    for i in 0..y.rows {
        let row = y.row(i);
        if row.iter().all(|&v| v == 1) {
            continue;
        }
        for k in (0..q).filter(|&k| row[k] == 1) {
            rows.push(i);
            bias.extend((0..q).map(|j| if j == k || row[j] == 0 { T::zero() } else { excluded }));
        }
    }
    if rows.is_empty() {
        return Ok(logits_s.sum().mul_scalar(T::zero()));
    }
    let pairs = rows.len();
    let bias = Tensor::new(bias, &[pairs, q])?;
    let inv_t = T::one() / T::lit(temperature);
    let log_dist = |z: &Tensor<T>| -> Result<Tensor<T>> {
        Ok(z.select_rows(&rows)?.mul_scalar(inv_t).add(&bias)?.log_softmax_lastdim()?)
    };
    let lt = log_dist(&logits_t.detach())?;
    let ls = log_dist(logits_s)?;
    let pt = lt.exp();
    Ok(pt.mul(&lt.sub(&ls)?)?.sum().mul_scalar(T::one() / T::lit(pairs as f64)))
}

/// Per-term values of one objective evaluation (unweighted).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub bce: T,
    pub mld: T,
    pub cd: T,
    pub id: T,
    pub baseline: T,
    pub total: T,
}

impl<T: Real> LossBreakdown<T> {
    /// Recomputes the weighted total from the stored terms in the same order
    /// the objective accumulates them.
    pub fn recombine(&self, cfg: &DistillConfig) -> T {
        match cfg.baseline {
            BaselineMode::None => {
                self.bce
                    + T::lit(cfg.lambda_mld) * self.mld
                    + T::lit(cfg.lambda_cd) * self.cd
                    + T::lit(cfg.lambda_id) * self.id
            }
            _ => self.bce + T::lit(cfg.baseline_weight) * self.baseline,
        }
    }
}

/// Teacher-side inputs to a distillation objective.
pub struct TeacherSignals<'a, T: Real> {
    pub probs: &'a Tensor<T>,
    pub logits: &'a Tensor<T>,
    pub embeddings: &'a LabelWiseEmbeddingSet<T>,
}

/// Student-side inputs.
pub struct StudentSignals<'a, T: Real> {
    pub probs: &'a Tensor<T>,
    pub logits: &'a Tensor<T>,
    pub embeddings: &'a LabelWiseEmbeddingSet<T>,
}

/// `L_BCE + λ_MLD·L_MLD + λ_CD·L_CD + λ_ID·L_ID`, or `L_BCE + w·baseline` in
/// baseline mode. Terms with zero weight are still evaluated for the
/// breakdown, on detached inputs.
pub fn l2d_loss<T: Real>(
    student: &StudentSignals<'_, T>,
    y: &LabelMatrix,
    teacher: Option<&TeacherSignals<'_, T>>,
    cfg: &DistillConfig,
) -> Result<(Tensor<T>, LossBreakdown<T>)> {
    cfg.validate()?;
    let bce = bce_loss(student.probs, y)?;
    let mut total = bce.clone();
    let mut out = LossBreakdown {
        bce: bce.item(),
        ..Default::default()
    };
    let Some(teacher) = teacher else {
        if cfg.uses_l2d_terms() || cfg.baseline != BaselineMode::None {
            return Err(Error::config("distillation weights are set but no teacher was given"));
        }
        out.total = total.item();
        return Ok((total, out));
    };

    let weighted = |total: Tensor<T>, term: Tensor<T>, w: f64| -> Result<Tensor<T>> {
        Ok(total.add(&term.mul_scalar(T::lit(w)))?)
    };
    let maybe_detached = |e: &LabelWiseEmbeddingSet<T>, live: bool| {
        if live {
            e.clone()
        } else {
            LabelWiseEmbeddingSet(e.0.detach())
        }
    };

    match cfg.baseline {
        BaselineMode::None => {
            let ps = if cfg.lambda_mld > 0.0 { student.probs.clone() } else { student.probs.detach() };
            let mld = mld_loss(teacher.probs, &ps)?;
            let cd = cd_loss(teacher.embeddings, &maybe_detached(student.embeddings, cfg.lambda_cd > 0.0), y, cfg)?;
            let id = id_loss(teacher.embeddings, &maybe_detached(student.embeddings, cfg.lambda_id > 0.0), y, cfg)?;
            out.mld = mld.item();
            out.cd = cd.item();
            out.id = id.item();
            total = weighted(total, mld, cfg.lambda_mld)?;
            total = weighted(total, cd, cfg.lambda_cd)?;
            total = weighted(total, id, cfg.lambda_id)?;
        }
        BaselineMode::Mse => {
            let term = mse_baseline(teacher.logits, student.logits)?;
            out.baseline = term.item();
            total = weighted(total, term, cfg.baseline_weight)?;
        }
        BaselineMode::Ps => {
            let term = ps_baseline(teacher.logits, student.logits, y, cfg.ps_temperature)?;
            out.baseline = term.item();
            total = weighted(total, term, cfg.baseline_weight)?;
        }
    }
    out.total = total.item();
    Ok((total, out))
}
