//! Training loop shared by teacher training and student distillation, plus
//! deterministic evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{one_cycle_lr, AdamConfig, AdamState};
use crate::data::{augment_view, hflip, AugmentMode, Dataset};
use crate::error::{Error, Result};
use crate::losses::{l2d_loss, BaselineMode, DistillConfig, LossBreakdown, StudentSignals, TeacherSignals};
use crate::metrics::{correlation_matrix, to_rows, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{LabelWiseEmbeddingSet, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::util::derive_seed_indexed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// BCE only.
    Vanilla,
    /// BCE + λ_MLD·MLD.
    Mld,
    /// BCE + λ_MLD·MLD + λ_CD·CD + λ_ID·ID.
    L2d,
    Mse,
    Ps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub augment: AugmentMode,
    pub loss: LossKind,
    pub distill: DistillConfig,
    /// Trailing fraction of the training set held out for model selection.
    pub val_frac: f64,
    pub eval_batch: usize,
    pub threshold: f64,
    /// Give the teacher its own augmented view instead of the student's.
    pub independent_views: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            max_lr: 1e-4,
            weight_decay: 1e-4,
            warmup_frac: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            adam: AdamConfig::default(),
            seed: 0,
            augment: AugmentMode::Weak,
            loss: LossKind::Vanilla,
            distill: DistillConfig::default(),
            val_frac: 0.1,
            eval_batch: 128,
            threshold: DEFAULT_THRESHOLD,
            independent_views: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::config("max_lr must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::config("warmup_frac must lie in (0, 1)"));
        }
        if !(self.div_factor >= 1.0 && self.final_div_factor >= 1.0) {
            return Err(Error::config("schedule div factors must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::config("val_frac must lie in [0, 1)"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        self.objective().validate()
    }

    /// The loss weights implied by `loss` and `distill`.
    pub fn objective(&self) -> DistillConfig {
        let d = self.distill.clone();
        match self.loss {
            LossKind::Vanilla => DistillConfig::none(),
            LossKind::Mld => DistillConfig {
                lambda_cd: 0.0,
                lambda_id: 0.0,
                baseline: BaselineMode::None,
                ..d
            },
            LossKind::L2d => DistillConfig { baseline: BaselineMode::None, ..d },
            LossKind::Mse | LossKind::Ps => DistillConfig {
                lambda_mld: 0.0,
                lambda_cd: 0.0,
                lambda_id: 0.0,
                baseline: if self.loss == LossKind::Mse { BaselineMode::Mse } else { BaselineMode::Ps },
                ..d
            },
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.loss != LossKind::Vanilla
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub bce: f32,
    pub mld: f32,
    pub cd: f32,
    pub id: f32,
    pub baseline: f32,
    pub total: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_map: Option<f64>,
    pub val_of1: Option<f64>,
    pub val_cf1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the best validation mAP (the last
    /// epoch when there is no validation split).
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub last: Model<f32>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Teacher outputs for every training example, unflipped and flipped.
/// Only usable when the teacher sees exactly the student's weak view.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    n: usize,
    q: usize,
    d: usize,
    probs: Vec<f32>,
    logits: Vec<f32>,
    embeddings: Vec<f32>,
}

impl TeacherCache {
    pub fn build(teacher: &Model<f32>, data: &Dataset, batch: usize) -> Result<Self> {
        let cfg = teacher.config();
        let (q, d) = (cfg.num_classes, cfg.embed_dim);
        let (h, w, c) = (data.spec.height, data.spec.width, data.spec.channels);
        let n = data.len();
        let mut cache = Self {
            n,
            q,
            d,
            probs: vec![0.0; n * 2 * q],
            logits: vec![0.0; n * 2 * q],
            embeddings: vec![0.0; n * 2 * q * d],
        };
        let p = teacher.bind(false)?;
        let rows: Vec<usize> = (0..n).collect();
        for flip in [false, true] {
            for chunk in rows.chunks(batch.max(1)) {
                let x = data.batch(chunk, |_, img| if flip { hflip(img, h, w, c) } else { img.to_vec() })?;
                let out = teacher.forward(&p, &x)?;
                let (pr, lg, em) = (
                    out.predictions.probs.data(),
                    out.predictions.logits.data(),
                    out.embeddings.0.data(),
                );
                for (j, &i) in chunk.iter().enumerate() {
                    let slot = 2 * i + flip as usize;
                    cache.probs[slot * q..(slot + 1) * q].copy_from_slice(&pr[j * q..(j + 1) * q]);
                    cache.logits[slot * q..(slot + 1) * q].copy_from_slice(&lg[j * q..(j + 1) * q]);
                    cache.embeddings[slot * q * d..(slot + 1) * q * d]
                        .copy_from_slice(&em[j * q * d..(j + 1) * q * d]);
                }
            }
        }
        Ok(cache)
    }

    fn gather(&self, rows: &[usize], flips: &[bool]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let (q, d, b) = (self.q, self.d, rows.len());
        let slots: Vec<usize> = rows.iter().zip(flips).map(|(&i, &f)| 2 * i + f as usize).collect();
        let pick = |src: &[f32], width: usize| -> Vec<f32> {
            slots.iter().flat_map(|&s| src[s * width..(s + 1) * width].iter().copied()).collect()
        };
        Ok((
            Tensor::new(pick(&self.probs, q), &[b, q])?,
            Tensor::new(pick(&self.logits, q), &[b, q])?,
            Tensor::new(pick(&self.embeddings, q * d), &[b, q, d])?,
        ))
    }
}

/// Where distillation targets come from.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub model: &'a Model<f32>,
    /// Precomputed outputs over the same training set, if available.
    pub cache: Option<&'a TeacherCache>,
}

fn split_train(train: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    let n = train.len();
    let n_val = (n as f64 * cfg.val_frac).floor() as usize;
    let n_fit = n - n_val;
    if n_fit < cfg.batch_size {
        return Err(Error::config(format!(
            "{n_fit} training examples cannot fill a batch of {}",
            cfg.batch_size
        )));
    }
    let val = (n_val > 0).then(|| train.slice(n_fit..n));
    Ok((train.slice(0..n_fit), val))
}

fn check_model(config: &ModelConfig, data: &Dataset) -> Result<()> {
    let s = &data.spec;
    if (config.height, config.width, config.channels, config.num_classes)
        != (s.height, s.width, s.channels, s.num_classes)
    {
        return Err(Error::config(format!(
            "model expects {}x{}x{} inputs with {} classes, data has {}x{}x{} with {}",
            config.height, config.width, config.channels, config.num_classes, s.height, s.width, s.channels, s.num_classes
        )));
    }
    Ok(())
}

/// Trains a fresh model with plain BCE.
pub fn train_teacher(config: ModelConfig, train: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.loss != LossKind::Vanilla {
        return Err(Error::config("teacher training uses the vanilla loss"));
    }
    train_model(Model::new(config)?, train, cfg, None)
}

/// Trains a fresh student against a frozen teacher with `cfg.loss`. The
/// teacher may be smaller than the student.
pub fn distill_student(teacher: Teacher<'_>, config: ModelConfig, train: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    distill_from(teacher, Model::new(config)?, train, cfg)
}

/// Like [`distill_student`], starting from the given student weights.
pub fn distill_from(teacher: Teacher<'_>, init: Model<f32>, train: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let config = init.config();
    if teacher.model.config().num_classes != config.num_classes {
        return Err(Error::config(format!(
            "teacher predicts {} classes, student {}",
            teacher.model.config().num_classes,
            config.num_classes
        )));
    }
    if teacher.model.config().embed_dim != config.embed_dim {
        return Err(Error::config("teacher and student embedding dims differ"));
    }
    train_model(init, train, cfg, Some(teacher))
}

fn train_model(mut model: Model<f32>, train: &Dataset, cfg: &TrainConfig, teacher: Option<Teacher<'_>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_model(model.config(), train)?;
    let objective = cfg.objective();
    let teacher = if cfg.needs_teacher() {
        Some(teacher.ok_or_else(|| Error::config(format!("loss {:?} needs a teacher", cfg.loss)))?)
    } else {
        None
    };
    if let Some(t) = teacher {
        check_model(t.model.config(), train)?;
    }
    if let Some(cache) = teacher.and_then(|t| t.cache) {
        if cache.n != train.len() {
            return Err(Error::config(format!(
                "teacher cache covers {} examples, training set has {}",
                cache.n,
                train.len()
            )));
        }
    }
    let use_cache = teacher.is_some_and(|t| t.cache.is_some())
        && cfg.augment != AugmentMode::Strong
        && !cfg.independent_views;
    let (fit, val) = split_train(train, cfg)?;
    let (h, w, c) = (train.spec.height, train.spec.width, train.spec.channels);
    let per_epoch = fit.len() / cfg.batch_size;
    let total_steps = per_epoch * cfg.epochs;

    let mut adam = AdamState::new(model.params(), cfg.adam);
    let teacher_params = match teacher {
        Some(t) if !use_cache => Some(t.model.bind(false)?),
        _ => None,
    };
    let eval_opts = EvalOptions {
        threshold: cfg.threshold,
        batch_size: cfg.eval_batch,
        correlation: false,
    };

    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "shuffle", epoch as u64)));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "augment", epoch as u64));
        let mut teacher_rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "teacher-augment", epoch as u64));
        let mut loss_sum = 0.0;
        for rows in order.chunks_exact(cfg.batch_size) {
            let mut flips = Vec::with_capacity(rows.len());
            let x = fit.batch(rows, |_, img| {
                let (v, f) = augment_view(img, h, w, c, cfg.augment, &mut aug_rng);
                flips.push(f);
                v
            })?;
            let y = fit.label_matrix(rows)?;
            let lr = one_cycle_lr(step, total_steps, cfg.max_lr, cfg.warmup_frac, cfg.div_factor, cfg.final_div_factor)?;

            let bound = model.bind(true)?;
            let out = model.forward(&bound, &x)?;
            let student = StudentSignals {
                probs: &out.predictions.probs,
                logits: &out.predictions.logits,
                embeddings: &out.embeddings,
            };
            let teacher_out = match teacher {
                None => None,
                Some(t) if use_cache => {
                    let (probs, logits, embs) = t.cache.expect("checked").gather(rows, &flips)?;
                    Some((probs, logits, LabelWiseEmbeddingSet(embs)))
                }
                Some(t) => {
                    let tx = if cfg.independent_views {
                        fit.batch(rows, |_, img| augment_view(img, h, w, c, cfg.augment, &mut teacher_rng).0)?
                    } else {
                        x.clone()
                    };
                    let o = t.model.forward(teacher_params.as_ref().expect("bound"), &tx)?;
                    Some((o.predictions.probs, o.predictions.logits, o.embeddings))
                }
            };
            let signals = teacher_out.as_ref().map(|(probs, logits, embeddings)| TeacherSignals {
                probs,
                logits,
                embeddings,
            });
            let (loss, parts): (Tensor<f32>, LossBreakdown<f32>) = l2d_loss(&student, &y, signals.as_ref(), &objective)?;
            if !parts.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {step} (epoch {epoch}): {parts:?}"
                )));
            }
            loss.backward()?;
            let grads = bound.grads();
            drop(out);
            drop(bound);
            adam.step(model.params_mut(), &grads, lr, cfg.weight_decay)?;
            loss_sum += parts.total as f64;
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                bce: parts.bce,
                mld: parts.mld,
                cd: parts.cd,
                id: parts.id,
                baseline: parts.baseline,
                total: parts.total,
            });
            step += 1;
        }
        let report = val.as_ref().map(|v| evaluate(&model, v, &eval_opts)).transpose()?;
        let val_map = report.as_ref().map(|r| r.map);
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            val_map,
            val_of1: report.as_ref().map(|r| r.of1),
            val_cf1: report.as_ref().map(|r| r.cf1),
        });
        let score = val_map.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s || val_map.is_none()) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        steps,
        epochs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    pub batch_size: usize,
    /// Attach the class correlation matrix of the predictions.
    pub correlation: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            batch_size: 128,
            correlation: false,
        }
    }
}

fn for_each_batch<F>(model: &Model<f32>, data: &Dataset, batch: usize, mut f: F) -> Result<()>
where
    F: FnMut(&crate::model::ModelOutput<f32>),
{
    check_model(model.config(), data)?;
    let p = model.bind(false)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let x = data.batch(chunk, |_, img| img.to_vec())?;
        f(&model.forward(&p, &x)?);
    }
    Ok(())
}

/// Class probabilities `[n, q]` without augmentation.
pub fn predict(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(data.len() * data.num_classes());
    for_each_batch(model, data, batch, |o| {
        probs.extend(o.predictions.probs.data().iter().map(|&v| v as f64))
    })?;
    Ok(probs)
}

pub fn evaluate(model: &Model<f32>, data: &Dataset, opts: &EvalOptions) -> Result<MetricsReport> {
    let q = data.num_classes();
    let probs = predict(model, data, opts.batch_size)?;
    let mut report = MetricsReport::compute(&probs, &data.labels, data.len(), q, opts.threshold)?;
    if opts.correlation {
        report.correlation = Some(to_rows(&correlation_matrix(&probs, data.len(), q)?, q));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// One retrieval vector per example: label-wise embeddings pooled over
/// classes, `[n, embed_dim]`.
pub fn embed(model: &Model<f32>, data: &Dataset, pooling: Pooling, batch: usize) -> Result<Vec<f64>> {
    let (q, d) = (model.config().num_classes, model.config().embed_dim);
    let mut out = Vec::with_capacity(data.len() * d);
    for_each_batch(model, data, batch, |o| {
        for inst in o.embeddings.0.data().chunks(q * d) {
            for j in 0..d {
                let col = (0..q).map(|k| inst[k * d + j] as f64);
                out.push(match pooling {
                    Pooling::Mean => col.sum::<f64>() / q as f64,
                    Pooling::Max => col.fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
    })?;
    Ok(out)
}
