//! Multi-run orchestration: the five-row loss ablation and λ sweeps.

use serde::{Deserialize, Serialize};

use super::train::{distill_student, evaluate, train_teacher, EvalOptions, LossKind, Teacher, TeacherCache, TrainConfig, TrainOutcome};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{correlation_diff, MetricsReport};
use crate::model::{Model, ModelConfig};

/// Runs `f` over `items` on up to `threads` workers; results keep item order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(item) = items.get(i) else { break };
                        done.push((i, f(item)));
                    }
                    done
                })
            })
            .collect();
        workers.into_iter().flat_map(|w| w.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stat { mean, std: var.sqrt() }
    }
}

/// Test-set results of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    /// Best-validation checkpoint on the test set.
    pub test: MetricsReport,
    /// Last-epoch parameters on the test set.
    pub final_test: MetricsReport,
    /// Frobenius distance between this model's and the teacher's test-set
    /// prediction correlation matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_diff: Option<f64>,
}

fn flatten(m: &Option<Vec<Vec<f64>>>) -> Vec<f64> {
    m.as_ref().map(|rows| rows.concat()).unwrap_or_default()
}

fn summarize(outcome: &TrainOutcome, seed: u64, test: &Dataset, cfg: &TrainConfig, teacher: Option<&MetricsReport>) -> Result<RunSummary> {
    let opts = EvalOptions {
        threshold: cfg.threshold,
        batch_size: cfg.eval_batch,
        correlation: true,
    };
    let report = evaluate(&outcome.best, test, &opts)?;
    let correlation_diff = teacher
        .map(|t| correlation_diff(&flatten(&report.correlation), &flatten(&t.correlation)))
        .transpose()?;
    Ok(RunSummary {
        seed,
        best_epoch: outcome.best_epoch,
        final_test: evaluate(&outcome.last, test, &opts)?,
        test: report,
        correlation_diff,
    })
}

/// Rows of the loss ablation: which of MLD, CD, ID are switched on.
pub const ABLATION_ROWS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (true, true, false),
    (true, false, true),
    (true, true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mld: bool,
    pub cd: bool,
    pub id: bool,
    pub runs: Vec<RunSummary>,
    pub map: Stat,
    pub of1: Stat,
    pub cf1: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_diff: Option<Stat>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.mld, "MLD"), (self.cd, "CD"), (self.id, "ID")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub teacher: Vec<RunSummary>,
    pub teacher_map: Stat,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    /// Base settings; `loss` and the λ switches are set per row.
    pub train: TrainConfig,
    pub threads: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            teacher: ModelConfig::teacher(8, 0),
            student: ModelConfig::student(8, 0),
            train: TrainConfig::default(),
            threads: default_threads(),
        }
    }
}

/// Student training settings for one ablation row.
pub fn row_config(base: &TrainConfig, (mld, cd, id): (bool, bool, bool), seed: u64) -> TrainConfig {
    let pick = |on: bool, v: f64| if on { v } else { 0.0 };
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.loss = if mld || cd || id { LossKind::L2d } else { LossKind::Vanilla };
    cfg.distill.baseline = crate::losses::BaselineMode::None;
    cfg.distill.lambda_mld = pick(mld, base.distill.lambda_mld);
    cfg.distill.lambda_cd = pick(cd, base.distill.lambda_cd);
    cfg.distill.lambda_id = pick(id, base.distill.lambda_id);
    cfg
}

/// Per-seed models from one ablation pass, for callers that persist them.
pub struct SeedModels {
    pub teacher: Model<f32>,
    pub students: Vec<Model<f32>>,
}

/// The teacher plus every row for one seed.
fn ablation_seed(train: &Dataset, test: &Dataset, cfg: &AblationConfig, seed: u64) -> Result<(RunSummary, Vec<RunSummary>, SeedModels)> {
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    tcfg.loss = LossKind::Vanilla;
    let teacher = train_teacher(ModelConfig { seed, ..cfg.teacher.clone() }, train, &tcfg)?;
    let teacher_summary = summarize(&teacher, seed, test, &tcfg, None)?;
    let cache = TeacherCache::build(&teacher.best, train, cfg.train.eval_batch)?;
    let source = Teacher {
        model: &teacher.best,
        cache: Some(&cache),
    };
    let mut rows = Vec::new();
    let mut students = Vec::new();
    for row in ABLATION_ROWS {
        let scfg = row_config(&cfg.train, row, seed);
        let out = distill_student(source, ModelConfig { seed, ..cfg.student.clone() }, train, &scfg)?;
        rows.push(summarize(&out, seed, test, &scfg, Some(&teacher_summary.test))?);
        students.push(out.best);
    }
    Ok((
        teacher_summary,
        rows,
        SeedModels {
            teacher: teacher.best,
            students,
        },
    ))
}

/// Trains one teacher per seed and the five ablation students against it.
pub fn run_ablation(train: &Dataset, test: &Dataset, cfg: &AblationConfig) -> Result<(AblationTable, Vec<SeedModels>)> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    cfg.train.validate()?;
    let results = parallel_map(&cfg.seeds, cfg.threads, |&seed| ablation_seed(train, test, cfg, seed));
    let mut teacher = Vec::new();
    let mut per_row: Vec<Vec<RunSummary>> = vec![Vec::new(); ABLATION_ROWS.len()];
    let mut models = Vec::new();
    for r in results {
        let (t, rows, m) = r?;
        teacher.push(t);
        for (acc, run) in per_row.iter_mut().zip(rows) {
            acc.push(run);
        }
        models.push(m);
    }
    let stat = |runs: &[RunSummary], f: fn(&RunSummary) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let rows = ABLATION_ROWS
        .iter()
        .zip(per_row)
        .map(|(&(mld, cd, id), runs)| {
            let diffs: Vec<f64> = runs.iter().filter_map(|r| r.correlation_diff).collect();
            AblationRow {
                mld,
                cd,
                id,
                map: stat(&runs, |r| r.test.map),
                of1: stat(&runs, |r| r.test.of1),
                cf1: stat(&runs, |r| r.test.cf1),
                correlation_diff: (!diffs.is_empty()).then(|| Stat::of(&diffs)),
                runs,
            }
        })
        .collect();
    Ok((
        AblationTable {
            teacher_map: stat(&teacher, |r| r.test.map),
            teacher,
            rows,
        },
        models,
    ))
}

fn csv_string<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl AblationTable {
    /// One line per row: checkmark columns, then mean/std of each metric.
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line {
            mld: &'static str,
            cd: &'static str,
            id: &'static str,
            seeds: usize,
            map_mean: f64,
            map_std: f64,
            of1_mean: f64,
            of1_std: f64,
            cf1_mean: f64,
            cf1_std: f64,
            corr_diff_mean: Option<f64>,
        }
        let tick = |on: bool| if on { "x" } else { "" };
        csv_string(self.rows.iter().map(|r| Line {
            mld: tick(r.mld),
            cd: tick(r.cd),
            id: tick(r.id),
            seeds: r.runs.len(),
            map_mean: r.map.mean,
            map_std: r.map.std,
            of1_mean: r.of1.mean,
            of1_std: r.of1.std,
            cf1_mean: r.cf1.mean,
            cf1_std: r.cf1.std,
            corr_diff_mean: r.correlation_diff.map(|s| s.mean),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaMld,
    LambdaCd,
    LambdaId,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_mld" | "mld" => Ok(SweepParam::LambdaMld),
            "lambda_cd" | "cd" => Ok(SweepParam::LambdaCd),
            "lambda_id" | "id" => Ok(SweepParam::LambdaId),
            other => Err(Error::config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub lambda_mld: f64,
    pub lambda_cd: f64,
    pub lambda_id: f64,
    pub map: f64,
    pub of1: f64,
    pub cf1: f64,
}

/// One full-L2D distillation per value of `param`; the other weights stay
/// at `base`'s values.
pub fn run_sweep(
    train: &Dataset,
    test: &Dataset,
    teacher: Teacher<'_>,
    student: &ModelConfig,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::config("sweep values must be positive and finite"));
    }
    let jobs: Vec<TrainConfig> = values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.loss = LossKind::L2d;
            match param {
                SweepParam::LambdaMld => cfg.distill.lambda_mld = v,
                SweepParam::LambdaCd => cfg.distill.lambda_cd = v,
                SweepParam::LambdaId => cfg.distill.lambda_id = v,
            }
            cfg
        })
        .collect();
    parallel_map(&jobs, threads, |cfg| -> Result<SweepRow> {
        let out = distill_student(teacher, student.clone(), train, cfg)?;
        let opts = EvalOptions {
            threshold: cfg.threshold,
            batch_size: cfg.eval_batch,
            correlation: false,
        };
        let r = evaluate(&out.best, test, &opts)?;
        Ok(SweepRow {
            param,
            value: match param {
                SweepParam::LambdaMld => cfg.distill.lambda_mld,
                SweepParam::LambdaCd => cfg.distill.lambda_cd,
                SweepParam::LambdaId => cfg.distill.lambda_id,
            },
            lambda_mld: cfg.distill.lambda_mld,
            lambda_cd: cfg.distill.lambda_cd,
            lambda_id: cfg.distill.lambda_id,
            map: r.map,
            of1: r.of1,
            cf1: r.cf1,
        })
    })
    .into_iter()
    .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    csv_string(rows)
}

pub fn history_csv(steps: &[super::train::StepRecord]) -> Result<String> {
    csv_string(steps)
}
