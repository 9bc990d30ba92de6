//! `l2d`: data generation, training, distillation, evaluation and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use l2d_core::data::{generate_dataset, load_dataset, save_dataset, Dataset, SceneSpec};
use l2d_core::harness::{
    correlation_report, distill_from, distill_student, embed, evaluate, history_csv, run_ablation, run_sweep,
    sweep_csv, AblationConfig, AblationTable, EvalOptions, LossKind, Pooling, SweepParam, Teacher, TeacherCache,
    TrainConfig, TrainOutcome,
};
use l2d_core::metrics::{knn_retrieve, RetrievalRow};
use l2d_core::model::{Model, ModelConfig};
use l2d_core::{Error, Result};
use serde::{Deserialize, Serialize};

const TRAIN_FILE: &str = "train.l2d";
const TEST_FILE: &str = "test.l2d";
const CHECKPOINT: &str = "checkpoint";

#[derive(Parser)]
#[command(name = "l2d", version, about = "Label-wise distillation for multi-label classification")]
struct Cli {
    /// JSON file with any of the sections `data`, `train`, `teacher`,
    /// `student`, `ablation`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the run (data seed for `gen-data`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and save the synthetic train/test split.
    GenData,
    /// Train a teacher with plain BCE.
    TrainTeacher(TrainArgs),
    /// Distill a student from a trained teacher.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run the five-row loss ablation over several seeds.
    Ablate(AblateArgs),
    /// Sweep one loss weight with the others held fixed.
    Sweep(SweepArgs),
    /// Nearest neighbours in label-wise embedding space.
    Retrieve(RetrieveArgs),
    /// Correlation analysis of a finished ablation.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory written by `gen-data`; without it the data is generated
    /// from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Vanilla,
    Mld,
    L2d,
    Mse,
    Ps,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Vanilla => LossKind::Vanilla,
            LossArg::Mld => LossKind::Mld,
            LossArg::L2d => LossKind::L2d,
            LossArg::Mse => LossKind::Mse,
            LossArg::Ps => LossKind::Ps,
        }
    }
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory holding the teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, value_enum, default_value = "l2d")]
    loss: LossArg,
    /// Give the teacher its own augmented view.
    #[arg(long)]
    independent_views: bool,
    /// Start the student from this run directory's checkpoint instead of a
    /// fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run directory holding the checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Also compute the label correlation matrix.
    #[arg(long)]
    correlation: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated seeds; `--seed` alone runs a single seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    threads: Option<usize>,
    /// Also write every teacher and student checkpoint.
    #[arg(long)]
    save_models: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    teacher: PathBuf,
    /// lambda_mld, lambda_cd or lambda_id.
    #[arg(long)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mean,
    Max,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Split searched and queried.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Comma-separated database indices used as queries.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    queries: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value = "mean")]
    pooling: PoolingArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `ablate`.
    #[arg(long)]
    ablation: PathBuf,
}

/// Contents of `--config`; missing sections take their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data: DataConfig,
    train: TrainConfig,
    teacher: Option<ModelConfig>,
    student: Option<ModelConfig>,
    ablation: AblationSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    spec: SceneSpec,
    n_train: usize,
    n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            n_train: 2000,
            n_test: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblationSection {
    seeds: Vec<u64>,
    threads: Option<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: AblationConfig::default().seeds,
            threads: None,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn teacher_config(&self, q: usize) -> ModelConfig {
        self.teacher.clone().unwrap_or_else(|| ModelConfig::teacher(q, self.train.seed))
    }

    fn student_config(&self, q: usize) -> ModelConfig {
        self.student.clone().unwrap_or_else(|| ModelConfig::student(q, self.train.seed))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenData => cfg.data.spec.seed = seed,
            _ => {
                cfg.train.seed = seed;
                for m in [&mut cfg.teacher, &mut cfg.student].into_iter().flatten() {
                    m.seed = seed;
                }
            }
        }
    }
    let out = cli.out;
    fs::create_dir_all(&out)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::TrainTeacher(a) => train_teacher_cmd(cfg, &out, a),
        Command::Distill(a) => distill_cmd(cfg, &out, a),
        Command::Eval(a) => eval_cmd(cfg, &out, a),
        Command::Ablate(a) => ablate_cmd(cfg, &out, a, cli.seed),
        Command::Sweep(a) => sweep_cmd(cfg, &out, a),
        Command::Retrieve(a) => retrieve_cmd(cfg, &out, a),
        Command::Report(a) => report_cmd(&out, a),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = generate_dataset(&cfg.data.spec, cfg.data.n_train, cfg.data.n_test)?;
    save_dataset(&train, &out.join(TRAIN_FILE))?;
    save_dataset(&test, &out.join(TEST_FILE))?;
    write_json(&out.join("config.json"), &cfg.data)?;
    println!(
        "wrote {} train / {} test examples, {} classes, mean {:.3} labels per image, to {}",
        train.len(),
        test.len(),
        train.num_classes(),
        train.label_density(),
        out.display()
    );
    Ok(())
}

fn datasets(cfg: &mut RunConfig, args: &DataArgs) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &args.data {
        Some(dir) => (load_dataset(&dir.join(TRAIN_FILE))?, load_dataset(&dir.join(TEST_FILE))?),
        None => generate_dataset(&cfg.data.spec, cfg.data.n_train, cfg.data.n_test)?,
    };
    cfg.data.spec = train.spec.clone();
    cfg.data.n_train = train.len();
    cfg.data.n_test = test.len();
    Ok((train, test))
}

fn eval_options(train: &TrainConfig, correlation: bool) -> EvalOptions {
    EvalOptions {
        threshold: train.threshold,
        batch_size: train.eval_batch,
        correlation,
    }
}

#[derive(Serialize)]
struct RunMetrics {
    best_epoch: usize,
    /// Best-validation checkpoint on the test split.
    test: l2d_core::metrics::MetricsReport,
    /// Final-epoch weights on the test split.
    final_test: l2d_core::metrics::MetricsReport,
    epochs: Vec<l2d_core::harness::EpochRecord>,
}

fn write_run(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome, test: &Dataset) -> Result<()> {
    let opts = eval_options(&cfg.train, true);
    let metrics = RunMetrics {
        best_epoch: outcome.best_epoch,
        test: evaluate(&outcome.best, test, &opts)?,
        final_test: evaluate(&outcome.last, test, &opts)?,
        epochs: outcome.epochs.clone(),
    };
    write_json(&out.join("config.json"), cfg)?;
    fs::write(out.join("history.csv"), history_csv(&outcome.steps)?)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    fs::write(out.join("ap.csv"), metrics.test.ap_csv(&test.spec.class_names()))?;
    outcome.best.save(out, CHECKPOINT)?;
    println!(
        "best epoch {}: test mAP {:.4}, OF1 {:.4}, CF1 {:.4} (final epoch mAP {:.4})",
        metrics.best_epoch, metrics.test.map, metrics.test.of1, metrics.test.cf1, metrics.final_test.map
    );
    Ok(())
}

fn train_teacher_cmd(mut cfg: RunConfig, out: &Path, a: TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.loss = LossKind::Vanilla;
    let (train, test) = datasets(&mut cfg, &a.data)?;
    let model = cfg.teacher_config(train.num_classes());
    cfg.teacher = Some(model.clone());
    let outcome = l2d_core::harness::train_teacher(model, &train, &cfg.train)?;
    write_run(out, &cfg, &outcome, &test)
}

fn distill_cmd(mut cfg: RunConfig, out: &Path, a: DistillArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.loss = a.loss.into();
    cfg.train.independent_views |= a.independent_views;
    let (train, test) = datasets(&mut cfg, &a.data)?;
    let teacher = Model::<f32>::load(&a.teacher, CHECKPOINT)?;
    cfg.teacher = Some(teacher.config().clone());
    let cache = TeacherCache::build(&teacher, &train, cfg.train.eval_batch)?;
    let source = Teacher {
        model: &teacher,
        cache: Some(&cache),
    };
    let outcome = match &a.init {
        Some(dir) => {
            let init = Model::<f32>::load(dir, CHECKPOINT)?;
            cfg.student = Some(init.config().clone());
            distill_from(source, init, &train, &cfg.train)?
        }
        None => {
            let model = cfg.student_config(train.num_classes());
            cfg.student = Some(model.clone());
            distill_student(source, model, &train, &cfg.train)?
        }
    };
    write_run(out, &cfg, &outcome, &test)
}

fn eval_cmd(mut cfg: RunConfig, out: &Path, a: EvalArgs) -> Result<()> {
    let (_, test) = datasets(&mut cfg, &a.data)?;
    let model = Model::<f32>::load(&a.model, CHECKPOINT)?;
    let report = evaluate(&model, &test, &eval_options(&cfg.train, a.correlation))?;
    write_json(&out.join("metrics.json"), &report)?;
    fs::write(out.join("ap.csv"), report.ap_csv(&test.spec.class_names()))?;
    println!("mAP {:.4}, OF1 {:.4}, CF1 {:.4}", report.map, report.of1, report.cf1);
    Ok(())
}

fn ablate_cmd(mut cfg: RunConfig, out: &Path, a: AblateArgs, seed: Option<u64>) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(seeds) = a.seeds {
        cfg.ablation.seeds = seeds;
    } else if let Some(s) = seed {
        cfg.ablation.seeds = vec![s];
    }
    if a.threads.is_some() {
        cfg.ablation.threads = a.threads;
    }
    let (train, test) = datasets(&mut cfg, &a.data)?;
    let q = train.num_classes();
    let acfg = AblationConfig {
        seeds: cfg.ablation.seeds.clone(),
        teacher: cfg.teacher_config(q),
        student: cfg.student_config(q),
        train: cfg.train.clone(),
        threads: cfg.ablation.threads.unwrap_or_else(|| AblationConfig::default().threads),
    };
    cfg.teacher = Some(acfg.teacher.clone());
    cfg.student = Some(acfg.student.clone());
    let (table, models) = run_ablation(&train, &test, &acfg)?;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("ablation.json"), &table)?;
    fs::write(out.join("ablation.csv"), table.to_csv()?)?;
    if a.save_models {
        for (seed, m) in acfg.seeds.iter().zip(&models) {
            let dir = out.join(format!("seed{seed}"));
            fs::create_dir_all(&dir)?;
            m.teacher.save(&dir, "teacher")?;
            for (i, s) in m.students.iter().enumerate() {
                s.save(&dir, &format!("student{i}"))?;
            }
        }
    }
    print_table(&table);
    Ok(())
}

fn print_table(table: &AblationTable) {
    println!("teacher             mAP {:.4} ± {:.4}", table.teacher_map.mean, table.teacher_map.std);
    for r in &table.rows {
        println!(
            "{:18}  mAP {:.4} ± {:.4}  OF1 {:.4}  CF1 {:.4}",
            r.label(),
            r.map.mean,
            r.map.std,
            r.of1.mean,
            r.cf1.mean
        );
    }
}

fn sweep_cmd(mut cfg: RunConfig, out: &Path, a: SweepArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let (train, test) = datasets(&mut cfg, &a.data)?;
    let teacher = Model::<f32>::load(&a.teacher, CHECKPOINT)?;
    cfg.teacher = Some(teacher.config().clone());
    let cache = TeacherCache::build(&teacher, &train, cfg.train.eval_batch)?;
    let student = cfg.student_config(train.num_classes());
    cfg.student = Some(student.clone());
    let threads = a.threads.unwrap_or_else(|| AblationConfig::default().threads);
    let rows = run_sweep(
        &train,
        &test,
        Teacher {
            model: &teacher,
            cache: Some(&cache),
        },
        &student,
        &cfg.train,
        a.param,
        &a.values,
        threads,
    )?;
    write_json(&out.join("config.json"), &cfg)?;
    fs::write(out.join("sweep.csv"), sweep_csv(&rows)?)?;
    for r in &rows {
        println!("{:?} = {}: mAP {:.4}", r.param, r.value, r.map);
    }
    Ok(())
}

fn retrieve_cmd(mut cfg: RunConfig, out: &Path, a: RetrieveArgs) -> Result<()> {
    let (train, test) = datasets(&mut cfg, &a.data)?;
    let db = match a.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    let model = Model::<f32>::load(&a.model, CHECKPOINT)?;
    let pooling = match a.pooling {
        PoolingArg::Mean => Pooling::Mean,
        PoolingArg::Max => Pooling::Max,
    };
    let vectors = embed(&model, &db, pooling, cfg.train.eval_batch)?;
    let dim = model.config().embed_dim;
    let q = db.num_classes();
    let labels: Vec<u8> = (0..db.len()).flat_map(|i| db.label(i).to_vec()).collect();
    let mut rows = Vec::with_capacity(a.queries.len());
    for &query in &a.queries {
        if query >= db.len() {
            return Err(Error::Config(format!("query {query} is outside the database of {}", db.len())));
        }
        let neighbors = knn_retrieve(
            &vectors,
            &labels,
            db.len(),
            dim,
            q,
            &vectors[query * dim..(query + 1) * dim],
            Some(db.label(query)),
            a.k,
        )?;
        rows.push(RetrievalRow { query, neighbors });
    }
    write_json(&out.join("retrieval.json"), &rows)?;
    let names = db.spec.class_names();
    for r in &rows {
        println!("query {}:", r.query);
        for n in &r.neighbors {
            let shared: Vec<&str> = n.shared_labels.iter().map(|&c| names[c].as_str()).collect();
            println!("  #{:<5} d={:.4}  shared [{}]", n.index, n.distance, shared.join(", "));
        }
    }
    Ok(())
}

fn report_cmd(out: &Path, a: ReportArgs) -> Result<()> {
    let table: AblationTable = read_json(&a.ablation.join("ablation.json"))?;
    let report = correlation_report(&table)?;
    write_json(&out.join("correlation.json"), &report)?;
    let md = report.to_markdown();
    fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
