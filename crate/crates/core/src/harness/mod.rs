//! Optimisation, training, evaluation and experiment orchestration.

pub mod experiments;
pub mod optim;
pub mod report;
pub mod train;

pub use experiments::{
    history_csv, parallel_map, row_config, run_ablation, run_sweep, sweep_csv, AblationConfig, AblationRow, AblationTable,
    RunSummary, SeedModels, Stat, SweepParam, SweepRow, ABLATION_ROWS,
};
pub use optim::{one_cycle_lr, AdamConfig, AdamState};
pub use report::{correlation_report, CorrelationReport};
pub use train::{
    distill_from, distill_student, embed, evaluate, predict, train_teacher, EpochRecord, EvalOptions, LossKind, Pooling, StepRecord,
    Teacher, TeacherCache, TrainConfig, TrainOutcome,
};
