//! Teacher training, the distillation settings, multi-seed comparison,
//! post-hoc diagnostics and the property-verification suite.

mod config;
mod experiment;
mod train;
pub mod verify;

pub use config::{AuxKind, RunConfig, Setting, CONFIG_KEYS};
pub use experiment::{compare, compare_on, diagnose, median, CompareReport, CompareRun, Diagnosis};
pub use train::{
    distill, distill_from, init_student, init_teacher, load_data, logs_to_csv, teacher_milestones, train_teacher, write_csv, DataSplit,
    EpochLog, EpochTrace, RunResult, COLLAPSE_GRACE_EPOCHS, COLLAPSE_PATIENCE, CSV_HEADER, IDX_TRAIN_FRACTION,
};
pub use verify::{verify, Check, Mutation, VerifyOptions, VerifyReport};
