//! Metrics, subject-independent cross-validation, age-group reporting,
//! the frozen-embedding age probe and significance testing.

mod embeddings;
mod metrics;
mod probe;
mod protocol;
mod report;
mod stats;

pub use embeddings::{embedding_rows, export_embeddings, EmbeddingRow};
pub use metrics::{age_tercile_groups, f1_score, split_sessions_kfold, Confusion, FoldSplit, AGE_GROUP_NAMES};
pub use probe::{LinearProbe, PROBE_RIDGE};
pub use protocol::{evaluate, evaluate_variants, seed_splits, Evaluation, Prediction, ProtocolConfig, SeedOutcome};
pub use report::{
    AblationReport, AblationRow, BiasSummary, Counts, EvalReport, FoldAudit, GroupScore, LadderComparison, MeanStd,
    NoiseSweepColumn, SeedSummary, REPORT_FORMAT_VERSION,
};
pub use stats::{
    holm_adjust, pearson_r, significance_tests, student_t_sf, welch_one_tailed, PearsonResult, SignificanceResult,
    WelchResult,
};

use thiserror::Error;

use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("training failed in fold {fold} of seed {seed}: {source}")]
    Training {
        seed: u64,
        fold: usize,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{sessions} sessions cannot fill {k} folds")]
    TooFewSessions { sessions: usize, k: usize },
    #[error("need at least 3 subjects for age groups, got {0}")]
    TooFewSubjects(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("F1 is undefined without any positive label or prediction")]
    Undefined,
    #[error("input is constant")]
    ConstantInput,
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("need at least 2 samples per group, got {0}")]
    TooFewSamples(usize),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
