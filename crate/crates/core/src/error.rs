use thiserror::Error;

pub type Result<T, E = CmsfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CmsfError {
    #[error("vector norm {norm:e} is at or below the normalization floor")]
    NearZeroNorm { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("parameter shapes do not match: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("learning-rate step {step} outside [0, {total}]")]
    BadStep { step: u64, total: u64 },

    #[error("dataset carries no labels")]
    NoLabels,

    #[error("no labeled samples available")]
    NoLabeledData,

    #[error("query has no label")]
    NoLabel,

    #[error("augmentation produced a degenerate (near-zero) vector twice")]
    DegenerateOutput,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("banks are not positionally aligned: {0}")]
    MisalignedBanks(String),

    #[error("neighbour set is empty")]
    EmptySet,

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("constraint set has {available} candidates, need {needed}")]
    TooFewCandidates { needed: usize, available: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CmsfError {
    /// Stable short identifier used in structured CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            CmsfError::NearZeroNorm { .. } => "near_zero_norm",
            CmsfError::DimMismatch { .. } => "dim_mismatch",
            CmsfError::ShapeMismatch(_) => "shape_mismatch",
            CmsfError::BadConfig(_) => "bad_config",
            CmsfError::BadStep { .. } => "bad_step",
            CmsfError::NoLabels => "no_labels",
            CmsfError::NoLabeledData => "no_labeled_data",
            CmsfError::NoLabel => "no_label",
            CmsfError::DegenerateOutput => "degenerate_output",
            CmsfError::Parse { .. } => "parse_error",
            CmsfError::MagicMismatch { .. } => "magic_mismatch",
            CmsfError::VersionUnsupported(_) => "version_unsupported",
            CmsfError::EmptyBank => "empty_bank",
            CmsfError::MisalignedBanks(_) => "misaligned_banks",
            CmsfError::EmptySet => "empty_set",
            CmsfError::EmptySplit => "empty_split",
            CmsfError::TooFewCandidates { .. } => "too_few_candidates",
            CmsfError::Checkpoint(_) => "checkpoint_error",
            CmsfError::Io(_) => "io_error",
        }
    }
}
