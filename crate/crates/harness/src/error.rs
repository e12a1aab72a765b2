//! Harness-level errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] rfrp_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("checkpoint magic mismatch: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    BadVersion { expected: u32, found: u32 },

    #[error("checkpoint truncated or corrupt: {0}")]
    Truncated(String),

    #[error("missing dataset: {0}")]
    MissingDataset(String),

    #[error("unknown ablation kind {0}; expected one of pretrain_vs_scratch, mask_sweep, moe_configs, ssim_eval")]
    UnknownAblation(String),

    #[error("unknown scene {0}")]
    UnknownScene(String),

    #[error("checkpoint has no fine-tune head; run finetune first or use --method triangulation")]
    MissingHead,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> HarnessError {
        let context = context.into();
        move |source| HarnessError::Json { context, source }
    }
}
