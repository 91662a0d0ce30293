//! Model variants, the two training stages and inference.
//!
//! Pre-training learns an encoder whose variation embeddings
//! `V(s1, s2) = [E(s1), E(s2)]` group by noise-level change. Fine-tuning
//! trains the classifier (and, for the debiased variant, an adversarial age
//! estimator behind a gradient reversal layer) jointly with the encoder.

mod model;
mod train;

use std::fs;
use std::path::Path;

pub use model::{AgeNorm, ModelBundle, ModelVariant, PredictInput, BUNDLE_FORMAT_VERSION};
pub use train::{
    batch_loss, build_instances, finetune, pretrain_vm, BatchLoss, FinetuneConfig, FinetuneOutcome, Instance,
    LossToggles, PretrainConfig, PretrainOutcome,
};

use thiserror::Error;

use crate::autodiff::AdError;
use crate::data::DataError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dataset has no usable segments")]
    EmptyDataset,
    #[error("no subject has an anchor segment")]
    MissingAnchors,
    #[error("no valid triplet under noise filter {0}")]
    NoValidTriplets(String),
    #[error("inputs do not match the variant: {0}")]
    VariantInputMismatch(String),
    #[error("invalid model bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let text = serde_json::to_string(bundle).map_err(|e| PipelineError::InvalidBundle(e.to_string()))?;
    fs::write(path, text).map_err(io)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bundle: ModelBundle = serde_json::from_str(&text).map_err(|e| PipelineError::InvalidBundle(e.to_string()))?;
    bundle.validate()?;
    Ok(bundle)
}
