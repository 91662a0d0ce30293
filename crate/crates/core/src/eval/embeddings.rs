use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::EvalError;
use crate::data::{Dataset, NoiseLevel, SegmentId, SubjectId};
use crate::pipeline::{build_instances, ModelBundle, PipelineError};

/// One exported row: a non-anchor segment and its variation embedding `V(current, anchor)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub segment_id: SegmentId,
    pub subject_id: SubjectId,
    pub noise_level: NoiseLevel,
    pub age: u32,
    pub hearing_loss: bool,
    pub embedding: Vec<f64>,
}

pub fn embedding_rows(bundle: &ModelBundle, dataset: &Dataset) -> Result<Vec<EmbeddingRow>, PipelineError> {
    if !bundle.variant.uses_anchor() {
        return Err(PipelineError::VariantInputMismatch(format!(
            "embedding export needs an anchor variant, got {}",
            bundle.variant
        )));
    }
    let (instances, _) = build_instances(dataset, bundle.variant)?;
    let subjects = dataset.subject_map();
    let mut rows = Vec::with_capacity(instances.len());
    let mut anchor_cache = std::collections::HashMap::new();
    for inst in instances {
        let anchor = inst.anchor.expect("anchor variants build anchored instances");
        let mut v = bundle.encode(&inst.current.frames)?;
        if let std::collections::hash_map::Entry::Vacant(e) = anchor_cache.entry(anchor.segment_id) {
            e.insert(bundle.encode(&anchor.frames)?);
        }
        v.extend_from_slice(&anchor_cache[&anchor.segment_id]);
        let subject = subjects[&inst.current.subject_id];
        rows.push(EmbeddingRow {
            segment_id: inst.current.segment_id,
            subject_id: inst.current.subject_id,
            noise_level: inst.current.noise_level,
            age: subject.age,
            hearing_loss: subject.hearing_loss,
            embedding: v,
        });
    }
    rows.sort_by_key(|r| r.segment_id);
    Ok(rows)
}

/// Writes comma-separated rows with header
/// `segment_id,subject_id,noise_level,age,hearing_loss,v0,…,v{2H−1}`.
/// Returns the number of data rows.
pub fn export_embeddings(bundle: &ModelBundle, dataset: &Dataset, path: &Path) -> Result<usize, EvalError> {
    let rows = embedding_rows(bundle, dataset)?;
    let width = 2 * bundle.hidden_dim();
    let mut out = String::from("segment_id,subject_id,noise_level,age,hearing_loss");
    for i in 0..width {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for r in &rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.segment_id.0,
            r.subject_id.0,
            r.noise_level,
            r.age,
            u8::from(r.hearing_loss)
        );
        for v in &r.embedding {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, out).map_err(io)?;
    Ok(rows.len())
}
