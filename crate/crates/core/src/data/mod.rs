//! Dataset records, on-disk format, synthetic session generator, triplet
//! sampling and anchor selection.

mod generator;
mod io;
mod triplet;
mod types;

pub use generator::{generate_synthetic, AgeGroupSpec, GeneratorConfig, NoiseResponse};
pub use io::{load_dataset, load_segment, save_dataset, save_segment, MANIFEST_FILE, SEGMENTS_FILE, SESSIONS_FILE, SUBJECTS_FILE};
pub use triplet::{sample_triplets, triplet_combinations, Triplet};
pub use types::*;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("schedule needs {needed} frames but the stream has {available}")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("subject {subject} has no quiet segment in session {session}")]
    NoQuietSegment { subject: SubjectId, session: SessionId },
}

/// Cuts a continuous frame stream at the schedule's noise-level changes.
/// Boundary `i` sits at `floor(cumulative_duration_i × fps)`.
pub fn segment_stream(
    frames: &Frames,
    schedule: &[ScheduleEntry],
    fps: u32,
    session_id: SessionId,
    subject_id: SubjectId,
    first_segment_id: SegmentId,
) -> Result<Vec<Segment>, DataError> {
    let mut bounds = Vec::with_capacity(schedule.len() + 1);
    bounds.push(0usize);
    let mut cumulative = 0.0;
    for e in schedule {
        cumulative += e.duration_s;
        bounds.push((cumulative * f64::from(fps)).floor() as usize);
    }
    let needed = *bounds.last().unwrap_or(&0);
    if frames.len() < needed {
        return Err(DataError::InsufficientFrames {
            needed,
            available: frames.len(),
        });
    }
    schedule
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(Segment {
                segment_id: SegmentId(first_segment_id.0 + i as u32),
                session_id,
                subject_id,
                order_index: i as u32,
                noise_level: e.noise_level,
                frames: frames.slice(bounds[i], bounds[i + 1])?,
            })
        })
        .collect()
}

/// The first quiet-condition segment (smallest order_index) of one subject in one session.
pub fn select_anchor<'a>(segments: &[&'a Segment]) -> Result<&'a Segment, DataError> {
    segments
        .iter()
        .filter(|s| s.noise_level.is_quiet())
        .min_by_key(|s| s.order_index)
        .copied()
        .ok_or_else(|| DataError::NoQuietSegment {
            subject: segments.first().map_or(SubjectId(u32::MAX), |s| s.subject_id),
            session: segments.first().map_or(SessionId(u32::MAX), |s| s.session_id),
        })
}
