//! Directory layout:
//!
//! ```text
//! manifest.json    DatasetManifest (format_version, dims, counts, generator echo)
//! subjects.jsonl   one SubjectRecord per line
//! sessions.jsonl   one SessionRecord per line
//! segments.jsonl   one Segment per line, frames as nested arrays
//! ```
//!
//! Floats are written in shortest round-trip decimal form and parsed with
//! correct rounding, so a load after a save reproduces every bit.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{DataError, Dataset, DatasetManifest, Segment};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUBJECTS_FILE: &str = "subjects.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const SEGMENTS_FILE: &str = "segments.jsonl";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DataError::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| DataError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| DataError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    write_lines(&dir.join(SUBJECTS_FILE), &dataset.subjects)?;
    write_lines(&dir.join(SESSIONS_FILE), &dataset.sessions)?;
    write_lines(&dir.join(SEGMENTS_FILE), &dataset.segments)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Format(format!("{}: {e}", manifest_path.display())))?;
    let dataset = Dataset {
        manifest,
        subjects: read_lines(&dir.join(SUBJECTS_FILE))?,
        sessions: read_lines(&dir.join(SESSIONS_FILE))?,
        segments: read_lines(&dir.join(SEGMENTS_FILE))?,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_segment(segment: &Segment, path: &Path) -> Result<(), DataError> {
    let text = serde_json::to_string(segment).map_err(|e| DataError::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn load_segment(path: &Path) -> Result<Segment, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig, FORMAT_VERSION};

    fn small() -> Dataset {
        generate_synthetic(&GeneratorConfig {
            subjects: 4,
            seed: 5,
            feature_dim: 3,
            fps: 1,
            entries_per_session: 4,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in ds.segments.iter().zip(&back.segments) {
            let bits = |s: &Segment| s.frames.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let mut ds = small();
        ds.manifest.feature_dim = 4;
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Format(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut ds = small();
        ds.manifest.format_version = FORMAT_VERSION + 1;
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn empty_dataset_loads() {
        let ds = small();
        let empty = ds.subset_sessions(&[]);
        assert_eq!(empty.manifest.segment_count, 0);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&empty, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(SEGMENTS_FILE)).unwrap(), "");
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.segments.is_empty() && back.subjects.is_empty());
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(&dir.path().join("nope")), Err(DataError::Io { .. })));
    }

    #[test]
    fn single_segment_round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.json");
        save_segment(&ds.segments[3], &p).unwrap();
        assert_eq!(load_segment(&p).unwrap(), ds.segments[3]);
    }
}
