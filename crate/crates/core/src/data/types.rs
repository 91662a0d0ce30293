use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{DataError, GeneratorConfig};
use crate::autodiff::{AdError, Tensor};

/// Background noise condition of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    Quiet,
    Db55,
    Db65,
    Db75,
}

impl NoiseLevel {
    pub const ALL: [NoiseLevel; 4] = [NoiseLevel::Quiet, NoiseLevel::Db55, NoiseLevel::Db65, NoiseLevel::Db75];
    pub const NOISY: [NoiseLevel; 3] = [NoiseLevel::Db55, NoiseLevel::Db65, NoiseLevel::Db75];

    pub fn is_quiet(self) -> bool {
        self == NoiseLevel::Quiet
    }

    /// Loudspeaker level in dBA; `None` for the quiet condition.
    pub fn dba(self) -> Option<u32> {
        match self {
            NoiseLevel::Quiet => None,
            NoiseLevel::Db55 => Some(55),
            NoiseLevel::Db65 => Some(65),
            NoiseLevel::Db75 => Some(75),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quiet" | "0" => Some(NoiseLevel::Quiet),
            "db55" | "55" => Some(NoiseLevel::Db55),
            "db65" | "65" => Some(NoiseLevel::Db65),
            "db75" | "75" => Some(NoiseLevel::Db75),
            _ => None,
        }
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.dba() {
            Some(db) => write!(f, "{db}dBA"),
            None => f.write_str("quiet"),
        }
    }
}

/// Non-empty subset of the noisy levels that triplet noisy segments are drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<NoiseLevel>", into = "Vec<NoiseLevel>")]
pub struct NoiseFilter(BTreeSet<NoiseLevel>);

impl NoiseFilter {
    pub fn new(levels: impl IntoIterator<Item = NoiseLevel>) -> Result<Self, DataError> {
        let set: BTreeSet<_> = levels.into_iter().collect();
        if set.is_empty() {
            return Err(DataError::InvalidConfig("noise filter must not be empty".into()));
        }
        if set.contains(&NoiseLevel::Quiet) {
            return Err(DataError::InvalidConfig("noise filter may only hold noisy levels".into()));
        }
        Ok(Self(set))
    }

    pub fn loudest() -> Self {
        Self([NoiseLevel::Db75].into_iter().collect())
    }

    pub fn all_noisy() -> Self {
        Self(NoiseLevel::NOISY.into_iter().collect())
    }

    pub fn contains(&self, level: NoiseLevel) -> bool {
        self.0.contains(&level)
    }

    pub fn levels(&self) -> impl Iterator<Item = NoiseLevel> + '_ {
        self.0.iter().copied()
    }

    /// Parses `"75"`, `"65,75"`, `"db55,db65,db75"` and similar.
    pub fn parse(s: &str) -> Result<Self, DataError> {
        let levels = s
            .split(',')
            .map(|p| NoiseLevel::parse(p).ok_or_else(|| DataError::InvalidConfig(format!("unknown noise level {p:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(levels)
    }
}

impl Default for NoiseFilter {
    fn default() -> Self {
        Self::loudest()
    }
}

impl fmt::Display for NoiseFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| l.dba().unwrap_or(0).to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl TryFrom<Vec<NoiseLevel>> for NoiseFilter {
    type Error = DataError;
    fn try_from(v: Vec<NoiseLevel>) -> Result<Self, DataError> {
        Self::new(v)
    }
}

impl From<NoiseFilter> for Vec<NoiseLevel> {
    fn from(f: NoiseFilter) -> Self {
        f.0.into_iter().collect()
    }
}

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(SubjectId);
id_type!(SessionId);
id_type!(SegmentId);

/// Row-major sequence of per-frame feature vectors of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Frames {
    dim: usize,
    data: Vec<f64>,
}

impl Frames {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(DataError::Format(format!(
                "{} values do not form frames of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DataError::Format("frames have differing dimensions".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `[T, d]` tensor of the frames.
    pub fn to_tensor(&self) -> Result<Tensor, AdError> {
        Tensor::matrix(self.len(), self.dim, self.data.clone())
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, DataError> {
        Self::new(self.dim, self.data[start * self.dim..end * self.dim].to_vec())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, &b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

impl TryFrom<Vec<Vec<f64>>> for Frames {
    type Error = DataError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, DataError> {
        Self::from_rows(&rows)
    }
}

impl From<Frames> for Vec<Vec<f64>> {
    fn from(f: Frames) -> Self {
        f.data.chunks(f.dim).map(<[f64]>::to_vec).collect()
    }
}

/// One constant-noise clip of one subject; the unit of prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: SegmentId,
    pub session_id: SessionId,
    pub subject_id: SubjectId,
    pub order_index: u32,
    pub noise_level: NoiseLevel,
    pub frames: Frames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: SubjectId,
    pub age: u32,
    pub hearing_loss: bool,
}

impl SubjectRecord {
    pub fn label(&self) -> f64 {
        if self.hearing_loss {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub noise_level: NoiseLevel,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: SessionId,
    pub subject_ids: [SubjectId; 2],
    pub schedule: Vec<ScheduleEntry>,
}

pub const MIN_ENTRY_DURATION_S: f64 = 25.0;
pub const MAX_ENTRY_DURATION_S: f64 = 35.0;

impl SessionRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Format(format!("session {}: {msg}", self.session_id)));
        if self.subject_ids[0] == self.subject_ids[1] {
            return bad("both seats hold the same subject".into());
        }
        if self.schedule.is_empty() {
            return bad("empty schedule".into());
        }
        for e in &self.schedule {
            if !(MIN_ENTRY_DURATION_S..=MAX_ENTRY_DURATION_S).contains(&e.duration_s) {
                return bad(format!("entry duration {} outside [25, 35] s", e.duration_s));
            }
        }
        let counts = schedule_histogram(&self.schedule);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        if hi - lo > 1 {
            return bad(format!("noise levels unbalanced: {counts:?}"));
        }
        Ok(())
    }

    pub fn total_duration_s(&self) -> f64 {
        self.schedule.iter().map(|e| e.duration_s).sum()
    }
}

/// Occurrences of each noise level (indexed by [`NoiseLevel::index`]).
pub fn schedule_histogram(schedule: &[ScheduleEntry]) -> [usize; 4] {
    let mut counts = [0; 4];
    for e in schedule {
        counts[e.noise_level.index()] += 1;
    }
    counts
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub feature_dim: usize,
    pub fps: u32,
    pub min_frames: usize,
    pub max_frames: usize,
    pub subject_count: usize,
    pub session_count: usize,
    pub segment_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub subjects: Vec<SubjectRecord>,
    pub sessions: Vec<SessionRecord>,
    pub segments: Vec<Segment>,
}

impl Dataset {
    /// Checks every record invariant; violations are reported, never repaired.
    pub fn validate(&self) -> Result<(), DataError> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(DataError::Format(format!(
                "format version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if (m.subject_count, m.session_count, m.segment_count)
            != (self.subjects.len(), self.sessions.len(), self.segments.len())
        {
            return Err(DataError::Format(format!(
                "manifest counts ({}, {}, {}) disagree with records ({}, {}, {})",
                m.subject_count,
                m.session_count,
                m.segment_count,
                self.subjects.len(),
                self.sessions.len(),
                self.segments.len()
            )));
        }
        if m.feature_dim == 0 || m.min_frames == 0 || m.min_frames > m.max_frames {
            return Err(DataError::Format("manifest frame bounds or feature_dim invalid".into()));
        }
        let mut subjects = BTreeSet::new();
        for s in &self.subjects {
            if !subjects.insert(s.subject_id) {
                return Err(DataError::Format(format!("duplicate subject {}", s.subject_id)));
            }
        }
        let mut seated = BTreeMap::new();
        let mut sessions = BTreeSet::new();
        for sess in &self.sessions {
            sess.validate()?;
            if !sessions.insert(sess.session_id) {
                return Err(DataError::Format(format!("duplicate session {}", sess.session_id)));
            }
            for sid in sess.subject_ids {
                if !subjects.contains(&sid) {
                    return Err(DataError::Format(format!("session {} names unknown subject {sid}", sess.session_id)));
                }
                if seated.insert(sid, sess.session_id).is_some() {
                    return Err(DataError::Format(format!("subject {sid} appears in two sessions")));
                }
            }
        }
        let mut seen_ids = BTreeSet::new();
        let mut orders = BTreeSet::new();
        for seg in &self.segments {
            if !seen_ids.insert(seg.segment_id) {
                return Err(DataError::Format(format!("duplicate segment {}", seg.segment_id)));
            }
            if seg.frames.dim() != m.feature_dim {
                return Err(DataError::Format(format!(
                    "segment {} has feature dim {} but manifest says {}",
                    seg.segment_id,
                    seg.frames.dim(),
                    m.feature_dim
                )));
            }
            let n = seg.frames.len();
            if n < m.min_frames || n > m.max_frames {
                return Err(DataError::Format(format!(
                    "segment {} has {n} frames outside [{}, {}]",
                    seg.segment_id, m.min_frames, m.max_frames
                )));
            }
            if seated.get(&seg.subject_id) != Some(&seg.session_id) {
                return Err(DataError::Format(format!(
                    "segment {} pairs subject {} with session {} that does not seat it",
                    seg.segment_id, seg.subject_id, seg.session_id
                )));
            }
            if !orders.insert((seg.session_id, seg.subject_id, seg.order_index)) {
                return Err(DataError::Format(format!(
                    "order index {} repeated for subject {} in session {}",
                    seg.order_index, seg.subject_id, seg.session_id
                )));
            }
            if seg.frames.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(DataError::Format(format!("segment {} has non-finite features", seg.segment_id)));
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: SubjectId) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn subject_map(&self) -> BTreeMap<SubjectId, &SubjectRecord> {
        self.subjects.iter().map(|s| (s.subject_id, s)).collect()
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        self.sessions.iter().map(|s| s.session_id).collect()
    }

    /// Segments grouped by (session, subject), each group in order_index order.
    pub fn segments_by_subject(&self) -> BTreeMap<(SessionId, SubjectId), Vec<&Segment>> {
        let mut groups: BTreeMap<_, Vec<&Segment>> = BTreeMap::new();
        for seg in &self.segments {
            groups.entry((seg.session_id, seg.subject_id)).or_default().push(seg);
        }
        for g in groups.values_mut() {
            g.sort_by_key(|s| s.order_index);
        }
        groups
    }

    /// The records belonging to `sessions`, with the manifest counts updated.
    pub fn subset_sessions(&self, sessions: &[SessionId]) -> Dataset {
        let keep: BTreeSet<_> = sessions.iter().copied().collect();
        let sessions: Vec<_> = self.sessions.iter().filter(|s| keep.contains(&s.session_id)).cloned().collect();
        let seated: BTreeSet<_> = sessions.iter().flat_map(|s| s.subject_ids).collect();
        let subjects: Vec<_> = self.subjects.iter().filter(|s| seated.contains(&s.subject_id)).cloned().collect();
        let segments: Vec<_> = self.segments.iter().filter(|s| keep.contains(&s.session_id)).cloned().collect();
        let manifest = DatasetManifest {
            subject_count: subjects.len(),
            session_count: sessions.len(),
            segment_count: segments.len(),
            ..self.manifest.clone()
        };
        Dataset {
            manifest,
            subjects,
            sessions,
            segments,
        }
    }
}
