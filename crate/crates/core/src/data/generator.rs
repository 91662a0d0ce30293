use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::types::*;
use super::{segment_stream, DataError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeGroupSpec {
    pub min_age: u32,
    pub max_age: u32,
    pub positive_rate: f64,
}

/// Feature-response multiplier per noisy level; quiet is fixed at 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseResponse {
    pub db55: f64,
    pub db65: f64,
    pub db75: f64,
}

impl NoiseResponse {
    pub fn of(&self, level: NoiseLevel) -> f64 {
        match level {
            NoiseLevel::Quiet => 0.0,
            NoiseLevel::Db55 => self.db55,
            NoiseLevel::Db65 => self.db65,
            NoiseLevel::Db75 => self.db75,
        }
    }
}

impl Default for NoiseResponse {
    fn default() -> Self {
        Self {
            db55: 0.4,
            db65: 0.7,
            db75: 1.0,
        }
    }
}

/// Parameters of the synthetic conversation-session generator.
///
/// Frame features of a subject at noise level `n` are
/// `u·style + γ·g(age) + response(n)·(β_N + β_HL·h)·w + segment jitter + frame noise`
/// where `u`, `w` are per-subject latent vectors (`w` unit length) and `g`
/// places the normalised age along a fixed unit direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub subjects: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub fps: u32,
    pub entries_per_session: usize,
    pub min_entry_duration_s: u32,
    pub max_entry_duration_s: u32,
    pub age_groups: [AgeGroupSpec; 3],
    /// β_HL: extra response magnitude of hearing-impaired subjects.
    pub hearing_variation_gain: f64,
    /// β_N: response magnitude shared by every subject.
    pub normal_variation_gain: f64,
    /// γ: strength of the age component present in every frame.
    pub age_leak_gain: f64,
    pub subject_style_gain: f64,
    pub frame_noise_std: f64,
    /// Per-segment offset noise, shared by all frames of a segment.
    pub segment_jitter_std: f64,
    /// Weight of the population-wide direction in each subject's response direction `w`.
    pub response_shared_fraction: f64,
    pub noise_response: NoiseResponse,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            subjects: 60,
            seed: 0,
            feature_dim: 16,
            fps: 5,
            entries_per_session: 12,
            min_entry_duration_s: 25,
            max_entry_duration_s: 35,
            age_groups: [
                AgeGroupSpec {
                    min_age: 18,
                    max_age: 39,
                    positive_rate: 0.18,
                },
                AgeGroupSpec {
                    min_age: 40,
                    max_age: 56,
                    positive_rate: 0.52,
                },
                AgeGroupSpec {
                    min_age: 57,
                    max_age: 88,
                    positive_rate: 0.76,
                },
            ],
            hearing_variation_gain: 3.0,
            normal_variation_gain: 0.5,
            age_leak_gain: 0.0,
            subject_style_gain: 0.3,
            frame_noise_std: 1.0,
            segment_jitter_std: 0.1,
            response_shared_fraction: 0.8,
            noise_response: NoiseResponse::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.into()));
        if self.subjects < 2 || !self.subjects.is_multiple_of(2) {
            return bad("subject count must be even and at least 2");
        }
        if self.feature_dim == 0 || self.fps == 0 || self.entries_per_session == 0 {
            return bad("feature_dim, fps and entries_per_session must be positive");
        }
        if self.min_entry_duration_s > self.max_entry_duration_s
            || f64::from(self.min_entry_duration_s) < MIN_ENTRY_DURATION_S
            || f64::from(self.max_entry_duration_s) > MAX_ENTRY_DURATION_S
        {
            return bad("entry durations must lie within [25, 35] s");
        }
        for g in &self.age_groups {
            if g.min_age > g.max_age || !(0.0..=1.0).contains(&g.positive_rate) {
                return bad("age group bounds or positive rate invalid");
            }
        }
        let gains = [
            self.hearing_variation_gain,
            self.normal_variation_gain,
            self.age_leak_gain,
            self.subject_style_gain,
            self.frame_noise_std,
            self.segment_jitter_std,
        ];
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return bad("gains and noise levels must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.response_shared_fraction) {
            return bad("response_shared_fraction must lie in [0, 1]");
        }
        let r = &self.noise_response;
        if ![r.db55, r.db65, r.db75].iter().all(|v| v.is_finite())
            || !(0.0 <= r.db55 && r.db55 <= r.db65 && r.db65 <= r.db75)
        {
            return bad("noise response must be non-negative and non-decreasing in dBA");
        }
        Ok(())
    }

    fn age_bounds(&self) -> (f64, f64) {
        let lo = self.age_groups.iter().map(|g| g.min_age).min().unwrap_or(0);
        let hi = self.age_groups.iter().map(|g| g.max_age).max().unwrap_or(1);
        (f64::from(lo), f64::from(hi))
    }

    /// Age mapped linearly onto [−1, 1] over the configured age span.
    pub fn normalized_age(&self, age: u32) -> f64 {
        let (lo, hi) = self.age_bounds();
        if hi <= lo {
            return 0.0;
        }
        2.0 * (f64::from(age) - lo) / (hi - lo) - 1.0
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Balanced noise schedule: each level appears ⌊E/4⌋ or ⌈E/4⌉ times, in a
/// shuffled order that avoids repeating a level back to back where possible.
fn draw_schedule(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<ScheduleEntry> {
    let n = cfg.entries_per_session;
    let mut extra: Vec<NoiseLevel> = NoiseLevel::ALL.to_vec();
    extra.shuffle(rng);
    let mut levels = Vec::with_capacity(n);
    for l in NoiseLevel::ALL {
        levels.extend(std::iter::repeat_n(l, n / 4));
    }
    levels.extend(extra.into_iter().take(n % 4));
    for _ in 0..64 {
        levels.shuffle(rng);
        if levels.windows(2).all(|w| w[0] != w[1]) {
            break;
        }
    }
    levels
        .into_iter()
        .map(|noise_level| ScheduleEntry {
            noise_level,
            duration_s: f64::from(rng.gen_range(cfg.min_entry_duration_s..=cfg.max_entry_duration_s)),
        })
        .collect()
}

/// Builds a complete synthetic dataset; identical configs give bit-identical output.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let age_dir = unit(gaussian_vec(&mut rng, d, 1.0));
    let shared_dir = unit(gaussian_vec(&mut rng, d, 1.0));

    // Subjects are spread evenly over the three age groups.
    let mut groups: Vec<usize> = (0..cfg.subjects).map(|i| i % 3).collect();
    groups.shuffle(&mut rng);
    let subjects: Vec<SubjectRecord> = groups
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let spec = cfg.age_groups[g];
            SubjectRecord {
                subject_id: SubjectId(i as u32),
                age: rng.gen_range(spec.min_age..=spec.max_age),
                hearing_loss: rng.gen_bool(spec.positive_rate),
            }
        })
        .collect();

    let mut seating: Vec<SubjectId> = subjects.iter().map(|s| s.subject_id).collect();
    seating.shuffle(&mut rng);
    let sessions: Vec<SessionRecord> = seating
        .chunks(2)
        .enumerate()
        .map(|(i, pair)| SessionRecord {
            session_id: SessionId(i as u32),
            subject_ids: [pair[0], pair[1]],
            schedule: draw_schedule(cfg, &mut rng),
        })
        .collect();

    let mut segments = Vec::new();
    for session in &sessions {
        for &sid in &session.subject_ids {
            let subject = &subjects[sid.0 as usize];
            let style = gaussian_vec(&mut rng, d, cfg.subject_style_gain);
            let own = unit(gaussian_vec(&mut rng, d, 1.0));
            let share = cfg.response_shared_fraction;
            let response_dir = unit(
                shared_dir
                    .iter()
                    .zip(&own)
                    .map(|(s, o)| share * s + (1.0 - share) * o)
                    .collect(),
            );
            let age_shift = cfg.age_leak_gain * cfg.normalized_age(subject.age);
            let gain = cfg.normal_variation_gain + if subject.hearing_loss { cfg.hearing_variation_gain } else { 0.0 };

            let mut stream = Vec::new();
            let mut cursor = 0.0;
            let mut emitted = 0usize;
            for entry in &session.schedule {
                cursor += entry.duration_s;
                let end = (cursor * f64::from(cfg.fps)).floor() as usize;
                let magnitude = cfg.noise_response.of(entry.noise_level) * gain;
                let jitter = gaussian_vec(&mut rng, d, cfg.segment_jitter_std);
                let mean: Vec<f64> = (0..d)
                    .map(|k| style[k] + age_shift * age_dir[k] + magnitude * response_dir[k] + jitter[k])
                    .collect();
                for _ in emitted..end {
                    for &m in &mean {
                        stream.push(m + cfg.frame_noise_std * rng.sample::<f64, _>(StandardNormal));
                    }
                }
                emitted = end;
            }
            let first_id = SegmentId(segments.len() as u32);
            let frames = Frames::new(d, stream)?;
            segments.extend(segment_stream(
                &frames,
                &session.schedule,
                cfg.fps,
                session.session_id,
                sid,
                first_id,
            )?);
        }
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        feature_dim: d,
        fps: cfg.fps,
        min_frames: (cfg.min_entry_duration_s * cfg.fps) as usize,
        max_frames: (cfg.max_entry_duration_s * cfg.fps) as usize,
        subject_count: subjects.len(),
        session_count: sessions.len(),
        segment_count: segments.len(),
        generator: Some(cfg.clone()),
    };
    let dataset = Dataset {
        manifest,
        subjects,
        sessions,
        segments,
    };
    dataset.validate()?;
    Ok(dataset)
}
