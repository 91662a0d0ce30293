use rand::seq::index;
use rand::Rng;

use super::{NoiseFilter, Segment};

/// One noisy and two distinct quiet segments of the same subject.
///
/// The variation pairs are `anchor = (noisy, quiet_a)`, `positive =
/// (noisy, quiet_b)` and `negative = (quiet_a, quiet_b)`.
#[derive(Clone, Copy, Debug)]
pub struct Triplet<'a> {
    pub noisy: &'a Segment,
    pub quiet_a: &'a Segment,
    pub quiet_b: &'a Segment,
}

impl Triplet<'_> {
    pub fn is_valid(&self) -> bool {
        let same_subject = self.noisy.subject_id == self.quiet_a.subject_id
            && self.noisy.subject_id == self.quiet_b.subject_id;
        same_subject
            && !self.noisy.noise_level.is_quiet()
            && self.quiet_a.noise_level.is_quiet()
            && self.quiet_b.noise_level.is_quiet()
            && self.quiet_a.segment_id != self.quiet_b.segment_id
    }
}

/// Number of distinct triplets (quiet pair unordered) available for one subject.
pub fn triplet_combinations(segments: &[&Segment], filter: &NoiseFilter) -> usize {
    let noisy = segments.iter().filter(|s| filter.contains(s.noise_level)).count();
    let quiet = segments.iter().filter(|s| s.noise_level.is_quiet()).count();
    noisy * quiet * quiet.saturating_sub(1) / 2
}

/// Draws up to `count` distinct triplets from one subject's segments,
/// uniformly without replacement; each quiet pair gets a random orientation.
/// Subjects without an eligible noisy segment or two quiet ones yield nothing.
pub fn sample_triplets<'a, R: Rng + ?Sized>(
    segments: &[&'a Segment],
    filter: &NoiseFilter,
    count: usize,
    rng: &mut R,
) -> Vec<Triplet<'a>> {
    let mut noisy: Vec<&Segment> = segments.iter().copied().filter(|s| filter.contains(s.noise_level)).collect();
    let mut quiet: Vec<&Segment> = segments.iter().copied().filter(|s| s.noise_level.is_quiet()).collect();
    noisy.sort_by_key(|s| (s.session_id, s.order_index));
    quiet.sort_by_key(|s| (s.session_id, s.order_index));
    let pairs = quiet.len() * quiet.len().saturating_sub(1) / 2;
    let total = noisy.len() * pairs;
    if total == 0 || count == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count.min(total));
    for idx in index::sample(rng, total, count.min(total)) {
        let (n, mut p) = (idx / pairs, idx % pairs);
        // unrank p into (i, j), i < j
        let mut i = 0;
        while p >= quiet.len() - 1 - i {
            p -= quiet.len() - 1 - i;
            i += 1;
        }
        let j = i + 1 + p;
        let (a, b) = if rng.gen_bool(0.5) { (quiet[i], quiet[j]) } else { (quiet[j], quiet[i]) };
        out.push(Triplet {
            noisy: noisy[n],
            quiet_a: a,
            quiet_b: b,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{Frames, NoiseLevel, SegmentId, SessionId, SubjectId};

    fn seg(id: u32, noise: NoiseLevel) -> Segment {
        Segment {
            segment_id: SegmentId(id),
            session_id: SessionId(0),
            subject_id: SubjectId(0),
            order_index: id,
            noise_level: noise,
            frames: Frames::new(1, vec![0.0]).unwrap(),
        }
    }

    #[test]
    fn exactly_one_combination() {
        let segs = [seg(0, NoiseLevel::Quiet), seg(1, NoiseLevel::Quiet), seg(2, NoiseLevel::Db75)];
        let refs: Vec<&Segment> = segs.iter().collect();
        let f = NoiseFilter::loudest();
        assert_eq!(triplet_combinations(&refs, &f), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_triplets(&refs, &f, 10, &mut rng);
        assert_eq!(t.len(), 1);
        assert!(t[0].is_valid());
        assert_eq!(t[0].noisy.segment_id, SegmentId(2));
    }

    #[test]
    fn one_quiet_segment_gives_nothing() {
        let segs = [seg(0, NoiseLevel::Quiet), seg(1, NoiseLevel::Db75), seg(2, NoiseLevel::Db55)];
        let refs: Vec<&Segment> = segs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triplets(&refs, &NoiseFilter::all_noisy(), 5, &mut rng).is_empty());
    }

    #[test]
    fn filter_excludes_other_levels() {
        let segs = [seg(0, NoiseLevel::Quiet), seg(1, NoiseLevel::Quiet), seg(2, NoiseLevel::Db75)];
        let refs: Vec<&Segment> = segs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = NoiseFilter::new([NoiseLevel::Db55]).unwrap();
        assert!(sample_triplets(&refs, &f, 5, &mut rng).is_empty());
    }

    #[test]
    fn draws_are_distinct_and_cover_everything_when_asked() {
        let segs: Vec<Segment> = [
            NoiseLevel::Quiet,
            NoiseLevel::Db55,
            NoiseLevel::Quiet,
            NoiseLevel::Db75,
            NoiseLevel::Quiet,
            NoiseLevel::Db65,
            NoiseLevel::Quiet,
        ]
        .iter()
        .enumerate()
        .map(|(i, &n)| seg(i as u32, n))
        .collect();
        let refs: Vec<&Segment> = segs.iter().collect();
        let f = NoiseFilter::all_noisy();
        let total = triplet_combinations(&refs, &f);
        assert_eq!(total, 3 * 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = sample_triplets(&refs, &f, 100, &mut rng);
        assert_eq!(t.len(), total);
        let keys: BTreeSet<_> = t
            .iter()
            .map(|t| {
                let (a, b) = (t.quiet_a.segment_id.min(t.quiet_b.segment_id), t.quiet_a.segment_id.max(t.quiet_b.segment_id));
                (t.noisy.segment_id, a, b)
            })
            .collect();
        assert_eq!(keys.len(), total);
        assert!(t.iter().all(Triplet::is_valid));
        let partial = sample_triplets(&refs, &f, 7, &mut rng);
        assert_eq!(partial.len(), 7);
    }
}
