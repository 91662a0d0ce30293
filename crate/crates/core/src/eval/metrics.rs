use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;
use crate::data::{SessionId, SubjectId, SubjectRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(predictions: &[bool], labels: &[bool]) -> Result<Self, EvalError> {
        if predictions.len() != labels.len() {
            return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
        }
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn f1(&self) -> Result<f64, EvalError> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return Err(EvalError::Undefined);
        }
        Ok((2 * self.tp) as f64 / denom as f64)
    }
}

/// `2TP / (2TP + FP + FN)` with hearing loss as the positive class.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f64, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Undefined);
    }
    Confusion::count(predictions, labels)?.f1()
}

/// `k` disjoint session folds covering every session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<SessionId>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test_sessions(&self, fold: usize) -> &[SessionId] {
        &self.folds[fold]
    }

    pub fn train_sessions(&self, fold: usize) -> Vec<SessionId> {
        let mut out: Vec<SessionId> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort();
        out
    }

    /// Hex SHA-256 of the canonical fold listing; equal hashes mean equal splits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for fold in &self.folds {
            for s in fold {
                h.update(s.0.to_le_bytes());
            }
            h.update(u32::MAX.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniformly random partition of sessions into `k` folds whose sizes differ by at most one.
pub fn split_sessions_kfold(session_ids: &[SessionId], k: usize, seed: u64) -> Result<FoldSplit, EvalError> {
    let unique: BTreeSet<SessionId> = session_ids.iter().copied().collect();
    if k == 0 || unique.len() < k {
        return Err(EvalError::TooFewSessions {
            sessions: unique.len(),
            k,
        });
    }
    let mut ids: Vec<SessionId> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in ids.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldSplit { folds })
}

pub const AGE_GROUP_NAMES: [&str; 3] = ["young", "mid", "old"];

/// Subjects sorted by (age, id) and cut into three contiguous groups;
/// remainders go to the younger groups.
pub fn age_tercile_groups(subjects: &[SubjectRecord]) -> Result<[Vec<SubjectId>; 3], EvalError> {
    if subjects.len() < 3 {
        return Err(EvalError::TooFewSubjects(subjects.len()));
    }
    let mut sorted: Vec<&SubjectRecord> = subjects.iter().collect();
    sorted.sort_by_key(|s| (s.age, s.subject_id));
    let (base, rem) = (sorted.len() / 3, sorted.len() % 3);
    let mut groups: [Vec<SubjectId>; 3] = Default::default();
    let mut it = sorted.into_iter();
    for (g, group) in groups.iter_mut().enumerate() {
        let size = base + usize::from(g < rem);
        group.extend(it.by_ref().take(size).map(|s| s.subject_id));
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subj(id: u32, age: u32) -> SubjectRecord {
        SubjectRecord {
            subject_id: SubjectId(id),
            age,
            hearing_loss: false,
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[true, false, true], &[true, false, true]).unwrap(), 1.0);
        // TP = 1, FP = 1, FN = 1
        assert_eq!(f1_score(&[true, true, false], &[true, false, true]).unwrap(), 0.5);
        assert!(matches!(f1_score(&[false, false], &[false, false]), Err(EvalError::Undefined)));
        assert!(matches!(f1_score(&[true], &[true, false]), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn constant_positive_predictor() {
        let labels: Vec<bool> = (0..100).map(|i| i < 48).collect();
        let f1 = f1_score(&[true; 100], &labels).unwrap();
        // TP = 48, FP = 52, FN = 0 → 96 / 148
        assert_eq!(f1, 96.0 / 148.0);
        assert!((f1 - 2.0 * 0.48 / 1.48).abs() < 1e-15);
        assert!((f1 - 0.6486).abs() < 1e-4);
    }

    #[test]
    fn kfold_sizes() {
        let ten: Vec<_> = (0..10).map(SessionId).collect();
        let s = split_sessions_kfold(&ten, 5, 3).unwrap();
        assert!(s.folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<_> = s.folds.concat();
        all.sort();
        assert_eq!(all, ten);
        let eleven: Vec<_> = (0..11).map(SessionId).collect();
        let mut sizes: Vec<_> = split_sessions_kfold(&eleven, 5, 3).unwrap().folds.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        assert_eq!(split_sessions_kfold(&ten, 5, 3).unwrap(), s);
        assert_eq!(split_sessions_kfold(&ten, 5, 3).unwrap().hash(), s.hash());
        assert!(matches!(split_sessions_kfold(&ten[..4], 5, 0), Err(EvalError::TooFewSessions { .. })));
    }

    #[test]
    fn train_sessions_complement_test() {
        let ids: Vec<_> = (0..7).map(SessionId).collect();
        let s = split_sessions_kfold(&ids, 3, 1).unwrap();
        for f in 0..3 {
            let train = s.train_sessions(f);
            assert_eq!(train.len() + s.test_sessions(f).len(), 7);
            assert!(s.test_sessions(f).iter().all(|t| !train.contains(t)));
        }
    }

    #[test]
    fn terciles() {
        let subjects: Vec<_> = [20, 30, 45, 50, 60, 70].iter().enumerate().map(|(i, &a)| subj(i as u32, a)).collect();
        let g = age_tercile_groups(&subjects).unwrap();
        assert_eq!(g[0], vec![SubjectId(0), SubjectId(1)]);
        assert_eq!(g[1], vec![SubjectId(2), SubjectId(3)]);
        assert_eq!(g[2], vec![SubjectId(4), SubjectId(5)]);
        let seven: Vec<_> = (0..7).map(|i| subj(i, 30)).collect();
        let g = age_tercile_groups(&seven).unwrap();
        assert_eq!([g[0].len(), g[1].len(), g[2].len()], [3, 2, 2]);
        assert_eq!(g[0], vec![SubjectId(0), SubjectId(1), SubjectId(2)]);
        assert!(matches!(age_tercile_groups(&seven[..2]), Err(EvalError::TooFewSubjects(2))));
    }
}
