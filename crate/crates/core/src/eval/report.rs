use serde::{Deserialize, Serialize};

use super::stats::{significance_tests, PearsonResult, WelchResult};
use super::EvalError;
use crate::data::{NoiseFilter, SessionId};
use crate::pipeline::ModelVariant;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Mean and sample standard deviation over seeds (0 for a single seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            values: values.to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: String,
    pub subjects: usize,
    pub min_age: u32,
    pub max_age: u32,
    /// Over the seeds where the group F1 was defined.
    pub f1: Option<MeanStd>,
    pub defined_seeds: usize,
}

/// What one held-out fold saw, for leakage auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_sessions: Vec<SessionId>,
    pub test_sessions: Vec<SessionId>,
    pub pretrain_touched: Vec<SessionId>,
    pub finetune_touched: Vec<SessionId>,
    pub leak_free: bool,
    pub final_bce: f64,
    pub final_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub split_hash: String,
    pub overall_f1: f64,
    pub group_f1: [Option<f64>; 3],
    pub fold_f1: Vec<Option<f64>>,
    /// Age probe on frozen embeddings: held-out subjects, true age vs mean predicted age.
    pub bias: Option<PearsonResult>,
    pub predicted_segments: usize,
    pub skipped_segments: usize,
    pub leak_free: bool,
    pub each_segment_once: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub subjects: usize,
    pub segments: usize,
    pub eligible_segments: usize,
    pub skipped_segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub abs_r: MeanStd,
    pub r: MeanStd,
    /// Seeds whose probe correlation is significant at α = 0.05.
    pub significant_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub variant: ModelVariant,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub noise_filter: NoiseFilter,
    pub overall_f1: MeanStd,
    pub group_f1: Vec<GroupScore>,
    pub bias: Option<BiasSummary>,
    pub counts: Counts,
    pub protocol_ok: bool,
    pub per_seed: Vec<SeedSummary>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: ModelVariant,
    pub overall_f1: MeanStd,
    pub group_f1: Vec<Option<MeanStd>>,
    pub split_hashes: Vec<String>,
}

/// One-tailed test that `variant` beats the row above it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderComparison {
    pub variant: ModelVariant,
    pub baseline: ModelVariant,
    pub welch: WelchResult,
    pub adjusted_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepColumn {
    pub noise_filter: NoiseFilter,
    pub variant: ModelVariant,
    pub overall_f1: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format_version: u32,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<LadderComparison>,
    pub shared_splits: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise_sweep: Vec<NoiseSweepColumn>,
}

impl AblationReport {
    /// Builds the table from per-variant reports given in ladder order.
    pub fn from_reports(reports: &[EvalReport], noise_sweep: Vec<NoiseSweepColumn>) -> Result<Self, EvalError> {
        let first = reports.first().ok_or(EvalError::InvalidConfig("no variants".into()))?;
        let rows: Vec<AblationRow> = reports
            .iter()
            .map(|r| AblationRow {
                variant: r.variant,
                overall_f1: r.overall_f1.clone(),
                group_f1: r.group_f1.iter().map(|g| g.f1.clone()).collect(),
                split_hashes: r.per_seed.iter().map(|s| s.split_hash.clone()).collect(),
            })
            .collect();
        let shared_splits = rows.iter().all(|r| r.split_hashes == rows[0].split_hashes);
        let comparisons = if first.seeds.len() >= 2 && rows.len() >= 2 {
            let pairs: Vec<(&[f64], &[f64])> = rows
                .windows(2)
                .map(|w| (w[1].overall_f1.values.as_slice(), w[0].overall_f1.values.as_slice()))
                .collect();
            significance_tests(&pairs)?
                .into_iter()
                .zip(rows.windows(2))
                .map(|(s, w)| LadderComparison {
                    variant: w[1].variant,
                    baseline: w[0].variant,
                    welch: s.welch,
                    adjusted_p: s.adjusted_p,
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            format_version: REPORT_FORMAT_VERSION,
            seeds: first.seeds.clone(),
            k: first.k,
            rows,
            comparisons,
            shared_splits,
            noise_sweep,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Fixed-width text table: F1 mean ± std in percent per variant and group.
    pub fn table(&self) -> String {
        let fmt = |m: &Option<MeanStd>| match m {
            Some(m) => format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.std),
            None => format!("{:>15}", "n/a"),
        };
        let mut out = format!(
            "{:<16} {:>15} {:>15} {:>15} {:>15}\n",
            "variant", "overall", "young", "mid", "old"
        );
        for r in &self.rows {
            out.push_str(&format!("{:<16} {}", r.variant.name(), fmt(&Some(r.overall_f1.clone()))));
            for g in &r.group_f1 {
                out.push(' ');
                out.push_str(&fmt(g));
            }
            out.push('\n');
        }
        for c in &self.comparisons {
            out.push_str(&format!(
                "{} > {}: one-tailed p = {:.4}, Holm-adjusted p = {:.4}\n",
                c.variant, c.baseline, c.welch.p_value, c.adjusted_p
            ));
        }
        for col in &self.noise_sweep {
            out.push_str(&format!(
                "noise filter {{{}}} ({}): {:.2} ± {:.2}\n",
                col.noise_filter,
                col.variant,
                100.0 * col.overall_f1.mean,
                100.0 * col.overall_f1.std
            ));
        }
        out
    }
}
