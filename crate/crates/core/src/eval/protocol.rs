use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{age_tercile_groups, f1_score, split_sessions_kfold, FoldSplit, AGE_GROUP_NAMES};
use super::probe::{LinearProbe, PROBE_RIDGE};
use super::report::{BiasSummary, Counts, EvalReport, FoldAudit, GroupScore, MeanStd, SeedSummary, REPORT_FORMAT_VERSION};
use super::stats::pearson_r;
use super::EvalError;
use crate::data::{Dataset, SegmentId, SessionId, SubjectId};
use crate::pipeline::{
    build_instances, finetune, pretrain_vm, FinetuneConfig, Instance, ModelBundle, ModelVariant, PipelineError,
    PretrainConfig, PretrainOutcome,
};
use crate::seed::derive_seed;

/// Cross-validation protocol shared by every variant of one comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Fit the frozen-embedding age probe on every fold.
    pub bias_probe: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seeds: vec![0, 1, 2, 3, 4],
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            bias_probe: true,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k < 2 {
            return Err(EvalError::InvalidConfig("k must be at least 2".into()));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::InvalidConfig("at least one seed is required".into()));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(EvalError::InvalidConfig("seeds must be distinct".into()));
        }
        self.pretrain.validate().map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
        self.finetune.validate().map_err(|e| EvalError::InvalidConfig(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub segment_id: SegmentId,
    pub subject_id: SubjectId,
    pub session_id: SessionId,
    pub fold: usize,
    pub probability: f64,
    pub predicted: bool,
    pub label: bool,
}

/// Everything one seed produced; the summary is what reports aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub format_version: u32,
    pub variant: ModelVariant,
    pub summary: SeedSummary,
    pub split: FoldSplit,
    pub folds: Vec<FoldAudit>,
    pub predictions: Vec<Prediction>,
}

impl SeedOutcome {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("seed outcome serialises") + "\n"
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub seeds: Vec<SeedOutcome>,
}

struct FoldOutcome {
    predictions: Vec<Prediction>,
    audit: FoldAudit,
    /// Held-out subjects' mean probe estimate.
    probe: Vec<(SubjectId, f64)>,
}

/// The embedding the bias probe reads: `V(current, anchor)` for anchor
/// variants and `E(current)` otherwise.
fn probe_embedding(
    bundle: &ModelBundle,
    cache: &mut HashMap<SegmentId, Vec<f64>>,
    inst: &Instance<'_>,
) -> Result<Vec<f64>, PipelineError> {
    let mut enc = |seg: &crate::data::Segment| -> Result<Vec<f64>, PipelineError> {
        if let Some(v) = cache.get(&seg.segment_id) {
            return Ok(v.clone());
        }
        let v = bundle.encode(&seg.frames)?;
        cache.insert(seg.segment_id, v.clone());
        Ok(v)
    };
    let mut v = enc(inst.current)?;
    if let Some(a) = inst.anchor {
        v.extend(enc(a)?);
    }
    Ok(v)
}

/// Probability of hearing loss for one instance, reusing cached encodings.
fn predict_instance(
    bundle: &ModelBundle,
    cache: &mut HashMap<SegmentId, Vec<f64>>,
    inst: &Instance<'_>,
) -> Result<f64, PipelineError> {
    let v = probe_embedding(bundle, cache, inst)?;
    let h = bundle.hidden_dim();
    let x = match bundle.variant {
        ModelVariant::Single => bundle.head_input(&v, None, None)?,
        ModelVariant::SingleWithAge => bundle.head_input(&v, None, Some(inst.age))?,
        _ => bundle.head_input(&v[..h], Some(&v[h..]), None)?,
    };
    Ok(crate::autodiff::sigmoid(bundle.logit_from_head_input(&x)?))
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    dataset: &Dataset,
    split: &FoldSplit,
    fold: usize,
    variant: ModelVariant,
    cfg: &ProtocolConfig,
    seed: u64,
    pretrained: Option<&PretrainOutcome>,
) -> Result<FoldOutcome, EvalError> {
    let wrap = |source: PipelineError| EvalError::Training { seed, fold, source };
    let train_sessions = split.train_sessions(fold);
    let test_sessions = split.test_sessions(fold).to_vec();
    let train = dataset.subset_sessions(&train_sessions);
    let test = dataset.subset_sessions(&test_sessions);
    let ft_cfg = FinetuneConfig {
        seed: derive_seed(seed, "finetune", fold as u64),
        ..cfg.finetune.clone()
    };
    let out = finetune(&train, pretrained.map(|p| p.encoder.clone()), variant, &ft_cfg).map_err(wrap)?;
    let bundle = &out.bundle;

    let (instances, _) = build_instances(&test, variant).map_err(wrap)?;
    let labels: BTreeMap<SubjectId, bool> = test.subjects.iter().map(|s| (s.subject_id, s.hearing_loss)).collect();
    let mut cache = HashMap::new();
    let mut predictions = Vec::with_capacity(instances.len());
    for inst in &instances {
        let probability = predict_instance(bundle, &mut cache, inst).map_err(wrap)?;
        predictions.push(Prediction {
            segment_id: inst.current.segment_id,
            subject_id: inst.current.subject_id,
            session_id: inst.current.session_id,
            fold,
            probability,
            predicted: probability >= 0.5,
            label: labels[&inst.current.subject_id],
        });
    }

    let mut probe = Vec::new();
    if cfg.bias_probe && !instances.is_empty() {
        let (train_inst, _) = build_instances(&train, variant).map_err(wrap)?;
        let mut train_cache = HashMap::new();
        let x: Vec<Vec<f64>> = train_inst
            .iter()
            .map(|i| probe_embedding(bundle, &mut train_cache, i))
            .collect::<Result<_, _>>()
            .map_err(wrap)?;
        let y: Vec<f64> = train_inst.iter().map(|i| i.age).collect();
        let fitted = LinearProbe::fit(&x, &y, PROBE_RIDGE)?;
        let mut per_subject: BTreeMap<SubjectId, (f64, usize)> = BTreeMap::new();
        for inst in &instances {
            let e = probe_embedding(bundle, &mut cache, inst).map_err(wrap)?;
            let slot = per_subject.entry(inst.current.subject_id).or_default();
            slot.0 += fitted.predict(&e);
            slot.1 += 1;
        }
        probe = per_subject.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect();
    }

    let train_set: BTreeSet<SessionId> = train_sessions.iter().copied().collect();
    let pretrain_touched: Vec<SessionId> =
        pretrained.map(|p| p.touched_sessions.iter().copied().collect()).unwrap_or_default();
    let finetune_touched: Vec<SessionId> = out.touched_sessions.iter().copied().collect();
    let leak_free = pretrain_touched.iter().chain(&finetune_touched).all(|s| train_set.contains(s))
        && test_sessions.iter().all(|s| !train_set.contains(s));
    let audit = FoldAudit {
        fold,
        train_sessions,
        test_sessions,
        pretrain_touched,
        finetune_touched,
        leak_free,
        final_bce: out.bce_trace.last().copied().unwrap_or(f64::NAN),
        final_mse: out.mse_trace.last().copied(),
    };
    Ok(FoldOutcome {
        predictions,
        audit,
        probe,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EvalError::InvalidConfig(format!("thread pool: {e}")))
}

/// Session splits of every seed, drawn from the seed's `split` sub-stream.
pub fn seed_splits(dataset: &Dataset, cfg: &ProtocolConfig) -> Result<Vec<FoldSplit>, EvalError> {
    let sessions = dataset.session_ids();
    cfg.seeds
        .iter()
        .map(|&s| split_sessions_kfold(&sessions, cfg.k, derive_seed(s, "split", 0)))
        .collect()
}

/// Runs the cross-validation protocol for one variant.
pub fn evaluate(dataset: &Dataset, variant: ModelVariant, cfg: &ProtocolConfig, jobs: usize) -> Result<Evaluation, EvalError> {
    Ok(evaluate_variants(dataset, &[variant], cfg, jobs)?.remove(0))
}

/// Runs several variants on identical splits; pre-trained encoders are
/// shared by every variant that uses one.
pub fn evaluate_variants(
    dataset: &Dataset,
    variants: &[ModelVariant],
    cfg: &ProtocolConfig,
    jobs: usize,
) -> Result<Vec<Evaluation>, EvalError> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(EvalError::InvalidConfig("no variants requested".into()));
    }
    let groups = age_tercile_groups(&dataset.subjects)?;
    let splits = seed_splits(dataset, cfg)?;
    let pool = pool(jobs)?;
    let k = cfg.k;

    let mut pretrained: HashMap<(usize, usize), PretrainOutcome> = HashMap::new();
    if variants.iter().any(|v| v.uses_pretraining()) {
        let jobs: Vec<(usize, usize)> = (0..cfg.seeds.len()).flat_map(|s| (0..k).map(move |f| (s, f))).collect();
        let outcomes = pool.install(|| {
            jobs.par_iter()
                .map(|&(si, fold)| {
                    let seed = cfg.seeds[si];
                    let train = dataset.subset_sessions(&splits[si].train_sessions(fold));
                    let pcfg = PretrainConfig {
                        seed: derive_seed(seed, "pretrain", fold as u64),
                        ..cfg.pretrain.clone()
                    };
                    pretrain_vm(&train, &pcfg).map_err(|source| EvalError::Training { seed, fold, source })
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        pretrained = jobs.into_iter().zip(outcomes).collect();
    }

    let fold_jobs: Vec<(usize, usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..cfg.seeds.len()).flat_map(move |s| (0..k).map(move |f| (v, s, f))))
        .collect();
    let mut outcomes = pool
        .install(|| {
            fold_jobs
                .par_iter()
                .map(|&(vi, si, fold)| {
                    let variant = variants[vi];
                    let pre = if variant.uses_pretraining() { pretrained.get(&(si, fold)) } else { None };
                    info!("{variant}: seed {} fold {fold}", cfg.seeds[si]);
                    run_fold(dataset, &splits[si], fold, variant, cfg, cfg.seeds[si], pre)
                })
                .collect::<Result<Vec<_>, _>>()
        })?
        .into_iter();

    let mut evaluations = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut seeds = Vec::with_capacity(cfg.seeds.len());
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            let folds: Vec<FoldOutcome> = outcomes.by_ref().take(k).collect();
            seeds.push(assemble_seed(dataset, variant, seed, &splits[si], folds, &groups, cfg.bias_probe)?);
        }
        evaluations.push(Evaluation {
            report: aggregate(dataset, variant, cfg, &seeds, &groups)?,
            seeds,
        });
    }
    Ok(evaluations)
}

fn assemble_seed(
    dataset: &Dataset,
    variant: ModelVariant,
    seed: u64,
    split: &FoldSplit,
    folds: Vec<FoldOutcome>,
    groups: &[Vec<SubjectId>; 3],
    bias_probe: bool,
) -> Result<SeedOutcome, EvalError> {
    let mut predictions: Vec<Prediction> = Vec::new();
    let mut audits = Vec::new();
    let mut probe_rows = Vec::new();
    let mut fold_f1 = Vec::new();
    for f in folds {
        let p: Vec<bool> = f.predictions.iter().map(|p| p.predicted).collect();
        let l: Vec<bool> = f.predictions.iter().map(|p| p.label).collect();
        fold_f1.push(f1_score(&p, &l).ok());
        predictions.extend(f.predictions);
        audits.push(f.audit);
        probe_rows.extend(f.probe);
    }
    predictions.sort_by_key(|p| p.segment_id);

    let (eligible, skipped) = build_instances(dataset, variant).map_err(|source| EvalError::Training {
        seed,
        fold: usize::MAX,
        source,
    })?;
    let expected: Vec<SegmentId> = {
        let mut v: Vec<_> = eligible.iter().map(|i| i.current.segment_id).collect();
        v.sort();
        v
    };
    let got: Vec<SegmentId> = predictions.iter().map(|p| p.segment_id).collect();
    let each_segment_once = expected == got;

    let preds: Vec<bool> = predictions.iter().map(|p| p.predicted).collect();
    let labels: Vec<bool> = predictions.iter().map(|p| p.label).collect();
    let overall_f1 = f1_score(&preds, &labels)?;
    let group_f1 = std::array::from_fn(|g| {
        let members: BTreeSet<SubjectId> = groups[g].iter().copied().collect();
        let (p, l): (Vec<bool>, Vec<bool>) = predictions
            .iter()
            .filter(|p| members.contains(&p.subject_id))
            .map(|p| (p.predicted, p.label))
            .unzip();
        f1_score(&p, &l).ok()
    });

    let bias = if bias_probe {
        let ages = dataset.subject_map();
        let (truth, est): (Vec<f64>, Vec<f64>) = probe_rows
            .iter()
            .map(|(s, e)| (f64::from(ages[s].age), *e))
            .unzip();
        pearson_r(&truth, &est).ok()
    } else {
        None
    };
    let leak_free = audits.iter().all(|a| a.leak_free);
    let summary = SeedSummary {
        seed,
        split_hash: split.hash(),
        overall_f1,
        group_f1,
        fold_f1,
        bias,
        predicted_segments: predictions.len(),
        skipped_segments: skipped,
        leak_free,
        each_segment_once,
    };
    Ok(SeedOutcome {
        format_version: REPORT_FORMAT_VERSION,
        variant,
        summary,
        split: split.clone(),
        folds: audits,
        predictions,
    })
}

fn aggregate(
    dataset: &Dataset,
    variant: ModelVariant,
    cfg: &ProtocolConfig,
    seeds: &[SeedOutcome],
    groups: &[Vec<SubjectId>; 3],
) -> Result<EvalReport, EvalError> {
    let summaries: Vec<SeedSummary> = seeds.iter().map(|s| s.summary.clone()).collect();
    let overall: Vec<f64> = summaries.iter().map(|s| s.overall_f1).collect();
    let ages = dataset.subject_map();
    let group_f1 = (0..3)
        .map(|g| {
            let vals: Vec<f64> = summaries.iter().filter_map(|s| s.group_f1[g]).collect();
            let member_ages: Vec<u32> = groups[g].iter().map(|s| ages[s].age).collect();
            GroupScore {
                group: AGE_GROUP_NAMES[g].to_string(),
                subjects: groups[g].len(),
                min_age: member_ages.iter().copied().min().unwrap_or(0),
                max_age: member_ages.iter().copied().max().unwrap_or(0),
                f1: MeanStd::of(&vals),
                defined_seeds: vals.len(),
            }
        })
        .collect();
    let rs: Vec<f64> = summaries.iter().filter_map(|s| s.bias.map(|b| b.r)).collect();
    let bias = MeanStd::of(&rs).map(|r| BiasSummary {
        abs_r: MeanStd::of(&rs.iter().map(|v| v.abs()).collect::<Vec<_>>()).expect("non-empty"),
        r,
        significant_seeds: summaries
            .iter()
            .filter(|s| s.bias.is_some_and(|b| b.p_value < 0.05))
            .count(),
    });
    let first = &summaries[0];
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        variant,
        k: cfg.k,
        seeds: cfg.seeds.clone(),
        noise_filter: cfg.pretrain.noise_filter.clone(),
        overall_f1: MeanStd::of(&overall).expect("at least one seed"),
        group_f1,
        bias,
        counts: Counts {
            subjects: dataset.subjects.len(),
            segments: dataset.segments.len(),
            eligible_segments: first.predicted_segments,
            skipped_segments: first.skipped_segments,
        },
        protocol_ok: summaries.iter().all(|s| s.leak_free && s.each_segment_once),
        per_seed: summaries,
    })
}
