use std::collections::{BTreeSet, HashMap};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{encode_on_tape, encode_with, AgeNorm, BoundModel, ModelBundle, ModelVariant};
use super::PipelineError;
use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::data::{sample_triplets, select_anchor, Dataset, NoiseFilter, Segment, SegmentId, SessionId, Triplet};
use crate::nn::{
    bce_with_logits, bound_vars, grl_apply, init_gru, mean_of, mlp_forward, mse_loss, triplet_loss, AdamWConfig,
    AdamWState, GruParams, Parameters,
};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub noise_filter: NoiseFilter,
    pub triplets_per_subject_per_epoch: usize,
    pub hidden_dim: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 64,
            seed: 0,
            noise_filter: NoiseFilter::default(),
            triplets_per_subject_per_epoch: 8,
            hidden_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Only used when no pre-trained encoder is supplied.
    pub hidden_dim: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 64,
            seed: 0,
            hidden_dim: 32,
        }
    }
}

fn check_common(epochs: usize, lr: f64, wd: f64, batch: usize, hidden: usize) -> Result<(), PipelineError> {
    if epochs == 0 || batch == 0 || hidden == 0 {
        return Err(PipelineError::InvalidConfig("epochs, batch_size and hidden_dim must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) || !(wd >= 0.0 && wd.is_finite()) {
        return Err(PipelineError::InvalidConfig("lr must be positive and weight_decay non-negative".into()));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        check_common(self.epochs, self.lr, self.weight_decay, self.batch_size, self.hidden_dim)?;
        if self.triplets_per_subject_per_epoch == 0 {
            return Err(PipelineError::InvalidConfig("triplets_per_subject_per_epoch must be positive".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        check_common(self.epochs, self.lr, self.weight_decay, self.batch_size, self.hidden_dim)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: GruParams,
    /// Mean triplet loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Sessions of every segment that entered a forward pass.
    pub touched_sessions: BTreeSet<SessionId>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub bundle: ModelBundle,
    pub bce_trace: Vec<f64>,
    /// Empty unless the variant has an age head.
    pub mse_trace: Vec<f64>,
    /// Segments left out because their subject has no anchor.
    pub skipped_segments: usize,
    pub touched_sessions: BTreeSet<SessionId>,
}

/// One prediction target: a current segment, its anchor where the variant
/// needs one, and the subject's label and age.
#[derive(Clone, Copy, Debug)]
pub struct Instance<'a> {
    pub current: &'a Segment,
    pub anchor: Option<&'a Segment>,
    pub label: f64,
    pub age: f64,
}

/// All non-anchor segments of `dataset` as instances for `variant`.
///
/// Anchor variants skip subjects without a quiet segment; the second value
/// counts the skipped segments.
pub fn build_instances(dataset: &Dataset, variant: ModelVariant) -> Result<(Vec<Instance<'_>>, usize), PipelineError> {
    let subjects = dataset.subject_map();
    let mut out = Vec::new();
    let mut skipped = 0;
    for ((_, subject_id), segs) in dataset.segments_by_subject() {
        let subject = subjects
            .get(&subject_id)
            .ok_or_else(|| PipelineError::InvalidConfig(format!("segment references unknown subject {}", subject_id.0)))?;
        let anchor = select_anchor(&segs).ok();
        if variant.uses_anchor() && anchor.is_none() {
            skipped += segs.len();
            continue;
        }
        for seg in segs {
            if anchor.is_some_and(|a| a.segment_id == seg.segment_id) {
                continue;
            }
            out.push(Instance {
                current: seg,
                anchor: if variant.uses_anchor() { anchor } else { None },
                label: subject.label(),
                age: f64::from(subject.age),
            });
        }
    }
    if skipped > 0 {
        info!("{variant}: skipped {skipped} segments of subjects without an anchor");
    }
    Ok((out, skipped))
}

/// Which terms enter the fine-tuning objective. The default (all on) is the
/// training objective; the switches exist to isolate gradient paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub classification: bool,
    pub age: bool,
    pub reverse_gradient: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            classification: true,
            age: true,
            reverse_gradient: true,
        }
    }
}

pub struct BatchLoss {
    pub total: Var,
    pub bce: Option<Var>,
    pub mse: Option<Var>,
}

/// Fine-tuning loss of one batch. `params` are the bundle's tensors recorded
/// on `tape`, in [`Parameters::tensors`] order.
pub fn batch_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &[Var],
    batch: &[Instance<'_>],
    toggles: LossToggles,
) -> Result<BatchLoss, AdError> {
    let bound = bundle.wrap_vars(tape, params)?;
    batch_loss_bound(tape, bundle, &bound, batch, toggles)
}

fn batch_loss_bound(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bound: &BoundModel,
    batch: &[Instance<'_>],
    toggles: LossToggles,
) -> Result<BatchLoss, AdError> {
    if batch.is_empty() {
        return Err(AdError::EmptySequence("empty batch".into()));
    }
    let variant = bundle.variant;
    let mut anchors: HashMap<SegmentId, Var> = HashMap::new();
    let mut bces = Vec::with_capacity(batch.len());
    let mut mses = Vec::new();
    for inst in batch {
        let f = encode_on_tape(tape, bound, &inst.current.frames)?;
        let x = match (variant, inst.anchor) {
            (ModelVariant::Single, _) => f,
            (ModelVariant::SingleWithAge, _) => {
                let a = tape.constant(Tensor::vector(vec![bundle.age_norm.normalize(inst.age)])?)?;
                tape.concat_last_axis(&[f, a])?
            }
            (_, Some(anchor)) => {
                let fa = match anchors.get(&anchor.segment_id) {
                    Some(&v) => v,
                    None => {
                        let v = encode_on_tape(tape, bound, &anchor.frames)?;
                        anchors.insert(anchor.segment_id, v);
                        v
                    }
                };
                tape.concat_last_axis(&[f, fa])?
            }
            (v, None) => return Err(AdError::ShapeMismatch(format!("{v} instance without anchor"))),
        };
        if toggles.classification {
            let logit = mlp_forward(tape, x, &bound.hl_head)?;
            bces.push(bce_with_logits(tape, logit, inst.label)?);
        }
        if toggles.age {
            if let Some(head) = &bound.age_head {
                let g = if toggles.reverse_gradient { grl_apply(tape, x)? } else { x };
                let est = mlp_forward(tape, g, head)?;
                mses.push(mse_loss(tape, est, bundle.age_norm.normalize(inst.age))?);
            }
        }
    }
    let bce = if bces.is_empty() { None } else { Some(mean_of(tape, &bces)?) };
    let mse = if mses.is_empty() { None } else { Some(mean_of(tape, &mses)?) };
    let total = match (bce, mse) {
        (Some(b), Some(m)) => tape.add(b, m)?,
        (Some(t), None) | (None, Some(t)) => t,
        (None, None) => return Err(AdError::EmptySequence("no loss terms enabled".into())),
    };
    Ok(BatchLoss { total, bce, mse })
}

fn gradients(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect()
}

fn apply_step<P: Parameters>(model: &mut P, opt: &mut AdamWState, grads: &[Vec<f64>]) -> Result<(), AdError> {
    let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut tensors = model.tensors_mut();
    opt.step(&mut tensors, &refs)
}

/// Variation-modeling pre-training of a fresh encoder on `dataset`.
///
/// Only segments of `dataset` are read; callers pass the training folds.
pub fn pretrain_vm(dataset: &Dataset, cfg: &PretrainConfig) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate()?;
    let groups = dataset.segments_by_subject();
    let mut encoder = init_gru(
        dataset.manifest.feature_dim,
        cfg.hidden_dim,
        derive_seed(cfg.seed, "pretrain-init", 0),
    )?;
    let mut opt = AdamWState::new(cfg.adamw(), &encoder.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain-sampling", 0));
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut touched = BTreeSet::new();

    for epoch in 0..cfg.epochs {
        let mut triplets: Vec<Triplet<'_>> = Vec::new();
        for segs in groups.values() {
            triplets.extend(sample_triplets(segs, &cfg.noise_filter, cfg.triplets_per_subject_per_epoch, &mut rng));
        }
        if triplets.is_empty() {
            return Err(PipelineError::NoValidTriplets(cfg.noise_filter.to_string()));
        }
        triplets.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in triplets.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let enc = encoder.bind(&mut tape)?;
            let vars = bound_vars(&enc);
            let h0 = tape.constant(Tensor::zeros(vec![encoder.hidden_dim])?)?;
            let mut cache: HashMap<SegmentId, Var> = HashMap::new();
            let mut losses = Vec::with_capacity(batch.len());
            for t in batch {
                let mut e = |seg: &Segment, tape: &mut Tape| -> Result<Var, AdError> {
                    if let Some(&v) = cache.get(&seg.segment_id) {
                        return Ok(v);
                    }
                    touched.insert(seg.session_id);
                    let v = encode_with(tape, &enc, h0, &seg.frames)?;
                    cache.insert(seg.segment_id, v);
                    Ok(v)
                };
                let fn_ = e(t.noisy, &mut tape)?;
                let fa = e(t.quiet_a, &mut tape)?;
                let fb = e(t.quiet_b, &mut tape)?;
                let va = tape.concat_last_axis(&[fn_, fa])?;
                let vp = tape.concat_last_axis(&[fn_, fb])?;
                let vn = tape.concat_last_axis(&[fa, fb])?;
                losses.push(triplet_loss(&mut tape, va, vp, vn)?);
            }
            let loss = mean_of(&mut tape, &losses)?;
            tape.backward(loss)?;
            weighted += tape.value(loss).item() * batch.len() as f64;
            let grads = gradients(&tape, &vars);
            apply_step(&mut encoder, &mut opt, &grads)?;
        }
        let mean = weighted / triplets.len() as f64;
        debug!("pretrain epoch {epoch}: triplet loss {mean:.6}");
        loss_trace.push(mean);
    }
    Ok(PretrainOutcome {
        encoder,
        loss_trace,
        touched_sessions: touched,
    })
}

/// Fine-tunes `variant` on `dataset` (the training folds). Without a
/// pre-trained encoder a fresh one is initialised from the config seed.
pub fn finetune(
    dataset: &Dataset,
    encoder: Option<GruParams>,
    variant: ModelVariant,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, PipelineError> {
    cfg.validate()?;
    if dataset.segments.is_empty() || dataset.subjects.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let (instances, skipped) = build_instances(dataset, variant)?;
    if instances.is_empty() {
        return Err(if variant.uses_anchor() {
            PipelineError::MissingAnchors
        } else {
            PipelineError::EmptyDataset
        });
    }
    let ages: Vec<f64> = dataset.subjects.iter().map(|s| f64::from(s.age)).collect();
    let age_norm = AgeNorm::from_ages(&ages);
    let encoder = match encoder {
        Some(e) => e,
        None => init_gru(
            dataset.manifest.feature_dim,
            cfg.hidden_dim,
            derive_seed(cfg.seed, "finetune-encoder", 0),
        )?,
    };
    if encoder.input_dim != dataset.manifest.feature_dim {
        return Err(PipelineError::Ad(AdError::ShapeMismatch(format!(
            "encoder expects {} features, dataset has {}",
            encoder.input_dim, dataset.manifest.feature_dim
        ))));
    }
    let mut bundle = ModelBundle::new(variant, encoder, age_norm, derive_seed(cfg.seed, "finetune-heads", 0))?;
    let mut opt = AdamWState::new(cfg.adamw(), &bundle.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "finetune-shuffle", 0));
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut touched = BTreeSet::new();
    let mut bce_trace = Vec::with_capacity(cfg.epochs);
    let mut mse_trace = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut bce_sum, mut mse_sum) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Instance<'_>> = idx.iter().map(|&i| instances[i]).collect();
            for inst in &batch {
                touched.insert(inst.current.session_id);
                if let Some(a) = inst.anchor {
                    touched.insert(a.session_id);
                }
            }
            let mut tape = Tape::new();
            let params = bundle
                .tensors()
                .into_iter()
                .map(|t| tape.param(t.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = batch_loss(&mut tape, &bundle, &params, &batch, LossToggles::default())?;
            tape.backward(loss.total)?;
            let n = batch.len() as f64;
            if let Some(b) = loss.bce {
                bce_sum += tape.value(b).item() * n;
            }
            if let Some(m) = loss.mse {
                mse_sum += tape.value(m).item() * n;
            }
            let grads = gradients(&tape, &params);
            apply_step(&mut bundle, &mut opt, &grads)?;
        }
        let n = instances.len() as f64;
        bce_trace.push(bce_sum / n);
        if variant.has_age_head() {
            mse_trace.push(mse_sum / n);
        }
        debug!("finetune {variant} epoch {epoch}: bce {:.6} mse {:.6}", bce_sum / n, mse_sum / n);
    }
    Ok(FinetuneOutcome {
        bundle,
        bce_trace,
        mse_trace,
        skipped_segments: skipped,
        touched_sessions: touched,
    })
}
