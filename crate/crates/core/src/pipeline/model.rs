use std::fmt;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::autodiff::{sigmoid, AdError, GruInputs, Tape, Tensor, Var};
use crate::data::Frames;
use crate::nn::{
    avg_pool, gru_forward, gru_inputs_from, init_gru, init_mlp, mlp_forward, Activation, GruParams, MlpParams, MlpVars, Parameters,
};

/// The five model configurations of the ablation ladder, in ladder order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Current segment only.
    Single,
    /// Current segment plus the subject's normalised age (deliberately biased baseline).
    SingleWithAge,
    /// Current segment paired with the quiet anchor segment.
    Anchor,
    /// `Anchor` with a variation-modeling pre-trained encoder.
    AnchorVm,
    /// `AnchorVm` plus adversarial age-bias mitigation.
    AnchorVmAbm,
}

impl ModelVariant {
    pub const LADDER: [ModelVariant; 5] = [
        ModelVariant::Single,
        ModelVariant::SingleWithAge,
        ModelVariant::Anchor,
        ModelVariant::AnchorVm,
        ModelVariant::AnchorVmAbm,
    ];

    pub fn uses_anchor(self) -> bool {
        matches!(self, ModelVariant::Anchor | ModelVariant::AnchorVm | ModelVariant::AnchorVmAbm)
    }

    pub fn uses_pretraining(self) -> bool {
        matches!(self, ModelVariant::AnchorVm | ModelVariant::AnchorVmAbm)
    }

    pub fn uses_age_input(self) -> bool {
        self == ModelVariant::SingleWithAge
    }

    pub fn has_age_head(self) -> bool {
        self == ModelVariant::AnchorVmAbm
    }

    pub fn head_input_dim(self, hidden: usize) -> usize {
        match self {
            ModelVariant::Single => hidden,
            ModelVariant::SingleWithAge => hidden + 1,
            _ => 2 * hidden,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Single => "single",
            ModelVariant::SingleWithAge => "single_with_age",
            ModelVariant::Anchor => "anchor",
            ModelVariant::AnchorVm => "anchor_vm",
            ModelVariant::AnchorVmAbm => "anchor_vm_abm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Self::LADDER.into_iter().find(|v| v.name() == norm)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training-set age statistics used to standardise age targets and inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeNorm {
    pub mean: f64,
    pub std: f64,
}

impl AgeNorm {
    /// Mean and sample (n − 1) standard deviation. Falls back to unit scale
    /// when fewer than two distinct ages are available.
    pub fn from_ages(ages: &[f64]) -> Self {
        let n = ages.len();
        if n == 0 {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = ages.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn normalize(&self, age: f64) -> f64 {
        (age - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Everything needed to run inference for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub variant: ModelVariant,
    pub encoder: GruParams,
    pub hl_head: MlpParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_head: Option<MlpParams>,
    pub age_norm: AgeNorm,
}

/// Inputs accepted by [`ModelBundle::predict`]; which one applies depends on the variant.
#[derive(Clone, Copy, Debug)]
pub enum PredictInput<'a> {
    Single { current: &'a Frames },
    WithAge { current: &'a Frames, age: f64 },
    Anchored { current: &'a Frames, anchor: &'a Frames },
}

pub(crate) struct BoundModel {
    pub encoder: GruInputs,
    pub h0: Var,
    pub hl_head: MlpVars,
    pub age_head: Option<MlpVars>,
}

impl ModelBundle {
    /// Fresh heads around `encoder` (or a fresh encoder) for `variant`.
    pub fn new(
        variant: ModelVariant,
        encoder: GruParams,
        age_norm: AgeNorm,
        head_seed: u64,
    ) -> Result<Self, PipelineError> {
        let h = encoder.hidden_dim;
        let hl_head = init_mlp(
            &[variant.head_input_dim(h), h, 1],
            Activation::Relu,
            crate::seed::derive_seed(head_seed, "hl-head", 0),
        )?;
        let age_head = if variant.has_age_head() {
            Some(init_mlp(
                &[2 * h, h, 1],
                Activation::Relu,
                crate::seed::derive_seed(head_seed, "age-head", 0),
            )?)
        } else {
            None
        };
        let bundle = Self {
            format_version: BUNDLE_FORMAT_VERSION,
            variant,
            encoder,
            hl_head,
            age_head,
            age_norm,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn fresh(
        variant: ModelVariant,
        input_dim: usize,
        hidden_dim: usize,
        age_norm: AgeNorm,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let encoder = init_gru(input_dim, hidden_dim, crate::seed::derive_seed(seed, "encoder", 0))?;
        Self::new(variant, encoder, age_norm, seed)
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.format_version != BUNDLE_FORMAT_VERSION {
            return Err(PipelineError::InvalidBundle(format!("format version {}", self.format_version)));
        }
        self.encoder.validate()?;
        self.hl_head.validate()?;
        let h = self.hidden_dim();
        if self.hl_head.input_dim() != self.variant.head_input_dim(h) || self.hl_head.output_dim() != 1 {
            return Err(PipelineError::InvalidBundle(format!(
                "classifier head takes {} inputs, {} needs {}",
                self.hl_head.input_dim(),
                self.variant,
                self.variant.head_input_dim(h)
            )));
        }
        match (&self.age_head, self.variant.has_age_head()) {
            (Some(head), true) => {
                head.validate()?;
                if head.input_dim() != 2 * h || head.output_dim() != 1 {
                    return Err(PipelineError::InvalidBundle("age head dimensions".into()));
                }
            }
            (None, false) => {}
            _ => return Err(PipelineError::InvalidBundle(format!("age head presence does not match {}", self.variant))),
        }
        if !(self.age_norm.std > 0.0 && self.age_norm.std.is_finite() && self.age_norm.mean.is_finite()) {
            return Err(PipelineError::InvalidBundle("age normalisation std must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> Result<BoundModel, AdError> {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        self.wrap_vars(tape, &vars)
    }

    /// Interprets `vars` (in [`Parameters::tensors`] order) as this bundle's parameters.
    pub(crate) fn wrap_vars(&self, tape: &mut Tape, vars: &[Var]) -> Result<BoundModel, AdError> {
        let n_hl = 2 * self.hl_head.layers.len();
        let n_age = self.age_head.as_ref().map_or(0, |h| 2 * h.layers.len());
        if vars.len() != 9 + n_hl + n_age {
            return Err(AdError::ShapeMismatch(format!(
                "bundle has {} tensors, got {} variables",
                9 + n_hl + n_age,
                vars.len()
            )));
        }
        let encoder = gru_inputs_from(&vars[..9])?;
        let hl_head = self.hl_head.vars_from(&vars[9..9 + n_hl])?;
        let age_head = self.age_head.as_ref().map(|h| h.vars_from(&vars[9 + n_hl..])).transpose()?;
        let h0 = tape.constant(Tensor::zeros(vec![self.hidden_dim()])?)?;
        Ok(BoundModel {
            encoder,
            h0,
            hl_head,
            age_head,
        })
    }

    /// `E(s)`: average-pooled GRU states of one segment, as an `H`-vector.
    pub fn encode(&self, frames: &Frames) -> Result<Vec<f64>, PipelineError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let f = encode_on_tape(&mut tape, &bound, frames)?;
        Ok(tape.value(f).values().to_vec())
    }

    /// `V(s1, s2) = [E(s1), E(s2)]`.
    pub fn encode_variation(&self, first: &Frames, second: &Frames) -> Result<Vec<f64>, PipelineError> {
        let mut v = self.encode(first)?;
        v.extend(self.encode(second)?);
        Ok(v)
    }

    /// Classifier-head input assembled from already-encoded features.
    pub fn head_input(&self, current: &[f64], anchor: Option<&[f64]>, age: Option<f64>) -> Result<Vec<f64>, PipelineError> {
        let mut x = current.to_vec();
        match (self.variant, anchor, age) {
            (ModelVariant::Single, None, None) => {}
            (ModelVariant::SingleWithAge, None, Some(age)) => x.push(self.age_norm.normalize(age)),
            (v, Some(a), None) if v.uses_anchor() => x.extend_from_slice(a),
            (v, ..) => {
                return Err(PipelineError::VariantInputMismatch(format!(
                    "{v} got anchor={} age={}",
                    anchor.is_some(),
                    age.is_some()
                )))
            }
        }
        Ok(x)
    }

    pub fn logit_from_head_input(&self, x: &[f64]) -> Result<f64, PipelineError> {
        let mut tape = Tape::new();
        let head = self.hl_head.bind(&mut tape)?;
        let xv = tape.constant(Tensor::vector(x.to_vec())?)?;
        let y = mlp_forward(&mut tape, xv, &head)?;
        Ok(tape.value(y).item())
    }

    /// Age-head output (normalised units) for a variation embedding.
    pub fn age_estimate(&self, variation: &[f64]) -> Result<Option<f64>, PipelineError> {
        let Some(head) = &self.age_head else { return Ok(None) };
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape)?;
        let xv = tape.constant(Tensor::vector(variation.to_vec())?)?;
        let y = mlp_forward(&mut tape, xv, &vars)?;
        Ok(Some(tape.value(y).item()))
    }

    /// Probability of hearing loss, `σ(logit)`.
    pub fn predict(&self, input: PredictInput<'_>) -> Result<f64, PipelineError> {
        let x = match input {
            PredictInput::Single { current } => self.head_input(&self.encode(current)?, None, None)?,
            PredictInput::WithAge { current, age } => self.head_input(&self.encode(current)?, None, Some(age))?,
            PredictInput::Anchored { current, anchor } => {
                self.head_input(&self.encode(current)?, Some(&self.encode(anchor)?), None)?
            }
        };
        Ok(sigmoid(self.logit_from_head_input(&x)?))
    }
}

impl Parameters for ModelBundle {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.hl_head.tensors());
        if let Some(a) = &self.age_head {
            t.extend(a.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.hl_head.tensors_mut());
        if let Some(a) = &mut self.age_head {
            t.extend(a.tensors_mut());
        }
        t
    }
}

pub(crate) fn encode_on_tape(tape: &mut Tape, bound: &BoundModel, frames: &Frames) -> Result<Var, AdError> {
    encode_with(tape, &bound.encoder, bound.h0, frames)
}

pub(crate) fn encode_with(tape: &mut Tape, encoder: &GruInputs, h0: Var, frames: &Frames) -> Result<Var, AdError> {
    if frames.is_empty() {
        return Err(AdError::EmptySequence("segment without frames".into()));
    }
    let x = tape.constant(frames.to_tensor()?)?;
    let states = gru_forward(tape, x, encoder, h0)?;
    avg_pool(tape, states)
}
