use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot_uniform, Parameters};
use crate::autodiff::{AdError, GruInputs, Tape, Tensor, Var};

/// One-layer GRU parameters. Input weights are `H × d`, recurrent weights `H × H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Result<Self, AdError> {
        let w = || Tensor::zeros(vec![hidden_dim, input_dim]);
        let u = || Tensor::zeros(vec![hidden_dim, hidden_dim]);
        let b = || Tensor::zeros(vec![hidden_dim]);
        Ok(Self {
            input_dim,
            hidden_dim,
            w_z: w()?,
            w_r: w()?,
            w_h: w()?,
            u_z: u()?,
            u_r: u()?,
            u_h: u()?,
            b_z: b()?,
            b_r: b()?,
            b_h: b()?,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Result<Self, AdError> {
        let mut p = Self::zeros(input_dim, hidden_dim)?;
        for w in [&mut p.w_z, &mut p.w_r, &mut p.w_h] {
            *w = glorot_uniform(hidden_dim, input_dim, rng)?;
        }
        for u in [&mut p.u_z, &mut p.u_r, &mut p.u_h] {
            *u = glorot_uniform(hidden_dim, hidden_dim, rng)?;
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AdError> {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let expected: [&[usize]; 9] = [&[h, d], &[h, d], &[h, d], &[h, h], &[h, h], &[h, h], &[h], &[h], &[h]];
        for (t, want) in self.tensors().into_iter().zip(expected) {
            if t.shape() != want {
                return Err(AdError::ShapeMismatch(format!("gru parameter {:?}, expected {want:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(AdError::NonFinite("gru parameter".into()));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<GruInputs, AdError> {
        Ok(GruInputs {
            w_z: tape.param(self.w_z.clone())?,
            w_r: tape.param(self.w_r.clone())?,
            w_h: tape.param(self.w_h.clone())?,
            u_z: tape.param(self.u_z.clone())?,
            u_r: tape.param(self.u_r.clone())?,
            u_h: tape.param(self.u_h.clone())?,
            b_z: tape.param(self.b_z.clone())?,
            b_r: tape.param(self.b_r.clone())?,
            b_h: tape.param(self.b_h.clone())?,
        })
    }
}

impl Parameters for GruParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

pub fn bound_vars(p: &GruInputs) -> [Var; 9] {
    [p.w_z, p.w_r, p.w_h, p.u_z, p.u_r, p.u_h, p.b_z, p.b_r, p.b_h]
}

/// Inverse of [`bound_vars`].
pub fn gru_inputs_from(vars: &[Var]) -> Result<GruInputs, AdError> {
    match *vars {
        [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h] => Ok(GruInputs {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        }),
        _ => Err(AdError::ShapeMismatch(format!("gru needs 9 variables, got {}", vars.len()))),
    }
}

/// All hidden states of the GRU over `frames` (`[T, d]`), as a `[T, H]` tensor.
pub fn gru_forward(tape: &mut Tape, frames: Var, params: &GruInputs, h0: Var) -> Result<Var, AdError> {
    tape.gru_sequence(frames, params, h0)
}

/// The same recurrence built from primitive tape operators, one step at a
/// time. Slower than [`gru_forward`]; kept as an independent reference.
pub fn gru_forward_composed(tape: &mut Tape, frames: Var, p: &GruInputs, h0: Var) -> Result<Vec<Var>, AdError> {
    let steps = match tape.value(frames).shape() {
        [t, _] => *t,
        s => return Err(AdError::ShapeMismatch(format!("gru input {s:?}"))),
    };
    let mut h = h0;
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.row(frames, t)?;
        let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, hin: Var| -> Result<Var, AdError> {
            let wx = tape.matmul(w, x)?;
            let uh = tape.matmul(u, hin)?;
            let s = tape.add(wx, uh)?;
            tape.add(s, b)
        };
        let az = gate(tape, p.w_z, p.u_z, p.b_z, h)?;
        let z = tape.sigmoid(az)?;
        let ar = gate(tape, p.w_r, p.u_r, p.b_r, h)?;
        let r = tape.sigmoid(ar)?;
        let rh = tape.mul(r, h)?;
        let ah = gate(tape, p.w_h, p.u_h, p.b_h, rh)?;
        let c = tape.tanh(ah)?;
        // (1 − z) ⊙ h + z ⊙ c  ==  h + z ⊙ (c − h)
        let diff = tape.sub(c, h)?;
        let step = tape.mul(z, diff)?;
        h = tape.add(h, step)?;
        states.push(h);
    }
    Ok(states)
}

/// Mean over the time axis of a `[T, H]` state tensor.
pub fn avg_pool(tape: &mut Tape, states: Var) -> Result<Var, AdError> {
    tape.mean_over_axis(states, 0)
}

/// Mean of a list of equal-shape state vectors.
pub fn avg_pool_sequence(tape: &mut Tape, states: &[Var]) -> Result<Var, AdError> {
    if states.is_empty() {
        return Err(AdError::EmptySequence("avg_pool".into()));
    }
    let stacked = tape.stack(states)?;
    tape.mean_over_axis(stacked, 0)
}
