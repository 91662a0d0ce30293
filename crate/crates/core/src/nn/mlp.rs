use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot_uniform, Parameters};
use crate::autodiff::{AdError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Stack of affine layers; the last layer is always linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var, Activation)>,
}

impl MlpVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b])
    }
}

impl MlpParams {
    fn build(
        dims: &[usize],
        hidden_activation: Activation,
        mut weight: impl FnMut(usize, usize) -> Result<Tensor, AdError>,
    ) -> Result<Self, AdError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(AdError::ShapeMismatch(format!("mlp dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok(DenseLayer {
                    weight: weight(w[1], w[0])?,
                    bias: Tensor::zeros(vec![w[1]])?,
                    activation: if i == last { Activation::Linear } else { hidden_activation },
                })
            })
            .collect::<Result<_, AdError>>()?;
        Ok(Self { layers })
    }

    /// `dims = [input, hidden..., output]`.
    pub fn zeros(dims: &[usize], hidden_activation: Activation) -> Result<Self, AdError> {
        Self::build(dims, hidden_activation, |r, c| Tensor::zeros(vec![r, c]))
    }

    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden_activation: Activation, rng: &mut R) -> Result<Self, AdError> {
        Self::build(dims, hidden_activation, |r, c| glorot_uniform(r, c, rng))
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[0]
    }

    pub fn validate(&self) -> Result<(), AdError> {
        let Some(first) = self.layers.first() else {
            return Err(AdError::ShapeMismatch("mlp without layers".into()));
        };
        let mut width = first.weight.shape().get(1).copied().unwrap_or(0);
        for (i, layer) in self.layers.iter().enumerate() {
            let s = layer.weight.shape();
            if s.len() != 2 || s[1] != width || layer.bias.shape() != [s[0]] {
                return Err(AdError::ShapeMismatch(format!("mlp layer {i}: weight {s:?}")));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(AdError::NonFinite(format!("mlp layer {i}")));
            }
            width = s[0];
        }
        if self.layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(AdError::ShapeMismatch("mlp output layer must be linear".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<MlpVars, AdError> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.param(l.weight.clone())?, tape.param(l.bias.clone())?, l.activation)))
            .collect::<Result<_, AdError>>()?;
        Ok(MlpVars { layers })
    }

    /// Wraps already-recorded variables, in [`Parameters::tensors`] order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<MlpVars, AdError> {
        if vars.len() != 2 * self.layers.len() {
            return Err(AdError::ShapeMismatch(format!(
                "mlp with {} layers given {} variables",
                self.layers.len(),
                vars.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(vars.chunks(2))
            .map(|(l, wb)| (wb[0], wb[1], l.activation))
            .collect();
        Ok(MlpVars { layers })
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

pub fn mlp_forward(tape: &mut Tape, x: Var, params: &MlpVars) -> Result<Var, AdError> {
    let mut h = x;
    for &(w, b, act) in &params.layers {
        let wx = tape.matmul(w, h)?;
        let y = tape.add(wx, b)?;
        h = match act {
            Activation::Linear => y,
            Activation::Relu => tape.relu(y)?,
            Activation::Tanh => tape.tanh(y)?,
        };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(params: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let xv = tape.constant(Tensor::vector(x.to_vec()).unwrap()).unwrap();
        let y = mlp_forward(&mut tape, xv, &vars).unwrap();
        tape.value(y).values().to_vec()
    }

    #[test]
    fn zero_head_outputs_zero() {
        let p = MlpParams::zeros(&[4, 3, 1], Activation::Relu).unwrap();
        assert_eq!(run(&p, &[1.0, -2.0, 3.0, 0.5]), vec![0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut p = MlpParams::zeros(&[3, 3], Activation::Relu).unwrap();
        for i in 0..3 {
            p.layers[0].weight.values_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(run(&p, &[1.5, -2.0, 0.25]), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn two_layer_head_by_hand() {
        // hidden = relu([[1, -1], [0.5, 2]] x + [0.1, -0.2]); out = [2, -3] hidden + 0.5
        // x = [1, 2]: pre = [-1 + 0.1, 4.5 - 0.2] = [-0.9, 4.3] → relu [0, 4.3]
        // out = -12.9 + 0.5 = -12.4
        let mut p = MlpParams::zeros(&[2, 2, 1], Activation::Relu).unwrap();
        p.layers[0].weight.values_mut().copy_from_slice(&[1.0, -1.0, 0.5, 2.0]);
        p.layers[0].bias.values_mut().copy_from_slice(&[0.1, -0.2]);
        p.layers[1].weight.values_mut().copy_from_slice(&[2.0, -3.0]);
        p.layers[1].bias.values_mut()[0] = 0.5;
        let out = run(&p, &[1.0, 2.0]);
        assert!((out[0] - -12.4).abs() < 1e-12);
    }

    #[test]
    fn input_dim_mismatch() {
        let p = MlpParams::zeros(&[3, 1], Activation::Relu).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(mlp_forward(&mut tape, x, &vars), Err(AdError::ShapeMismatch(_))));
    }

    #[test]
    fn last_layer_is_linear() {
        let p = MlpParams::zeros(&[4, 3, 2, 1], Activation::Tanh).unwrap();
        let acts: Vec<_> = p.layers.iter().map(|l| l.activation).collect();
        assert_eq!(acts, vec![Activation::Tanh, Activation::Tanh, Activation::Linear]);
        assert_eq!((p.input_dim(), p.output_dim()), (4, 1));
        p.validate().unwrap();
    }
}
