//! GRU encoder, MLP heads, losses, gradient reversal and the AdamW optimizer.

mod adamw;
mod gru;
mod loss;
mod mlp;

pub use adamw::{AdamWConfig, AdamWState};
pub use gru::{avg_pool, avg_pool_sequence, bound_vars, gru_forward, gru_forward_composed, gru_inputs_from, GruParams};
pub use loss::{bce_with_logits, euclidean_distance, grl_apply, mean_of, mse_loss, triplet_loss};
pub use mlp::{mlp_forward, Activation, DenseLayer, MlpParams, MlpVars};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdError, Tensor};

/// Anything holding trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// `rows × cols` matrix with entries ~ U(−√(6/(rows+cols)), +√(6/(rows+cols))).
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor, AdError> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, values)
}

/// Deterministic GRU initialisation from a seed.
pub fn init_gru(input_dim: usize, hidden_dim: usize, seed: u64) -> Result<GruParams, AdError> {
    GruParams::init(input_dim, hidden_dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Deterministic MLP initialisation from a seed.
pub fn init_mlp(dims: &[usize], hidden_activation: Activation, seed: u64) -> Result<MlpParams, AdError> {
    MlpParams::init(dims, hidden_activation, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_gru(5, 7, 11).unwrap();
        let b = init_gru(5, 7, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_gru(5, 7, 12).unwrap());
        for bias in [&a.b_z, &a.b_r, &a.b_h] {
            assert!(bias.values().iter().all(|&v| v == 0.0));
        }
        let m = init_mlp(&[6, 4, 1], Activation::Relu, 3).unwrap();
        assert!(m.layers.iter().all(|l| l.bias.values().iter().all(|&v| v == 0.0)));
        assert_eq!(m, init_mlp(&[6, 4, 1], Activation::Relu, 3).unwrap());
    }

    #[test]
    fn glorot_samples_follow_the_uniform_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = glorot_uniform(100, 100, &mut rng).unwrap();
        let limit = (6.0f64 / 200.0).sqrt();
        let n = w.len() as f64;
        let mean = w.values().iter().sum::<f64>() / n;
        // Var[U(−l, l)] = l²/3
        let std_err = (limit * limit / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * std_err, "mean {mean}, se {std_err}");
        assert!(w.values().iter().all(|v| v.abs() <= limit));
    }
}
