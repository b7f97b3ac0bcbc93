//! Toy multi-layer perceptron with a hand-derived backward pass.
//!
//! The network stands in for a real model at desk scale: a few dense layers
//! with tanh activations trained by mean-squared error on seeded synthetic
//! regression data. Every loop runs in a fixed order over plain f32 so that
//! the same (seed, iteration, rank) always produces the same gradient bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::trainer::flat::{FlatError, FlatTensor};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("model needs at least one hidden layer dimension")]
    NoHidden,
    #[error("dimensions must be positive")]
    ZeroDim,
    #[error(transparent)]
    Flat(#[from] FlatError),
    #[error("parameter table does not match the model spec")]
    ShapeMismatch,
}

/// Dense-network shape: input -> hidden... -> output, tanh between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub batch_size: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden.is_empty() {
            return Err(ModelError::NoHidden);
        }
        if self.input_dim == 0
            || self.output_dim == 0
            || self.batch_size == 0
            || self.hidden.iter().any(|&h| h == 0)
        {
            return Err(ModelError::ZeroDim);
        }
        Ok(())
    }

    /// Per-linear-layer (input, output) dimensions.
    pub fn linear_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Layer table in forward order: fc{i}.weight then fc{i}.bias.
    pub fn layer_table(&self) -> Vec<(String, usize)> {
        let mut table = Vec::new();
        for (i, (din, dout)) in self.linear_dims().into_iter().enumerate() {
            table.push((format!("fc{i}.weight"), din * dout));
            table.push((format!("fc{i}.bias"), dout));
        }
        table
    }

    pub fn param_count(&self) -> usize {
        self.layer_table().iter().map(|(_, e)| e).sum()
    }
}

// Distinct streams per (seed, purpose, iteration, rank, group) without
// correlation between adjacent labels.
fn mix_seed(seed: u64, a: u64, b: u64, c: u64, d: u64) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b, c, d] {
        x ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = x.rotate_left(23).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    x
}

/// Seeded initial parameters: each layer uniform in +-1/sqrt(fan_in).
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<FlatTensor, ModelError> {
    spec.validate()?;
    let mut params = FlatTensor::from_layer_table(&spec.layer_table())?;
    for (i, (din, _dout)) in spec.linear_dims().into_iter().enumerate() {
        let bound = 1.0 / (din as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, i as u64, 0, 0));
        for w in params.layer_slice_mut(&format!("fc{i}.weight"))?.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        // Biases start at zero.
    }
    Ok(params)
}

/// Synthetic regression batch for one (iteration, rank, group).
///
/// Inputs and targets are uniform in [-1, 1); ranks draw disjoint streams so
/// the run is genuinely data-parallel.
pub fn synth_batch(
    spec: &MlpSpec,
    seed: u64,
    iteration: u64,
    rank: u64,
    group: u64,
) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2, iteration, rank, group));
    let xs = (0..spec.batch_size * spec.input_dim)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let ys = (0..spec.batch_size * spec.output_dim)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    (xs, ys)
}

/// Forward and backward pass: returns (MSE loss, gradients).
///
/// Loss is the mean over batch and output dimensions. Gradients are exact
/// derivatives accumulated left to right; no operation may fuse or reorder.
pub fn forward_backward(
    spec: &MlpSpec,
    params: &FlatTensor,
    xs: &[f32],
    ys: &[f32],
) -> Result<(f32, FlatTensor), ModelError> {
    spec.validate()?;
    if params.layer_table() != spec.layer_table() {
        return Err(ModelError::ShapeMismatch);
    }
    let dims = spec.linear_dims();
    let batch = spec.batch_size;
    if xs.len() != batch * spec.input_dim || ys.len() != batch * spec.output_dim {
        return Err(ModelError::ShapeMismatch);
    }

    // Forward, keeping every activation for the backward pass.
    // acts[0] = input, acts[l+1] = output of linear l (after tanh on hidden).
    let mut acts: Vec<Vec<f32>> = Vec::with_capacity(dims.len() + 1);
    acts.push(xs.to_vec());
    for (l, &(din, dout)) in dims.iter().enumerate() {
        let w = params.layer_slice(&format!("fc{l}.weight"))?;
        let b = params.layer_slice(&format!("fc{l}.bias"))?;
        let input = &acts[l];
        let mut out = vec![0.0f32; batch * dout];
        let last = l == dims.len() - 1;
        for s in 0..batch {
            for o in 0..dout {
                let mut acc = b[o];
                for i in 0..din {
                    acc += input[s * din + i] * w[i * dout + o];
                }
                out[s * dout + o] = if last { acc } else { acc.tanh() };
            }
        }
        acts.push(out);
    }

    // MSE over batch x output, single left-to-right accumulator.
    let dout_last = spec.output_dim;
    let denom = (batch * dout_last) as f32;
    let pred = &acts[dims.len()];
    let mut loss = 0.0f32;
    for k in 0..batch * dout_last {
        let d = pred[k] - ys[k];
        loss += d * d;
    }
    loss /= denom;

    // Backward. delta starts as dLoss/dPred.
    let mut grads = FlatTensor::from_layer_table(&spec.layer_table())?;
    let mut delta: Vec<f32> = (0..batch * dout_last)
        .map(|k| 2.0 * (pred[k] - ys[k]) / denom)
        .collect();
    for l in (0..dims.len()).rev() {
        let (din, dout) = dims[l];
        let input = &acts[l];
        {
            let gw = grads.layer_slice_mut(&format!("fc{l}.weight"))?;
            for i in 0..din {
                for o in 0..dout {
                    let mut acc = 0.0f32;
                    for s in 0..batch {
                        acc += input[s * din + i] * delta[s * dout + o];
                    }
                    gw[i * dout + o] = acc;
                }
            }
        }
        {
            let gb = grads.layer_slice_mut(&format!("fc{l}.bias"))?;
            for o in 0..dout {
                let mut acc = 0.0f32;
                for s in 0..batch {
                    acc += delta[s * dout + o];
                }
                gb[o] = acc;
            }
        }
        if l > 0 {
            // Propagate through the linear layer, then the tanh that fed it:
            // d tanh(z) = 1 - tanh(z)^2, and acts[l] already holds tanh(z).
            let w = params.layer_slice(&format!("fc{l}.weight"))?;
            let mut next = vec![0.0f32; batch * din];
            for s in 0..batch {
                for i in 0..din {
                    let mut acc = 0.0f32;
                    for o in 0..dout {
                        acc += w[i * dout + o] * delta[s * dout + o];
                    }
                    let a = input[s * din + i];
                    next[s * din + i] = acc * (1.0 - a * a);
                }
            }
            delta = next;
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> MlpSpec {
        MlpSpec { input_dim: 4, hidden: vec![8], output_dim: 2, batch_size: 1 }
    }

    #[test]
    fn layer_table_shape() {
        let spec = MlpSpec { input_dim: 3, hidden: vec![5, 7], output_dim: 2, batch_size: 4 };
        assert_eq!(
            spec.layer_table(),
            vec![
                ("fc0.weight".to_string(), 15),
                ("fc0.bias".to_string(), 5),
                ("fc1.weight".to_string(), 35),
                ("fc1.bias".to_string(), 7),
                ("fc2.weight".to_string(), 14),
                ("fc2.bias".to_string(), 2),
            ]
        );
        assert_eq!(spec.param_count(), 15 + 5 + 35 + 7 + 14 + 2);
    }

    #[test]
    fn zero_params_zero_targets_give_zero_everything() {
        let spec = tiny_spec();
        let params = FlatTensor::from_layer_table(&spec.layer_table()).unwrap();
        let xs = vec![0.3, -0.2, 0.9, 0.1];
        let ys = vec![0.0, 0.0];
        let (loss, grads) = forward_backward(&spec, &params, &xs, &ys).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn same_inputs_same_bytes() {
        let spec = tiny_spec();
        let params = init_params(&spec, 9).unwrap();
        let (xs, ys) = synth_batch(&spec, 9, 3, 1, 0);
        let (l1, g1) = forward_backward(&spec, &params, &xs, &ys).unwrap();
        let (l2, g2) = forward_backward(&spec, &params, &xs, &ys).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.to_le_bytes(), g2.to_le_bytes());
    }

    #[test]
    fn ranks_draw_distinct_batches() {
        let spec = tiny_spec();
        let (x0, _) = synth_batch(&spec, 9, 0, 0, 0);
        let (x1, _) = synth_batch(&spec, 9, 0, 1, 0);
        let (x2, _) = synth_batch(&spec, 9, 1, 0, 0);
        assert_ne!(x0, x1);
        assert_ne!(x0, x2);
    }

    // Central finite differences on an f64 twin of the forward pass. The
    // analytic f32 gradients must agree to 1e-3 relative.
    #[test]
    fn gradients_match_finite_differences() {
        let spec = MlpSpec { input_dim: 4, hidden: vec![6], output_dim: 3, batch_size: 1 };
        let params = init_params(&spec, 42).unwrap();
        let (xs, ys) = synth_batch(&spec, 42, 0, 0, 0);
        let (_, grads) = forward_backward(&spec, &params, &xs, &ys).unwrap();

        let loss64 = |theta: &[f64]| -> f64 {
            let dims = spec.linear_dims();
            let mut offset = 0usize;
            let mut act: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
            for (l, &(din, dout)) in dims.iter().enumerate() {
                let w = &theta[offset..offset + din * dout];
                let b = &theta[offset + din * dout..offset + din * dout + dout];
                offset += din * dout + dout;
                let mut out = vec![0.0f64; dout];
                for o in 0..dout {
                    let mut acc = b[o];
                    for i in 0..din {
                        acc += act[i] * w[i * dout + o];
                    }
                    out[o] = if l == dims.len() - 1 { acc } else { acc.tanh() };
                }
                act = out;
            }
            let mut loss = 0.0f64;
            for (p, y) in act.iter().zip(ys.iter()) {
                let d = p - *y as f64;
                loss += d * d;
            }
            loss / ys.len() as f64
        };

        let theta: Vec<f64> = params.as_slice().iter().map(|&x| x as f64).collect();
        let h = 1e-5;
        for idx in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (loss64(&plus) - loss64(&minus)) / (2.0 * h);
            let got = grads.as_slice()[idx] as f64;
            let denom = fd.abs().max(1e-6);
            assert!(
                (got - fd).abs() / denom < 1e-3,
                "param {idx}: analytic {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let spec = tiny_spec();
        let other = MlpSpec { input_dim: 5, ..tiny_spec() };
        let params = init_params(&other, 1).unwrap();
        let (xs, ys) = synth_batch(&spec, 1, 0, 0, 0);
        assert_eq!(
            forward_backward(&spec, &params, &xs, &ys),
            Err(ModelError::ShapeMismatch)
        );
    }
}
