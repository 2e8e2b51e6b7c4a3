//! Parameterised layers shared by the encoder, predictor and joiner.
//!
//! Each layer records onto a [`Graph`] for training and also has a
//! tape-free `apply` used by the streaming decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, LAYER_NORM_EPS, NodeId, ParamId, ParamStore, Tensor, gemm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Uniform Glorot initialisation, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::matrix(inputs, outputs, w).expect("sized"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }

    /// `x · W + b` for `rows` row-major input rows.
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.outputs);
        let b = store.get(self.bias).data();
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        gemm(x, store.get(self.weight).data(), &mut out, rows, self.inputs, self.outputs, false, false, 1.0);
        out
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![1, width], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, width]));
        Self { gain, bias, width }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let gain = store.get(self.gain).data();
        let bias = store.get(self.bias).data();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(self.width) {
            let n = self.width as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..self.width {
                out.push((row[j] - mean) * inv * gain[j] + bias[j]);
            }
        }
        out
    }
}

/// Inverted dropout mask (`0` or `1/(1-p)`), drawn from an explicit RNG.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.r#gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn graph_and_tape_free_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 5, 4, &mut rng);
        let ln = LayerNorm::new(&mut store, "n", 4);
        store.get_mut(ln.gain).data_mut().copy_from_slice(&[0.5, 1.0, 1.5, 2.0]);
        store.get_mut(lin.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();

        let mut g = Graph::new();
        let xn = g.input(Tensor::matrix(3, 5, x.clone()).unwrap());
        let y = lin.forward(&mut g, &store, xn).unwrap();
        let z = ln.forward(&mut g, &store, y).unwrap();

        let y2 = lin.apply(&store, &x, 3);
        let z2 = ln.apply(&store, &y2);
        for (a, b) in g.value(z).data().iter().zip(&z2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_is_seeded_and_scaled() {
        let a = dropout_mask(4, 8, 0.25, &mut ChaCha8Rng::seed_from_u64(9));
        let b = dropout_mask(4, 8, 0.25, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    }
}
