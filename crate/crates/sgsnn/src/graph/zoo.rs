//! Seeded random-weight models for conversion checks and demos.
//!
//! Weights are drawn from `N(0, 1/fan_in)` and biases from `N(0, 0.1^2)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GraphBuilder, ModelGraph, Op, Tensor};
use crate::error::{Error, Result};

const BIAS_STD: f64 = 0.1;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor { shape, data: (0..n).map(|_| d.sample(rng)).collect() }
}

fn dense_params(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> (Tensor, Tensor) {
    let w = normal_tensor(rng, vec![n_out, n_in], (1.0 / n_in as f64).sqrt());
    let b = normal_tensor(rng, vec![n_out], BIAS_STD);
    (w, b)
}

/// Dense stack `dims[0] -> ... -> dims[last]` with ReLU between layers.
pub fn random_mlp(dims: &[usize], seed: u64) -> Result<ModelGraph> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::ShapeMismatch(format!("mlp needs at least two positive widths, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let mut x = b.input(&[dims[0]]);
    for (k, pair) in dims.windows(2).enumerate() {
        let (w, bias) = dense_params(&mut rng, pair[0], pair[1]);
        x = b.dense(&x, w, bias);
        if k + 2 < dims.len() {
            x = b.unary(&x, Op::Relu);
        }
    }
    b.output(&x);
    b.build()
}

/// `[1, 8, 8] -> conv 3x3 (4 channels, pad 1) -> relu -> maxpool 2x2 -> flatten -> dense 64 -> classes`.
/// The max pool is left intact; run [`prepare`](super::prepare) before converting.
pub fn random_cnn(classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let x = b.input(&[1, 8, 8]);
    let w = normal_tensor(&mut rng, vec![4, 1, 3, 3], (1.0f64 / 9.0).sqrt());
    let bias = normal_tensor(&mut rng, vec![4], BIAS_STD);
    let c = b.conv2d(&x, w, bias, 1, 1);
    let r = b.unary(&c, Op::Relu);
    let p = b.unary(&r, Op::MaxPool2d { kernel: [2, 2], stride: [2, 2] });
    let f = b.unary(&p, Op::Flatten);
    let (w, bias) = dense_params(&mut rng, 64, classes);
    let o = b.dense(&f, w, bias);
    b.output(&o);
    b.build()
}

/// `dense n -> n -> layernorm -> gelu -> dense n -> classes`.
/// The layer norm is left intact; run [`prepare`](super::prepare) before converting.
pub fn random_layernorm_block(n: usize, classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let x = b.input(&[n]);
    let (w, bias) = dense_params(&mut rng, n, n);
    let d = b.dense(&x, w, bias);
    let gamma = Tensor { shape: vec![n], data: (0..n).map(|_| 1.0 + 0.1 * Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect() };
    let beta = normal_tensor(&mut rng, vec![n], BIAS_STD);
    let ln = b.unary(&d, Op::LayerNorm { gamma, beta, eps: 1e-5 });
    let g = b.unary(&ln, Op::Gelu);
    let (w, bias) = dense_params(&mut rng, n, classes);
    let o = b.dense(&g, w, bias);
    b.output(&o);
    b.build()
}

/// `[c, 6, 6] -> conv 3x3 (4 channels) -> batchnorm -> relu -> flatten -> dense -> classes`,
/// with non-trivial batch statistics.
pub fn random_conv_bn(channels: usize, classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let x = b.input(&[channels, 6, 6]);
    let w = normal_tensor(&mut rng, vec![4, channels, 3, 3], (1.0 / (9 * channels) as f64).sqrt());
    let bias = normal_tensor(&mut rng, vec![4], BIAS_STD);
    let c = b.conv2d(&x, w, bias, 1, 0);
    let mean = normal_tensor(&mut rng, vec![4], 0.5);
    let var = Tensor { shape: vec![4], data: normal_tensor(&mut rng, vec![4], 1.0).data.iter().map(|v| 0.5 + v * v).collect() };
    let gamma = Tensor { shape: vec![4], data: normal_tensor(&mut rng, vec![4], 0.3).data.iter().map(|v| 1.0 + v).collect() };
    let beta = normal_tensor(&mut rng, vec![4], 0.3);
    let bn = b.unary(&c, Op::BatchNorm { gamma, beta, mean, var, eps: 1e-5 });
    let r = b.unary(&bn, Op::Relu);
    let f = b.unary(&r, Op::Flatten);
    let (w, bias) = dense_params(&mut rng, 64, classes);
    let o = b.dense(&f, w, bias);
    b.output(&o);
    b.build()
}

/// `n` input tensors of `shape` with `N(0, 1)` entries.
pub fn random_inputs(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| normal_tensor(&mut rng, shape.to_vec(), 1.0)).collect()
}
