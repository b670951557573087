//! Shape inference and dense evaluation of single operators.

use super::{Op, Tensor};
use crate::codec::sigmoid;
use crate::error::{Error, Result};
use crate::neurons::GELU_SLOPE;

fn mismatch(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape != shape {
        return Err(mismatch(format!("{what} has shape {:?}, expected {shape:?}", t.shape)));
    }
    Ok(())
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 || k == 0 {
        return Err(mismatch("kernel and stride must be positive"));
    }
    if n + 2 * p < k {
        return Err(mismatch(format!("kernel {k} exceeds padded extent {}", n + 2 * p)));
    }
    Ok((n + 2 * p - k) / s + 1)
}

/// Channel axis of a batchnorm input.
pub(crate) fn channel_axis(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        0
    } else {
        shape.len() - 1
    }
}

/// Output shape of `op` for the given input shapes.
pub fn infer_shape(op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let first = || ins.first().copied().ok_or_else(|| mismatch("missing input"));
    match op {
        Op::Input => Err(mismatch("input shape is declared, not inferred")),
        Op::Output | Op::Relu | Op::LeakyRelu { .. } | Op::Gelu | Op::Square | Op::Scale { .. } => {
            Ok(first()?.to_vec())
        }
        Op::Dense { weight, bias } => {
            let x = first()?;
            if weight.shape.len() != 2 {
                return Err(mismatch(format!("dense weight must be rank 2, got {:?}", weight.shape)));
            }
            let (o, i) = (weight.shape[0], weight.shape[1]);
            expect_shape(bias, &[o], "dense bias")?;
            match x.last() {
                Some(&n) if n == i => {}
                _ => return Err(mismatch(format!("dense expects last dim {i}, input is {x:?}"))),
            }
            let mut s = x.to_vec();
            *s.last_mut().expect("non-empty") = o;
            Ok(s)
        }
        Op::Conv2d { weight, bias, stride, padding } => {
            let x = first()?;
            if x.len() != 3 || weight.shape.len() != 4 {
                return Err(mismatch(format!("conv2d needs [C,H,W] input and rank-4 weight, got {x:?} and {:?}", weight.shape)));
            }
            let (co, ci, kh, kw) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
            if ci != x[0] {
                return Err(mismatch(format!("conv2d expects {ci} input channels, got {}", x[0])));
            }
            expect_shape(bias, &[co], "conv2d bias")?;
            Ok(vec![co, conv_out(x[1], kh, stride[0], padding[0])?, conv_out(x[2], kw, stride[1], padding[1])?])
        }
        Op::AvgPool2d { kernel, stride, padding } => {
            let x = first()?;
            if x.len() != 3 {
                return Err(mismatch(format!("avgpool2d needs [C,H,W], got {x:?}")));
            }
            Ok(vec![x[0], conv_out(x[1], kernel[0], stride[0], padding[0])?, conv_out(x[2], kernel[1], stride[1], padding[1])?])
        }
        Op::MaxPool2d { kernel, stride } => {
            let x = first()?;
            if x.len() != 3 {
                return Err(mismatch(format!("maxpool2d needs [C,H,W], got {x:?}")));
            }
            Ok(vec![x[0], conv_out(x[1], kernel[0], stride[0], 0)?, conv_out(x[2], kernel[1], stride[1], 0)?])
        }
        Op::BatchNorm { gamma, beta, mean, var, .. } => {
            let x = first()?;
            if x.is_empty() {
                return Err(mismatch("batchnorm on a scalar"));
            }
            let c = x[channel_axis(x)];
            for (t, n) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
                expect_shape(t, &[c], &format!("batchnorm {n}"))?;
            }
            Ok(x.to_vec())
        }
        Op::LayerNorm { gamma, beta, .. } => {
            let x = first()?;
            let n = *x.last().ok_or_else(|| mismatch("layernorm on a scalar"))?;
            expect_shape(gamma, &[n], "layernorm gamma")?;
            expect_shape(beta, &[n], "layernorm beta")?;
            Ok(x.to_vec())
        }
        Op::Add | Op::Max2 | Op::MulInvSqrt => {
            if ins.len() != 2 || ins[0] != ins[1] {
                return Err(mismatch(format!("{} needs two equal shapes, got {ins:?}", op.name())));
            }
            Ok(ins[0].to_vec())
        }
        Op::Flatten => Ok(vec![first()?.iter().product()]),
        Op::Transpose { perm } => {
            let x = first()?;
            let mut seen = vec![false; x.len()];
            if perm.len() != x.len() || perm.iter().any(|&p| p >= x.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(mismatch(format!("bad permutation {perm:?} for rank {}", x.len())));
            }
            Ok(perm.iter().map(|&p| x[p]).collect())
        }
        Op::Gather { slots, index, shape } => {
            if slots.len() != index.len() {
                return Err(mismatch("gather slot and index lists differ in length"));
            }
            if shape.iter().product::<usize>() != index.len() {
                return Err(mismatch(format!("gather of {} values cannot have shape {shape:?}", index.len())));
            }
            for (&s, &i) in slots.iter().zip(index) {
                let src = ins.get(s as usize).ok_or_else(|| mismatch(format!("gather slot {s} out of range")))?;
                if i as usize >= src.iter().product::<usize>() {
                    return Err(mismatch(format!("gather index {i} out of range for {src:?}")));
                }
            }
            Ok(shape.clone())
        }
        Op::Neuron { w, b, .. } => {
            let x = first()?;
            if ins.iter().any(|s| s != &x) {
                return Err(mismatch(format!("neuron operands differ in shape: {ins:?}")));
            }
            for t in w.iter().chain(b) {
                expect_shape(t, x, "neuron calibration")?;
            }
            Ok(x.to_vec())
        }
    }
}

/// Evaluates `op` into `out`. Shapes must already have been validated by
/// [`infer_shape`].
pub fn eval_op(op: &Op, ins: &[&[f64]], in_shapes: &[&[usize]], out_shape: &[usize], out: &mut Vec<f64>) {
    out.clear();
    match op {
        Op::Input => out.extend_from_slice(ins[0]),
        Op::Output | Op::Flatten => out.extend_from_slice(ins[0]),
        Op::Relu => out.extend(ins[0].iter().map(|&x| x.max(0.0))),
        Op::LeakyRelu { delta } => out.extend(ins[0].iter().map(|&x| if x >= 0.0 { x } else { delta * x })),
        Op::Gelu => out.extend(ins[0].iter().map(|&x| x * sigmoid(GELU_SLOPE * x))),
        Op::Square => out.extend(ins[0].iter().map(|&x| x * x)),
        Op::Scale { factor } => out.extend(ins[0].iter().map(|&x| factor * x)),
        Op::Add => out.extend(ins[0].iter().zip(ins[1]).map(|(a, b)| a + b)),
        Op::Max2 => out.extend(ins[0].iter().zip(ins[1]).map(|(a, b)| a.max(*b))),
        Op::MulInvSqrt => out.extend(ins[0].iter().zip(ins[1]).map(|(a, b)| a / b.sqrt())),
        Op::Dense { weight, bias } => {
            let (o, n) = (weight.shape[0], weight.shape[1]);
            for row in ins[0].chunks_exact(n) {
                for k in 0..o {
                    let w = &weight.data[k * n..(k + 1) * n];
                    out.push(bias.data[k] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
                }
            }
        }
        Op::Conv2d { weight, bias, stride, padding } => {
            let x = ins[0];
            let (h, w) = (in_shapes[0][1], in_shapes[0][2]);
            let (co, ci, kh, kw) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
            let (ho, wo) = (out_shape[1], out_shape[2]);
            out.resize(co * ho * wo, 0.0);
            for c in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bias.data[c];
                        for d in 0..ci {
                            for a in 0..kh {
                                let r = (i * stride[0] + a) as isize - padding[0] as isize;
                                if r < 0 || r >= h as isize {
                                    continue;
                                }
                                for bcol in 0..kw {
                                    let q = (j * stride[1] + bcol) as isize - padding[1] as isize;
                                    if q < 0 || q >= w as isize {
                                        continue;
                                    }
                                    acc += weight.data[((c * ci + d) * kh + a) * kw + bcol]
                                        * x[(d * h + r as usize) * w + q as usize];
                                }
                            }
                        }
                        out[(c * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        Op::AvgPool2d { kernel, stride, padding } => {
            pool(ins[0], in_shapes[0], out_shape, *kernel, *stride, *padding, out, |vals, count| {
                vals.iter().sum::<f64>() / count as f64
            })
        }
        Op::MaxPool2d { kernel, stride } => {
            pool(ins[0], in_shapes[0], out_shape, *kernel, *stride, [0, 0], out, |vals, _| {
                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
        }
        Op::BatchNorm { gamma, beta, mean, var, eps } => {
            let shape = in_shapes[0];
            let axis = channel_axis(shape);
            let inner: usize = shape[axis + 1..].iter().product();
            let c = shape[axis];
            out.extend(ins[0].iter().enumerate().map(|(k, &x)| {
                let ch = (k / inner) % c;
                (x - mean.data[ch]) / (var.data[ch] + eps).sqrt() * gamma.data[ch] + beta.data[ch]
            }));
        }
        Op::LayerNorm { gamma, beta, eps } => {
            let n = gamma.len();
            for row in ins[0].chunks_exact(n) {
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                let sd = (var + eps).sqrt();
                out.extend(row.iter().enumerate().map(|(k, x)| (x - mu) / sd * gamma.data[k] + beta.data[k]));
            }
        }
        Op::Transpose { perm } => {
            let shape = in_shapes[0];
            let rank = shape.len();
            let mut in_strides = vec![1usize; rank];
            for d in (0..rank.saturating_sub(1)).rev() {
                in_strides[d] = in_strides[d + 1] * shape[d + 1];
            }
            let total: usize = shape.iter().product();
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let src: usize = (0..rank).map(|d| idx[d] * in_strides[perm[d]]).sum();
                out.push(ins[0][src]);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
        }
        Op::Gather { slots, index, .. } => {
            out.extend(slots.iter().zip(index).map(|(&s, &i)| ins[s as usize][i as usize]));
        }
        Op::Neuron { .. } => panic!("spiking layers are evaluated by the engine"),
    }
}

#[allow(clippy::too_many_arguments)]
fn pool(
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    out: &mut Vec<f64>,
    reduce: impl Fn(&[f64], usize) -> f64,
) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let mut vals = Vec::with_capacity(kernel[0] * kernel[1]);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                vals.clear();
                for a in 0..kernel[0] {
                    let r = (i * stride[0] + a) as isize - padding[0] as isize;
                    for b in 0..kernel[1] {
                        let q = (j * stride[1] + b) as isize - padding[1] as isize;
                        if r >= 0 && r < h as isize && q >= 0 && q < w as isize {
                            vals.push(x[(ch * h + r as usize) * w + q as usize]);
                        }
                    }
                }
                out.push(reduce(&vals, kernel[0] * kernel[1]));
            }
        }
    }
}
