//! Forward pass, backpropagation and the softmax cross-entropy training step.

use super::adam::AdamState;
use super::arch::{Architecture, Layer, Shape};
use super::ops::{self, ConvGeom};
use super::params::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

enum Saved {
    Nothing,
    Input(Vec<f32>),
    PoolArg(Vec<u32>),
    Mask(Vec<f32>),
}

struct Trace {
    saved: Vec<Saved>,
    logits: Vec<f32>,
}

pub(super) fn conv_geom(arch: &Architecture, layer: usize) -> ConvGeom {
    let (Shape::Spatial { c, h, w }, Shape::Spatial { h: oh, w: ow, .. }) =
        (arch.input_shape_of(layer), arch.output_shapes()[layer])
    else {
        unreachable!("validated conv layer");
    };
    let Layer::Conv2d {
        kernel, stride, pad, ..
    } = arch.layers()[layer]
    else {
        unreachable!("conv_geom on non-conv layer");
    };
    ConvGeom {
        c,
        h,
        w,
        k: kernel,
        stride,
        pad,
        oh,
        ow,
    }
}

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - p)`. Uses a
/// counter-based hash so each element is an independent draw from `seed`.
pub(super) fn dropout_mask(len: usize, p: f32, seed: u64) -> Vec<f32> {
    let scale = 1.0 / (1.0 - p);
    let threshold = (p as f64 * 4_294_967_296.0) as u64;
    let mut mask = Vec::with_capacity(len);
    let mut counter = seed;
    while mask.len() < len {
        counter = counter.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let bits = crate::rng::mix64(counter);
        for half in [bits & 0xFFFF_FFFF, bits >> 32] {
            if mask.len() < len {
                mask.push(if half >= threshold { scale } else { 0.0 });
            }
        }
    }
    mask
}

fn check_batch(arch: &Architecture, params: &ModelParams, batch: &Tensor) -> Result<usize> {
    let shape = batch.shape();
    let [c, h, w] = arch.input_shape();
    if shape.len() != 4 || shape[1..] != [c, h, w] {
        return Err(Error::Shape(format!(
            "batch shape {shape:?} does not match architecture input [_, {c}, {h}, {w}]"
        )));
    }
    let names = arch.param_layer_names();
    if params.layers.len() != names.len()
        || params.layers.iter().zip(&names).any(|(l, n)| &l.name != n)
    {
        return Err(Error::Shape("params do not match architecture layers".into()));
    }
    Ok(shape[0])
}

fn run_forward(
    arch: &Architecture,
    params: &ModelParams,
    batch: &Tensor,
    train_mode: bool,
    dropout_seed: u64,
    keep: bool,
) -> Result<Trace> {
    let n = check_batch(arch, params, batch)?;
    let mut dropout_stream = crate::rng::derive_seed(dropout_seed, &[]);
    let mut act = batch.data().to_vec();
    let mut saved = Vec::with_capacity(arch.layers().len());
    let mut pi = 0;
    for (li, layer) in arch.layers().iter().enumerate() {
        let (next, s) = match *layer {
            Layer::Conv2d { out_ch, .. } => {
                let g = conv_geom(arch, li);
                let p = &params.layers[pi];
                pi += 1;
                let bias = p.bias.as_ref().map(Tensor::data);
                let zero = vec![0.0; out_ch];
                let y = ops::conv_forward(&act, n, &g, p.weight.data(), bias.unwrap_or(&zero), out_ch);
                (y, Saved::Input(act))
            }
            Layer::Dense { input, output } => {
                let p = &params.layers[pi];
                pi += 1;
                let zero = vec![0.0; output];
                let bias = p.bias.as_ref().map_or(&zero[..], Tensor::data);
                let y = ops::dense_forward(&act, n, input, output, p.weight.data(), bias);
                (y, Saved::Input(act))
            }
            Layer::MaxPool2d { kernel, stride } => {
                let Shape::Spatial { c, h, w } = arch.input_shape_of(li) else {
                    unreachable!("validated pool layer")
                };
                let (y, arg) = ops::maxpool_forward(&act, n, (c, h, w), kernel, stride);
                (y, Saved::PoolArg(arg))
            }
            Layer::Relu => {
                let mut y = act.clone();
                y.iter_mut().for_each(|v| *v = v.max(0.0));
                (y, Saved::Input(act))
            }
            Layer::Dropout { p } if train_mode && p > 0.0 => {
                dropout_stream = crate::rng::derive_seed(dropout_stream, &[li as u64]);
                let mask = dropout_mask(act.len(), p, dropout_stream);
                let y = act.iter().zip(&mask).map(|(a, m)| a * m).collect();
                (y, Saved::Mask(mask))
            }
            Layer::Dropout { .. } | Layer::Flatten => (act, Saved::Nothing),
        };
        act = next;
        saved.push(if keep { s } else { Saved::Nothing });
    }
    Ok(Trace { saved, logits: act })
}

/// Logits `[batch, n_classes]`. Dropout is active only in `train_mode`, with
/// masks drawn from `dropout_seed`.
pub fn forward(
    arch: &Architecture,
    params: &ModelParams,
    batch: &Tensor,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<Tensor> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let t = run_forward(arch, params, batch, train_mode, dropout_seed, false)?;
    Ok(Tensor::from_raw(vec![n, arch.n_classes()], t.logits))
}

/// Row-wise softmax of `[n, classes]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    Tensor::from_raw(logits.shape().to_vec(), out)
}

/// Softmax class probabilities in inference mode.
pub fn predict_proba(arch: &Architecture, params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    Ok(softmax_rows(&forward(arch, params, batch, false, 0)?))
}

/// Mean softmax cross-entropy and its gradient with respect to every
/// parameter, for one batch in training mode.
pub fn loss_and_grad(
    arch: &Architecture,
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<(f64, ModelParams)> {
    let n = check_batch(arch, params, batch)?;
    let k = arch.n_classes();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    let trace = run_forward(arch, params, batch, true, dropout_seed, true)?;
    let logits = Tensor::from_raw(vec![n, k], trace.logits);
    let probs = softmax_rows(&logits);

    let mut loss = 0.0f64;
    let mut g = probs.into_data();
    for (i, &y) in labels.iter().enumerate() {
        loss -= (g[i * k + y] as f64).max(1e-30).ln();
        g[i * k + y] -= 1.0;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            loss,
            batch: n,
            max_abs_logit: logits.data().iter().fold(0.0f32, |m, v| m.max(v.abs())),
        });
    }
    let inv = 1.0 / n as f32;
    g.iter_mut().for_each(|v| *v *= inv);

    let mut grads = params.zeros_like();
    let first_param_layer = arch.layers().iter().position(Layer::has_params).unwrap_or(0);
    let mut pi = params.layers.len();
    let mut saved = trace.saved;
    for li in (0..arch.layers().len()).rev() {
        let need_dx = li > first_param_layer;
        let s = std::mem::replace(&mut saved[li], Saved::Nothing);
        g = match (arch.layers()[li], s) {
            (Layer::Conv2d { out_ch, .. }, Saved::Input(x)) => {
                pi -= 1;
                let geom = conv_geom(arch, li);
                let gl = &mut grads.layers[pi];
                let mut db = vec![0.0f32; out_ch];
                let dx = ops::conv_backward(
                    &x,
                    &g,
                    n,
                    &geom,
                    params.layers[pi].weight.data(),
                    out_ch,
                    gl.weight.data_mut(),
                    &mut db,
                    need_dx,
                );
                if let Some(b) = gl.bias.as_mut() {
                    b.data_mut().copy_from_slice(&db);
                }
                match dx {
                    Some(dx) => dx,
                    None => break,
                }
            }
            (Layer::Dense { input, output }, Saved::Input(x)) => {
                pi -= 1;
                let gl = &mut grads.layers[pi];
                let mut db = vec![0.0f32; output];
                let dx = ops::dense_backward(
                    &x,
                    &g,
                    n,
                    input,
                    output,
                    params.layers[pi].weight.data(),
                    gl.weight.data_mut(),
                    &mut db,
                    need_dx,
                );
                if let Some(b) = gl.bias.as_mut() {
                    b.data_mut().copy_from_slice(&db);
                }
                match dx {
                    Some(dx) => dx,
                    None => break,
                }
            }
            (Layer::MaxPool2d { .. }, Saved::PoolArg(arg)) => {
                ops::maxpool_backward(&g, &arg, n, arch.input_shape_of(li).size())
            }
            (Layer::Relu, Saved::Input(x)) => {
                for (gv, xv) in g.iter_mut().zip(&x) {
                    *gv = if *xv > 0.0 { *gv } else { 0.0 };
                }
                g
            }
            (Layer::Dropout { .. }, Saved::Mask(mask)) => {
                for (gv, m) in g.iter_mut().zip(&mask) {
                    *gv *= m;
                }
                g
            }
            (Layer::Dropout { .. } | Layer::Flatten, Saved::Nothing) => g,
            _ => unreachable!("trace does not match layer"),
        };
        if li <= first_param_layer {
            break;
        }
    }
    Ok((loss, grads))
}

/// One Adam step on a batch. Returns the mean cross-entropy before the update.
pub fn train_step(
    arch: &Architecture,
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grad(arch, params, batch, labels, dropout_seed).map_err(|e| match e {
        Error::NonFiniteLoss {
            loss,
            batch,
            max_abs_logit,
            ..
        } => Error::NonFiniteLoss {
            step: adam.step() + 1,
            loss,
            batch,
            max_abs_logit,
        },
        other => other,
    })?;
    adam.apply(params, &grads)?;
    Ok(loss)
}
