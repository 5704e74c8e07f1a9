//! Slow f64 reference forward pass and finite-difference gradient checking.

use super::arch::{Architecture, Layer, Shape};
use super::network::{conv_geom, dropout_mask, loss_and_grad};
use super::params::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean cross-entropy computed with direct loops in f64, sharing only the
/// dropout mask stream with the engine.
pub fn reference_loss(arch: &Architecture, flat: &[f64], batch: &Tensor, labels: &[usize], seed: u64) -> f64 {
    let n = batch.shape()[0];
    let mut stream = crate::rng::derive_seed(seed, &[]);
    let mut offset = 0;
    let mut take = |len: usize| {
        let s = &flat[offset..offset + len];
        offset += len;
        s.to_vec()
    };
    let mut loss = 0.0;
    let mut masks: Vec<Vec<f32>> = Vec::new();
    for (li, layer) in arch.layers().iter().enumerate() {
        if let Layer::Dropout { p } = *layer {
            stream = crate::rng::derive_seed(stream, &[li as u64]);
            masks.push(dropout_mask(n * arch.input_shape_of(li).size(), p, stream));
        }
    }
    let mut params = Vec::new();
    for layer in arch.layers() {
        match *layer {
            Layer::Conv2d { in_ch, out_ch, kernel, .. } => {
                params.push((take(out_ch * in_ch * kernel * kernel), take(out_ch)))
            }
            Layer::Dense { input, output } => params.push((take(output * input), take(output))),
            _ => {}
        }
    }
    for i in 0..n {
        let mut act: Vec<f64> = batch.data()[i * arch.input_size()..(i + 1) * arch.input_size()]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (mut pi, mut di) = (0, 0);
        for (li, layer) in arch.layers().iter().enumerate() {
            act = match *layer {
                Layer::Conv2d { out_ch, .. } => {
                    let g = conv_geom(arch, li);
                    let (w, b) = &params[pi];
                    pi += 1;
                    let mut y = vec![0.0; out_ch * g.oh * g.ow];
                    for o in 0..out_ch {
                        for oy in 0..g.oh {
                            for ox in 0..g.ow {
                                let mut s = b[o];
                                for c in 0..g.c {
                                    for ky in 0..g.k {
                                        for kx in 0..g.k {
                                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                                continue;
                                            }
                                            s += w[((o * g.c + c) * g.k + ky) * g.k + kx]
                                                * act[(c * g.h + iy as usize) * g.w + ix as usize];
                                        }
                                    }
                                }
                                y[(o * g.oh + oy) * g.ow + ox] = s;
                            }
                        }
                    }
                    y
                }
                Layer::Dense { input, output } => {
                    let (w, b) = &params[pi];
                    pi += 1;
                    (0..output)
                        .map(|o| b[o] + (0..input).map(|j| w[o * input + j] * act[j]).sum::<f64>())
                        .collect()
                }
                Layer::MaxPool2d { kernel, stride } => {
                    let Shape::Spatial { c, h, w } = arch.input_shape_of(li) else { unreachable!() };
                    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                    let mut y = Vec::new();
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut m = f64::NEG_INFINITY;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        m = m.max(act[(ch * h + oy * stride + ky) * w + ox * stride + kx]);
                                    }
                                }
                                y.push(m);
                            }
                        }
                    }
                    y
                }
                Layer::Relu => act.iter().map(|v| v.max(0.0)).collect(),
                Layer::Dropout { .. } => {
                    let m = &masks[di];
                    di += 1;
                    let len = act.len();
                    act.iter().zip(&m[i * len..]).map(|(a, &k)| a * k as f64).collect()
                }
                Layer::Flatten => act,
            };
        }
        let max = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + act.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - act[labels[i]];
    }
    loss / n as f64
}

/// Central finite differences (h = 1e-3) of the f64 reference loss,
/// compared with the engine's backprop gradient on every parameter.
pub fn max_grad_rel_error(arch: &Architecture, params: &ModelParams, batch: &Tensor, labels: &[usize], seed: u64) -> Result<f64> {
    let (loss, grads) = loss_and_grad(arch, params, batch, labels, seed)?;
    let base: Vec<f64> = params.to_flat().iter().map(|&v| v as f64).collect();
    let reference = reference_loss(arch, &base, batch, labels, seed);
    if (reference - loss).abs() > 1e-5 * reference.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!("engine loss {loss} disagrees with reference {reference}")));
    }
    let analytic = grads.to_flat();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        let lp = reference_loss(arch, &x, batch, labels, seed);
        x[i] = base[i] - h;
        let lm = reference_loss(arch, &x, batch, labels, seed);
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(worst)
}
