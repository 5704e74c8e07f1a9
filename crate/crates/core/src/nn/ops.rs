//! Batched layer kernels. Activations are `[batch, features]` row-major with
//! spatial features laid out as `[c, h, w]`.

/// `c = a * b + beta * c` for `a: [m, k]`, `b: [k, n]`, `c: [m, n]` (row-major,
/// contiguous), where `a` and `b` are addressed through explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    assert!(reach(m, k, a_strides) <= a.len());
    assert!(reach(k, n, b_strides) <= b.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every addressed element of a, b and
    // c lies inside its slice; c does not alias a or b (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn reach(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Writes the patches of one sample into columns `[col0, col0 + positions)`
/// of a `[patch, ld]` column matrix.
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize, col0: usize) {
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * ld + col0..][..g.oh * g.ow];
                if g.stride == 1 && g.pad == 0 {
                    for oy in 0..g.oh {
                        let src = &plane[(oy + ky) * g.w + kx..][..g.ow];
                        row[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(src);
                    }
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        row[oy * g.ow + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                plane[iy as usize * g.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, ld: usize, col0: usize, dx: &mut [f32]) {
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * ld + col0..][..g.oh * g.ow];
                if g.stride == 1 && g.pad == 0 {
                    for oy in 0..g.oh {
                        let dst = &mut plane[(oy + ky) * g.w + kx..][..g.ow];
                        for (d, s) in dst.iter_mut().zip(&row[oy * g.ow..(oy + 1) * g.ow]) {
                            *d += s;
                        }
                    }
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Samples per im2col chunk; small column buffers stay cache resident.
fn chunk_len(g: &ConvGeom, batch: usize) -> usize {
    let per_sample = g.patch() * g.positions() * 4;
    ((256 << 10) / per_sample.max(1)).clamp(1, batch.max(1))
}

pub(crate) fn conv_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    bias: &[f32],
    out_ch: usize,
) -> Vec<f32> {
    let (kk, n) = (g.patch(), g.positions());
    let in_size = g.c * g.h * g.w;
    let mut out = vec![0.0f32; batch * out_ch * n];
    let chunk = chunk_len(g, batch);
    let mut cols = vec![0.0f32; kk * n * chunk];
    let mut y = vec![0.0f32; out_ch * n * chunk];
    for b0 in (0..batch).step_by(chunk) {
        let nb = chunk.min(batch - b0);
        let ld = nb * n;
        for j in 0..nb {
            let b = b0 + j;
            im2col(&x[b * in_size..(b + 1) * in_size], g, &mut cols, ld, j * n);
        }
        // y[out, nb * n] = W[out, kk] * cols[kk, nb * n]
        gemm(out_ch, kk, ld, weight, (kk as isize, 1), &cols, (ld as isize, 1), 0.0, &mut y);
        for j in 0..nb {
            let dst = &mut out[(b0 + j) * out_ch * n..(b0 + j + 1) * out_ch * n];
            for o in 0..out_ch {
                let src = &y[o * ld + j * n..o * ld + (j + 1) * n];
                for (d, s) in dst[o * n..(o + 1) * n].iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_ch: usize,
    dw: &mut [f32],
    db: &mut [f32],
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (kk, n) = (g.patch(), g.positions());
    let in_size = g.c * g.h * g.w;
    let chunk = chunk_len(g, batch);
    let mut cols = vec![0.0f32; kk * n * chunk];
    let mut dyt = vec![0.0f32; out_ch * n * chunk];
    let mut dx = need_dx.then(|| vec![0.0f32; batch * in_size]);
    for b0 in (0..batch).step_by(chunk) {
        let nb = chunk.min(batch - b0);
        let ld = nb * n;
        for j in 0..nb {
            let b = b0 + j;
            im2col(&x[b * in_size..(b + 1) * in_size], g, &mut cols, ld, j * n);
            let dyb = &dy[b * out_ch * n..(b + 1) * out_ch * n];
            for o in 0..out_ch {
                let src = &dyb[o * n..(o + 1) * n];
                db[o] += src.iter().sum::<f32>();
                dyt[o * ld + j * n..o * ld + (j + 1) * n].copy_from_slice(src);
            }
        }
        // dW[out, kk] += dY[out, ld] * cols^T[ld, kk]
        gemm(out_ch, ld, kk, &dyt, (ld as isize, 1), &cols, (1, ld as isize), 1.0, dw);
        if let Some(dx) = dx.as_mut() {
            // dcols[kk, ld] = W^T[kk, out] * dY[out, ld]; reuses the column buffer
            gemm(kk, out_ch, ld, weight, (1, kk as isize), &dyt, (ld as isize, 1), 0.0, &mut cols);
            for j in 0..nb {
                let b = b0 + j;
                col2im_add(&cols, g, ld, j * n, &mut dx[b * in_size..(b + 1) * in_size]);
            }
        }
    }
    dx
}

/// Returns pooled output and, per output element, the flat index (within the
/// sample) of the selected input element.
pub(crate) fn maxpool_forward(
    x: &[f32],
    batch: usize,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let (in_size, out_size) = (c * h * w, c * oh * ow);
    let mut out = vec![0.0f32; batch * out_size];
    let mut arg = vec![0u32; batch * out_size];
    for b in 0..batch {
        let xb = &x[b * in_size..(b + 1) * in_size];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ci * h * w + (oy * stride) * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = ci * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if xb[idx] > xb[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = b * out_size + (ci * oh + oy) * ow + ox;
                    out[o] = xb[best];
                    arg[o] = best as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(dy: &[f32], arg: &[u32], batch: usize, in_size: usize) -> Vec<f32> {
    let out_size = dy.len() / batch;
    let mut dx = vec![0.0f32; batch * in_size];
    for b in 0..batch {
        for o in 0..out_size {
            dx[b * in_size + arg[b * out_size + o] as usize] += dy[b * out_size + o];
        }
    }
    dx
}

/// `y[b, out] = x[b, in] * W^T + bias` with `W: [out, in]`.
pub(crate) fn dense_forward(
    x: &[f32],
    batch: usize,
    input: usize,
    output: usize,
    weight: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let mut y = Vec::with_capacity(batch * output);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    gemm(batch, input, output, x, (input as isize, 1), weight, (1, input as isize), 1.0, &mut y);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    input: usize,
    output: usize,
    weight: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    need_dx: bool,
) -> Option<Vec<f32>> {
    for row in dy.chunks_exact(output) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    // dW[out, in] += dY^T[out, batch] * X[batch, in]
    gemm(output, batch, input, dy, (1, output as isize), x, (input as isize, 1), 1.0, dw);
    need_dx.then(|| {
        let mut dx = vec![0.0f32; batch * input];
        gemm(batch, output, input, dy, (output as isize, 1), weight, (input as isize, 1), 0.0, &mut dx);
        dx
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], g: &ConvGeom, w: &[f32], bias: &[f32], out_ch: usize) -> Vec<f32> {
        let mut y = vec![0.0; out_ch * g.oh * g.ow];
        for o in 0..out_ch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = bias[o];
                    for ci in 0..g.c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                    continue;
                                }
                                s += w[((o * g.c + ci) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    y[(o * g.oh + oy) * g.ow + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad) in &[(1, 0), (2, 1), (1, 2)] {
            let (c, h, w, k, out_ch) = (2, 6, 5, 3, 3);
            let g = ConvGeom {
                c,
                h,
                w,
                k,
                stride,
                pad,
                oh: (h + 2 * pad - k) / stride + 1,
                ow: (w + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f32> = (0..c * h * w).map(|i| ((i * 7 % 11) as f32 - 5.0) / 3.0).collect();
            let wt: Vec<f32> = (0..out_ch * c * k * k).map(|i| ((i * 5 % 13) as f32 - 6.0) / 7.0).collect();
            let bias = vec![0.1, -0.2, 0.3];
            let fast = conv_forward(&x, 1, &g, &wt, &bias, out_ch);
            let slow = naive_conv(&x, &g, &wt, &bias, out_ch);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 9.0, 0.5, 0.5, 0.5, 0.5, 7.0, 0.0, 0.0, 8.0];
        let (y, arg) = maxpool_forward(&x, 1, (1, 4, 4), 2, 2);
        assert_eq!(y, vec![5.0, 9.0, 7.0, 8.0]);
        let dx = maxpool_backward(&[1.0, 1.0, 1.0, 1.0], &arg, 1, 16);
        assert_eq!(dx.iter().sum::<f32>(), 4.0);
        assert_eq!(dx[1], 1.0);
        assert_eq!(dx[7], 1.0);
    }
}
