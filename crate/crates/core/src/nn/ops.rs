//! Layer kernels on raw NHWC buffers.
//!
//! Convolution is cross-correlation (no kernel flip) lowered to GEMM through
//! im2col, processed in row chunks so that gigapixel inputs never need a full
//! column matrix in memory.

use super::spec::Activation;
use super::tensor::{matmul, Scalar};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.ow * self.patch_len()).max(1)).max(1)
    }
}

/// Fill `cols` with the receptive patches of output rows `rows` (global row
/// index `n * oh + r` across the batch). Out-of-image taps read zero.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, rows: std::ops::Range<usize>, cols: &mut [T]) {
    let plen = g.patch_len();
    let row_span = g.kw * g.cin;
    let sample_len = g.h * g.w * g.cin;
    for (idx, gr) in rows.enumerate() {
        let n = gr / g.oh;
        let r = gr % g.oh;
        let img = &input[n * sample_len..(n + 1) * sample_len];
        for c in 0..g.ow {
            let dst = &mut cols[(idx * g.ow + c) * plen..(idx * g.ow + c + 1) * plen];
            for ky in 0..g.kh {
                let iy = (r * g.sh + ky) as isize - g.ph as isize;
                let seg = &mut dst[ky * row_span..(ky + 1) * row_span];
                if iy < 0 || iy >= g.h as isize {
                    seg.fill(T::zero());
                    continue;
                }
                let x0 = (c * g.sw) as isize - g.pw as isize;
                if x0 >= 0 && x0 as usize + g.kw <= g.w {
                    let start = (iy as usize * g.w + x0 as usize) * g.cin;
                    seg.copy_from_slice(&img[start..start + row_span]);
                } else {
                    for kx in 0..g.kw {
                        let ix = x0 + kx as isize;
                        let d = &mut seg[kx * g.cin..(kx + 1) * g.cin];
                        if ix < 0 || ix >= g.w as isize {
                            d.fill(T::zero());
                        } else {
                            let start = (iy as usize * g.w + ix as usize) * g.cin;
                            d.copy_from_slice(&img[start..start + g.cin]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add column gradients back onto the input gradient.
fn col2im<T: Scalar>(dcols: &[T], g: &ConvGeom, rows: std::ops::Range<usize>, dinput: &mut [T]) {
    let plen = g.patch_len();
    let sample_len = g.h * g.w * g.cin;
    for (idx, gr) in rows.enumerate() {
        let n = gr / g.oh;
        let r = gr % g.oh;
        let img = &mut dinput[n * sample_len..(n + 1) * sample_len];
        for c in 0..g.ow {
            let src = &dcols[(idx * g.ow + c) * plen..(idx * g.ow + c + 1) * plen];
            for ky in 0..g.kh {
                let iy = (r * g.sh + ky) as isize - g.ph as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (c * g.sw + kx) as isize - g.pw as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let s = &src[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    let start = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, v) in img[start..start + g.cin].iter_mut().zip(s) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Convolution over output rows `rows` (global across the batch), writing the
/// activated result into `out` which holds exactly those rows.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward_rows<T: Scalar>(
    input: &[T],
    g: &ConvGeom,
    kernel: &[T],
    bias: &[T],
    activation: Activation,
    rows: std::ops::Range<usize>,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let plen = g.patch_len();
    let chunk = g.rows_per_chunk();
    let base = rows.start;
    let mut r0 = rows.start;
    while r0 < rows.end {
        let r1 = (r0 + chunk).min(rows.end);
        let m = (r1 - r0) * g.ow;
        scratch.resize(m * plen, T::zero());
        im2col(input, g, r0..r1, scratch);
        let dst = &mut out[(r0 - base) * g.ow * g.cout..(r1 - base) * g.ow * g.cout];
        matmul(m, plen, g.cout, scratch, false, kernel, false, dst, false);
        for px in dst.chunks_exact_mut(g.cout) {
            for (v, b) in px.iter_mut().zip(bias) {
                *v += *b;
            }
            apply_activation(px, activation);
        }
        r0 = r1;
    }
}

pub fn conv_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    bias: &[T],
    activation: Activation,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.oh * g.ow * g.cout];
    let mut scratch = Vec::new();
    conv_forward_rows(input, g, kernel, bias, activation, 0..batch * g.oh, &mut out, &mut scratch);
    out
}

/// Accumulates kernel/bias gradients for `dz` (gradient w.r.t. the
/// pre-activation output) and optionally returns the input gradient.
pub fn conv_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    dz: &[T],
    dkernel: &mut [T],
    dbias: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let plen = g.patch_len();
    let chunk = g.rows_per_chunk();
    let total = batch * g.oh;
    let mut dinput = want_input_grad.then(|| vec![T::zero(); batch * g.h * g.w * g.cin]);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for px in dz.chunks_exact(g.cout) {
        for (b, v) in dbias.iter_mut().zip(px) {
            *b += *v;
        }
    }
    let mut r0 = 0;
    while r0 < total {
        let r1 = (r0 + chunk).min(total);
        let m = (r1 - r0) * g.ow;
        cols.resize(m * plen, T::zero());
        im2col(input, g, r0..r1, &mut cols);
        let dz_chunk = &dz[r0 * g.ow * g.cout..r1 * g.ow * g.cout];
        matmul(plen, m, g.cout, &cols, true, dz_chunk, false, dkernel, true);
        if let Some(di) = dinput.as_mut() {
            dcols.resize(m * plen, T::zero());
            matmul(m, g.cout, plen, dz_chunk, false, kernel, true, &mut dcols, false);
            col2im(&dcols, g, r0..r1, di);
        }
        r0 = r1;
    }
    dinput
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

/// Max pooling over output rows `rows` of one sample. Padding taps act as −∞.
/// Returns the per-output argmax as a flat index into the sample input.
pub fn maxpool_rows<T: Scalar>(
    input: &[T],
    g: &PoolGeom,
    rows: std::ops::Range<usize>,
    out: &mut [T],
    argmax: Option<&mut [u32]>,
) {
    let mut argmax = argmax;
    let mut local = vec![u32::MAX; g.c];
    let span = |o: usize, stride: usize, pad: usize, k: usize, n: usize| {
        let lo = (o * stride) as isize - pad as isize;
        (lo.max(0) as usize)..((lo + k as isize).min(n as isize).max(0) as usize)
    };
    for (ri, r) in rows.enumerate() {
        let ys = span(r, g.sh, g.ph, g.kh, g.h);
        for c in 0..g.ow {
            let xs = span(c, g.sw, g.pw, g.kw, g.w);
            let o = (ri * g.ow + c) * g.c;
            let best = &mut out[o..o + g.c];
            let idx: &mut [u32] = match argmax.as_deref_mut() {
                Some(a) => &mut a[o..o + g.c],
                None => &mut local,
            };
            best.fill(T::neg_infinity());
            idx.fill(u32::MAX);
            for iy in ys.clone() {
                for ix in xs.clone() {
                    let base = (iy * g.w + ix) * g.c;
                    for (ch, &v) in input[base..base + g.c].iter().enumerate() {
                        if idx[ch] == u32::MAX || v > best[ch] {
                            best[ch] = v;
                            idx[ch] = (base + ch) as u32;
                        }
                    }
                }
            }
        }
    }
}

pub fn maxpool_forward<T: Scalar>(input: &[T], batch: usize, g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let in_len = g.h * g.w * g.c;
    let out_len = g.oh * g.ow * g.c;
    let mut out = vec![T::zero(); batch * out_len];
    let mut arg = vec![0u32; batch * out_len];
    for n in 0..batch {
        maxpool_rows(
            &input[n * in_len..(n + 1) * in_len],
            g,
            0..g.oh,
            &mut out[n * out_len..(n + 1) * out_len],
            Some(&mut arg[n * out_len..(n + 1) * out_len]),
        );
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], argmax: &[u32], batch: usize, g: &PoolGeom) -> Vec<T> {
    let in_len = g.h * g.w * g.c;
    let out_len = g.oh * g.ow * g.c;
    let mut dx = vec![T::zero(); batch * in_len];
    for n in 0..batch {
        let dxs = &mut dx[n * in_len..(n + 1) * in_len];
        for (d, &a) in dy[n * out_len..(n + 1) * out_len]
            .iter()
            .zip(&argmax[n * out_len..(n + 1) * out_len])
        {
            dxs[a as usize] += *d;
        }
    }
    dx
}

pub fn dense_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    n_in: usize,
    weights: &[T],
    bias: &[T],
    activation: Activation,
) -> Vec<T> {
    let n_out = bias.len();
    let mut y = vec![T::zero(); batch * n_out];
    matmul(batch, n_in, n_out, x, false, weights, false, &mut y, false);
    for row in y.chunks_exact_mut(n_out) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
        apply_activation(row, activation);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    n_in: usize,
    weights: &[T],
    dz: &[T],
    dweights: &mut [T],
    dbias: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let n_out = dbias.len();
    matmul(n_in, batch, n_out, x, true, dz, false, dweights, true);
    for row in dz.chunks_exact(n_out) {
        for (b, v) in dbias.iter_mut().zip(row) {
            *b += *v;
        }
    }
    want_input_grad.then(|| {
        let mut dx = vec![T::zero(); batch * n_in];
        matmul(batch, n_out, n_in, dz, false, weights, true, &mut dx, false);
        dx
    })
}

pub fn relu<T: Scalar>(values: &mut [T]) {
    for v in values {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// In-place softmax of one group of logits, max-subtracted.
pub fn softmax_group<T: Scalar>(values: &mut [T]) {
    let max = values.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax along the innermost axis of extent `classes`.
pub fn softmax<T: Scalar>(values: &mut [T], classes: usize) {
    for g in values.chunks_exact_mut(classes) {
        softmax_group(g);
    }
}

pub fn apply_activation<T: Scalar>(values: &mut [T], activation: Activation) {
    match activation {
        Activation::Linear => {}
        Activation::Relu => relu(values),
        Activation::Softmax => softmax_group(values),
    }
}

/// Turn `grad` (w.r.t. activated output `out`) into the gradient w.r.t. the
/// pre-activation values, in place. `classes` is the softmax group size.
pub fn activation_backward<T: Scalar>(grad: &mut [T], out: &[T], activation: Activation, classes: usize) {
    match activation {
        Activation::Linear => {}
        Activation::Relu => {
            for (g, &o) in grad.iter_mut().zip(out) {
                if o <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Softmax => {
            for (g, p) in grad.chunks_exact_mut(classes).zip(out.chunks_exact(classes)) {
                let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
                for (gi, &pi) in g.iter_mut().zip(p) {
                    *gi = pi * (*gi - dot);
                }
            }
        }
    }
}

/// Mean categorical cross-entropy over groups of `classes`; probabilities are
/// clamped at 1e-12 before the log.
pub fn cross_entropy<T: Scalar>(pred: &[T], target: &[T], classes: usize) -> T {
    let groups = pred.len() / classes;
    if groups == 0 {
        return T::zero();
    }
    let eps = T::from_f64(1e-12);
    let mut total = T::zero();
    for (p, y) in pred.chunks_exact(classes).zip(target.chunks_exact(classes)) {
        for (&pi, &yi) in p.iter().zip(y) {
            if yi != T::zero() {
                total += -yi * pi.max(eps).ln();
            }
        }
    }
    total / T::from_f64(groups as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(h: usize, w: usize, cin: usize, k: usize, cout: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            h,
            w,
            cin,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
            cout,
            kh: k,
            kw: k,
            sh: 1,
            sw: 1,
            ph: pad,
            pw: pad,
        }
    }

    #[test]
    fn full_support_kernel_sums_input() {
        let input: Vec<f64> = (0..49).map(|v| v as f64 * 0.25).collect();
        let g = geom(7, 7, 1, 7, 1, 0);
        let out = conv_forward(&input, 1, &g, &[1.0; 49], &[0.0], Activation::Linear);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], input.iter().sum::<f64>());
    }

    #[test]
    fn conv_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernel = [0.5f32, -1.0, 2.0, 0.25];
        let g = geom(4, 4, 1, 2, 1, 0);
        let out = conv_forward(&input, 1, &g, &kernel, &[0.0], Activation::Linear);
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for ky in 0..2 {
                    for kx in 0..2 {
                        acc += input[(r + ky) * 4 + c + kx] * kernel[ky * 2 + kx];
                    }
                }
                assert_eq!(out[r * 3 + c], acc);
            }
        }
    }

    #[test]
    fn maxpool_of_constant_is_constant() {
        let g = PoolGeom {
            h: 6,
            w: 6,
            c: 2,
            oh: 2,
            ow: 2,
            kh: 3,
            kw: 3,
            sh: 3,
            sw: 3,
            ph: 0,
            pw: 0,
        };
        let (out, _) = maxpool_forward(&[3.5f32; 72], 1, &g);
        assert!(out.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn relu_and_softmax_basics() {
        let mut v = [-1.0f32, 0.0, 2.0];
        relu(&mut v);
        assert_eq!(v, [0.0, 0.0, 2.0]);

        let mut s = [0.3f64, 0.3, 0.3];
        softmax_group(&mut s);
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut a = [0.1f64, -2.0, 3.0];
        let mut b = a.map(|x| x + 100.0);
        softmax_group(&mut a);
        softmax_group(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        assert_eq!(cross_entropy(&[1.0f64, 0.0], &[1.0, 0.0], 2), 0.0);
        assert!((cross_entropy(&[0.5f64, 0.5], &[0.0, 1.0], 2) - 2f64.ln()).abs() < 1e-12);
        let third = 1.0 / 3.0;
        assert!((cross_entropy(&[third; 3], &[0.0, 0.0, 1.0], 3) - 3f64.ln()).abs() < 1e-12);
        // Clamping keeps a zero-probability target finite.
        assert!(cross_entropy(&[0.0f64, 1.0], &[1.0, 0.0], 2).is_finite());
    }
}
