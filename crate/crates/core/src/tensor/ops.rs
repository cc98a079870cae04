//! Forward kernels and their vector-Jacobian products.
//!
//! Spatial tensors are `[H, W, C]`, row-major. Convolutions zero-pad the
//! border by materializing a padded copy, so every tap is multiplied even
//! where it lands on padding; this keeps multiply counts uniform per pixel.

use std::sync::Arc;

use super::{Scalar, Tensor, TensorError};
use crate::grid;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

/// Surfaces NaN/Inf produced by an op instead of letting it propagate.
pub(crate) fn check_finite<T: Scalar>(
    op: &'static str,
    t: Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_padding(op: &'static str, k: usize, padding: usize) -> Result<(), TensorError> {
    if k % 2 == 0 {
        return Err(invalid(op, format!("kernel size {k} must be odd")));
    }
    if padding != (k - 1) / 2 {
        return Err(invalid(
            op,
            format!("padding {padding} must equal (K-1)/2 = {}", (k - 1) / 2),
        ));
    }
    Ok(())
}

fn pad_hwc<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    if p == 0 {
        return x.to_vec();
    }
    let wp = w + 2 * p;
    let mut out = vec![T::zero(); (h + 2 * p) * wp * c];
    for y in 0..h {
        let dst = ((y + p) * wp + p) * c;
        out[dst..dst + w * c].copy_from_slice(&x[y * w * c..(y + 1) * w * c]);
    }
    out
}

fn crop_hwc<T: Scalar>(xp: &[T], h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    if p == 0 {
        return xp.to_vec();
    }
    let wp = w + 2 * p;
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let src = ((y + p) * wp + p) * c;
        out.extend_from_slice(&xp[src..src + w * c]);
    }
    out
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// ---------------------------------------------------------------------------
// conv2d

fn conv2d_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    let (h, w, cin) = input.dims3()?;
    let [cout, wcin, k, k2] = *weight.shape() else {
        return Err(TensorError::Rank {
            expected: 4,
            shape: weight.shape().to_vec(),
        });
    };
    if k != k2 {
        return Err(invalid("conv2d", "kernel must be square"));
    }
    if wcin != cin {
        return Err(mismatch("conv2d", input.shape(), weight.shape()));
    }
    if bias.shape() != [cout] {
        return Err(mismatch("conv2d", weight.shape(), bias.shape()));
    }
    same_padding("conv2d", k, padding)?;
    Ok((h, w, cin, cout, k))
}

/// `[Cout, Cin, K, K]` → `[K, K, Cin, Cout]` so the inner loop runs over Cout.
fn conv_weight_to_taps<T: Scalar>(weight: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..k * k {
                out[(t * cin + ci) * cout + co] = weight[(co * cin + ci) * k * k + t];
            }
        }
    }
    out
}

fn conv_taps_to_weight<T: Scalar>(taps: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); taps.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..k * k {
                out[(co * cin + ci) * k * k + t] = taps[(t * cin + ci) * cout + co];
            }
        }
    }
    out
}

/// Same-size 2D cross-correlation. `weight` is `[Cout, Cin, K, K]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (h, w, cin, cout, k) = conv2d_dims(input, weight, bias, padding)?;
    let p = padding;
    let wp = w + 2 * p;
    let xp = pad_hwc(input.data(), h, w, cin, p);
    let taps = conv_weight_to_taps(weight.data(), cout, cin, k);
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias.data());
            for ki in 0..k {
                for kj in 0..k {
                    let ip = ((y + ki) * wp + x + kj) * cin;
                    let tp = (ki * k + kj) * cin;
                    for ci in 0..cin {
                        let row = &taps[(tp + ci) * cout..(tp + ci + 1) * cout];
                        axpy(o, xp[ip + ci], row);
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (h, w, cin) = input.dims3().expect("validated in forward");
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let p = padding;
    let wp = w + 2 * p;
    let xp = pad_hwc(input.data(), h, w, cin, p);
    let taps = conv_weight_to_taps(weight.data(), cout, cin, k);
    let mut dxp = vec![T::zero(); xp.len()];
    let mut dtaps = vec![T::zero(); taps.len()];
    let mut db = vec![T::zero(); cout];
    let g = grad_out.data();
    for y in 0..h {
        for x in 0..w {
            let go = &g[(y * w + x) * cout..(y * w + x + 1) * cout];
            for (b, &gv) in db.iter_mut().zip(go) {
                *b += gv;
            }
            for ki in 0..k {
                for kj in 0..k {
                    let ip = ((y + ki) * wp + x + kj) * cin;
                    let tp = (ki * k + kj) * cin;
                    for ci in 0..cin {
                        let r = (tp + ci) * cout..(tp + ci + 1) * cout;
                        dxp[ip + ci] += dot(&taps[r.clone()], go);
                        axpy(&mut dtaps[r], xp[ip + ci], go);
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![h, w, cin], crop_hwc(&dxp, h, w, cin, p)).unwrap(),
        Tensor::new(weight.shape().to_vec(), conv_taps_to_weight(&dtaps, cout, cin, k)).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// depthwise

fn depthwise_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    padding: usize,
) -> Result<(usize, usize, usize, usize), TensorError> {
    let (h, w, c) = input.dims3()?;
    let [wc, k, k2] = *weight.shape() else {
        return Err(TensorError::Rank {
            expected: 3,
            shape: weight.shape().to_vec(),
        });
    };
    if k != k2 {
        return Err(invalid("depthwise_conv2d", "kernel must be square"));
    }
    if wc != c {
        return Err(mismatch("depthwise_conv2d", input.shape(), weight.shape()));
    }
    same_padding("depthwise_conv2d", k, padding)?;
    Ok((h, w, c, k))
}

/// `[C, K, K]` → `[K², C]`.
fn depthwise_to_taps<T: Scalar>(weight: &[T], c: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for ch in 0..c {
        for t in 0..kk {
            out[t * c + ch] = weight[ch * kk + t];
        }
    }
    out
}

/// Per-channel spatial convolution, one `K×K` filter per channel.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (_, _, c, k) = depthwise_dims(input, weight, padding)?;
    let taps = depthwise_to_taps(weight.data(), c, k * k);
    let bank = Tensor::new(vec![1, k * k, c], taps)?;
    grouped_depthwise(input, &bank)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = weight.shape()[0];
    let k = weight.shape()[1];
    let kk = k * k;
    let bank = Tensor::new(vec![1, kk, c], depthwise_to_taps(weight.data(), c, kk)).unwrap();
    let (dx, dbank) = grouped_depthwise_backward(input, &bank, grad_out);
    let mut dw = vec![T::zero(); weight.len()];
    for ch in 0..c {
        for t in 0..kk {
            dw[ch * kk + t] = dbank.data()[t * c + ch];
        }
    }
    (dx, Tensor::new(weight.shape().to_vec(), dw).unwrap())
}

fn grouped_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    let (h, w, c) = input.dims3()?;
    let [groups, kk, kc] = *kernels.shape() else {
        return Err(TensorError::Rank {
            expected: 3,
            shape: kernels.shape().to_vec(),
        });
    };
    if kc != c {
        return Err(mismatch("grouped_depthwise", input.shape(), kernels.shape()));
    }
    let k = (kk as f64).sqrt().round() as usize;
    if k * k != kk || k % 2 == 0 {
        return Err(invalid(
            "grouped_depthwise",
            format!("tap count {kk} is not an odd square"),
        ));
    }
    Ok((h, w, c, groups, k))
}

/// Applies `G` depthwise kernel sets to the same input.
///
/// `kernels` is `[G, K², C]` with taps in `ki·K + kj` order. The output is
/// `[H, W, C·G]` with channel `c·G + g`, the layout `pixel_shuffle` expects
/// when `G = s²` and `g = i·s + j`.
pub fn grouped_depthwise<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (h, w, c, groups, k) = grouped_dims(input, kernels)?;
    let kk = k * k;
    let p = (k - 1) / 2;
    let wp = w + 2 * p;
    let xp = pad_hwc(input.data(), h, w, c, p);
    let bank = kernels.data();
    let mut out = vec![T::zero(); h * w * c * groups];
    let mut acc = vec![T::zero(); c];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c * groups;
            for g in 0..groups {
                acc.iter_mut().for_each(|a| *a = T::zero());
                for ki in 0..k {
                    for kj in 0..k {
                        let ip = ((y + ki) * wp + x + kj) * c;
                        let kr = (g * kk + ki * k + kj) * c;
                        for ((a, &v), &kv) in
                            acc.iter_mut().zip(&xp[ip..ip + c]).zip(&bank[kr..kr + c])
                        {
                            *a += v * kv;
                        }
                    }
                }
                for (ch, &a) in acc.iter().enumerate() {
                    out[base + ch * groups + g] = a;
                }
            }
        }
    }
    Tensor::new(vec![h, w, c * groups], out)
}

/// Returns `(d_input, d_kernels)`.
pub fn grouped_depthwise_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (h, w, c, groups, k) = grouped_dims(input, kernels).expect("validated in forward");
    let kk = k * k;
    let p = (k - 1) / 2;
    let wp = w + 2 * p;
    let xp = pad_hwc(input.data(), h, w, c, p);
    let bank = kernels.data();
    let g_out = grad_out.data();
    let mut dxp = vec![T::zero(); xp.len()];
    let mut dbank = vec![T::zero(); bank.len()];
    let mut go = vec![T::zero(); c];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c * groups;
            for g in 0..groups {
                for (ch, v) in go.iter_mut().enumerate() {
                    *v = g_out[base + ch * groups + g];
                }
                for ki in 0..k {
                    for kj in 0..k {
                        let ip = ((y + ki) * wp + x + kj) * c;
                        let kr = (g * kk + ki * k + kj) * c;
                        for ch in 0..c {
                            dxp[ip + ch] += go[ch] * bank[kr + ch];
                            dbank[kr + ch] += go[ch] * xp[ip + ch];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![h, w, c], crop_hwc(&dxp, h, w, c, p)).unwrap(),
        Tensor::new(kernels.shape().to_vec(), dbank).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// dense

/// Affine map along the last axis. `weight` is `[Cin, Cout]`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let [cin, cout] = *weight.shape() else {
        return Err(TensorError::Rank {
            expected: 2,
            shape: weight.shape().to_vec(),
        });
    };
    if input.rank() == 0 || input.last_dim() != cin {
        return Err(mismatch("dense", input.shape(), weight.shape()));
    }
    if bias.shape() != [cout] {
        return Err(mismatch("dense", weight.shape(), bias.shape()));
    }
    let rows = input.len() / cin;
    let wd = weight.data();
    let mut out = Vec::with_capacity(rows * cout);
    for r in 0..rows {
        let xr = &input.data()[r * cin..(r + 1) * cin];
        let start = out.len();
        out.extend_from_slice(bias.data());
        let o = &mut out[start..];
        for (kx, &xv) in xr.iter().enumerate() {
            axpy(o, xv, &wd[kx * cout..(kx + 1) * cout]);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, cout) = (weight.shape()[0], weight.shape()[1]);
    let rows = input.len() / cin;
    let wd = weight.data();
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    for r in 0..rows {
        let xr = &input.data()[r * cin..(r + 1) * cin];
        let gr = &grad_out.data()[r * cout..(r + 1) * cout];
        for (b, &g) in db.iter_mut().zip(gr) {
            *b += g;
        }
        for kx in 0..cin {
            let wr = kx * cout..(kx + 1) * cout;
            dx[r * cin + kx] = dot(&wd[wr.clone()], gr);
            axpy(&mut dw[wr], xr[kx], gr);
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).unwrap(),
        Tensor::new(weight.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// unfold / sampling / shuffles

/// Gathers each pixel's zero-padded `k×k` neighbourhood into the channel
/// axis with layout `c·k² + ki·k + kj`.
pub fn unfold<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>, TensorError> {
    let (h, w, c) = input.dims3()?;
    if k % 2 == 0 {
        return Err(invalid("unfold", format!("window {k} must be odd")));
    }
    let kk = k * k;
    let r = (k / 2) as isize;
    let x = input.data();
    let mut out = vec![T::zero(); h * w * c * kk];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c * kk..(y * w + xx + 1) * c * kk];
            for ki in 0..k {
                let sy = y as isize + ki as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let sx = xx as isize + kj as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ip = (sy as usize * w + sx as usize) * c;
                    for ch in 0..c {
                        o[ch * kk + ki * k + kj] = x[ip + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c * kk], out)
}

pub fn unfold_backward<T: Scalar>(input_shape: &[usize], k: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let kk = k * k;
    let r = (k / 2) as isize;
    let g = grad_out.data();
    let mut dx = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let go = &g[(y * w + xx) * c * kk..(y * w + xx + 1) * c * kk];
            for ki in 0..k {
                let sy = y as isize + ki as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let sx = xx as isize + kj as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ip = (sy as usize * w + sx as usize) * c;
                    for ch in 0..c {
                        dx[ip + ch] += go[ch * kk + ki * k + kj];
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).unwrap()
}

/// Flat source-pixel index for every pixel of the nearest-neighbour
/// upsampled grid.
pub fn nearest_indices(h: usize, w: usize, s_h: f64, s_w: f64) -> (usize, usize, Vec<usize>) {
    let (oh, ow) = (grid::scaled_len(h, s_h), grid::scaled_len(w, s_w));
    let cols: Vec<usize> = (0..ow)
        .map(|x| grid::source_and_offset(x as f64, s_w).0.min(w - 1))
        .collect();
    let mut idx = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = grid::source_and_offset(y as f64, s_h).0.min(h - 1);
        idx.extend(cols.iter().map(|&sx| sy * w + sx));
    }
    (oh, ow, idx)
}

/// Nearest-neighbour resampling to `⌊s_h·H⌋ × ⌊s_w·W⌋`;
/// output `(y, x)` reads input `(⌊y/s_h⌋, ⌊x/s_w⌋)`.
pub fn nearest_sample<T: Scalar>(input: &Tensor<T>, s_h: f64, s_w: f64) -> Result<Tensor<T>, TensorError> {
    let (h, w, c) = input.dims3()?;
    if !(s_h >= 1.0 && s_w >= 1.0 && s_h.is_finite() && s_w.is_finite()) {
        return Err(invalid("nearest_sample", format!("scales ({s_h}, {s_w}) must be >= 1")));
    }
    let (oh, ow, idx) = nearest_indices(h, w, s_h, s_w);
    let flat = Tensor::new(vec![h * w, c], input.data().to_vec())?;
    gather_rows(&flat, &idx)?.reshape(&[oh, ow, c])
}

/// Periodic shuffle: `out(y·s+i, x·s+j, c) = in(y, x, c·s² + i·s + j)`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, s: usize) -> Result<Tensor<T>, TensorError> {
    let (h, w, cs) = input.dims3()?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(invalid(
            "pixel_shuffle",
            format!("channel count {cs} not divisible by s²={}", s * s),
        ));
    }
    let c = cs / (s * s);
    let x = input.data();
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![T::zero(); oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let ib = (y * w + xx) * cs;
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        out[((y * s + i) * ow + xx * s + j) * c + ch] = x[ib + ch * s * s + i * s + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, s: usize) -> Result<Tensor<T>, TensorError> {
    let (oh, ow, c) = input.dims3()?;
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(invalid(
            "pixel_unshuffle",
            format!("spatial size {oh}x{ow} not divisible by {s}"),
        ));
    }
    let (h, w) = (oh / s, ow / s);
    let cs = c * s * s;
    let x = input.data();
    let mut out = vec![T::zero(); h * w * cs];
    for y in 0..h {
        for xx in 0..w {
            let ob = (y * w + xx) * cs;
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        out[ob + ch * s * s + i * s + j] = x[((y * s + i) * ow + xx * s + j) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, cs], out)
}

/// Selects rows of `input` viewed as `[P, C]` (C = last axis). Output `[N, C]`.
pub fn gather_rows<T: Scalar>(input: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>, TensorError> {
    let c = input.last_dim();
    let rows = if c == 0 { 0 } else { input.len() / c };
    let mut out = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        if i >= rows {
            return Err(invalid("gather_rows", format!("row {i} out of range {rows}")));
        }
        out.extend_from_slice(&input.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![indices.len(), c], out)
}

pub fn gather_rows_backward<T: Scalar>(input_shape: &[usize], indices: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let c = dx.last_dim();
    let g = grad_out.data();
    let d = dx.data_mut();
    for (n, &i) in indices.iter().enumerate() {
        for ch in 0..c {
            d[i * c + ch] += g[n * c + ch];
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// kernel application (continuous decode)

/// Routing table for [`kernel_apply`]: for each target pixel, the flat index
/// of its source pixel in the feature map and the row of its kernel in the
/// kernel bank.
#[derive(Clone, Debug, PartialEq)]
pub struct ApplyPlan {
    pub out_shape: [usize; 2],
    pub source: Vec<usize>,
    pub kernel: Vec<usize>,
}

impl ApplyPlan {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Per-target depthwise dot product: channel `c` of target `p` is
/// `Σ_t kernels[u, t, c] · features[src, c·K² + t]`.
///
/// `features` is the unfolded map `[H, W, C·K²]`, `kernels` is `[U, K², C]`.
pub fn kernel_apply<T: Scalar>(
    features: &Tensor<T>,
    kernels: &Tensor<T>,
    plan: &ApplyPlan,
) -> Result<Tensor<T>, TensorError> {
    let (h, w, ckk) = features.dims3()?;
    let [units, kk, c] = *kernels.shape() else {
        return Err(TensorError::Rank {
            expected: 3,
            shape: kernels.shape().to_vec(),
        });
    };
    if c * kk != ckk {
        return Err(mismatch("kernel_apply", features.shape(), kernels.shape()));
    }
    let [oh, ow] = plan.out_shape;
    if plan.source.len() != oh * ow || plan.kernel.len() != oh * ow {
        return Err(invalid("kernel_apply", "plan length does not match output shape"));
    }
    let f = features.data();
    let kb = kernels.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for (p, (&src, &u)) in plan.source.iter().zip(&plan.kernel).enumerate() {
        if src >= h * w || u >= units {
            return Err(invalid("kernel_apply", "plan index out of range"));
        }
        let fr = &f[src * ckk..(src + 1) * ckk];
        let kr = &kb[u * kk * c..(u + 1) * kk * c];
        let o = &mut out[p * c..(p + 1) * c];
        for t in 0..kk {
            let krow = &kr[t * c..(t + 1) * c];
            for ch in 0..c {
                o[ch] += krow[ch] * fr[ch * kk + t];
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Returns `(d_features, d_kernels)`.
pub fn kernel_apply_backward<T: Scalar>(
    features: &Tensor<T>,
    kernels: &Tensor<T>,
    plan: &ApplyPlan,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let ckk = features.last_dim();
    let (kk, c) = (kernels.shape()[1], kernels.shape()[2]);
    let f = features.data();
    let kb = kernels.data();
    let g = grad_out.data();
    let mut df = vec![T::zero(); f.len()];
    let mut dk = vec![T::zero(); kb.len()];
    for (p, (&src, &u)) in plan.source.iter().zip(&plan.kernel).enumerate() {
        let go = &g[p * c..(p + 1) * c];
        let fb = src * ckk;
        let kbase = u * kk * c;
        for t in 0..kk {
            for ch in 0..c {
                let fi = fb + ch * kk + t;
                let ki = kbase + t * c + ch;
                df[fi] += go[ch] * kb[ki];
                dk[ki] += go[ch] * f[fi];
            }
        }
    }
    (
        Tensor::new(features.shape().to_vec(), df).unwrap(),
        Tensor::new(kernels.shape().to_vec(), dk).unwrap(),
    )
}

pub type SharedPlan = Arc<ApplyPlan>;

// ---------------------------------------------------------------------------
// elementwise and reductions

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        Err(mismatch(op, a.shape(), b.shape()))
    } else {
        Ok(())
    }
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, TensorError> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = T::from_f64(factor);
    x.map(|v| v * f)
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::from_f64(x.sum_f64()))
}

/// Mean absolute difference, accumulated in f64.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("l1_loss", pred, target)?;
    if pred.is_empty() {
        return Err(invalid("l1_loss", "empty input"));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
        .sum();
    Ok(Tensor::scalar(T::from_f64(total / pred.len() as f64)))
}

/// Gradient of [`l1_loss`] w.r.t. `pred` (the target gradient is its negation).
pub fn l1_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, grad_out: T) -> Tensor<T> {
    let n = pred.len() as f64;
    let g = grad_out.to_f64() / n;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a.to_f64() - b.to_f64();
            T::from_f64(if d > 0.0 {
                g
            } else if d < 0.0 {
                -g
            } else {
                0.0
            })
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).unwrap()
}
