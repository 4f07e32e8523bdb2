//! Low-level layer primitives.
//!
//! Each op comes as a `*_forward` / `*_backward` pair operating on plain
//! `ndarray` tensors in double precision. Backward functions take the cached
//! forward inputs plus the gradient of the loss w.r.t. the op output and
//! return gradients w.r.t. inputs and parameters. Analytic correctness of
//! every pair is pinned against central finite differences in the test
//! suites.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Ix1, Ix2, Ix3};

use crate::error::{Error, Result};

pub fn as_matrix(w: &ArrayD<f64>, name: &str) -> Result<ArrayView2<'_, f64>> {
    w.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Config(format!("parameter '{name}' is not rank-2")))
}

pub fn as_vector(w: &ArrayD<f64>, name: &str) -> Result<ArrayView1<'_, f64>> {
    w.view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::Config(format!("parameter '{name}' is not rank-1")))
}

pub fn as_rank3(w: &ArrayD<f64>, name: &str) -> Result<ArrayView3<'_, f64>> {
    w.view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Config(format!("parameter '{name}' is not rank-3")))
}

// ---------------------------------------------------------------------------
// 1x1 convolution (pointwise channel mix)
// ---------------------------------------------------------------------------

/// y[h,w,o] = sum_c x[h,w,c] * weight[c,o] + bias[o]
pub fn conv1x1_forward(
    x: &Array3<f64>,
    weight: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Array3<f64> {
    let (h, w, c_in) = x.dim();
    let c_out = weight.dim().1;
    debug_assert_eq!(weight.dim().0, c_in);
    debug_assert_eq!(bias.len(), c_out);

    let flat = x.view().into_shape_with_order((h * w, c_in)).expect("contiguous");
    let mut out = flat.dot(&weight);
    out += &bias;
    out.into_shape_with_order((h, w, c_out)).expect("shape").to_owned()
}

/// Returns (dx, dweight, dbias).
pub fn conv1x1_backward(
    x: &Array3<f64>,
    weight: ArrayView2<'_, f64>,
    dy: &Array3<f64>,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (h, w, c_in) = x.dim();
    let c_out = weight.dim().1;
    let x_flat = x.view().into_shape_with_order((h * w, c_in)).expect("contiguous");
    let dy_flat = dy.view().into_shape_with_order((h * w, c_out)).expect("contiguous");

    let dx = dy_flat
        .dot(&weight.t())
        .into_shape_with_order((h, w, c_in))
        .expect("shape")
        .to_owned();
    let dweight = x_flat.t().dot(&dy_flat);
    let dbias = dy_flat.sum_axis(ndarray::Axis(0));
    (dx, dweight, dbias)
}

// ---------------------------------------------------------------------------
// 3x3 depthwise convolution, zero padding 1 (spatial dims preserved)
// ---------------------------------------------------------------------------

/// y[h,w,c] = bias[c] + sum_{u,v in 0..3} x[h+u-1, w+v-1, c] * kernel[u,v,c]
pub fn dwconv3x3_forward(
    x: &Array3<f64>,
    kernel: ArrayView3<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Array3<f64> {
    let (h, w, c) = x.dim();
    debug_assert_eq!(kernel.dim(), (3, 3, c));
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = bias[ch];
                for u in 0..3usize {
                    let si = i as isize + u as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for v in 0..3usize {
                        let sj = j as isize + v as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        acc += x[[si as usize, sj as usize, ch]] * kernel[[u, v, ch]];
                    }
                }
                out[[i, j, ch]] = acc;
            }
        }
    }
    out
}

/// Returns (dx, dkernel, dbias).
pub fn dwconv3x3_backward(
    x: &Array3<f64>,
    kernel: ArrayView3<'_, f64>,
    dy: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (h, w, c) = x.dim();
    let mut dx = Array3::zeros((h, w, c));
    let mut dk = Array3::zeros((3, 3, c));
    let mut db = Array1::zeros(c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let g = dy[[i, j, ch]];
                db[ch] += g;
                for u in 0..3usize {
                    let si = i as isize + u as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for v in 0..3usize {
                        let sj = j as isize + v as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        dx[[si as usize, sj as usize, ch]] += g * kernel[[u, v, ch]];
                        dk[[u, v, ch]] += g * x[[si as usize, sj as usize, ch]];
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

// ---------------------------------------------------------------------------
// General 2-D convolution (used by the encoder stem)
// ---------------------------------------------------------------------------

/// Weight layout: (kh, kw, c_in, c_out). Output spatial size follows the
/// standard (dim + 2*pad - k)/stride + 1 rule.
pub fn conv2d_out_dim(dim: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = dim + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "conv kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub fn conv2d_forward(
    x: &Array3<f64>,
    weight: &ArrayD<f64>,
    bias: ArrayView1<'_, f64>,
    stride: usize,
    pad: usize,
) -> Result<Array3<f64>> {
    let (h, w, c_in) = x.dim();
    let wd = weight.shape();
    let (kh, kw, wc_in, c_out) = (wd[0], wd[1], wd[2], wd[3]);
    if wc_in != c_in {
        return Err(Error::Config(format!(
            "conv2d channel mismatch: input {c_in}, weight {wc_in}"
        )));
    }
    let oh = conv2d_out_dim(h, kh, stride, pad)?;
    let ow = conv2d_out_dim(w, kw, stride, pad)?;
    let mut out = Array3::zeros((oh, ow, c_out));
    for i in 0..oh {
        for j in 0..ow {
            for u in 0..kh {
                let si = (i * stride + u) as isize - pad as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..kw {
                    let sj = (j * stride + v) as isize - pad as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    for ci in 0..c_in {
                        let xv = x[[si as usize, sj as usize, ci]];
                        if xv == 0.0 {
                            continue;
                        }
                        for co in 0..c_out {
                            out[[i, j, co]] += xv * weight[[u, v, ci, co]];
                        }
                    }
                }
            }
            for co in 0..c_out {
                out[[i, j, co]] += bias[co];
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dweight, dbias).
pub fn conv2d_backward(
    x: &Array3<f64>,
    weight: &ArrayD<f64>,
    dy: &Array3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ArrayD<f64>, Array1<f64>) {
    let (h, w, c_in) = x.dim();
    let wd = weight.shape();
    let (kh, kw, _, c_out) = (wd[0], wd[1], wd[2], wd[3]);
    let (oh, ow, _) = dy.dim();
    let mut dx = Array3::zeros((h, w, c_in));
    let mut dw = ArrayD::zeros(weight.shape().to_vec());
    let mut db = Array1::zeros(c_out);
    for i in 0..oh {
        for j in 0..ow {
            for co in 0..c_out {
                db[co] += dy[[i, j, co]];
            }
            for u in 0..kh {
                let si = (i * stride + u) as isize - pad as isize;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for v in 0..kw {
                    let sj = (j * stride + v) as isize - pad as isize;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    for ci in 0..c_in {
                        let xv = x[[si as usize, sj as usize, ci]];
                        let mut dxv = 0.0;
                        for co in 0..c_out {
                            let g = dy[[i, j, co]];
                            dxv += g * weight[[u, v, ci, co]];
                            dw[[u, v, ci, co]] += g * xv;
                        }
                        dx[[si as usize, sj as usize, ci]] += dxv;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// dx = dy where x > 0, else 0.
pub fn relu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(sigmoid_scalar)
}

/// dx = dy * s * (1 - s), with s the cached sigmoid output.
pub fn sigmoid_backward<D: ndarray::Dimension>(
    s: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(s).for_each(|d, &sv| {
        *d *= sv * (1.0 - sv);
    });
    dx
}

// ---------------------------------------------------------------------------
// 2x max pooling
// ---------------------------------------------------------------------------

pub fn pool_out_dim(dim: usize) -> usize {
    (dim / 2).max(1)
}

/// Non-overlapping 2x2 windows, stride 2. Odd trailing rows/columns are
/// dropped; a dimension of 1 passes through unchanged. Returns the pooled map
/// and, per output cell, the flat (h*W + w) index of the selected input pixel
/// for the backward pass. Ties select the first element in scan order.
pub fn maxpool2_forward(x: &Array3<f64>) -> (Array3<f64>, Array3<usize>) {
    let (h, w, c) = x.dim();
    let oh = pool_out_dim(h);
    let ow = pool_out_dim(w);
    let wh = if h >= 2 { 2 } else { 1 };
    let ww = if w >= 2 { 2 } else { 1 };
    let mut out = Array3::zeros((oh, ow, c));
    let mut idx = Array3::zeros((oh, ow, c));
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_flat = 0usize;
                for u in 0..wh {
                    for v in 0..ww {
                        let si = i * 2 + u;
                        let sj = j * 2 + v;
                        let val = x[[si, sj, ch]];
                        if val > best {
                            best = val;
                            best_flat = si * w + sj;
                        }
                    }
                }
                out[[i, j, ch]] = best;
                idx[[i, j, ch]] = best_flat;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(
    input_shape: (usize, usize, usize),
    idx: &Array3<usize>,
    dy: &Array3<f64>,
) -> Array3<f64> {
    let (h, w, c) = input_shape;
    let mut dx = Array3::zeros((h, w, c));
    let (oh, ow, _) = dy.dim();
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let flat = idx[[i, j, ch]];
                dx[[flat / w, flat % w, ch]] += dy[[i, j, ch]];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

pub fn global_avg_pool_forward(x: &Array3<f64>) -> Array1<f64> {
    let (h, w, c) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        out[ch] = x.slice(ndarray::s![.., .., ch]).sum() * scale;
    }
    out
}

pub fn global_avg_pool_backward(
    input_shape: (usize, usize, usize),
    dy: &Array1<f64>,
) -> Array3<f64> {
    let (h, w, c) = input_shape;
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Array3::zeros((h, w, c));
    for ch in 0..c {
        dx.slice_mut(ndarray::s![.., .., ch]).fill(dy[ch] * scale);
    }
    dx
}

// ---------------------------------------------------------------------------
// Dense (fully connected) layer
// ---------------------------------------------------------------------------

/// y[o] = sum_i x[i] * weight[i,o] + bias[o]
pub fn dense_forward(
    x: ArrayView1<'_, f64>,
    weight: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let mut y = x.dot(&weight);
    y += &bias;
    y
}

/// Returns (dx, dweight, dbias).
pub fn dense_backward(
    x: ArrayView1<'_, f64>,
    weight: ArrayView2<'_, f64>,
    dy: ArrayView1<'_, f64>,
) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let dx = weight.dot(&dy);
    let x2 = x.insert_axis(ndarray::Axis(1));
    let dy2 = dy.insert_axis(ndarray::Axis(0));
    let dw = x2.dot(&dy2);
    (dx, dw, dy.to_owned())
}

// ---------------------------------------------------------------------------
// L2 normalization
// ---------------------------------------------------------------------------

/// Returns (v / ||v||, ||v||). A zero vector passes through unchanged with
/// norm 0; callers decide how to flag it.
pub fn l2_normalize_forward(v: ArrayView1<'_, f64>) -> (Array1<f64>, f64) {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        (v.to_owned(), 0.0)
    } else {
        (v.mapv(|x| x / norm), norm)
    }
}

/// dv = (dz - z * (z . dz)) / ||v||, with z the normalized output.
pub fn l2_normalize_backward(z: &Array1<f64>, norm: f64, dz: &Array1<f64>) -> Array1<f64> {
    if norm == 0.0 {
        return dz.clone();
    }
    let dot = z.dot(dz);
    let mut dv = dz - &(z * dot);
    dv /= norm;
    dv
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Max-subtracted softmax over a vector of logits.
pub fn softmax_forward(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum: f64 = exp.sum();
    exp / sum
}

/// dlogits = p * (dp - (p . dp)), with p the cached softmax output.
pub fn softmax_backward(p: &Array1<f64>, dp: &Array1<f64>) -> Array1<f64> {
    let dot = p.dot(dp);
    p * &(dp - dot)
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel-centered sampling)
// ---------------------------------------------------------------------------

/// Source coordinate and interpolation weights for one output index.
fn bilinear_axis(out_i: usize, in_dim: usize, out_dim: usize) -> (usize, usize, f64) {
    if in_dim == 1 {
        return (0, 0, 0.0);
    }
    let scale = in_dim as f64 / out_dim as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dim - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_dim - 1);
    (lo, hi, src - lo as f64)
}

/// Resizes each channel independently with the half-pixel-center convention.
pub fn resize_bilinear(x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    for i in 0..out_h {
        let (i0, i1, fi) = bilinear_axis(i, h, out_h);
        for j in 0..out_w {
            let (j0, j1, fj) = bilinear_axis(j, w, out_w);
            for ch in 0..c {
                let top = x[[i0, j0, ch]] * (1.0 - fj) + x[[i0, j1, ch]] * fj;
                let bot = x[[i1, j0, ch]] * (1.0 - fj) + x[[i1, j1, ch]] * fj;
                out[[i, j, ch]] = top * (1.0 - fi) + bot * fi;
            }
        }
    }
    out
}

/// Scatters output gradients back through the interpolation weights.
pub fn resize_bilinear_backward(
    input_shape: (usize, usize, usize),
    dy: &Array3<f64>,
) -> Array3<f64> {
    let (h, w, c) = input_shape;
    let (oh, ow, _) = dy.dim();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let mut dx = Array3::zeros((h, w, c));
    for i in 0..oh {
        let (i0, i1, fi) = bilinear_axis(i, h, oh);
        for j in 0..ow {
            let (j0, j1, fj) = bilinear_axis(j, w, ow);
            for ch in 0..c {
                let g = dy[[i, j, ch]];
                dx[[i0, j0, ch]] += g * (1.0 - fi) * (1.0 - fj);
                dx[[i0, j1, ch]] += g * (1.0 - fi) * fj;
                dx[[i1, j0, ch]] += g * fi * (1.0 - fj);
                dx[[i1, j1, ch]] += g * fi * fj;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn conv1x1_zero_weights_annihilate() {
        let x = Array3::from_shape_fn((4, 5, 3), |(i, j, k)| (i + 2 * j + k) as f64 - 3.0);
        let w = Array2::zeros((3, 2));
        let b = Array1::zeros(2);
        let y = conv1x1_forward(&x, w.view(), b.view());
        assert_eq!(y.dim(), (4, 5, 2));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dwconv_preserves_spatial_dims_and_annihilates_on_zero() {
        let x = Array3::from_shape_fn((3, 7, 2), |(i, j, k)| (i * j) as f64 + k as f64);
        let k = Array3::zeros((3, 3, 2));
        let b = Array1::zeros(2);
        let y = dwconv3x3_forward(&x, k.view(), b.view());
        assert_eq!(y.dim(), (3, 7, 2));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dwconv_identity_kernel() {
        // Center tap 1 reproduces the input.
        let x = Array3::from_shape_fn((4, 4, 1), |(i, j, _)| (i * 4 + j) as f64);
        let mut k = Array3::zeros((3, 3, 1));
        k[[1, 1, 0]] = 1.0;
        let b = Array1::zeros(1);
        let y = dwconv3x3_forward(&x, k.view(), b.view());
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_halves_and_routes_gradient() {
        let mut x = Array3::zeros((4, 4, 1));
        x[[1, 1, 0]] = 5.0;
        x[[2, 3, 0]] = 7.0;
        let (y, idx) = maxpool2_forward(&x);
        assert_eq!(y.dim(), (2, 2, 1));
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[1, 1, 0]], 7.0);
        let dy = Array3::from_elem((2, 2, 1), 1.0);
        let dx = maxpool2_backward((4, 4, 1), &idx, &dy);
        assert_eq!(dx[[1, 1, 0]], 1.0);
        assert_eq!(dx[[2, 3, 0]], 1.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn maxpool_on_unit_dims_passes_through() {
        let x = Array3::from_shape_fn((1, 5, 2), |(_, j, k)| (j + k) as f64);
        let (y, _) = maxpool2_forward(&x);
        assert_eq!(y.dim(), (1, 2, 2));
        let x = Array3::from_shape_fn((1, 1, 3), |(_, _, k)| k as f64);
        let (y, _) = maxpool2_forward(&x);
        assert_eq!(y.dim(), (1, 1, 3));
        assert_eq!(y[[0, 0, 2]], 2.0);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax_forward(arr1(&[0.0, 0.0, 0.0]).view());
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax_forward(arr1(&[1.0, 2.0, 3.0]).view());
        let b = softmax_forward(arr1(&[1001.0, 1002.0, 1003.0]).view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_guard() {
        let (z, norm) = l2_normalize_forward(arr1(&[3.0, 4.0]).view());
        assert!((norm - 5.0).abs() < 1e-15);
        assert!((z.dot(&z) - 1.0).abs() < 1e-15);
        let (z0, n0) = l2_normalize_forward(arr1(&[0.0, 0.0]).view());
        assert_eq!(n0, 0.0);
        assert!(z0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_identity_when_dims_match() {
        let x = Array3::from_shape_fn((3, 3, 2), |(i, j, k)| (i + j + k) as f64);
        assert_eq!(resize_bilinear(&x, 3, 3), x);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let x = Array3::from_elem((5, 7, 3), 0.42);
        let y = resize_bilinear(&x, 11, 4);
        for &v in y.iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_conv1x1_for_unit_kernel() {
        let x = Array3::from_shape_fn((4, 4, 2), |(i, j, k)| (i + j) as f64 * 0.3 - k as f64);
        let mut w = ArrayD::zeros(vec![1, 1, 2, 3]);
        let mut w2 = Array2::zeros((2, 3));
        let mut v = 0.1;
        for ci in 0..2 {
            for co in 0..3 {
                w[[0, 0, ci, co]] = v;
                w2[[ci, co]] = v;
                v += 0.1;
            }
        }
        let b = arr1(&[0.5, -0.5, 0.0]);
        let y1 = conv2d_forward(&x, &w, b.view(), 1, 0).unwrap();
        let y2 = conv1x1_forward(&x, w2.view(), b.view());
        assert!(y1.iter().zip(y2.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
