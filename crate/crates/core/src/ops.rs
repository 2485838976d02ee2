//! Forward and adjoint kernels for the closed op set.
//!
//! Every function here is pure: the tape in [`crate::autodiff`] checks
//! shapes, calls the forward kernel, and later calls the matching adjoint
//! with the upstream gradient.

use crate::tensor::{split_axis, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        ConvGeom {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Output indices `o` in `lo..hi` whose input index `o·stride + k − pad`
/// lies inside `0..n_in`.
fn valid_range(n_out: usize, n_in: usize, k: usize, g: ConvGeom) -> (usize, usize) {
    let lo = g.padding.saturating_sub(k).div_ceil(g.stride);
    let hi = if n_in + g.padding > k {
        ((n_in + g.padding - k - 1) / g.stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(n_out), hi.max(lo.min(n_out)))
}

#[derive(Clone, Copy)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

/// Visits every in-bounds (patch row, output row) pair as contiguous runs:
/// `f(row, out_offset, in_offset, len)` with input step `stride`.
fn for_each_run(d: ConvDims, g: ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    for ci in 0..d.c_in {
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = valid_range(d.ho, d.h, ky, g);
            for kx in 0..d.kw {
                let (ox_lo, ox_hi) = valid_range(d.wo, d.w, kx, g);
                if ox_hi == ox_lo {
                    continue;
                }
                let r = (ci * d.kh + ky) * d.kw + kx;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let ix = ox_lo * g.stride + kx - g.padding;
                    f(r, oy * d.wo + ox_lo, (ci * d.h + iy) * d.w + ix, ox_hi - ox_lo);
                }
            }
        }
    }
}

/// Unfolds one batch entry (C×H×W) into a `(C·kh·kw) × (ho·wo)` patch
/// matrix with zeros for padded taps.
fn im2col(x: &[f64], d: ConvDims, g: ConvGeom) -> Vec<f64> {
    let plane = d.ho * d.wo;
    let mut cols = vec![0.0; d.c_in * d.kh * d.kw * plane];
    for_each_run(d, g, |r, o, i, n| {
        let dst = &mut cols[r * plane + o..r * plane + o + n];
        if g.stride == 1 {
            dst.copy_from_slice(&x[i..i + n]);
        } else {
            for (j, v) in dst.iter_mut().enumerate() {
                *v = x[i + j * g.stride];
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[f64], dx: &mut [f64], d: ConvDims, g: ConvGeom) {
    let plane = d.ho * d.wo;
    for_each_run(d, g, |r, o, i, n| {
        let src = &cols[r * plane + o..r * plane + o + n];
        if g.stride == 1 {
            for (t, v) in dx[i..i + n].iter_mut().zip(src) {
                *t += v;
            }
        } else {
            for (j, v) in src.iter().enumerate() {
                dx[i + j * g.stride] += v;
            }
        }
    });
}

pub(crate) fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let [b_n, c_in, h, w] = dims4(input);
    let [c_out, _, kh, kw] = dims4(weight);
    let ho = g.out_extent(h, kh).unwrap();
    let wo = g.out_extent(w, kw).unwrap();
    let k = weight.data();
    let rows = c_in * kh * kw;
    let plane = ho * wo;
    let dims = ConvDims { c_in, h, w, kh, kw, ho, wo };
    let mut out = vec![0.0; b_n * c_out * plane];
    for b in 0..b_n {
        let cols = im2col(&input.data()[b * c_in * h * w..(b + 1) * c_in * h * w], dims, g);
        for co in 0..c_out {
            let o = &mut out[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
            o.fill(bias.map_or(0.0, |t| t.data()[co]));
            for (r, &kv) in k[co * rows..(co + 1) * rows].iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                for (ov, cv) in o.iter_mut().zip(&cols[r * plane..(r + 1) * plane]) {
                    *ov += kv * cv;
                }
            }
        }
    }
    Tensor::new(vec![b_n, c_out, ho, wo], out).unwrap()
}

/// Returns `(d_input, d_weight, d_bias)`; the input and weight gradients are
/// only computed when requested (zeros otherwise).
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    g: ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Tensor, Tensor, Tensor) {
    let [b_n, c_in, h, w] = dims4(input);
    let [c_out, _, kh, kw] = dims4(weight);
    let [_, _, ho, wo] = dims4(grad);
    let k = weight.data();
    let gy = grad.data();
    let rows = c_in * kh * kw;
    let plane = ho * wo;
    let dims = ConvDims { c_in, h, w, kh, kw, ho, wo };
    let mut dx = vec![0.0; input.numel()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; c_out];
    let mut dcols = vec![0.0; if need_input { rows * plane } else { 0 }];
    for b in 0..b_n {
        let xb = &input.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
        let cols = if need_weight { im2col(xb, dims, g) } else { Vec::new() };
        dcols.fill(0.0);
        for co in 0..c_out {
            let go = &gy[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
            db[co] += go.iter().sum::<f64>();
            for r in 0..rows {
                if need_weight {
                    dk[co * rows + r] += go.iter().zip(&cols[r * plane..(r + 1) * plane]).map(|(a, c)| a * c).sum::<f64>();
                }
                let kv = k[co * rows + r];
                if need_input && kv != 0.0 {
                    for (d, gv) in dcols[r * plane..(r + 1) * plane].iter_mut().zip(go) {
                        *d += kv * gv;
                    }
                }
            }
        }
        if need_input {
            col2im(&dcols, &mut dx[b * c_in * h * w..(b + 1) * c_in * h * w], dims, g);
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).unwrap(),
        Tensor::new(weight.shape().to_vec(), dk).unwrap(),
        Tensor::new(vec![c_out], db).unwrap(),
    )
}

pub(crate) fn softmax(input: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(input.shape(), axis);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[idx(j)] /= z;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).unwrap()
}

pub(crate) fn softmax_backward(output: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(output.shape(), axis);
    let y = output.data();
    let gy = grad.data();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| y[idx(j)] * gy[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), dx).unwrap()
}

/// Lower neighbour index and fractional part of a coordinate along an axis
/// of length `n`. The upper neighbour is `lo + 1` unless `n == 1`.
#[inline]
pub(crate) fn bilinear_corner(p: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let lo = (p.floor() as isize).clamp(0, n as isize - 2) as usize;
    (lo, lo + 1, p - lo as f64)
}

/// Samples `field` (B×C×H×W) at `coords` (B×P×2×Ho×Wo, component 0 = x,
/// component 1 = y), producing B×C×P×Ho×Wo.
pub(crate) fn grid_sample(field: &Tensor, coords: &Tensor) -> Tensor {
    let [b_n, c_n, h, w] = dims4(field);
    let (p_n, ho, wo) = (coords.shape()[1], coords.shape()[3], coords.shape()[4]);
    let f = field.data();
    let q = coords.data();
    let plane = ho * wo;
    let mut out = vec![0.0; b_n * c_n * p_n * plane];
    for b in 0..b_n {
        for p in 0..p_n {
            let cbase = (b * p_n + p) * 2 * plane;
            for s in 0..plane {
                let (x0, x1, fx) = bilinear_corner(q[cbase + s], w);
                let (y0, y1, fy) = bilinear_corner(q[cbase + plane + s], h);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                for c in 0..c_n {
                    let fb = (b * c_n + c) * h * w;
                    let v = w00 * f[fb + y0 * w + x0]
                        + w01 * f[fb + y0 * w + x1]
                        + w10 * f[fb + y1 * w + x0]
                        + w11 * f[fb + y1 * w + x1];
                    out[((b * c_n + c) * p_n + p) * plane + s] = v;
                }
            }
        }
    }
    Tensor::new(vec![b_n, c_n, p_n, ho, wo], out).unwrap()
}

/// Returns `(d_field, d_coords)`.
pub(crate) fn grid_sample_backward(field: &Tensor, coords: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let [b_n, c_n, h, w] = dims4(field);
    let (p_n, ho, wo) = (coords.shape()[1], coords.shape()[3], coords.shape()[4]);
    let f = field.data();
    let q = coords.data();
    let gy = grad.data();
    let plane = ho * wo;
    let mut df = vec![0.0; f.len()];
    let mut dq = vec![0.0; q.len()];
    for b in 0..b_n {
        for p in 0..p_n {
            let cbase = (b * p_n + p) * 2 * plane;
            for s in 0..plane {
                let (x0, x1, fx) = bilinear_corner(q[cbase + s], w);
                let (y0, y1, fy) = bilinear_corner(q[cbase + plane + s], h);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                let (mut gx, mut gyy) = (0.0, 0.0);
                for c in 0..c_n {
                    let go = gy[((b * c_n + c) * p_n + p) * plane + s];
                    if go == 0.0 {
                        continue;
                    }
                    let fb = (b * c_n + c) * h * w;
                    let (i00, i01, i10, i11) = (
                        fb + y0 * w + x0,
                        fb + y0 * w + x1,
                        fb + y1 * w + x0,
                        fb + y1 * w + x1,
                    );
                    df[i00] += go * w00;
                    df[i01] += go * w01;
                    df[i10] += go * w10;
                    df[i11] += go * w11;
                    if w > 1 {
                        gx += go * ((1.0 - fy) * (f[i01] - f[i00]) + fy * (f[i11] - f[i10]));
                    }
                    if h > 1 {
                        gyy += go * ((1.0 - fx) * (f[i10] - f[i00]) + fx * (f[i11] - f[i01]));
                    }
                }
                dq[cbase + s] += gx;
                dq[cbase + plane + s] += gyy;
            }
        }
    }
    (
        Tensor::new(field.shape().to_vec(), df).unwrap(),
        Tensor::new(coords.shape().to_vec(), dq).unwrap(),
    )
}

/// Clamps sample coordinates (B×P×2×Ho×Wo) into `[0, w-1] × [0, h-1]`.
pub(crate) fn clamp_coords(coords: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = coords.clone();
    let plane = coords.shape()[3] * coords.shape()[4];
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    for (chunk_i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let hi = if chunk_i % 2 == 0 { xmax } else { ymax };
        for v in chunk {
            *v = v.clamp(0.0, hi);
        }
    }
    out
}

pub(crate) fn clamp_coords_backward(coords: &Tensor, grad: &Tensor, h: usize, w: usize) -> Tensor {
    let plane = coords.shape()[3] * coords.shape()[4];
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let mut d = grad.clone();
    for (chunk_i, (dc, cc)) in d
        .data_mut()
        .chunks_mut(plane)
        .zip(coords.data().chunks(plane))
        .enumerate()
    {
        let hi = if chunk_i % 2 == 0 { xmax } else { ymax };
        for (g, &v) in dc.iter_mut().zip(cc) {
            if !(0.0..=hi).contains(&v) {
                *g = 0.0;
            }
        }
    }
    d
}

/// `q` is B×D×Hh×H×W, `k` is B×D×Hh×U×H×W; output B×Hh×U×H×W with
/// `out = Σ_d q·k / √D`.
pub(crate) fn scaled_dot(q: &Tensor, k: &Tensor) -> Tensor {
    let qs = q.shape();
    let (b_n, d_n, hh, plane) = (qs[0], qs[1], qs[2], qs[3] * qs[4]);
    let u_n = k.shape()[3];
    let scale = 1.0 / (d_n as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut out = vec![0.0; b_n * hh * u_n * plane];
    for b in 0..b_n {
        for d in 0..d_n {
            for head in 0..hh {
                let qbase = ((b * d_n + d) * hh + head) * plane;
                for u in 0..u_n {
                    let kbase = (((b * d_n + d) * hh + head) * u_n + u) * plane;
                    let obase = ((b * hh + head) * u_n + u) * plane;
                    for s in 0..plane {
                        out[obase + s] += qd[qbase + s] * kd[kbase + s] * scale;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b_n, hh, u_n, qs[3], qs[4]], out).unwrap()
}

pub(crate) fn scaled_dot_backward(q: &Tensor, k: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let qs = q.shape();
    let (b_n, d_n, hh, plane) = (qs[0], qs[1], qs[2], qs[3] * qs[4]);
    let u_n = k.shape()[3];
    let scale = 1.0 / (d_n as f64).sqrt();
    let (qd, kd, g) = (q.data(), k.data(), grad.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    for b in 0..b_n {
        for d in 0..d_n {
            for head in 0..hh {
                let qbase = ((b * d_n + d) * hh + head) * plane;
                for u in 0..u_n {
                    let kbase = (((b * d_n + d) * hh + head) * u_n + u) * plane;
                    let obase = ((b * hh + head) * u_n + u) * plane;
                    for s in 0..plane {
                        let go = g[obase + s] * scale;
                        dq[qbase + s] += go * kd[kbase + s];
                        dk[kbase + s] += go * qd[qbase + s];
                    }
                }
            }
        }
    }
    (
        Tensor::new(q.shape().to_vec(), dq).unwrap(),
        Tensor::new(k.shape().to_vec(), dk).unwrap(),
    )
}

/// Per-position weighted sum over taps: `w` is B×Hh×U×H×W, `v` is
/// B×D×Hh×U×H×W; output B×D×Hh×H×W.
pub(crate) fn tap_sum(wts: &Tensor, v: &Tensor) -> Tensor {
    let vs = v.shape();
    let (b_n, d_n, hh, u_n, plane) = (vs[0], vs[1], vs[2], vs[3], vs[4] * vs[5]);
    let (wd, vd) = (wts.data(), v.data());
    let mut out = vec![0.0; b_n * d_n * hh * plane];
    for b in 0..b_n {
        for d in 0..d_n {
            for head in 0..hh {
                let obase = ((b * d_n + d) * hh + head) * plane;
                for u in 0..u_n {
                    let vbase = (((b * d_n + d) * hh + head) * u_n + u) * plane;
                    let wbase = ((b * hh + head) * u_n + u) * plane;
                    for s in 0..plane {
                        out[obase + s] += wd[wbase + s] * vd[vbase + s];
                    }
                }
            }
        }
    }
    Tensor::new(vec![b_n, d_n, hh, vs[4], vs[5]], out).unwrap()
}

pub(crate) fn tap_sum_backward(wts: &Tensor, v: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let vs = v.shape();
    let (b_n, d_n, hh, u_n, plane) = (vs[0], vs[1], vs[2], vs[3], vs[4] * vs[5]);
    let (wd, vd, g) = (wts.data(), v.data(), grad.data());
    let mut dw = vec![0.0; wd.len()];
    let mut dv = vec![0.0; vd.len()];
    for b in 0..b_n {
        for d in 0..d_n {
            for head in 0..hh {
                let obase = ((b * d_n + d) * hh + head) * plane;
                for u in 0..u_n {
                    let vbase = (((b * d_n + d) * hh + head) * u_n + u) * plane;
                    let wbase = ((b * hh + head) * u_n + u) * plane;
                    for s in 0..plane {
                        let go = g[obase + s];
                        dw[wbase + s] += go * vd[vbase + s];
                        dv[vbase + s] += go * wd[wbase + s];
                    }
                }
            }
        }
    }
    (
        Tensor::new(wts.shape().to_vec(), dw).unwrap(),
        Tensor::new(v.shape().to_vec(), dv).unwrap(),
    )
}

/// `x` is B×C×…, `w` has C entries; scales channel `c` by `w[c]`.
pub(crate) fn mul_channel(x: &Tensor, w: &Tensor) -> Tensor {
    let (outer, c_n, inner) = split_axis(x.shape(), 1);
    let mut out = x.clone();
    let wd = w.data();
    for o in 0..outer {
        for c in 0..c_n {
            let base = (o * c_n + c) * inner;
            for v in &mut out.data_mut()[base..base + inner] {
                *v *= wd[c];
            }
        }
    }
    out
}

pub(crate) fn mul_channel_backward(x: &Tensor, w: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (outer, c_n, inner) = split_axis(x.shape(), 1);
    let dx = mul_channel(grad, w);
    let mut dw = vec![0.0; c_n];
    let (xd, g) = (x.data(), grad.data());
    for o in 0..outer {
        for (c, acc) in dw.iter_mut().enumerate() {
            let base = (o * c_n + c) * inner;
            *acc += (base..base + inner).map(|i| xd[i] * g[i]).sum::<f64>();
        }
    }
    (dx, Tensor::new(w.shape().to_vec(), dw).unwrap())
}

/// Concatenates along axis 1.
pub(crate) fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let outer = parts[0].shape()[0];
    let inner: usize = parts[0].shape()[2..].iter().product();
    let total_c: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let mut data = Vec::with_capacity(outer * total_c * inner);
    for o in 0..outer {
        for t in parts {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[o * c * inner..(o + 1) * c * inner]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[1] = total_c;
    Tensor::new(shape, data).unwrap()
}

pub(crate) fn split_channels(grad: &Tensor, parts: &[Vec<usize>]) -> Vec<Tensor> {
    let outer = grad.shape()[0];
    let inner: usize = grad.shape()[2..].iter().product();
    let total_c = grad.shape()[1];
    let mut out: Vec<Vec<f64>> = parts.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for o in 0..outer {
        let mut off = 0;
        for (i, s) in parts.iter().enumerate() {
            let c = s[1];
            let start = (o * total_c + off) * inner;
            out[i].extend_from_slice(&grad.data()[start..start + c * inner]);
            off += c;
        }
    }
    out.into_iter()
        .zip(parts)
        .map(|(d, s)| Tensor::new(s.clone(), d).unwrap())
        .collect()
}

pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}
