//! Network-level operations: 3D convolutions, normalization, activations,
//! attention primitives and differentiable trilinear sampling.

use super::{strides_of, Op, Tensor};
use crate::error::{DregError, Result};

/// Range of output indices `o` with `0 <= o*stride + k_off - padding < in_len`.
pub(crate) fn conv_axis_range(
    out_len: usize,
    in_len: usize,
    k_off: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    let top = in_len as isize - 1 + padding as isize - k_off as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) fn conv_out_extent(in_len: usize, k: usize, stride: usize, padding: usize) -> usize {
    (in_len + 2 * padding - k) / stride + 1
}

fn check_rank4(t: &Tensor, context: &'static str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(DregError::ShapeMismatch {
            context,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// 3D convolution of `input [C_in,D,H,W]` with `weight [C_out,C_in,k,k,k]`
/// and `bias [C_out]`. Odd kernel, `stride` 1 or 2, symmetric zero padding.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [ci_n, d, h, w] = check_rank4(input, "conv3d input")?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(DregError::InvalidArgument(format!(
            "conv3d weight must be [C_out,C_in,k,k,k], got {ws:?}"
        )));
    }
    if ws[1] != ci_n {
        return Err(DregError::ShapeMismatch {
            context: "conv3d input channels vs weight",
            lhs: input.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (co_n, k) = (ws[0], ws[2]);
    if bias.shape() != [co_n] {
        return Err(DregError::ShapeMismatch {
            context: "conv3d bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![co_n],
        });
    }
    if k % 2 == 0 || !(stride == 1 || stride == 2) {
        return Err(DregError::InvalidArgument(format!(
            "conv3d requires odd kernel and stride 1 or 2 (k={k}, stride={stride})"
        )));
    }
    if d + 2 * padding < k || h + 2 * padding < k || w + 2 * padding < k {
        return Err(DregError::InvalidArgument(format!(
            "conv3d input {:?} too small for kernel {k} with padding {padding}",
            input.shape()
        )));
    }
    let (od_n, oh_n, ow_n) = (
        conv_out_extent(d, k, stride, padding),
        conv_out_extent(h, k, stride, padding),
        conv_out_extent(w, k, stride, padding),
    );
    let mut out = vec![0.0; co_n * od_n * oh_n * ow_n];
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let in_ch = d * h * w;
    let out_ch = od_n * oh_n * ow_n;
    for co in 0..co_n {
        out[co * out_ch..(co + 1) * out_ch].fill(b[co]);
    }
    for co in 0..co_n {
        let out_c = &mut out[co * out_ch..(co + 1) * out_ch];
        for ci in 0..ci_n {
            let x_c = &x[ci * in_ch..(ci + 1) * in_ch];
            let w_base = ((co * ci_n) + ci) * k * k * k;
            for kd in 0..k {
                let (od_lo, od_hi) = conv_axis_range(od_n, d, kd, stride, padding);
                for kh in 0..k {
                    let (oh_lo, oh_hi) = conv_axis_range(oh_n, h, kh, stride, padding);
                    for kw in 0..k {
                        let wv = wt[w_base + (kd * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = conv_axis_range(ow_n, w, kw, stride, padding);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for od in od_lo..od_hi {
                            let id = od * stride + kd - padding;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + kh - padding;
                                let orow = (od * oh_n + oh) * ow_n;
                                let irow = (id * h + ih) * w;
                                if stride == 1 {
                                    let iw0 = ow_lo + kw - padding;
                                    let src = &x_c[irow + iw0..irow + iw0 + (ow_hi - ow_lo)];
                                    let dst = &mut out_c[orow + ow_lo..orow + ow_hi];
                                    for (o, s) in dst.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + kw - padding;
                                        out_c[orow + ow] += wv * x_c[irow + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![co_n, od_n, oh_n, ow_n],
        Op::Conv3d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            stride,
            padding,
        },
    ))
}

pub(crate) const TCONV_K: usize = 4;
pub(crate) const TCONV_S: usize = 2;
pub(crate) const TCONV_P: usize = 1;

/// Transposed 3D convolution with kernel 4, stride 2, padding 1: the output
/// doubles every spatial extent. `weight [C_in,C_out,4,4,4]`, `bias [C_out]`.
pub fn transposed_conv3d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [ci_n, d, h, w] = check_rank4(input, "transposed_conv3d input")?;
    if d == 0 || h == 0 || w == 0 {
        return Err(DregError::InvalidArgument(
            "transposed_conv3d input has a zero extent".into(),
        ));
    }
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != TCONV_K || ws[3] != TCONV_K || ws[4] != TCONV_K {
        return Err(DregError::InvalidArgument(format!(
            "transposed_conv3d weight must be [C_in,C_out,4,4,4], got {ws:?}"
        )));
    }
    if ws[0] != ci_n {
        return Err(DregError::ShapeMismatch {
            context: "transposed_conv3d input channels vs weight",
            lhs: input.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let co_n = ws[1];
    if bias.shape() != [co_n] {
        return Err(DregError::ShapeMismatch {
            context: "transposed_conv3d bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![co_n],
        });
    }
    let (od_n, oh_n, ow_n) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; co_n * od_n * oh_n * ow_n];
    let x = input.data();
    let wt = weight.data();
    let in_ch = d * h * w;
    let out_ch = od_n * oh_n * ow_n;
    for co in 0..co_n {
        out[co * out_ch..(co + 1) * out_ch].fill(bias.data()[co]);
    }
    // o = i*2 - 1 + k per axis; valid i range per k offset:
    let axis_range = |in_len: usize, out_len: usize, k: usize| -> (usize, usize) {
        let lo = usize::from(k == 0);
        let top = out_len - 1 + TCONV_P;
        if k > top {
            return (0, 0);
        }
        let hi = ((top - k) / TCONV_S + 1).min(in_len);
        (lo.min(hi), hi)
    };
    for ci in 0..ci_n {
        let x_c = &x[ci * in_ch..(ci + 1) * in_ch];
        for co in 0..co_n {
            let out_c = &mut out[co * out_ch..(co + 1) * out_ch];
            let w_base = ((ci * co_n) + co) * TCONV_K * TCONV_K * TCONV_K;
            for kd in 0..TCONV_K {
                let (id_lo, id_hi) = axis_range(d, od_n, kd);
                for kh in 0..TCONV_K {
                    let (ih_lo, ih_hi) = axis_range(h, oh_n, kh);
                    for kw in 0..TCONV_K {
                        let wv = wt[w_base + (kd * TCONV_K + kh) * TCONV_K + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (iw_lo, iw_hi) = axis_range(w, ow_n, kw);
                        for id in id_lo..id_hi {
                            let od = id * TCONV_S + kd - TCONV_P;
                            for ih in ih_lo..ih_hi {
                                let oh = ih * TCONV_S + kh - TCONV_P;
                                let irow = (id * h + ih) * w;
                                let orow = (od * oh_n + oh) * ow_n;
                                for iw in iw_lo..iw_hi {
                                    // iw*2 + kw >= 1, so the index stays in range
                                    out_c[orow + iw * TCONV_S + kw - TCONV_P] += wv * x_c[irow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![co_n, od_n, oh_n, ow_n],
        Op::ConvTranspose3d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        },
    ))
}

/// Instance normalization over the spatial extent of each channel; no learned
/// scale or shift. Biased variance, stabilized by `eps`.
pub fn instance_norm(input: &Tensor, eps: f64) -> Result<Tensor> {
    let [c_n, d, h, w] = check_rank4(input, "instance_norm input")?;
    if eps <= 0.0 {
        return Err(DregError::InvalidArgument(format!(
            "instance_norm eps must be positive, got {eps}"
        )));
    }
    let n = d * h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for c in 0..c_n {
        let xc = &x[c * n..(c + 1) * n];
        let mean = xc.iter().sum::<f64>() / n as f64;
        let var = xc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (o, v) in out[c * n..(c + 1) * n].iter_mut().zip(xc) {
            *o = (v - mean) * inv_std;
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![c_n, d, h, w],
        Op::InstanceNorm {
            input: input.clone(),
            eps,
        },
    ))
}

/// LeakyReLU; the derivative at exactly 0 is defined as 1.
pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    Tensor::from_op(
        data,
        input.shape().to_vec(),
        Op::LeakyRelu {
            input: input.clone(),
            slope,
        },
    )
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    Tensor::from_op(data, input.shape().to_vec(), Op::Sigmoid(input.clone()))
}

/// Softmax along `axis`, max-subtracted for stability.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(DregError::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(x[base + j * inner]);
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                z += e;
            }
            for j in 0..n {
                out[base + j * inner] /= z;
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        shape.to_vec(),
        Op::Softmax {
            input: input.clone(),
            axis,
        },
    ))
}

/// Fully-connected layer: `weight [m,n] * input [n] + bias [m]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    let ws = weight.shape();
    if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
        return Err(DregError::ShapeMismatch {
            context: "linear input vs weight",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (m, n) = (ws[0], ws[1]);
    if bias.shape() != [m] {
        return Err(DregError::ShapeMismatch {
            context: "linear bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![m],
        });
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = bias.data().to_vec();
    for i in 0..m {
        let row = &wt[i * n..(i + 1) * n];
        out[i] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(Tensor::from_op(
        out,
        vec![m],
        Op::Linear {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        },
    ))
}

/// Mean over the spatial extent of each channel: `[C,D,H,W] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [c_n, d, h, w] = check_rank4(input, "global_avg_pool input")?;
    let n = d * h * w;
    let mut out = vec![0.0; c_n];
    for c in 0..c_n {
        out[c] = input.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64;
    }
    Ok(Tensor::from_op(
        out,
        vec![c_n],
        Op::GlobalAvgPool(input.clone()),
    ))
}

/// Trilinear interpolation weights and corner base for one axis coordinate.
/// Coordinates are clamped to `[0, extent-1]` (border replication).
#[inline]
pub(crate) fn axis_lerp(raw: f64, extent: usize) -> (usize, f64, bool) {
    if extent == 1 {
        return (0, 0.0, false);
    }
    let hi = (extent - 1) as f64;
    let c = raw.clamp(0.0, hi);
    let mut i0 = c.floor() as usize;
    if i0 > extent - 2 {
        i0 = extent - 2;
    }
    let frac = c - i0 as f64;
    let interior = raw > 0.0 && raw < hi;
    (i0, frac, interior)
}

/// Sample `volume [C,D,H,W]` at absolute voxel coordinates
/// `locations [3,Do,Ho,Wo]` (channel 0 = x/W, 1 = y/H, 2 = z/D) with
/// trilinear interpolation; out-of-bounds coordinates are clamped.
/// Differentiable with respect to both the volume and the locations.
pub fn grid_sample_trilinear(volume: &Tensor, locations: &Tensor) -> Result<Tensor> {
    let [c_n, d, h, w] = check_rank4(volume, "grid_sample volume")?;
    let ls = locations.shape();
    if ls.len() != 4 || ls[0] != 3 {
        return Err(DregError::ShapeMismatch {
            context: "grid_sample locations",
            lhs: ls.to_vec(),
            rhs: vec![3, 0, 0, 0],
        });
    }
    let (od, oh, ow) = (ls[1], ls[2], ls[3]);
    let n_out = od * oh * ow;
    let loc = locations.data();
    let vol = volume.data();
    let ch = d * h * w;
    let mut out = vec![0.0; c_n * n_out];
    for q in 0..n_out {
        let (x0, fx, _) = axis_lerp(loc[q], w);
        let (y0, fy, _) = axis_lerp(loc[n_out + q], h);
        let (z0, fz, _) = axis_lerp(loc[2 * n_out + q], d);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let z1 = (z0 + 1).min(d - 1);
        let w000 = (1.0 - fz) * (1.0 - fy) * (1.0 - fx);
        let w001 = (1.0 - fz) * (1.0 - fy) * fx;
        let w010 = (1.0 - fz) * fy * (1.0 - fx);
        let w011 = (1.0 - fz) * fy * fx;
        let w100 = fz * (1.0 - fy) * (1.0 - fx);
        let w101 = fz * (1.0 - fy) * fx;
        let w110 = fz * fy * (1.0 - fx);
        let w111 = fz * fy * fx;
        let i000 = (z0 * h + y0) * w + x0;
        let i001 = (z0 * h + y0) * w + x1;
        let i010 = (z0 * h + y1) * w + x0;
        let i011 = (z0 * h + y1) * w + x1;
        let i100 = (z1 * h + y0) * w + x0;
        let i101 = (z1 * h + y0) * w + x1;
        let i110 = (z1 * h + y1) * w + x0;
        let i111 = (z1 * h + y1) * w + x1;
        for c in 0..c_n {
            let v = &vol[c * ch..(c + 1) * ch];
            out[c * n_out + q] = w000 * v[i000]
                + w001 * v[i001]
                + w010 * v[i010]
                + w011 * v[i011]
                + w100 * v[i100]
                + w101 * v[i101]
                + w110 * v[i110]
                + w111 * v[i111];
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![c_n, od, oh, ow],
        Op::GridSample {
            volume: volume.clone(),
            locations: locations.clone(),
        },
    ))
}

/// Forward difference along a spatial `axis` (1 = D, 2 = H, 3 = W) of a
/// `[C,D,H,W]` tensor; the last slice along the axis is defined as 0.
pub fn forward_diff(input: &Tensor, axis: usize) -> Result<Tensor> {
    let [_, _, _, _] = check_rank4(input, "forward_diff input")?;
    if !(1..=3).contains(&axis) {
        return Err(DregError::InvalidArgument(format!(
            "forward_diff axis must be 1..=3, got {axis}"
        )));
    }
    let shape = input.shape().to_vec();
    let strides = strides_of(&shape);
    let step = strides[axis];
    let len = shape[axis];
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for j in 0..len - 1 {
            let base = o * len * inner + j * step;
            for i in 0..inner {
                out[base + i] = x[base + step + i] - x[base + i];
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        shape,
        Op::ForwardDiff {
            input: input.clone(),
            axis,
        },
    ))
}

/// Dense displacement field of the affine residual map: `theta` is a
/// 12-vector (row-major 3x3 residual matrix, then translation), and the
/// output `[3,D,H,W]` holds `A* p + t` at every voxel, with channel 0 the
/// x/W component. Differentiable with respect to `theta`.
pub fn affine_field_op(theta: &Tensor, shape: (usize, usize, usize)) -> Result<Tensor> {
    if theta.shape() != [12] {
        return Err(DregError::ShapeMismatch {
            context: "affine_field theta",
            lhs: theta.shape().to_vec(),
            rhs: vec![12],
        });
    }
    let (d, h, w) = shape;
    let n = d * h * w;
    let t = theta.data();
    let mut out = vec![0.0; 3 * n];
    let mut q = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                out[q] = t[0] * xf + t[1] * yf + t[2] * zf + t[9];
                out[n + q] = t[3] * xf + t[4] * yf + t[5] * zf + t[10];
                out[2 * n + q] = t[6] * xf + t[7] * yf + t[8] * zf + t[11];
                q += 1;
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![3, d, h, w],
        Op::AffineField {
            theta: theta.clone(),
        },
    ))
}
