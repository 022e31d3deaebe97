//! Reverse-mode sweep: iterative topological ordering plus one adjoint per
//! operation. Gradient accumulation is sequential and deterministic.

use std::collections::{HashMap, HashSet};

use super::nn::{axis_lerp, conv_axis_range, TCONV_K, TCONV_P, TCONV_S};
use super::{
    effective_strides, op_parents, reduce_to_shape, scatter_block_add, strides_of, Op, Tensor,
};
use crate::error::{DregError, Result};

impl Tensor {
    /// Propagate d(loss)/d(node) from this scalar loss to every reachable
    /// tensor with `requires_grad`, accumulating additively into their grad
    /// cells. Repeated calls without `zero_grad` keep adding.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(DregError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let g = match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            };
            distribute(node, &g, &mut grads);
            let mut cell = node.inner.grad.borrow_mut();
            match cell.as_mut() {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => *cell = Some(g),
            }
        }
        Ok(())
    }
}

/// Post-order over the sub-DAG of nodes that require gradients.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor, Vec<Tensor>, usize)> = Vec::new();
    let parents_of = |t: &Tensor| -> Vec<Tensor> {
        op_parents(&t.inner.op)
            .into_iter()
            .filter(|p| p.requires_grad())
            .cloned()
            .collect()
    };
    let p = parents_of(root);
    stack.push((root.clone(), p, 0));
    while let Some((node, parents, idx)) = stack.last_mut() {
        if *idx < parents.len() {
            let child = parents[*idx].clone();
            *idx += 1;
            if visited.insert(child.id()) {
                let cp = parents_of(&child);
                stack.push((child, cp, 0));
            }
        } else {
            order.push(node.clone());
            stack.pop();
        }
    }
    order
}

fn acc_into<'a>(grads: &'a mut HashMap<u64, Vec<f64>>, t: &Tensor) -> &'a mut Vec<f64> {
    grads.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()])
}

/// Apply the adjoint of `node`'s op, adding contributions into `grads`.
fn distribute(node: &Tensor, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    let out_shape = node.shape().to_vec();
    match &node.inner.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.requires_grad() {
                let ga = reduce_to_shape(g, &out_shape, a.shape());
                add_assign(acc_into(grads, a), &ga);
            }
            if b.requires_grad() {
                let gb = reduce_to_shape(g, &out_shape, b.shape());
                add_assign(acc_into(grads, b), &gb);
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                let ga = reduce_to_shape(g, &out_shape, a.shape());
                add_assign(acc_into(grads, a), &ga);
            }
            if b.requires_grad() {
                let gb = reduce_to_shape(g, &out_shape, b.shape());
                sub_assign(acc_into(grads, b), &gb);
            }
        }
        Op::Mul(a, b) => mul_div_adjoint(a, b, g, &out_shape, grads, false),
        Op::Div(a, b) => mul_div_adjoint(a, b, g, &out_shape, grads, true),
        Op::AddScalar(a) => add_assign(acc_into(grads, a), g),
        Op::MulScalar(a, c) => {
            let ga = acc_into(grads, a);
            for (o, v) in ga.iter_mut().zip(g) {
                *o += c * v;
            }
        }
        Op::Square(a) => {
            let x = a.data();
            let ga = acc_into(grads, a);
            for i in 0..g.len() {
                ga[i] += 2.0 * x[i] * g[i];
            }
        }
        Op::Sqrt(a) => {
            let y = node.data();
            let ga = acc_into(grads, a);
            for i in 0..g.len() {
                // derivative at 0 defined as 0 to keep eps-guarded
                // denominators NaN-free
                if y[i] > 0.0 {
                    ga[i] += g[i] / (2.0 * y[i]);
                }
            }
        }
        Op::Sum(a) => {
            let ga = acc_into(grads, a);
            for o in ga.iter_mut() {
                *o += g[0];
            }
        }
        Op::Mean(a) => {
            let scale = g[0] / a.numel() as f64;
            let ga = acc_into(grads, a);
            for o in ga.iter_mut() {
                *o += scale;
            }
        }
        Op::Reshape(a) => add_assign(acc_into(grads, a), g),
        Op::Concat { axis, inputs } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let blocks: Vec<usize> = inputs
                .iter()
                .map(|t| t.shape()[*axis..].iter().product())
                .collect();
            let out_inner: usize = out_shape[*axis..].iter().product();
            for (t, (&block, pre)) in inputs.iter().zip(blocks.iter().zip(prefix_sums(&blocks))) {
                if !t.requires_grad() {
                    continue;
                }
                let gt = acc_into(grads, t);
                for o in 0..outer {
                    let src = &g[o * out_inner + pre..o * out_inner + pre + block];
                    for (d, s) in gt[o * block..(o + 1) * block].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Slice { input, start } => {
            if input.requires_grad() {
                let strides = strides_of(input.shape());
                let size = out_shape.clone();
                let gi = acc_into(grads, input);
                scatter_block_add(gi, &strides, start, &size, g);
            }
        }
        Op::LeakyRelu { input, slope } => {
            let x = input.data();
            let gi = acc_into(grads, input);
            for i in 0..g.len() {
                gi[i] += g[i] * if x[i] >= 0.0 { 1.0 } else { *slope };
            }
        }
        Op::Sigmoid(a) => {
            let y = node.data();
            let ga = acc_into(grads, a);
            for i in 0..g.len() {
                ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }
        Op::Softmax { input, axis } => {
            let y = node.data();
            let n = out_shape[*axis];
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let gi = acc_into(grads, input);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..n {
                        let idx = base + j * inner;
                        gi[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        }
        Op::InstanceNorm { input, eps } => {
            let (c_n, n) = (out_shape[0], out_shape[1] * out_shape[2] * out_shape[3]);
            let x = input.data();
            let y = node.data();
            let gi = acc_into(grads, input);
            for c in 0..c_n {
                let xc = &x[c * n..(c + 1) * n];
                let yc = &y[c * n..(c + 1) * n];
                let gc = &g[c * n..(c + 1) * n];
                let mean = xc.iter().sum::<f64>() / n as f64;
                let var = xc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let g_mean = gc.iter().sum::<f64>() / n as f64;
                let gy_mean = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for i in 0..n {
                    gi[c * n + i] += inv_std * (gc[i] - g_mean - yc[i] * gy_mean);
                }
            }
        }
        Op::Conv3d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            conv3d_adjoint(node, input, weight, bias, *stride, *padding, g, grads);
        }
        Op::ConvTranspose3d {
            input,
            weight,
            bias,
        } => {
            tconv3d_adjoint(node, input, weight, bias, g, grads);
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (m, n) = (weight.shape()[0], weight.shape()[1]);
            if bias.requires_grad() {
                add_assign(acc_into(grads, bias), g);
            }
            if weight.requires_grad() {
                let x = input.data();
                let gw = acc_into(grads, weight);
                for i in 0..m {
                    for j in 0..n {
                        gw[i * n + j] += g[i] * x[j];
                    }
                }
            }
            if input.requires_grad() {
                let wt = weight.data();
                let gi = acc_into(grads, input);
                for i in 0..m {
                    let row = &wt[i * n..(i + 1) * n];
                    for j in 0..n {
                        gi[j] += g[i] * row[j];
                    }
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let c_n = out_shape[0];
            let n = a.numel() / c_n;
            let ga = acc_into(grads, a);
            for c in 0..c_n {
                let scale = g[c] / n as f64;
                for v in ga[c * n..(c + 1) * n].iter_mut() {
                    *v += scale;
                }
            }
        }
        Op::GridSample { volume, locations } => {
            grid_sample_adjoint(volume, locations, g, &out_shape, grads);
        }
        Op::ForwardDiff { input, axis } => {
            let len = out_shape[*axis];
            let strides = strides_of(&out_shape);
            let step = strides[*axis];
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let gi = acc_into(grads, input);
            for o in 0..outer {
                for j in 0..len - 1 {
                    let base = o * len * inner + j * step;
                    for i in 0..inner {
                        gi[base + step + i] += g[base + i];
                        gi[base + i] -= g[base + i];
                    }
                }
            }
        }
        Op::AffineField { theta } => {
            let (d, h, w) = (out_shape[1], out_shape[2], out_shape[3]);
            let n = d * h * w;
            let gt = acc_into(grads, theta);
            let mut q = 0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                        for c in 0..3 {
                            let gv = g[c * n + q];
                            gt[3 * c] += gv * xf;
                            gt[3 * c + 1] += gv * yf;
                            gt[3 * c + 2] += gv * zf;
                            gt[9 + c] += gv;
                        }
                        q += 1;
                    }
                }
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn prefix_sums(blocks: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut acc = 0;
    for b in blocks {
        out.push(acc);
        acc += b;
    }
    out
}

fn mul_div_adjoint(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    out_shape: &[usize],
    grads: &mut HashMap<u64, Vec<f64>>,
    is_div: bool,
) {
    let sa = effective_strides(a.shape(), out_shape);
    let sb = effective_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut ga = if a.requires_grad() {
        Some(vec![0.0; a.numel()])
    } else {
        None
    };
    let mut gb = if b.requires_grad() {
        Some(vec![0.0; b.numel()])
    } else {
        None
    };
    let mut idx = vec![0usize; out_shape.len()];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    for &gv in g {
        if is_div {
            let bi = bd[off_b];
            if let Some(ga) = ga.as_mut() {
                ga[off_a] += gv / bi;
            }
            if let Some(gb) = gb.as_mut() {
                gb[off_b] -= gv * ad[off_a] / (bi * bi);
            }
        } else {
            if let Some(ga) = ga.as_mut() {
                ga[off_a] += gv * bd[off_b];
            }
            if let Some(gb) = gb.as_mut() {
                gb[off_b] += gv * ad[off_a];
            }
        }
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    if let Some(ga) = ga {
        add_assign(acc_into(grads, a), &ga);
    }
    if let Some(gb) = gb {
        add_assign(acc_into(grads, b), &gb);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_adjoint(
    node: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    g: &[f64],
    grads: &mut HashMap<u64, Vec<f64>>,
) {
    let (co_n, od_n, oh_n, ow_n) = {
        let s = node.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (ci_n, d, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let k = weight.shape()[2];
    let out_ch = od_n * oh_n * ow_n;
    let in_ch = d * h * w;
    if bias.requires_grad() {
        let gb = acc_into(grads, bias);
        for co in 0..co_n {
            gb[co] += g[co * out_ch..(co + 1) * out_ch].iter().sum::<f64>();
        }
    }
    if weight.requires_grad() {
        let x = input.data();
        let mut gw = vec![0.0; weight.numel()];
        for co in 0..co_n {
            let g_c = &g[co * out_ch..(co + 1) * out_ch];
            for ci in 0..ci_n {
                let x_c = &x[ci * in_ch..(ci + 1) * in_ch];
                let w_base = ((co * ci_n) + ci) * k * k * k;
                for kd in 0..k {
                    let (od_lo, od_hi) = conv_axis_range(od_n, d, kd, stride, padding);
                    for kh in 0..k {
                        let (oh_lo, oh_hi) = conv_axis_range(oh_n, h, kh, stride, padding);
                        for kw in 0..k {
                            let (ow_lo, ow_hi) = conv_axis_range(ow_n, w, kw, stride, padding);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for od in od_lo..od_hi {
                                let id = od * stride + kd - padding;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * stride + kh - padding;
                                    let orow = (od * oh_n + oh) * ow_n;
                                    let irow = (id * h + ih) * w;
                                    if stride == 1 {
                                        let iw0 = ow_lo + kw - padding;
                                        let gr = &g_c[orow + ow_lo..orow + ow_hi];
                                        let xr = &x_c[irow + iw0..irow + iw0 + gr.len()];
                                        acc += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                                    } else {
                                        for ow in ow_lo..ow_hi {
                                            let iw = ow * stride + kw - padding;
                                            acc += g_c[orow + ow] * x_c[irow + iw];
                                        }
                                    }
                                }
                            }
                            gw[w_base + (kd * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
        }
        add_assign(acc_into(grads, weight), &gw);
    }
    if input.requires_grad() {
        let wt = weight.data();
        let mut gi = vec![0.0; input.numel()];
        for co in 0..co_n {
            let g_c = &g[co * out_ch..(co + 1) * out_ch];
            for ci in 0..ci_n {
                let gi_c = &mut gi[ci * in_ch..(ci + 1) * in_ch];
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
                                        let gr = &g_c[orow + ow_lo..orow + ow_hi];
                                        let xr = &mut gi_c[irow + iw0..irow + iw0 + gr.len()];
                                        for (o, s) in xr.iter_mut().zip(gr) {
                                            *o += wv * s;
                                        }
                                    } else {
                                        for ow in ow_lo..ow_hi {
                                            let iw = ow * stride + kw - padding;
                                            gi_c[irow + iw] += wv * g_c[orow + ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        add_assign(acc_into(grads, input), &gi);
    }
}

fn tconv3d_adjoint(
    node: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    g: &[f64],
    grads: &mut HashMap<u64, Vec<f64>>,
) {
    let (co_n, od_n, oh_n, ow_n) = {
        let s = node.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (ci_n, d, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let out_ch = od_n * oh_n * ow_n;
    let in_ch = d * h * w;
    let axis_range = |in_len: usize, out_len: usize, k: usize| -> (usize, usize) {
        let lo = usize::from(k == 0);
        let top = out_len - 1 + TCONV_P;
        if k > top {
            return (0, 0);
        }
        let hi = ((top - k) / TCONV_S + 1).min(in_len);
        (lo.min(hi), hi)
    };
    if bias.requires_grad() {
        let gb = acc_into(grads, bias);
        for co in 0..co_n {
            gb[co] += g[co * out_ch..(co + 1) * out_ch].iter().sum::<f64>();
        }
    }
    if weight.requires_grad() {
        let x = input.data();
        let mut gw = vec![0.0; weight.numel()];
        for ci in 0..ci_n {
            let x_c = &x[ci * in_ch..(ci + 1) * in_ch];
            for co in 0..co_n {
                let g_c = &g[co * out_ch..(co + 1) * out_ch];
                let w_base = ((ci * co_n) + co) * TCONV_K * TCONV_K * TCONV_K;
                for kd in 0..TCONV_K {
                    let (id_lo, id_hi) = axis_range(d, od_n, kd);
                    for kh in 0..TCONV_K {
                        let (ih_lo, ih_hi) = axis_range(h, oh_n, kh);
                        for kw in 0..TCONV_K {
                            let (iw_lo, iw_hi) = axis_range(w, ow_n, kw);
                            let mut acc = 0.0;
                            for id in id_lo..id_hi {
                                let od = id * TCONV_S + kd - TCONV_P;
                                for ih in ih_lo..ih_hi {
                                    let oh = ih * TCONV_S + kh - TCONV_P;
                                    let irow = (id * h + ih) * w;
                                    let orow = (od * oh_n + oh) * ow_n;
                                    for iw in iw_lo..iw_hi {
                                        acc += x_c[irow + iw]
                                            * g_c[orow + iw * TCONV_S + kw - TCONV_P];
                                    }
                                }
                            }
                            gw[w_base + (kd * TCONV_K + kh) * TCONV_K + kw] += acc;
                        }
                    }
                }
            }
        }
        add_assign(acc_into(grads, weight), &gw);
    }
    if input.requires_grad() {
        let wt = weight.data();
        let mut gi = vec![0.0; input.numel()];
        for ci in 0..ci_n {
            let gi_c = &mut gi[ci * in_ch..(ci + 1) * in_ch];
            for co in 0..co_n {
                let g_c = &g[co * out_ch..(co + 1) * out_ch];
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
                                        gi_c[irow + iw] +=
                                            wv * g_c[orow + iw * TCONV_S + kw - TCONV_P];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        add_assign(acc_into(grads, input), &gi);
    }
}

fn grid_sample_adjoint(
    volume: &Tensor,
    locations: &Tensor,
    g: &[f64],
    out_shape: &[usize],
    grads: &mut HashMap<u64, Vec<f64>>,
) {
    let (c_n, d, h, w) = {
        let s = volume.shape();
        (s[0], s[1], s[2], s[3])
    };
    let n_out = out_shape[1] * out_shape[2] * out_shape[3];
    let loc = locations.data();
    let vol = volume.data();
    let ch = d * h * w;
    let mut gvol = if volume.requires_grad() {
        Some(vec![0.0; volume.numel()])
    } else {
        None
    };
    let mut gloc = if locations.requires_grad() {
        Some(vec![0.0; locations.numel()])
    } else {
        None
    };
    for q in 0..n_out {
        let (x0, fx, ix) = axis_lerp(loc[q], w);
        let (y0, fy, iy) = axis_lerp(loc[n_out + q], h);
        let (z0, fz, iz) = axis_lerp(loc[2 * n_out + q], d);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let z1 = (z0 + 1).min(d - 1);
        let i000 = (z0 * h + y0) * w + x0;
        let i001 = (z0 * h + y0) * w + x1;
        let i010 = (z0 * h + y1) * w + x0;
        let i011 = (z0 * h + y1) * w + x1;
        let i100 = (z1 * h + y0) * w + x0;
        let i101 = (z1 * h + y0) * w + x1;
        let i110 = (z1 * h + y1) * w + x0;
        let i111 = (z1 * h + y1) * w + x1;
        let w000 = (1.0 - fz) * (1.0 - fy) * (1.0 - fx);
        let w001 = (1.0 - fz) * (1.0 - fy) * fx;
        let w010 = (1.0 - fz) * fy * (1.0 - fx);
        let w011 = (1.0 - fz) * fy * fx;
        let w100 = fz * (1.0 - fy) * (1.0 - fx);
        let w101 = fz * (1.0 - fy) * fx;
        let w110 = fz * fy * (1.0 - fx);
        let w111 = fz * fy * fx;
        let (mut dx, mut dy, mut dz) = (0.0, 0.0, 0.0);
        for c in 0..c_n {
            let gv = g[c * n_out + q];
            if let Some(gvol) = gvol.as_mut() {
                let gc = &mut gvol[c * ch..(c + 1) * ch];
                gc[i000] += gv * w000;
                gc[i001] += gv * w001;
                gc[i010] += gv * w010;
                gc[i011] += gv * w011;
                gc[i100] += gv * w100;
                gc[i101] += gv * w101;
                gc[i110] += gv * w110;
                gc[i111] += gv * w111;
            }
            if gloc.is_some() {
                let v = &vol[c * ch..(c + 1) * ch];
                dx += gv
                    * ((1.0 - fz) * (1.0 - fy) * (v[i001] - v[i000])
                        + (1.0 - fz) * fy * (v[i011] - v[i010])
                        + fz * (1.0 - fy) * (v[i101] - v[i100])
                        + fz * fy * (v[i111] - v[i110]));
                dy += gv
                    * ((1.0 - fz) * (1.0 - fx) * (v[i010] - v[i000])
                        + (1.0 - fz) * fx * (v[i011] - v[i001])
                        + fz * (1.0 - fx) * (v[i110] - v[i100])
                        + fz * fx * (v[i111] - v[i101]));
                dz += gv
                    * ((1.0 - fy) * (1.0 - fx) * (v[i100] - v[i000])
                        + (1.0 - fy) * fx * (v[i101] - v[i001])
                        + fy * (1.0 - fx) * (v[i110] - v[i010])
                        + fy * fx * (v[i111] - v[i011]));
            }
        }
        if let Some(gloc) = gloc.as_mut() {
            // clamped coordinates have zero derivative outside the open range
            if ix {
                gloc[q] += dx;
            }
            if iy {
                gloc[n_out + q] += dy;
            }
            if iz {
                gloc[2 * n_out + q] += dz;
            }
        }
    }
    if let Some(gv) = gvol {
        add_assign(acc_into(grads, volume), &gv);
    }
    if let Some(gl) = gloc {
        add_assign(acc_into(grads, locations), &gl);
    }
}
