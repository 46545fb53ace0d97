//! Forward and backward kernels for every layer primitive.
//!
//! Kernels parallelize over independent output elements; the reduction
//! order for each output element is fixed, so results are bit-identical
//! regardless of worker count.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[inline]
fn idx3(d: usize, h: usize, w: usize, he: usize, we: usize) -> usize {
    (d * he + h) * we + w
}

/// Output extent of a convolution along one axis.
pub fn conv3d_output_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(Error::InvalidShape(format!(
            "extent {} with padding {} is smaller than kernel {}",
            extent, padding, k
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::InvalidShape(format!(
            "non-integer output extent: ({} + 2*{} - {}) not divisible by stride {}",
            extent, padding, k, stride
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Valid output range [lo, hi) along one axis for a fixed kernel offset,
/// i.e. all `o` with `0 <= o*stride + k_off - padding < extent`.
#[inline]
fn valid_range(out_extent: usize, in_extent: usize, k_off: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k_off {
        (padding - k_off + stride - 1) / stride
    } else {
        0
    };
    let hi = if in_extent + padding > k_off {
        (((in_extent - 1 + padding - k_off) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// y += a * x over equal-length slices; shaped for auto-vectorization.
#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product in 8 fixed lanes. The lane split keeps the reduction
/// order deterministic while letting the compiler vectorize it.
#[inline]
fn dot_lanes<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut acc = S::zero();
    for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
        acc += x * y;
    }
    for l in lanes {
        acc += l;
    }
    acc
}

pub struct Conv3dSpec {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_spatial: [usize; 3],
    pub out_spatial: [usize; 3],
}

pub fn conv3d_spec<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Conv3dSpec> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 5 || ws.len() != 5 {
        return Err(Error::InvalidShape(format!(
            "conv3d expects rank-5 input and weight, got {:?} and {:?}",
            is, ws
        )));
    }
    let (n, c_in, d, h, w) = (is[0], is[1], is[2], is[3], is[4]);
    let (c_out, wc_in, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    if kd != kh || kh != kw {
        return Err(Error::InvalidShape(format!("kernel must be cubic, got {:?}", &ws[2..])));
    }
    if kd % 2 == 0 {
        return Err(Error::InvalidShape(format!("kernel extent must be odd, got {}", kd)));
    }
    if wc_in != c_in {
        return Err(Error::InvalidShape(format!(
            "input channels {} do not match weight channels {}",
            c_in, wc_in
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::InvalidShape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            c_out
        )));
    }
    if stride < 1 {
        return Err(Error::InvalidShape("stride must be >= 1".into()));
    }
    let od = conv3d_output_extent(d, kd, stride, padding)?;
    let oh = conv3d_output_extent(h, kd, stride, padding)?;
    let ow = conv3d_output_extent(w, kd, stride, padding)?;
    Ok(Conv3dSpec {
        batch: n,
        c_in,
        c_out,
        k: kd,
        stride,
        padding,
        in_spatial: [d, h, w],
        out_spatial: [od, oh, ow],
    })
}

pub fn conv3d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &Conv3dSpec,
) -> Tensor<S> {
    let [d, h, w] = spec.in_spatial;
    let [od, oh, ow] = spec.out_spatial;
    let (k, s, p) = (spec.k, spec.stride, spec.padding);
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let mut out = Tensor::zeros(&[spec.batch, spec.c_out, od, oh, ow]);
    let xdata = input.data();
    let wdata = weight.data();
    let bdata = bias.data();

    out.data_mut()
        .par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(chunk_idx, o)| {
            let n = chunk_idx / spec.c_out;
            let co = chunk_idx % spec.c_out;
            o.fill(bdata[co]);
            for ci in 0..spec.c_in {
                let x = &xdata[(n * spec.c_in + ci) * in_plane..][..in_plane];
                let wk = &wdata[(co * spec.c_in + ci) * k * k * k..][..k * k * k];
                for kd in 0..k {
                    let (dlo, dhi) = valid_range(od, d, kd, s, p);
                    for kh in 0..k {
                        let (hlo, hhi) = valid_range(oh, h, kh, s, p);
                        for kw in 0..k {
                            let (wlo, whi) = valid_range(ow, w, kw, s, p);
                            if wlo >= whi {
                                continue;
                            }
                            let wv = wk[idx3(kd, kh, kw, k, k)];
                            for zo in dlo..dhi {
                                let zi = zo * s + kd - p;
                                for yo in hlo..hhi {
                                    let yi = yo * s + kh - p;
                                    let obase = idx3(zo, yo, 0, oh, ow);
                                    let ibase = idx3(zi, yi, 0, h, w);
                                    if s == 1 {
                                        let ioff = ibase + wlo + kw - p;
                                        axpy(
                                            &mut o[obase + wlo..obase + whi],
                                            wv,
                                            &x[ioff..ioff + (whi - wlo)],
                                        );
                                    } else {
                                        for xo in wlo..whi {
                                            o[obase + xo] += wv * x[ibase + xo * s + kw - p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    spec: &Conv3dSpec,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [d, h, w] = spec.in_spatial;
    let [od, oh, ow] = spec.out_spatial;
    let (k, s, p) = (spec.k, spec.stride, spec.padding);
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let kvol = k * k * k;
    let xdata = input.data();
    let wdata = weight.data();
    let gdata = gout.data();

    // dbias[co] = sum over batch and spatial of gout
    let dbias_data: Vec<S> = (0..spec.c_out)
        .into_par_iter()
        .map(|co| {
            let mut acc = S::zero();
            for n in 0..spec.batch {
                let g = &gdata[(n * spec.c_out + co) * out_plane..][..out_plane];
                for &v in g {
                    acc += v;
                }
            }
            acc
        })
        .collect();
    let dbias = Tensor::new(&[spec.c_out], dbias_data).unwrap();

    let mut dweight = Tensor::zeros(weight.shape());
    dweight
        .data_mut()
        .par_chunks_mut(kvol)
        .enumerate()
        .for_each(|(chunk_idx, dw)| {
            let co = chunk_idx / spec.c_in;
            let ci = chunk_idx % spec.c_in;
            for kd in 0..k {
                let (dlo, dhi) = valid_range(od, d, kd, s, p);
                for kh in 0..k {
                    let (hlo, hhi) = valid_range(oh, h, kh, s, p);
                    for kw in 0..k {
                        let (wlo, whi) = valid_range(ow, w, kw, s, p);
                        let mut acc = S::zero();
                        for n in 0..spec.batch {
                            let g = &gdata[(n * spec.c_out + co) * out_plane..][..out_plane];
                            let x = &xdata[(n * spec.c_in + ci) * in_plane..][..in_plane];
                            for zo in dlo..dhi {
                                let zi = zo * s + kd - p;
                                for yo in hlo..hhi {
                                    let yi = yo * s + kh - p;
                                    let obase = idx3(zo, yo, 0, oh, ow);
                                    let ibase = idx3(zi, yi, 0, h, w);
                                    if s == 1 {
                                        let ioff = ibase + wlo + kw - p;
                                        acc += dot_lanes(
                                            &g[obase + wlo..obase + whi],
                                            &x[ioff..ioff + (whi - wlo)],
                                        );
                                    } else {
                                        for xo in wlo..whi {
                                            acc += g[obase + xo] * x[ibase + xo * s + kw - p];
                                        }
                                    }
                                }
                            }
                        }
                        dw[idx3(kd, kh, kw, k, k)] = acc;
                    }
                }
            }
        });

    let mut dinput = Tensor::zeros(input.shape());
    dinput
        .data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(chunk_idx, dx)| {
            let n = chunk_idx / spec.c_in;
            let ci = chunk_idx % spec.c_in;
            for co in 0..spec.c_out {
                let g = &gdata[(n * spec.c_out + co) * out_plane..][..out_plane];
                let wk = &wdata[(co * spec.c_in + ci) * kvol..][..kvol];
                for kd in 0..k {
                    let (dlo, dhi) = valid_range(od, d, kd, s, p);
                    for kh in 0..k {
                        let (hlo, hhi) = valid_range(oh, h, kh, s, p);
                        for kw in 0..k {
                            let (wlo, whi) = valid_range(ow, w, kw, s, p);
                            if wlo >= whi {
                                continue;
                            }
                            let wv = wk[idx3(kd, kh, kw, k, k)];
                            for zo in dlo..dhi {
                                let zi = zo * s + kd - p;
                                for yo in hlo..hhi {
                                    let yi = yo * s + kh - p;
                                    let obase = idx3(zo, yo, 0, oh, ow);
                                    let ibase = idx3(zi, yi, 0, h, w);
                                    if s == 1 {
                                        let ioff = ibase + wlo + kw - p;
                                        axpy(
                                            &mut dx[ioff..ioff + (whi - wlo)],
                                            wv,
                                            &g[obase + wlo..obase + whi],
                                        );
                                    } else {
                                        for xo in wlo..whi {
                                            dx[ibase + xo * s + kw - p] += wv * g[obase + xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    (dinput, dweight, dbias)
}

pub fn upsample2x_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = input.shape();
    if sh.len() != 5 {
        return Err(Error::InvalidShape(format!("upsample expects rank-5 input, got {:?}", sh)));
    }
    let (n, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, d2, h2, w2]);
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(d2 * h2 * w2)
        .enumerate()
        .for_each(|(nc, o)| {
            let xin = &x[nc * d * h * w..][..d * h * w];
            for zo in 0..d2 {
                for yo in 0..h2 {
                    let obase = idx3(zo, yo, 0, h2, w2);
                    let ibase = idx3(zo / 2, yo / 2, 0, h, w);
                    for xo in 0..w2 {
                        o[obase + xo] = xin[ibase + xo / 2];
                    }
                }
            }
        });
    Ok(out)
}

pub fn upsample2x_backward<S: Scalar>(in_shape: &[usize], gout: &Tensor<S>) -> Tensor<S> {
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let g = gout.data();
    let mut dx = Tensor::zeros(in_shape);
    dx.data_mut()
        .par_chunks_mut(d * h * w)
        .enumerate()
        .for_each(|(nc, dxi)| {
            let gc = &g[nc * d2 * h2 * w2..][..d2 * h2 * w2];
            for zo in 0..d2 {
                for yo in 0..h2 {
                    let obase = idx3(zo, yo, 0, h2, w2);
                    let ibase = idx3(zo / 2, yo / 2, 0, h, w);
                    for xo in 0..w2 {
                        dxi[ibase + xo / 2] += gc[obase + xo];
                    }
                }
            }
        });
    dx
}

/// 2x max pooling. Returns output and per-output argmax linear index
/// into the input buffer (first-in-scan-order tie-break).
pub fn maxpool2x_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let sh = input.shape();
    if sh.len() != 5 {
        return Err(Error::InvalidShape(format!("maxpool expects rank-5 input, got {:?}", sh)));
    }
    let (n, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "maxpool requires even spatial extents, got {}x{}x{}",
            d, h, w
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    let mut argmax = vec![0u32; out.numel()];
    let x = input.data();
    let out_plane = od * oh * ow;
    out.data_mut()
        .par_chunks_mut(out_plane)
        .zip(argmax.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(nc, (o, am))| {
            let base = nc * d * h * w;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = idx3(2 * zo + dz, 2 * yo + dy, 2 * xo + dx, h, w);
                                    if x[base + i] > best {
                                        best = x[base + i];
                                        best_idx = base + i;
                                    }
                                }
                            }
                        }
                        o[idx3(zo, yo, xo, oh, ow)] = best;
                        am[idx3(zo, yo, xo, oh, ow)] = best_idx as u32;
                    }
                }
            }
        });
    Ok((out, argmax))
}

pub fn maxpool2x_backward<S: Scalar>(in_shape: &[usize], argmax: &[u32], gout: &Tensor<S>) -> Tensor<S> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(gout.data()) {
        d[i as usize] += g;
    }
    dx
}

pub fn global_avg_pool_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = input.shape();
    if sh.len() != 5 {
        return Err(Error::InvalidShape(format!("gap expects rank-5 input, got {:?}", sh)));
    }
    let (n, c) = (sh[0], sh[1]);
    let vol = sh[2] * sh[3] * sh[4];
    let inv = S::of_f64(1.0 / vol as f64);
    let data: Vec<S> = input
        .data()
        .chunks(vol)
        .map(|chunk| {
            let mut acc = S::zero();
            for &v in chunk {
                acc += v;
            }
            acc * inv
        })
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<S: Scalar>(in_shape: &[usize], gout: &Tensor<S>) -> Tensor<S> {
    let vol = in_shape[2] * in_shape[3] * in_shape[4];
    let inv = S::of_f64(1.0 / vol as f64);
    let mut dx = Tensor::zeros(in_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(vol).zip(gout.data()) {
        let gv = g * inv;
        for v in chunk {
            *v = gv;
        }
    }
    dx
}

pub fn global_max_pool_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let sh = input.shape();
    if sh.len() != 5 {
        return Err(Error::InvalidShape(format!("gmp expects rank-5 input, got {:?}", sh)));
    }
    let (n, c) = (sh[0], sh[1]);
    let vol = sh[2] * sh[3] * sh[4];
    let mut data = Vec::with_capacity(n * c);
    let mut argmax = Vec::with_capacity(n * c);
    for (nc, chunk) in input.data().chunks(vol).enumerate() {
        let mut best = chunk[0];
        let mut best_i = 0usize;
        for (i, &v) in chunk.iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        data.push(best);
        argmax.push((nc * vol + best_i) as u32);
    }
    Ok((Tensor::new(&[n, c], data)?, argmax))
}

pub fn global_max_pool_backward<S: Scalar>(in_shape: &[usize], argmax: &[u32], gout: &Tensor<S>) -> Tensor<S> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(gout.data()) {
        d[i as usize] += g;
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Elu,
    Relu,
    Sigmoid,
}

pub fn activation_forward<S: Scalar>(input: &Tensor<S>, kind: ActivationKind, alpha: S) -> Tensor<S> {
    let data = input
        .data()
        .iter()
        .map(|&x| match kind {
            ActivationKind::Elu => {
                if x > S::zero() {
                    x
                } else {
                    alpha * (x.exp() - S::one())
                }
            }
            ActivationKind::Relu => x.max(S::zero()),
            ActivationKind::Sigmoid => S::one() / (S::one() + (-x).exp()),
        })
        .collect();
    Tensor { shape: input.shape().to_vec(), data }
}

pub fn activation_backward<S: Scalar>(
    input: &Tensor<S>,
    output: &Tensor<S>,
    kind: ActivationKind,
    alpha: S,
    gout: &Tensor<S>,
) -> Tensor<S> {
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(gout.data())
        .map(|((&x, &y), &g)| match kind {
            ActivationKind::Elu => {
                if x > S::zero() {
                    g
                } else {
                    g * (y + alpha)
                }
            }
            ActivationKind::Relu => {
                if x > S::zero() {
                    g
                } else {
                    S::zero()
                }
            }
            ActivationKind::Sigmoid => g * y * (S::one() - y),
        })
        .collect();
    Tensor { shape: input.shape().to_vec(), data }
}

/// Row softmax with max subtraction.
pub fn softmax_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = input.shape();
    if sh.len() != 2 {
        return Err(Error::InvalidShape(format!("softmax expects rank-2 input, got {:?}", sh)));
    }
    let k = sh[1];
    if k < 2 {
        return Err(Error::InvalidShape("softmax needs at least 2 classes".into()));
    }
    let mut data = Vec::with_capacity(input.numel());
    for row in input.data().chunks(k) {
        let mut m = row[0];
        for &v in row {
            m = m.max(v);
        }
        let mut z = S::zero();
        let start = data.len();
        for &v in row {
            let e = (v - m).exp();
            data.push(e);
            z += e;
        }
        for v in &mut data[start..] {
            *v = *v / z;
        }
    }
    Tensor::new(sh, data)
}

pub fn softmax_backward<S: Scalar>(output: &Tensor<S>, gout: &Tensor<S>) -> Tensor<S> {
    let k = output.shape()[1];
    let mut data = Vec::with_capacity(output.numel());
    for (prow, grow) in output.data().chunks(k).zip(gout.data().chunks(k)) {
        let mut dot = S::zero();
        for (&p, &g) in prow.iter().zip(grow) {
            dot += p * g;
        }
        for (&p, &g) in prow.iter().zip(grow) {
            data.push(p * (g - dot));
        }
    }
    Tensor { shape: output.shape().to_vec(), data }
}

/// Per-(sample, group) statistics saved by the group norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormSaved<S: Scalar> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

pub fn group_norm_forward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
    eps: S,
) -> Result<(Tensor<S>, GroupNormSaved<S>)> {
    let sh = input.shape();
    if sh.len() != 5 {
        return Err(Error::InvalidShape(format!("group_norm expects rank-5 input, got {:?}", sh)));
    }
    let (n, c) = (sh[0], sh[1]);
    if c % groups != 0 {
        return Err(Error::InvalidConfig(format!(
            "{} channels not divisible by {} groups",
            c, groups
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::InvalidShape("gamma/beta must have one value per channel".into()));
    }
    let vol = sh[2] * sh[3] * sh[4];
    let cpg = c / groups;
    let m = cpg * vol;
    let inv_m = S::of_f64(1.0 / m as f64);
    let x = input.data();
    let mut out = Tensor::zeros(sh);
    let mut mean = vec![S::zero(); n * groups];
    let mut inv_std = vec![S::zero(); n * groups];
    for ni in 0..n {
        for g in 0..groups {
            let base = (ni * c + g * cpg) * vol;
            let xs = &x[base..base + m];
            let mut mu = S::zero();
            for &v in xs {
                mu += v;
            }
            mu = mu * inv_m;
            let mut var = S::zero();
            for &v in xs {
                let d = v - mu;
                var += d * d;
            }
            var = var * inv_m;
            let istd = S::one() / (var + eps).sqrt();
            mean[ni * groups + g] = mu;
            inv_std[ni * groups + g] = istd;
            let o = &mut out.data[base..base + m];
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gamma.data()[ch];
                let be = beta.data()[ch];
                for v in 0..vol {
                    let i = cc * vol + v;
                    o[i] = (xs[i] - mu) * istd * ga + be;
                }
            }
        }
    }
    Ok((out, GroupNormSaved { mean, inv_std }))
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    groups: usize,
    saved: &GroupNormSaved<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let sh = input.shape();
    let (n, c) = (sh[0], sh[1]);
    let vol = sh[2] * sh[3] * sh[4];
    let cpg = c / groups;
    let m = cpg * vol;
    let inv_m = S::of_f64(1.0 / m as f64);
    let x = input.data();
    let g = gout.data();
    let mut dx = Tensor::zeros(sh);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ni in 0..n {
        for gi in 0..groups {
            let base = (ni * c + gi * cpg) * vol;
            let mu = saved.mean[ni * groups + gi];
            let istd = saved.inv_std[ni * groups + gi];
            // accumulate group sums of dxhat and dxhat*xhat
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let ga = gamma.data()[ch];
                for v in 0..vol {
                    let i = base + cc * vol + v;
                    let xhat = (x[i] - mu) * istd;
                    let dxhat = g[i] * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma.data[ch] += g[i] * xhat;
                    dbeta.data[ch] += g[i];
                }
            }
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let ga = gamma.data()[ch];
                for v in 0..vol {
                    let i = base + cc * vol + v;
                    let xhat = (x[i] - mu) * istd;
                    let dxhat = g[i] * ga;
                    dx.data[i] = istd * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) * inv_m);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn linear_forward<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] {
        return Err(Error::InvalidShape(format!(
            "linear shapes do not agree: input {:?}, weight {:?}",
            is, ws
        )));
    }
    let (n, f, o) = (is[0], is[1], ws[1]);
    if bias.shape() != [o] {
        return Err(Error::InvalidShape(format!(
            "bias shape {:?} does not match {} outputs",
            bias.shape(),
            o
        )));
    }
    let mut out = Tensor::zeros(&[n, o]);
    for ni in 0..n {
        let row = &input.data()[ni * f..][..f];
        let orow = &mut out.data[ni * o..][..o];
        orow.copy_from_slice(&bias.data()[..o]);
        for (fi, &xv) in row.iter().enumerate() {
            let wrow = &weight.data()[fi * o..][..o];
            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    }
    Ok(out)
}

pub fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[1];
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(&[o]);
    for ni in 0..n {
        let grow = &gout.data()[ni * o..][..o];
        let xrow = &input.data()[ni * f..][..f];
        for (ov, &g) in dbias.data.iter_mut().zip(grow) {
            *ov += g;
        }
        for fi in 0..f {
            let wrow = &weight.data()[fi * o..][..o];
            let mut acc = S::zero();
            for (&wv, &g) in wrow.iter().zip(grow) {
                acc += wv * g;
            }
            dinput.data[ni * f + fi] = acc;
            let dwrow = &mut dweight.data[fi * o..][..o];
            let xv = xrow[fi];
            for (dv, &g) in dwrow.iter_mut().zip(grow) {
                *dv += xv * g;
            }
        }
    }
    (dinput, dweight, dbias)
}

pub fn concat_channels_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 5 || sb.len() != 5 {
        return Err(Error::InvalidShape("concat expects rank-5 tensors".into()));
    }
    if sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::InvalidShape(format!(
            "concat non-channel extents differ: {:?} vs {:?}",
            sa, sb
        )));
    }
    let (n, ca, cb) = (sa[0], sa[1], sb[1]);
    let vol = sa[2] * sa[3] * sa[4];
    let mut data = Vec::with_capacity((ca + cb) * n * vol);
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * ca * vol..][..ca * vol]);
        data.extend_from_slice(&b.data()[ni * cb * vol..][..cb * vol]);
    }
    Tensor::new(&[n, ca + cb, sa[2], sa[3], sa[4]], data)
}

pub fn concat_channels_backward<S: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (n, ca, cb) = (a_shape[0], a_shape[1], b_shape[1]);
    let vol = a_shape[2] * a_shape[3] * a_shape[4];
    let mut da = Tensor::zeros(a_shape);
    let mut db = Tensor::zeros(b_shape);
    let g = gout.data();
    for ni in 0..n {
        let base = ni * (ca + cb) * vol;
        da.data_mut()[ni * ca * vol..][..ca * vol].copy_from_slice(&g[base..][..ca * vol]);
        db.data_mut()[ni * cb * vol..][..cb * vol].copy_from_slice(&g[base + ca * vol..][..cb * vol]);
    }
    (da, db)
}

/// Channel-wise mean and max maps, stacked as a 2-channel volume.
/// Returns the output and the argmax channel per (sample, voxel).
pub fn channel_mean_max_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let sh = input.shape();
    if sh.len() != 5 {
        return Err(Error::InvalidShape("channel_mean_max expects rank-5 input".into()));
    }
    let (n, c) = (sh[0], sh[1]);
    let vol = sh[2] * sh[3] * sh[4];
    let inv_c = S::of_f64(1.0 / c as f64);
    let mut out = Tensor::zeros(&[n, 2, sh[2], sh[3], sh[4]]);
    let mut argmax = vec![0u32; n * vol];
    let x = input.data();
    for ni in 0..n {
        for v in 0..vol {
            let mut acc = S::zero();
            let mut best = x[(ni * c) * vol + v];
            let mut best_c = 0u32;
            for ci in 0..c {
                let val = x[(ni * c + ci) * vol + v];
                acc += val;
                if val > best {
                    best = val;
                    best_c = ci as u32;
                }
            }
            out.data[(ni * 2) * vol + v] = acc * inv_c;
            out.data[(ni * 2 + 1) * vol + v] = best;
            argmax[ni * vol + v] = best_c;
        }
    }
    Ok((out, argmax))
}

pub fn channel_mean_max_backward<S: Scalar>(in_shape: &[usize], argmax: &[u32], gout: &Tensor<S>) -> Tensor<S> {
    let (n, c) = (in_shape[0], in_shape[1]);
    let vol = in_shape[2] * in_shape[3] * in_shape[4];
    let inv_c = S::of_f64(1.0 / c as f64);
    let mut dx = Tensor::zeros(in_shape);
    let g = gout.data();
    for ni in 0..n {
        for v in 0..vol {
            let gmean = g[(ni * 2) * vol + v] * inv_c;
            for ci in 0..c {
                dx.data[(ni * c + ci) * vol + v] += gmean;
            }
            let best_c = argmax[ni * vol + v] as usize;
            dx.data[(ni * c + best_c) * vol + v] += g[(ni * 2 + 1) * vol + v];
        }
    }
    dx
}

/// x[n,c,d,h,w] * s[n,c], broadcast over spatial extents.
pub fn scale_channels_forward<S: Scalar>(x: &Tensor<S>, s: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    if xs.len() != 5 || s.shape() != [xs[0], xs[1]] {
        return Err(Error::InvalidShape(format!(
            "scale_channels shapes do not agree: {:?} vs {:?}",
            xs,
            s.shape()
        )));
    }
    let vol = xs[2] * xs[3] * xs[4];
    let mut out = x.clone();
    for (chunk, &sv) in out.data_mut().chunks_mut(vol).zip(s.data()) {
        for v in chunk {
            *v *= sv;
        }
    }
    Ok(out)
}

pub fn scale_channels_backward<S: Scalar>(x: &Tensor<S>, s: &Tensor<S>, gout: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let vol = x.shape()[2] * x.shape()[3] * x.shape()[4];
    let mut dx = Tensor::zeros(x.shape());
    let mut ds = Tensor::zeros(s.shape());
    for (nc, ((dchunk, gchunk), xchunk)) in dx
        .data_mut()
        .chunks_mut(vol)
        .zip(gout.data().chunks(vol))
        .zip(x.data().chunks(vol))
        .enumerate()
    {
        let sv = s.data()[nc];
        let mut acc = S::zero();
        for ((dv, &g), &xv) in dchunk.iter_mut().zip(gchunk).zip(xchunk) {
            *dv = g * sv;
            acc += g * xv;
        }
        ds.data[nc] = acc;
    }
    (dx, ds)
}

/// x[n,c,d,h,w] * s[n,1,d,h,w], broadcast over channels.
pub fn scale_spatial_forward<S: Scalar>(x: &Tensor<S>, s: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ss = s.shape();
    if xs.len() != 5 || ss.len() != 5 || ss[1] != 1 || ss[0] != xs[0] || ss[2..] != xs[2..] {
        return Err(Error::InvalidShape(format!(
            "scale_spatial shapes do not agree: {:?} vs {:?}",
            xs, ss
        )));
    }
    let (n, c) = (xs[0], xs[1]);
    let vol = xs[2] * xs[3] * xs[4];
    let mut out = x.clone();
    for ni in 0..n {
        let sv = &s.data()[ni * vol..][..vol];
        for ci in 0..c {
            let chunk = &mut out.data[(ni * c + ci) * vol..][..vol];
            for (v, &m) in chunk.iter_mut().zip(sv) {
                *v *= m;
            }
        }
    }
    Ok(out)
}

pub fn scale_spatial_backward<S: Scalar>(x: &Tensor<S>, s: &Tensor<S>, gout: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let vol = x.shape()[2] * x.shape()[3] * x.shape()[4];
    let mut dx = Tensor::zeros(x.shape());
    let mut ds = Tensor::zeros(s.shape());
    for ni in 0..n {
        let sv = &s.data()[ni * vol..][..vol];
        let dsv = &mut ds.data[ni * vol..][..vol];
        for ci in 0..c {
            let base = (ni * c + ci) * vol;
            for v in 0..vol {
                dx.data[base + v] = gout.data()[base + v] * sv[v];
                dsv[v] += gout.data()[base + v] * x.data()[base + v];
            }
        }
    }
    (dx, ds)
}
