//! 3D cross-correlation.
//!
//! Narrow layers use the direct kernels in `conv_direct`; wide layers are
//! lowered to GEMM through im2col. The column buffer is built one band of output depth slices at a time so
//! that memory stays bounded for wide layers on large grids. Work is split
//! across batch items; per-item weight gradients are reduced in item order,
//! which keeps results independent of the worker count.

use rayon::prelude::*;

use super::conv_direct::{self, Kernel, Phased};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor, Trans};

/// Lowering used for a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvStrategy {
    /// Pick by layer width.
    Auto,
    Direct,
    Gemm,
}

/// Upper bound on im2col buffer elements per band.
const MAX_COLUMN_ELEMS: usize = 1 << 22;

/// Stride-1 layers with `in_channels * filters` up to this use the direct kernels.
const DIRECT_MAX_CF: usize = 16;

/// `floor((n + 2p - k) / s) + 1`, or an error when the window does not fit.
pub fn output_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if kernel == 0 || n + 2 * padding < kernel {
        return Err(Error::Shape(format!(
            "non-positive output extent: extent {n} + 2*{padding} padding < kernel {kernel}"
        )));
    }
    Ok((n + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    f: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    od: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d expects input [N,C,D,H,W] and weight [F,C,k,k,k], got input {input:?} and weight {weight:?}"
            )));
        }
        if input[1] != weight[1] {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input {input:?} has {} channels, weight {weight:?} expects {}",
                input[1], weight[1]
            )));
        }
        let od = output_extent(input[2], weight[2], stride, pad)?;
        let oh = output_extent(input[3], weight[3], stride, pad)?;
        let ow = output_extent(input[4], weight[4], stride, pad)?;
        Ok(Geometry {
            n: input[0],
            c: input[1],
            d: input[2],
            h: input[3],
            w: input[4],
            f: weight[0],
            kd: weight[2],
            kh: weight[3],
            kw: weight[4],
            od,
            oh,
            ow,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kd * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    fn p(&self) -> usize {
        self.od * self.plane()
    }

    fn in_item(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    fn out_item(&self) -> usize {
        self.f * self.p()
    }

    fn direct(&self, strategy: ConvStrategy) -> bool {
        match strategy {
            ConvStrategy::Direct => true,
            ConvStrategy::Gemm => false,
            ConvStrategy::Auto => self.stride == 1 && self.c * self.f <= DIRECT_MAX_CF,
        }
    }

    fn phased(&self) -> Phased {
        Phased::new(self.c, self.d, self.h, self.w, self.pad, self.stride)
    }

    fn kernel(&self) -> Kernel {
        Kernel { f: self.f, kd: self.kd, kh: self.kh, kw: self.kw, od: self.od, oh: self.oh, ow: self.ow }
    }

    fn slices_per_band(&self) -> usize {
        (MAX_COLUMN_ELEMS / (self.k() * self.plane()).max(1)).clamp(1, self.od)
    }

    /// Output positions `[lo, hi)` along one axis whose source index lands in `[0, n)`.
    fn valid_range(&self, n: usize, offset: usize, out_len: usize) -> (usize, usize) {
        // source = o * s + offset - pad
        let s = self.stride;
        let lo = if offset >= self.pad { 0 } else { (self.pad - offset).div_ceil(s) };
        let hi = if n + self.pad > offset { (n + self.pad - offset).div_ceil(s) } else { 0 };
        (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], od0: usize, od1: usize, cols: &mut [T]) {
    let t = (od1 - od0) * g.plane();
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * g.d * g.h * g.w..(c + 1) * g.d * g.h * g.w];
        for kd in 0..g.kd {
            for kh in 0..g.kh {
                let (oh_lo, oh_hi) = g.valid_range(g.h, kh, g.oh);
                for kw in 0..g.kw {
                    let (ow_lo, ow_hi) = g.valid_range(g.w, kw, g.ow);
                    let dst = &mut cols[row * t..(row + 1) * t];
                    let mut idx = 0;
                    for od in od0..od1 {
                        let id = (od * s + kd) as isize - g.pad as isize;
                        if id < 0 || id >= g.d as isize {
                            dst[idx..idx + g.plane()].fill(T::zero());
                            idx += g.plane();
                            continue;
                        }
                        let xd = &xc[id as usize * g.h * g.w..];
                        for oh in 0..g.oh {
                            let out_row = &mut dst[idx..idx + g.ow];
                            idx += g.ow;
                            if oh < oh_lo || oh >= oh_hi {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let ih = oh * s + kh - g.pad;
                            let src = &xd[ih * g.w..(ih + 1) * g.w];
                            out_row[..ow_lo].fill(T::zero());
                            out_row[ow_hi..].fill(T::zero());
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            if s == 1 {
                                let start = ow_lo + kw - g.pad;
                                out_row[ow_lo..ow_hi].copy_from_slice(&src[start..start + ow_hi - ow_lo]);
                            } else {
                                for ow in ow_lo..ow_hi {
                                    out_row[ow] = src[ow * s + kw - g.pad];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], od0: usize, od1: usize, dx: &mut [T]) {
    let t = (od1 - od0) * g.plane();
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.d * g.h * g.w..(c + 1) * g.d * g.h * g.w];
        for kd in 0..g.kd {
            for kh in 0..g.kh {
                let (oh_lo, oh_hi) = g.valid_range(g.h, kh, g.oh);
                for kw in 0..g.kw {
                    let (ow_lo, ow_hi) = g.valid_range(g.w, kw, g.ow);
                    let src = &cols[row * t..(row + 1) * t];
                    let mut idx = 0;
                    for od in od0..od1 {
                        let id = (od * s + kd) as isize - g.pad as isize;
                        if id < 0 || id >= g.d as isize {
                            idx += g.plane();
                            continue;
                        }
                        let base = id as usize * g.h * g.w;
                        for oh in 0..g.oh {
                            let in_row = &src[idx..idx + g.ow];
                            idx += g.ow;
                            if oh < oh_lo || oh >= oh_hi {
                                continue;
                            }
                            let ih = oh * s + kh - g.pad;
                            let dst = &mut dxc[base + ih * g.w..base + (ih + 1) * g.w];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * s + kw - g.pad;
                                dst[iw] = dst[iw] + in_row[ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward 3D convolution (cross-correlation, zero padding).
///
/// `input` is `[N,C,D,H,W]`, `weight` is `[F,C,kd,kh,kw]`, `bias` is `[F]`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv3d_with(input, weight, bias, stride, padding, ConvStrategy::Auto)
}

pub fn conv3d_with<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    strategy: ConvStrategy,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.f] {
            return Err(Error::Shape(format!(
                "conv3d bias {:?} does not match weight {:?}",
                b.shape(),
                weight.shape()
            )));
        }
    }
    let mut out = vec![T::zero(); g.n * g.out_item()];
    if g.direct(strategy) {
        let (ph, kern) = (g.phased(), g.kernel());
        out.par_chunks_mut(g.out_item()).zip(input.data().par_chunks(g.in_item())).for_each(|(y, x)| {
            let mut packed = vec![T::zero(); ph.len()];
            ph.pack(x, &mut packed);
            conv_direct::forward(&ph, &kern, &packed, weight.data(), y);
            add_bias(y, bias, g.p());
        });
        return Tensor::from_vec(&[g.n, g.f, g.od, g.oh, g.ow], out);
    }
    let band = g.slices_per_band();
    let k = g.k();
    let p = g.p();
    let wmat = MatRef::new(weight.data(), g.f, k);
    out.par_chunks_mut(g.out_item()).zip(input.data().par_chunks(g.in_item())).for_each(|(y, x)| {
        let mut cols = vec![T::zero(); k * band * g.plane()];
        let mut od0 = 0;
        while od0 < g.od {
            let od1 = (od0 + band).min(g.od);
            let t = (od1 - od0) * g.plane();
            im2col(&g, x, od0, od1, &mut cols[..k * t]);
            let off = od0 * g.plane();
            gemm(T::one(), wmat, Trans::No, MatRef::new(&cols[..k * t], k, t), Trans::No, T::zero(), &mut y[off..], p);
            od0 = od1;
        }
        add_bias(y, bias, p);
    });
    Tensor::from_vec(&[g.n, g.f, g.od, g.oh, g.ow], out)
}

fn add_bias<T: Scalar>(y: &mut [T], bias: Option<&Tensor<T>>, p: usize) {
    if let Some(b) = bias {
        for (chan, &bv) in y.chunks_mut(p).zip(b.data()) {
            chan.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

/// Gradients of [`conv3d`].
pub struct Conv3dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<Conv3dGrads<T>> {
    conv3d_backward_with(input, weight, grad_out, stride, padding, need_input_grad, ConvStrategy::Auto)
}

pub fn conv3d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
    strategy: ConvStrategy,
) -> Result<Conv3dGrads<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, padding)?;
    grad_out.expect_shape(&[g.n, g.f, g.od, g.oh, g.ow])?;
    let band = g.slices_per_band();
    let k = g.k();
    let p = g.p();
    let wmat = MatRef::new(weight.data(), g.f, k);
    let (ph, kern) = (g.phased(), g.kernel());
    let direct = g.direct(strategy);

    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            if direct {
                let x = &input.data()[ni * g.in_item()..(ni + 1) * g.in_item()];
                let dy = &grad_out.data()[ni * g.out_item()..(ni + 1) * g.out_item()];
                let mut packed = vec![T::zero(); ph.len()];
                ph.pack(x, &mut packed);
                let mut dw = vec![T::zero(); g.f * k];
                conv_direct::weight_grad(&ph, &kern, &packed, dy, &mut dw);
                let mut dx = Vec::new();
                if need_input_grad {
                    conv_direct::input_grad(&ph, &kern, weight.data(), dy, &mut packed);
                    dx = vec![T::zero(); g.in_item()];
                    ph.unpack_add(&packed, &mut dx);
                }
                return (dw, dx);
            }
            let x = &input.data()[ni * g.in_item()..(ni + 1) * g.in_item()];
            let dy = &grad_out.data()[ni * g.out_item()..(ni + 1) * g.out_item()];
            let mut dw = vec![T::zero(); g.f * k];
            let mut dx = if need_input_grad { vec![T::zero(); g.in_item()] } else { Vec::new() };
            let mut cols = vec![T::zero(); k * band * g.plane()];
            let mut dcols = if need_input_grad { vec![T::zero(); k * band * g.plane()] } else { Vec::new() };
            let mut od0 = 0;
            while od0 < g.od {
                let od1 = (od0 + band).min(g.od);
                let t = (od1 - od0) * g.plane();
                let off = od0 * g.plane();
                let dy_band = MatRef { data: &dy[off..], rows: g.f, cols: t, ld: p };
                im2col(&g, x, od0, od1, &mut cols[..k * t]);
                gemm(T::one(), dy_band, Trans::No, MatRef::new(&cols[..k * t], k, t), Trans::Yes, T::one(), &mut dw, k);
                if need_input_grad {
                    gemm(T::one(), wmat, Trans::Yes, dy_band, Trans::No, T::zero(), &mut dcols[..k * t], t);
                    col2im(&g, &dcols[..k * t], od0, od1, &mut dx);
                }
                od0 = od1;
            }
            (dw, dx)
        })
        .collect();

    let mut dweight = vec![T::zero(); g.f * k];
    let mut dinput = if need_input_grad { Vec::with_capacity(g.n * g.in_item()) } else { Vec::new() };
    for (dw, dx) in per_item {
        for (acc, v) in dweight.iter_mut().zip(dw) {
            *acc = *acc + v;
        }
        dinput.extend(dx);
    }
    let mut dbias = vec![T::zero(); g.f];
    for chunk in grad_out.data().chunks(g.out_item()) {
        for (fi, chan) in chunk.chunks(p).enumerate() {
            dbias[fi] = dbias[fi] + chan.iter().copied().sum::<T>();
        }
    }
    Ok(Conv3dGrads {
        input: if need_input_grad { Some(Tensor::from_vec(input.shape(), dinput)?) } else { None },
        weight: Tensor::from_vec(weight.shape(), dweight)?,
        bias: Tensor::from_vec(&[g.f], dbias)?,
    })
}
