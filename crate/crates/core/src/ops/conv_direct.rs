//! Direct 3D convolution for narrow layers.
//!
//! The input is zero-padded and split along W into `stride` phases, so that
//! for every kernel tap the samples feeding one output row are contiguous:
//! padded `x = ow * s + kw` lives in phase `kw % s` at offset `ow + kw / s`.
//! Every inner loop is then an axpy over an output row, which vectorizes.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Phased {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub pad: usize,
    pub stride: usize,
    /// Padded extents.
    pub dp: usize,
    pub hp: usize,
    /// Phase row length, `ceil((w + 2 pad) / stride)`.
    pub jw: usize,
}

impl Phased {
    pub fn new(c: usize, d: usize, h: usize, w: usize, pad: usize, stride: usize) -> Self {
        Phased { c, d, h, w, pad, stride, dp: d + 2 * pad, hp: h + 2 * pad, jw: (w + 2 * pad).div_ceil(stride) }
    }

    pub fn len(&self) -> usize {
        self.c * self.dp * self.hp * self.stride * self.jw
    }

    #[inline(always)]
    pub fn row(&self, c: usize, z: usize, y: usize, phase: usize) -> usize {
        (((c * self.dp + z) * self.hp + y) * self.stride + phase) * self.jw
    }

    /// Scatters one `[C,D,H,W]` item into the padded, phased layout.
    pub fn pack<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        out.fill(T::zero());
        let s = self.stride;
        for c in 0..self.c {
            for z in 0..self.d {
                for y in 0..self.h {
                    let src = &x[((c * self.d + z) * self.h + y) * self.w..][..self.w];
                    let (zp, yp) = (z + self.pad, y + self.pad);
                    if s == 1 {
                        let r = self.row(c, zp, yp, 0) + self.pad;
                        out[r..r + self.w].copy_from_slice(src);
                    } else {
                        for (xi, &v) in src.iter().enumerate() {
                            let xp = xi + self.pad;
                            out[self.row(c, zp, yp, xp % s) + xp / s] = v;
                        }
                    }
                }
            }
        }
    }

    /// Inverse of [`Phased::pack`] for gradients: crops padding, adds into `dx`.
    pub fn unpack_add<T: Scalar>(&self, packed: &[T], dx: &mut [T]) {
        let s = self.stride;
        for c in 0..self.c {
            for z in 0..self.d {
                for y in 0..self.h {
                    let dst = &mut dx[((c * self.d + z) * self.h + y) * self.w..][..self.w];
                    let (zp, yp) = (z + self.pad, y + self.pad);
                    for (xi, v) in dst.iter_mut().enumerate() {
                        let xp = xi + self.pad;
                        *v = *v + packed[self.row(c, zp, yp, xp % s) + xp / s];
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(xi, *yi);
    }
}

#[inline(always)]
fn fma_rows<T: Scalar>(acc: &mut [T], a: &[T], b: &[T]) {
    for ((r, &x), &y) in acc.iter_mut().zip(a).zip(b) {
        *r = x.mul_add(y, *r);
    }
}

pub(crate) struct Kernel {
    pub f: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Kernel {
    fn taps(&self) -> usize {
        self.kd * self.kh * self.kw
    }
}

/// One item: `y[F, OD, OH, OW] = conv(packed input)`; bias added by the caller.
pub(crate) fn forward<T: Scalar>(p: &Phased, k: &Kernel, packed: &[T], weight: &[T], y: &mut [T]) {
    let s = p.stride;
    let taps = k.taps();
    let plane = k.oh * k.ow;
    y.fill(T::zero());
    for f in 0..k.f {
        let wf = &weight[f * p.c * taps..(f + 1) * p.c * taps];
        for od in 0..k.od {
            for oh in 0..k.oh {
                let out = &mut y[f * k.od * plane + od * plane + oh * k.ow..][..k.ow];
                for c in 0..p.c {
                    for kd in 0..k.kd {
                        for kh in 0..k.kh {
                            let base = (c * k.kd + kd) * k.kh + kh;
                            for kw in 0..k.kw {
                                let r = p.row(c, od * s + kd, oh * s + kh, kw % s) + kw / s;
                                axpy(wf[base * k.kw + kw], &packed[r..r + k.ow], out);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One item's weight gradient, accumulated into `dw` (`[F, C, kd, kh, kw]`).
///
/// Products are accumulated lane-wise along output rows and each lane vector
/// is summed once at the end, in a fixed order.
pub(crate) fn weight_grad<T: Scalar>(p: &Phased, k: &Kernel, packed: &[T], dy: &[T], dw: &mut [T]) {
    let s = p.stride;
    let taps = k.taps();
    let plane = k.oh * k.ow;
    let mut acc = vec![T::zero(); taps * k.ow];
    for f in 0..k.f {
        for c in 0..p.c {
            acc.fill(T::zero());
            for od in 0..k.od {
                for oh in 0..k.oh {
                    let g = &dy[f * k.od * plane + od * plane + oh * k.ow..][..k.ow];
                    for kd in 0..k.kd {
                        for kh in 0..k.kh {
                            for kw in 0..k.kw {
                                let tap = (kd * k.kh + kh) * k.kw + kw;
                                let r = p.row(c, od * s + kd, oh * s + kh, kw % s) + kw / s;
                                fma_rows(&mut acc[tap * k.ow..(tap + 1) * k.ow], g, &packed[r..r + k.ow]);
                            }
                        }
                    }
                }
            }
            let dst = &mut dw[(f * p.c + c) * taps..(f * p.c + c + 1) * taps];
            for (tap, d) in dst.iter_mut().enumerate() {
                *d = *d + acc[tap * k.ow..(tap + 1) * k.ow].iter().copied().sum::<T>();
            }
        }
    }
}

/// One item's input gradient in the packed layout (`dpacked` is overwritten).
pub(crate) fn input_grad<T: Scalar>(p: &Phased, k: &Kernel, weight: &[T], dy: &[T], dpacked: &mut [T]) {
    let s = p.stride;
    let taps = k.taps();
    let plane = k.oh * k.ow;
    dpacked.fill(T::zero());
    for c in 0..p.c {
        for od in 0..k.od {
            for oh in 0..k.oh {
                for kd in 0..k.kd {
                    for kh in 0..k.kh {
                        for kw in 0..k.kw {
                            let tap = (kd * k.kh + kh) * k.kw + kw;
                            let r = p.row(c, od * s + kd, oh * s + kh, kw % s) + kw / s;
                            let dst = &mut dpacked[r..r + k.ow];
                            for f in 0..k.f {
                                let g = &dy[f * k.od * plane + od * plane + oh * k.ow..][..k.ow];
                                axpy(weight[(f * p.c + c) * taps + tap], g, dst);
                            }
                        }
                    }
                }
            }
        }
    }
}
