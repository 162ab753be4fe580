use crate::error::{Error, Result};
use crate::ops::conv::output_extent;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

/// What the backward pass needs from a pooling forward pass.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    pub input_shape: Vec<usize>,
    /// Flat input index of each max-pool output; empty for average pools.
    pub argmax: Vec<usize>,
}

fn dims5(shape: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape).map_err(|_| Error::Shape(format!("pool3d expects [N,C,D,H,W], got {shape:?}")))
}

/// 3D pooling without padding. `window`/`stride` are ignored for `GlobalAvg`.
pub fn pool3d<T: Scalar>(
    input: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolTrace)> {
    let [n, c, d, h, w] = dims5(input.shape())?;
    let x = input.data();
    if kind == PoolKind::GlobalAvg {
        let vol = d * h * w;
        let inv = T::one() / T::from_usize(vol).expect("count");
        let out: Vec<T> = x.chunks(vol).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let trace = PoolTrace { input_shape: input.shape().to_vec(), argmax: Vec::new() };
        return Ok((Tensor::from_vec(&[n, c, 1, 1, 1], out)?, trace));
    }
    if window > d || window > h || window > w {
        return Err(Error::Shape(format!("pool window {window} exceeds spatial extent of {:?}", input.shape())));
    }
    let od = output_extent(d, window, stride, 0)?;
    let oh = output_extent(h, window, stride, 0)?;
    let ow = output_extent(w, window, stride, 0)?;
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::new();
    let inv = T::one() / T::from_usize(window * window * window).expect("count");
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let (z0, y0, x0) = (z * stride, y * stride, xo * stride);
                    match kind {
                        PoolKind::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_idx = usize::MAX;
                            for dz in 0..window {
                                for dy in 0..window {
                                    let row = base + ((z0 + dz) * h + y0 + dy) * w + x0;
                                    for (dx, &v) in x[row..row + window].iter().enumerate() {
                                        // strict comparison keeps the lowest flat index on ties
                                        if v > best || best_idx == usize::MAX {
                                            best = v;
                                            best_idx = row + dx;
                                        }
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_idx);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for dz in 0..window {
                                for dy in 0..window {
                                    let row = base + ((z0 + dz) * h + y0 + dy) * w + x0;
                                    acc = acc + x[row..row + window].iter().copied().sum::<T>();
                                }
                            }
                            out.push(acc * inv);
                        }
                        PoolKind::GlobalAvg => unreachable!(),
                    }
                }
            }
        }
    }
    let trace = PoolTrace { input_shape: input.shape().to_vec(), argmax };
    Ok((Tensor::from_vec(&[n, c, od, oh, ow], out)?, trace))
}

pub fn pool3d_backward<T: Scalar>(
    trace: &PoolTrace,
    kind: PoolKind,
    window: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = dims5(&trace.input_shape)?;
    let mut dx = vec![T::zero(); n * c * d * h * w];
    let g = grad_out.data();
    match kind {
        PoolKind::GlobalAvg => {
            grad_out.expect_shape(&[n, c, 1, 1, 1])?;
            let vol = d * h * w;
            let inv = T::one() / T::from_usize(vol).expect("count");
            for (chunk, &gv) in dx.chunks_mut(vol).zip(g) {
                chunk.fill(gv * inv);
            }
        }
        PoolKind::Max => {
            if trace.argmax.len() != g.len() {
                return Err(Error::Shape("max-pool gradient does not match its trace".into()));
            }
            for (&idx, &gv) in trace.argmax.iter().zip(g) {
                dx[idx] = dx[idx] + gv;
            }
        }
        PoolKind::Avg => {
            let od = output_extent(d, window, stride, 0)?;
            let oh = output_extent(h, window, stride, 0)?;
            let ow = output_extent(w, window, stride, 0)?;
            grad_out.expect_shape(&[n, c, od, oh, ow])?;
            let inv = T::one() / T::from_usize(window * window * window).expect("count");
            let mut gi = 0;
            for nc in 0..n * c {
                let base = nc * d * h * w;
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let share = g[gi] * inv;
                            gi += 1;
                            for dz in 0..window {
                                for dy in 0..window {
                                    let row = base + ((z * stride + dz) * h + y * stride + dy) * w + xo * stride;
                                    for v in &mut dx[row..row + window] {
                                        *v = *v + share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&trace.input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_max_pool() {
        let x = Tensor::full(&[1, 2, 4, 6, 8], 3.25f32);
        let (y, _) = pool3d(&x, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn global_average_of_one_to_eight() {
        let x = Tensor::from_vec(&[1, 1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let (y, _) = pool3d(&x, PoolKind::GlobalAvg, 0, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.5]);
    }

    #[test]
    fn window_larger_than_extent_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 8, 8]);
        assert!(pool3d(&x, PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let (y, trace) = pool3d(&x, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(trace.argmax, vec![0]);
        let g = Tensor::full(y.shape(), 1.0);
        let dx = pool3d_backward(&trace, PoolKind::Max, 2, 2, &g).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn average_pool_spreads_gradient_uniformly() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let (y, trace) = pool3d(&x, PoolKind::Avg, 2, 2).unwrap();
        let dx = pool3d_backward(&trace, PoolKind::Avg, 2, 2, &Tensor::full(y.shape(), 8.0)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 1.0));
    }
}
