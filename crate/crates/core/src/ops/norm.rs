use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormTrace<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Running statistics, updated by exponential moving average in train mode.
#[derive(Debug)]
pub struct RunningStats<'a, T> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("batch_norm expects [N,C,...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel batch normalization over every non-channel axis.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: RunningStats<'_, T>,
    mode: Mode,
    eps: T,
    momentum: T,
) -> Result<(Tensor<T>, BatchNormTrace<T>)> {
    let (n, c, spatial) = layout(input.shape())?;
    for t in [gamma, beta, &*stats.mean, &*stats.var] {
        t.expect_shape(&[c])?;
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("batch_norm eps must be positive".into()));
    }
    let x = input.data();
    let count = n * spatial;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let cnt = T::from_usize(count).expect("count");
                let mut sum = T::zero();
                for ni in 0..n {
                    let off = (ni * c + ch) * spatial;
                    sum = sum + x[off..off + spatial].iter().copied().sum::<T>();
                }
                let mean = sum / cnt;
                let mut sq = T::zero();
                for ni in 0..n {
                    let off = (ni * c + ch) * spatial;
                    sq = sq + x[off..off + spatial].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / cnt;
                let unbiased = if count > 1 { sq / T::from_usize(count - 1).expect("count") } else { var };
                let m = stats.mean.data_mut();
                m[ch] = (T::one() - momentum) * m[ch] + momentum * mean;
                let v = stats.var.data_mut();
                v[ch] = (T::one() - momentum) * v[ch] + momentum * unbiased;
                (mean, var)
            }
            Mode::Eval => (stats.mean.data()[ch], stats.var.data()[ch]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for ni in 0..n {
            let off = (ni * c + ch) * spatial;
            for i in off..off + spatial {
                let xh = (x[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    let trace = BatchNormTrace { xhat: Tensor::from_vec(input.shape(), xhat)?, inv_std };
    Ok((Tensor::from_vec(input.shape(), out)?, trace))
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    trace: &BatchNormTrace<T>,
    gamma: &Tensor<T>,
    mode: Mode,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, spatial) = layout(grad_out.shape())?;
    grad_out.expect_shape(trace.xhat.shape())?;
    let dy = grad_out.data();
    let xh = trace.xhat.data();
    let cnt = T::from_usize(n * spatial).expect("count");
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for ni in 0..n {
            let off = (ni * c + ch) * spatial;
            for i in off..off + spatial {
                sum_dy = sum_dy + dy[i];
                sum_dy_xh = sum_dy_xh + dy[i] * xh[i];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma.data()[ch] * trace.inv_std[ch];
        let mean_dy = sum_dy / cnt;
        let mean_dy_xh = sum_dy_xh / cnt;
        for ni in 0..n {
            let off = (ni * c + ch) * spatial;
            for i in off..off + spatial {
                dx[i] = match mode {
                    Mode::Train => scale * (dy[i] - mean_dy - xh[i] * mean_dy_xh),
                    Mode::Eval => scale * dy[i],
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(grad_out.shape(), dx)?,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}
