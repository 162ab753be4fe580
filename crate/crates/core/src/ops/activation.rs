use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the last axis, computed with max subtraction.
    Softmax,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => input.map(sigmoid),
        Activation::Softmax => {
            let last = *input.shape().last().unwrap_or(&1);
            let mut out = input.clone();
            for row in out.data_mut().chunks_mut(last) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            out
        }
    }
}

/// Gradient with respect to the activation input, given its output `y`.
pub fn activation_backward<T: Scalar>(kind: Activation, output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(output.shape())?;
    let y = output.data();
    let g = grad_out.data();
    let data = match kind {
        Activation::Relu => y.iter().zip(g).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect(),
        Activation::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
        Activation::Softmax => {
            let last = *output.shape().last().unwrap_or(&1);
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(last).zip(g.chunks(last)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            dx
        }
    };
    Tensor::from_vec(output.shape(), data)
}
