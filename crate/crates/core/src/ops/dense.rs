use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor, Trans};

/// Affine map `y = x W^T + b` with `x: [N,K]`, `W: [M,K]`, `b: [M]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, m) = check(input, weight)?;
    bias.expect_shape(&[m])?;
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(
        T::one(),
        MatRef::new(input.data(), n, k),
        Trans::No,
        MatRef::new(weight.data(), m, k),
        Trans::Yes,
        T::one(),
        &mut out,
        m,
    );
    Tensor::from_vec(&[n, m], out)
}

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (input.shape(), weight.shape()) {
        (&[n, k], &[m, k2]) if k == k2 => Ok((n, k, m)),
        (a, b) => Err(Error::Shape(format!("dense expects input [N,K] and weight [M,K], got {a:?} and {b:?}"))),
    }
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, k, m) = check(input, weight)?;
    grad_out.expect_shape(&[n, m])?;
    let dy = MatRef::new(grad_out.data(), n, m);
    let mut dx = vec![T::zero(); n * k];
    gemm(T::one(), dy, Trans::No, MatRef::new(weight.data(), m, k), Trans::No, T::zero(), &mut dx, k);
    let mut dw = vec![T::zero(); m * k];
    gemm(T::one(), dy, Trans::Yes, MatRef::new(input.data(), n, k), Trans::No, T::zero(), &mut dw, k);
    let mut db = vec![T::zero(); m];
    for row in grad_out.data().chunks(m) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(&[n, k], dx)?,
        weight: Tensor::from_vec(&[m, k], dw)?,
        bias: Tensor::from_vec(&[m], db)?,
    })
}
