//! Packing-free `A * B^T` for the shape of convolution weight gradients:
//! a few short output rows, each a dot product over the whole volume. A
//! general GEMM spends most of its time repacking both long operands here.

use super::Scalar;

const LANES: usize = 8;

fn store<T: Scalar>(c: &mut T, alpha: T, acc: T, beta: T) {
    *c = if beta == T::zero() { alpha * acc } else { alpha * acc + beta * *c };
}

fn reduce<T: Scalar>(lanes: &[T; LANES], tail: T) -> T {
    lanes.iter().fold(T::zero(), |s, &v| s + v) + tail
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let (xc, yc) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let tail = xc.remainder().iter().zip(yc.remainder()).fold(T::zero(), |s, (&a, &b)| a.mul_add(b, s));
    for (xa, ya) in xc.zip(yc) {
        for l in 0..LANES {
            lanes[l] = lanes[l] + xa[l] * ya[l];
        }
    }
    reduce(&lanes, tail)
}

/// `C <- alpha * A * B^T + beta * C` where `A` is `m x k` and `B` is
/// `n x k`, both with contiguous rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_dots<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    alpha: T,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    const TI: usize = 4;
    const TJ: usize = 2;
    let full = k / LANES * LANES;
    for i0 in (0..m).step_by(TI) {
        for j0 in (0..n).step_by(TJ) {
            if i0 + TI > m || j0 + TJ > n {
                for i in i0..(i0 + TI).min(m) {
                    for j in j0..(j0 + TJ).min(n) {
                        let d = dot(&a[i * lda..i * lda + k], &b[j * ldb..j * ldb + k]);
                        store(&mut c[i * ldc + j], alpha, d, beta);
                    }
                }
                continue;
            }
            let rows_a: [&[T]; TI] = std::array::from_fn(|i| &a[(i0 + i) * lda..(i0 + i) * lda + k]);
            let rows_b: [&[T]; TJ] = std::array::from_fn(|j| &b[(j0 + j) * ldb..(j0 + j) * ldb + k]);
            let mut acc = [[T::zero(); LANES]; TI * TJ];
            for q in (0..full).step_by(LANES) {
                // all loads first so the arithmetic below is one straight-line block
                let xb: [[T; LANES]; TJ] = std::array::from_fn(|j| rows_b[j][q..q + LANES].try_into().unwrap());
                let xa: [[T; LANES]; TI] = std::array::from_fn(|i| rows_a[i][q..q + LANES].try_into().unwrap());
                for (ij, lanes) in acc.iter_mut().enumerate() {
                    let (va, vb) = (&xa[ij / TJ], &xb[ij % TJ]);
                    for l in 0..LANES {
                        lanes[l] = lanes[l] + va[l] * vb[l];
                    }
                }
            }
            for i in 0..TI {
                for j in 0..TJ {
                    let tail = (full..k).fold(T::zero(), |s, q| rows_a[i][q].mul_add(rows_b[j][q], s));
                    store(&mut c[(i0 + i) * ldc + j0 + j], alpha, reduce(&acc[i * TJ + j], tail), beta);
                }
            }
        }
    }
}
