use super::{Element, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// Product of two rank-2 tensors.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        Transpose::No,
        Transpose::No,
        m,
        n,
        k,
        a.data(),
        b.data(),
        &mut out,
        false,
    );
    Tensor::new(&[m, n], out)
}

/// `out (m x n) = op(a) * op(b)`, optionally accumulating into `out`.
///
/// `a` is stored `m x k` (or `k x m` when transposed) and `b` is stored
/// `k x n` (or `n x k`). Each output element accumulates over the inner
/// index in ascending order, so results do not depend on the caller's
/// threading.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    ta: Transpose,
    tb: Transpose,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(out.len(), m * n, "gemm: output length");
    if !accumulate {
        out.iter_mut().for_each(|v| *v = T::zero());
    }
    match (ta, tb) {
        (Transpose::No, Transpose::No) => {
            for (i, row) in out.chunks_exact_mut(n.max(1)).enumerate().take(m) {
                let a_row = &a[i * k..(i + 1) * k];
                for (p, &alpha) in a_row.iter().enumerate() {
                    axpy(row, alpha, &b[p * n..(p + 1) * n]);
                }
            }
        }
        (Transpose::Yes, Transpose::No) => {
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                let a_row = &a[p * m..(p + 1) * m];
                for (i, &alpha) in a_row.iter().enumerate() {
                    axpy(&mut out[i * n..(i + 1) * n], alpha, b_row);
                }
            }
        }
        (Transpose::No, Transpose::Yes) => {
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (Transpose::Yes, Transpose::Yes) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Element>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum()
        })
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[4, 6]);
        assert_eq!(matmul(&a, &Tensor::eye(6)).unwrap(), a);
    }

    #[test]
    fn one_by_one() {
        let a = Tensor::new(&[1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::new(&[1, 1], vec![3.0f32]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[5, 9]);
        let b = random(&mut rng, &[9, 5]);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        assert!(super::super::rel_error(&got, &want) < 1e-12);

        let af: Tensor<f32> = a.cast();
        let bf: Tensor<f32> = b.cast();
        let gotf: Tensor<f64> = matmul(&af, &bf).unwrap().cast();
        assert!(super::super::rel_error(&gotf, &want) < 1e-6);
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[4, 7]);
        let b = random(&mut rng, &[7, 3]);
        let want = matmul(&a, &b).unwrap();
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        for (ta, tb, ad, bd) in [
            (Transpose::Yes, Transpose::No, at.data(), b.data()),
            (Transpose::No, Transpose::Yes, a.data(), bt.data()),
            (Transpose::Yes, Transpose::Yes, at.data(), bt.data()),
        ] {
            let mut out = vec![0.0; 12];
            gemm(ta, tb, 4, 3, 7, ad, bd, &mut out, false);
            let got = Tensor::new(&[4, 3], out).unwrap();
            assert!(super::super::rel_error(&got, &want) < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }
}
