use core::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the tensor engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha · op(a) · op(b) + beta · c` on row-major storage, where
    /// `op(a)` is `m×k` and `op(b)` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        let lda = if trans_a { m } else { k };
        let ldb = if trans_b { k } else { n };
        Self::gemm_ld(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, n);
    }

    /// [`Scalar::gemm`] with explicit row strides of the stored matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm_ld(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

/// Row/column strides and minimum storage length of an operand whose
/// logical (post-transpose) shape is `rows×cols`.
fn strides(trans: bool, rows: usize, cols: usize, ld: usize) -> (isize, isize, usize) {
    let (sr, sc) = if trans { (cols, rows) } else { (rows, cols) };
    assert!(ld >= sc, "leading dimension {ld} below row length {sc}");
    let len = (sr - 1) * ld + sc;
    if trans {
        (1, ld as isize, len)
    } else {
        (ld as isize, 1, len)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm_ld(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                lda: usize,
                b: &[Self],
                ldb: usize,
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let (rsc, _, clen) = strides(false, m, n, ldc);
                assert!(c.len() >= clen);
                if k == 0 {
                    for r in 0..m {
                        let row = &mut c[r * ldc..r * ldc + n];
                        row.iter_mut()
                            .for_each(|v| *v = if beta == 0.0 { 0.0 } else { *v * beta });
                    }
                    return;
                }
                let (rsa, csa, alen) = strides(trans_a, m, k, lda);
                let (rsb, csb, blen) = strides(trans_b, k, n, ldb);
                assert!(a.len() >= alen && b.len() >= blen);
                // SAFETY: the asserts above bound every index the kernel touches
                // for these strides.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        f64::gemm(false, false, 2, 2, 3, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        f64::gemm(true, false, 2, 2, 3, 1.0, &at, &b, 0.0, &mut c2);
        assert_eq!(c, c2);
        // b^T stored as 2x3
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c3 = [1.0; 4];
        f64::gemm(false, true, 2, 2, 3, 1.0, &a, &bt, 1.0, &mut c3);
        assert_eq!(c3, [5.0, 6.0, 11.0, 12.0]);
    }
}
