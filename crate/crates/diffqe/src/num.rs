//! Float abstraction so the network stack runs in f32 for training and in
//! f64 for the finite-difference and algebra test suites.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar element of tensors and latents. Implemented for f32 and f64.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// C = alpha * A(m x k) * B(k x n) + beta * C with explicit row/col
    /// strides, so callers can pass transposed views without copying.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// Row-major contiguous C = alpha * A * B + beta * C.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        Self::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
    }

    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;

    /// Standard normal draw from the shared RNG.
    fn std_normal(rng: &mut ChaCha8Rng) -> Self;
}

impl Scalar for f32 {
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: f32,
        a: &[f32], rsa: isize, csa: isize,
        b: &[f32], rsb: isize, csb: isize,
        beta: f32, c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn to_f64_(self) -> f64 {
        self as f64
    }

    fn std_normal(rng: &mut ChaCha8Rng) -> f32 {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: f64,
        a: &[f64], rsa: isize, csa: isize,
        b: &[f64], rsb: isize, csb: isize,
        beta: f64, c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(x: f64) -> f64 {
        x
    }

    fn to_f64_(self) -> f64 {
        self
    }

    fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }
}

/// Fill a slice with standard-normal draws.
pub fn fill_std_normal<F: Scalar>(rng: &mut ChaCha8Rng, out: &mut [F]) {
    for v in out.iter_mut() {
        *v = F::std_normal(rng);
    }
}

pub fn all_finite<F: Scalar>(xs: &[F]) -> bool {
    xs.iter().all(|v| v.is_finite())
}
