//! Safe wrappers over the `matrixmultiply` kernels.

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // `rows × cols` logical operand; stored transposed when `trans` is set.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! gemm_impl {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            trans_a: bool,
            trans_b: bool,
            m: usize,
            n: usize,
            k: usize,
            a: &[$t],
            b: &[$t],
            beta: $t,
            c: &mut [$t],
        ) {
            assert!(a.len() >= m * k, "gemm: lhs too short");
            assert!(b.len() >= k * n, "gemm: rhs too short");
            assert!(c.len() >= m * n, "gemm: output too short");
            if m == 0 || n == 0 {
                return;
            }
            let (rsa, csa) = strides(trans_a, m, k);
            let (rsb, csb) = strides(trans_b, k, n);
            // SAFETY: the asserts above bound every index the kernel touches:
            // max offset of op(a) is (m-1)*rs + (k-1)*cs < m*k, same for b, c.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

gemm_impl!(gemm_f32, f32, matrixmultiply::sgemm);
gemm_impl!(gemm_f64, f64, matrixmultiply::dgemm);
