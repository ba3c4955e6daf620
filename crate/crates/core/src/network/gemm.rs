//! Row-major single-precision matrix products on top of `matrixmultiply`.

use crate::par;

/// Operand orientation: `Normal` reads the slice as stored (row-major),
/// `Transposed` reads its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Normal,
    Transposed,
}

/// Rows of `C` per parallel task.
const ROW_BLOCK: usize = 512;

/// `C[m×n] = A[m×k] · B[k×n] + beta · C`.
///
/// `a` holds `A` (or `Aᵀ` when `op_a` is `Transposed`, i.e. a `k×m`
/// row-major slice); likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    op_a: Op,
    b: &[f32],
    op_b: Op,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "A has wrong length");
    assert_eq!(b.len(), k * n, "B has wrong length");
    assert_eq!(c.len(), m * n, "C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match op_a {
        Op::Normal => (k as isize, 1),
        Op::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::Normal => (n as isize, 1),
        Op::Transposed => (1, k as isize),
    };
    let threads = worker_threads();
    if threads > 1 && m >= 2 * ROW_BLOCK {
        // Row blocks are independent; each element is accumulated in the same
        // order as the single-call path.
        let a_addr = a.as_ptr() as usize;
        let b_addr = b.as_ptr() as usize;
        par::for_each_chunk_mut(c, ROW_BLOCK * n, |blk, cc| {
            let rows = cc.len() / n;
            let a_off = (blk * ROW_BLOCK) as isize * rsa;
            // SAFETY: offsets stay within `a` (rows blk*ROW_BLOCK .. +rows of
            // an m×k view) and `b` is read whole; `cc` is exclusively owned.
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    (a_addr as *const f32).offset(a_off),
                    rsa,
                    csa,
                    b_addr as *const f32,
                    rsb,
                    csb,
                    beta,
                    cc.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
        return;
    }
    // SAFETY: dimensions and strides describe views fully inside the slices
    // checked above.
    unsafe {
        matrixmultiply::sgemm(
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

fn worker_threads() -> usize {
    if !par::is_parallel() {
        return 1;
    }
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_all_orientations() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let oa = if ta { Op::Transposed } else { Op::Normal };
            let ob = if tb { Op::Transposed } else { Op::Normal };
            sgemm(m, k, n, &a, oa, &b, ob, 0.0, &mut c);
            let e = naive(m, k, n, &a, ta, &b, tb);
            for (x, y) in c.iter().zip(&e) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        sgemm(1, 2, 1, &a, Op::Normal, &b, Op::Normal, 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }
}
