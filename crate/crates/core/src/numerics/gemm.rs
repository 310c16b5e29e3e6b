//! Thin safe wrapper over `matrixmultiply::dgemm` for row-major buffers.

/// Layout of an operand: stored row-major, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `c = alpha * op(a) * op(b) + beta * c`, with `op(a)` of shape `m × k` and
/// `op(b)` of shape `k × n`. All buffers are row-major in their stored shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    if m == 1 {
        row_times_matrix(k, n, alpha, a, b, b_layout, beta, c);
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the corresponding buffer, and `c` does not
    // alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

/// Single-row product. Packing in the general kernel costs a full copy of
/// `b`, which dominates when the left side is one row.
#[allow(clippy::too_many_arguments)]
fn row_times_matrix(k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], b_layout: Layout, beta: f64, c: &mut [f64]) {
    if beta == 0.0 {
        c.iter_mut().for_each(|v| *v = 0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    match b_layout {
        Layout::Normal => {
            for (p, &ap) in a.iter().enumerate() {
                let coef = alpha * ap;
                if coef == 0.0 {
                    continue;
                }
                for (cv, bv) in c.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += coef * bv;
                }
            }
        }
        Layout::Transposed => {
            for (j, cv) in c.iter_mut().enumerate() {
                let row = &b[j * k..(j + 1) * k];
                let mut acc = [0.0f64; 4];
                let mut chunks = row.chunks_exact(4).zip(a.chunks_exact(4));
                for (r, x) in &mut chunks {
                    for l in 0..4 {
                        acc[l] += r[l] * x[l];
                    }
                }
                let tail = k - k % 4;
                let mut dot = acc[0] + acc[1] + acc[2] + acc[3];
                for p in tail..k {
                    dot += row[p] * a[p];
                }
                *cv += alpha * dot;
            }
        }
    }
}
