//! Dense kernels shared by the tape's forward and backward passes.

use super::Real;

/// `c = beta * c + a · b` for row-major `a` (m×k) and `b` (k×n).
/// `trans_a` / `trans_b` read the stored matrix as its transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    trans_a: bool,
    b: &[Real],
    trans_b: bool,
    c: &mut [Real],
    beta: Real,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major (or transposed) views of those slices.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
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

#[cfg(not(feature = "f32"))]
#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

#[cfg(feature = "f32")]
#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Output length of a strided, zero-padded 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of the transposed convolution with the same geometry.
pub fn conv_transpose_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (len.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&l| l > 0)
}

/// Unfold `src` (channels × len) into columns (channels·kernel × positions):
/// `cols[c*k + j][t] = src[c][t*stride + j - padding]`, zero outside.
pub fn im2col(
    src: &[Real],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    positions: usize,
) -> Vec<Real> {
    let mut cols = vec![0.0; channels * kernel * positions];
    for c in 0..channels {
        let row_src = &src[c * len..(c + 1) * len];
        for j in 0..kernel {
            let dst = &mut cols[(c * kernel + j) * positions..(c * kernel + j + 1) * positions];
            for (t, d) in dst.iter_mut().enumerate() {
                let idx = (t * stride + j) as isize - padding as isize;
                if idx >= 0 && (idx as usize) < len {
                    *d = row_src[idx as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a (channels × len) buffer.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[Real],
    dst: &mut [Real],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    positions: usize,
) {
    for c in 0..channels {
        for j in 0..kernel {
            let src = &cols[(c * kernel + j) * positions..(c * kernel + j + 1) * positions];
            for (t, v) in src.iter().enumerate() {
                let idx = (t * stride + j) as isize - padding as isize;
                if idx >= 0 && (idx as usize) < len {
                    dst[c * len + idx as usize] += *v;
                }
            }
        }
    }
}
