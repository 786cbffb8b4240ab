//! Raw buffer kernels shared by the tape ops.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), all row-major.
///
/// `a` is `m×k` after the optional transpose, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
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

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unfold `x` (`C×H×W`) into `cols` (`C·k·k × Ho·Wo`).
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * wo + oj] = if ii >= 0
                                && (ii as usize) < self.height
                                && jj >= 0
                                && (jj as usize) < self.width
                            {
                                x[(c * self.height + ii as usize) * self.width + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add `cols` into `x`.
    pub fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.height {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj as usize >= self.width {
                                continue;
                            }
                            x[(c * self.height + ii as usize) * self.width + jj as usize] +=
                                src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}
