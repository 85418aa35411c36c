//! Raw slice kernels behind the graph operations.

/// Row-major matrix view descriptor: `rows × cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Strides (row, col) of the logical matrix in elements.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`), all row-major.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above and `MatRef::new` guarantee every index
    // addressed through the strides lies inside the three slices, and `out`
    // is an exclusive borrow disjoint from the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Left padding for a kernel of width `k` under "same" padding.
pub(crate) fn same_pad_left(k: usize) -> usize {
    (k - 1) / 2
}

/// Unfolds one `[c_in × len]` sample into `[c_in·k × out_len]` columns.
pub(crate) fn im2col(
    x: &[f64],
    c_in: usize,
    len: usize,
    k: usize,
    pad_left: usize,
    out_len: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c_in * k * out_len);
    for i in 0..c_in {
        let xrow = &x[i * len..(i + 1) * len];
        for j in 0..k {
            let dst = &mut cols[(i * k + j) * out_len..(i * k + j + 1) * out_len];
            for (t, slot) in dst.iter_mut().enumerate() {
                let src = t + j;
                *slot = if src >= pad_left && src - pad_left < len {
                    xrow[src - pad_left]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add(
    cols: &[f64],
    c_in: usize,
    len: usize,
    k: usize,
    pad_left: usize,
    out_len: usize,
    dx: &mut [f64],
) {
    for i in 0..c_in {
        let dxrow = &mut dx[i * len..(i + 1) * len];
        for j in 0..k {
            let src = &cols[(i * k + j) * out_len..(i * k + j + 1) * out_len];
            for (t, &g) in src.iter().enumerate() {
                let pos = t + j;
                if pos >= pad_left && pos - pad_left < len {
                    dxrow[pos - pad_left] += g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut out, false);
        assert_eq!(out, naive(&a, &b, 2, 3, 4));

        // aᵀ stored as 3x2, read transposed
        let at: Vec<f64> = vec![a[0], a[3], a[1], a[4], a[2], a[5]];
        let mut out2 = vec![1.0; 8];
        gemm(MatRef::new(&at, 3, 2).t(), MatRef::new(&b, 3, 4), &mut out2, true);
        let expect: Vec<f64> = naive(&a, &b, 2, 3, 4).iter().map(|v| v + 1.0).collect();
        assert_eq!(out2, expect);
    }

    #[test]
    fn im2col_round_trip_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let x: Vec<f64> = (0..10).map(|v| (v as f64).sin()).collect(); // 2x5
        let k = 3;
        let mut cols = vec![0.0; 2 * k * 5];
        im2col(&x, 2, 5, k, 1, 5, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.37).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; 10];
        col2im_add(&y, 2, 5, k, 1, 5, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
