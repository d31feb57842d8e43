//! Dense row-major matrix kernels shared by the tape operators.
//!
//! Every kernel accumulates into `out` in a fixed loop order, so results
//! are bit-reproducible for a given input.

/// Dot product with four interleaved partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out (m×n) += a (m×k) · b (k×n)`
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
}

/// `out (m×n) += a (m×k) · bᵀ` where `b` is `n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(av, b_row, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Geometry of a 1-D convolution over `(channels, length)` inputs.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub length: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_length: usize,
}

impl ConvGeometry {
    pub fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel
    }

    /// Source index for output position `t` and tap `k`, if inside the input.
    #[inline]
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k).checked_sub(self.padding)?;
        (pos < self.length).then_some(pos)
    }
}

/// Unfolds one `(in_channels, length)` item into a `(in_channels·kernel, out_length)` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    cols.fill(0.0);
    for c in 0..g.in_channels {
        let src = &x[c * g.length..(c + 1) * g.length];
        for k in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + k) * g.out_length..(c * g.kernel + k + 1) * g.out_length];
            for (t, dst) in row.iter_mut().enumerate() {
                if let Some(p) = g.source(t, k) {
                    *dst = src[p];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input item.
pub fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    for c in 0..g.in_channels {
        let dst = &mut dx[c * g.length..(c + 1) * g.length];
        for k in 0..g.kernel {
            let row = &cols[(c * g.kernel + k) * g.out_length..(c * g.kernel + k + 1) * g.out_length];
            for (t, &v) in row.iter().enumerate() {
                if let Some(p) = g.source(t, k) {
                    dst[p] += v;
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

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 5, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, m, k, n, &mut out);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut out = vec![0.0; m * n];
        gemm_nt(&a, &bt, m, k, n, &mut out);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut out = vec![0.0; m * n];
        gemm_tn(&at, &b, k, m, n, &mut out);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            in_channels: 2,
            length: 9,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_length: 5,
        };
        let x: Vec<f64> = (0..18).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.patch_rows() * g.out_length)
            .map(|i| (i as f64 * 1.3).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs = dot(&cols, &y);
        let rhs = dot(&x, &back);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
