//! Raw row-major kernels used by the tape ops.
//!
//! Every inner loop is written as an `axpy` over a contiguous row so the
//! compiler can vectorize it without reassociating floating-point sums.

use crate::scalar::Scalar;

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += a[p×q] · b[q×r]`
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        let a_row = &a[i * q..(i + 1) * q];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            axpy(aik, &b[k * r..(k + 1) * r], out_row);
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub padding: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source pixel index for patch element (ky, kx) of output (oy, ox), if in bounds.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

/// Patch matrix laid out `[cin·k·k] × [oh·ow]`.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return input.to_vec();
    }
    let n = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some(src) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.ow + ox] = plane[src];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an input-shaped buffer.
pub(crate) fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    if g.is_pointwise() {
        for (o, &c) in out.iter_mut().zip(cols) {
            *o += c;
        }
        return;
    }
    let n = g.out_len();
    for c in 0..g.cin {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some(dst) = g.source(oy, ox, ky, kx) {
                            plane[dst] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let n = g.out_len();
    let cols = im2col(input, g);
    let mut out = vec![T::zero(); cout * n];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * n..(co + 1) * n].iter_mut().for_each(|o| *o = bv);
        }
    }
    gemm_acc(kernel, &cols, &mut out, cout, g.patch_len(), n);
    out
}

/// Accumulates `dkernel += dout · colsᵀ`.
pub(crate) fn conv2d_kernel_grad_acc<T: Scalar>(
    input: &[T],
    dout: &[T],
    cout: usize,
    g: &ConvGeom,
    dkernel: &mut [T],
) {
    let n = g.out_len();
    let r = g.patch_len();
    let cols_t = transpose(&im2col(input, g), r, n);
    gemm_acc(dout, &cols_t, dkernel, cout, n, r);
}

/// Accumulates the input gradient `col2im(kernelᵀ · dout)`.
pub(crate) fn conv2d_input_grad_acc<T: Scalar>(
    kernel: &[T],
    dout: &[T],
    cout: usize,
    g: &ConvGeom,
    dinput: &mut [T],
) {
    let n = g.out_len();
    let r = g.patch_len();
    let kernel_t = transpose(kernel, cout, r);
    let mut dcols = vec![T::zero(); r * n];
    gemm_acc(&kernel_t, dout, &mut dcols, r, cout, n);
    col2im_acc(&dcols, g, dinput);
}

/// Half-open pixel range covered by adaptive-pool bin `i` of `bins` over `size`.
#[inline]
pub(crate) fn pool_range(i: usize, bins: usize, size: usize) -> (usize, usize) {
    let start = (i * size) / bins;
    let end = ((i + 1) * size).div_ceil(bins);
    (start, end)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(x[idx(a)]);
            }
            let mut sum = T::zero();
            for a in 0..len {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[idx(a)] /= sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn pool_ranges_cover_axis() {
        assert_eq!(pool_range(0, 1, 16), (0, 16));
        assert_eq!(pool_range(1, 2, 16), (8, 16));
        // Overlapping bins when the size is not divisible.
        assert_eq!(pool_range(0, 3, 5), (0, 2));
        assert_eq!(pool_range(1, 3, 5), (1, 4));
        assert_eq!(pool_range(2, 3, 5), (3, 5));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { cin: 2, h: 4, w: 5, k: 3, padding: 1, stride: 2, oh: 2, ow: 3 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.out_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im_acc(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
