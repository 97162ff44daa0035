//! Slice-level kernels shared by the graph's forward and backward passes.

use super::tensor::Element;

/// Strided view of a row-major (or transposed) matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatView<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// View of the stored matrix, transposed when `t`.
    pub fn maybe_t(data: &'a [T], rows: usize, cols: usize, t: bool) -> Self {
        let v = Self::row_major(data, rows, cols);
        if t {
            v.t()
        } else {
            v
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out = a * b + beta * out`, with `out` addressed by strides `(rsc, csc)`.
pub(crate) fn gemm<T: Element>(
    a: MatView<'_, T>,
    b: MatView<'_, T>,
    beta: T,
    out: &mut [T],
    rsc: isize,
    csc: isize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: lengths checked above; every view addresses exactly its rows*cols
    // elements of a contiguous buffer through non-negative strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
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

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kx).div_ceil(s);
        let hi = if self.w + p > kx { (self.w + p - kx).div_ceil(s).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds `x[cin,h,w]` into `[cin*k*k, oh*ow]`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let x0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (d, &v) in drow[lo..hi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx[cin,h,w]`.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let x0 = lo * g.stride + kx - g.pad;
                    for (d, &v) in drow[x0..].iter_mut().step_by(g.stride).zip(srow) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let n = g.out_len();
        let mut out = vec![0.0; g.patch_len() * n];
        for ci in 0..g.cin {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (ci * g.k + ky) * g.k + kx;
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                out[row * n + oy * g.ow + ox] = x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_and_col2im_is_adjoint() {
        for (h, w, k, stride, pad) in [(5, 7, 3, 1, 1), (6, 6, 3, 2, 1), (5, 5, 1, 2, 0), (4, 3, 3, 1, 0), (2, 2, 3, 2, 2), (7, 4, 5, 2, 2)] {
            let cin = 2;
            let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            let g = ConvGeom { cin, h, w, k, stride, pad, oh, ow };
            let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut cols = vec![f64::NAN; g.patch_len() * g.out_len()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &g), "{g:?}");
            // <im2col(x), c> == <x, col2im(c)>
            let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut dx = vec![0.0; x.len()];
            col2im(&c, &g, &mut dx);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{g:?}");
        }
    }
}
