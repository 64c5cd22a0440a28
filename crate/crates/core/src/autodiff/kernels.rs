//! Forward/backward kernels on raw slices. The graph layer owns shapes and
//! bookkeeping; these functions only move numbers.

use crate::tensor::Scalar;

/// Geometry of a strided 2-D convolution over an `n×c×h×w` image producing
/// `n×?×ho×wo`. Transposed convolution reuses the same geometry with the
/// roles of image and output swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded column matrix.
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Columns of the unfolded column matrix.
    pub fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output spatial size of a convolution, `None` when the window never fits.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output spatial size of a transposed convolution, `None` when negative.
pub fn conv_transpose_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if size == 0 || stride == 0 {
        return None;
    }
    ((size - 1) * stride + k).checked_sub(2 * pad).filter(|&s| s > 0)
}

/// Unfolds image patches into a `(c·k·k) × (n·ho·wo)` matrix.
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut col = vec![S::zero(); g.col_rows() * cols];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst_n = &mut dst[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst_n[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column entries back onto the image, summing overlaps.
pub fn col2im<S: Scalar>(col: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut x = vec![S::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src_n = &src[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src_row = &src_n[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n][c][p]` → `[c][n][p]`.
pub fn nc_to_cn<S: Scalar>(x: &[S], n: usize, c: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * p..][..p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[c][n][p]` → `[n][c][p]`.
pub fn cn_to_nc<S: Scalar>(x: &[S], n: usize, c: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&x[(ci * n + ni) * p..][..p]);
        }
    }
    out
}

/// Convolution `x (n×c×h×w) ⋆ w (o×c×k×k)`, no bias. Returns `n×o×ho×wo` data.
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], o: usize, g: &ConvGeom) -> Vec<S> {
    let col = im2col(x, g);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![S::zero(); o * cols];
    S::gemm(o, rows, cols, S::one(), w, (rows as isize, 1), &col, (cols as isize, 1), S::zero(), &mut out, (cols as isize, 1));
    cn_to_nc(&out, g.n, o, g.ho * g.wo)
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight.
pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    o: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let gmat = nc_to_cn(gout, g.n, o, g.ho * g.wo);
    let dw = need_dw.then(|| {
        let col = im2col(x, g);
        let mut dw = vec![S::zero(); o * rows];
        S::gemm(o, cols, rows, S::one(), &gmat, (cols as isize, 1), &col, (1, cols as isize), S::zero(), &mut dw, (rows as isize, 1));
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcol = vec![S::zero(); rows * cols];
        S::gemm(rows, o, cols, S::one(), w, (1, rows as isize), &gmat, (cols as isize, 1), S::zero(), &mut dcol, (cols as isize, 1));
        col2im(&dcol, g)
    });
    (dx, dw)
}

/// Transposed convolution of `x (n×cin×hi×wi)` with `w (cin×cout×k×k)`.
/// `g` describes the *output* image (`c = cout`, `h×w` = output size,
/// `ho×wo` = input size), i.e. the convolution this one is the adjoint of.
pub fn conv_transpose2d_forward<S: Scalar>(x: &[S], w: &[S], cin: usize, g: &ConvGeom) -> Vec<S> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let xmat = nc_to_cn(x, g.n, cin, g.ho * g.wo);
    let mut col = vec![S::zero(); rows * cols];
    S::gemm(rows, cin, cols, S::one(), w, (1, rows as isize), &xmat, (cols as isize, 1), S::zero(), &mut col, (cols as isize, 1));
    col2im(&col, g)
}

/// Gradients of [`conv_transpose2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    cin: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let gcol = im2col(gout, g);
    let dx = need_dx.then(|| {
        let mut dxmat = vec![S::zero(); cin * cols];
        S::gemm(cin, rows, cols, S::one(), w, (rows as isize, 1), &gcol, (cols as isize, 1), S::zero(), &mut dxmat, (cols as isize, 1));
        cn_to_nc(&dxmat, g.n, cin, g.ho * g.wo)
    });
    let dw = need_dw.then(|| {
        let xmat = nc_to_cn(x, g.n, cin, g.ho * g.wo);
        let mut dw = vec![S::zero(); cin * rows];
        S::gemm(cin, cols, rows, S::one(), &xmat, (cols as isize, 1), &gcol, (1, cols as isize), S::zero(), &mut dw, (rows as isize, 1));
        dw
    });
    (dx, dw)
}

/// Per-channel statistics of an `n×c×p` activation.
pub fn channel_moments<S: Scalar>(x: &[S], n: usize, c: usize, p: usize) -> (Vec<S>, Vec<S>) {
    let m = S::from_f64((n * p) as f64);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ci in 0..c {
        let mut s = S::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ci) * p..][..p] {
                s += v;
            }
        }
        let mu = s / m;
        let mut q = S::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ci) * p..][..p] {
                let d = v - mu;
                q += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = q / m;
    }
    (mean, var)
}

/// Average pooling without padding over `n×c×h×w`.
pub fn avg_pool_forward<S: Scalar>(x: &[S], nc: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<S> {
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let inv = S::one() / S::from_f64((k * k) as f64);
    let mut out = vec![S::zero(); nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = S::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        acc += src[(oy * s + ky) * w + ox * s + kx];
                    }
                }
                out[(p * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<S: Scalar>(gout: &[S], nc: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<S> {
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let inv = S::one() / S::from_f64((k * k) as f64);
    let mut dx = vec![S::zero(); nc * h * w];
    for p in 0..nc {
        let dst = &mut dx[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let gval = gout[(p * ho + oy) * wo + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        dst[(oy * s + ky) * w + ox * s + kx] += gval;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { n: 2, c: 3, h: 5, w: 6, k: 4, stride: 2, pad: 1, ho: 2, wo: 3 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out_size(32, 4, 2, 1), Some(16));
        assert_eq!(conv_out_size(2, 4, 1, 0), None);
        assert_eq!(conv_transpose_out_size(1, 4, 1, 0), Some(4));
        assert_eq!(conv_transpose_out_size(8, 4, 2, 1), Some(16));
    }

    #[test]
    fn permutations_round_trip() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        assert_eq!(cn_to_nc(&nc_to_cn(&x, 2, 3, 4), 2, 3, 4), x);
    }
}
