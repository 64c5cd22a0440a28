//! Affine spatial transformer: pose constraint, grid generation and
//! zero-padded bilinear sampling.
//!
//! Coordinates are normalized with align-corners semantics: pixel `i` of an
//! axis of length `n` sits at `-1 + 2i/(n-1)`. A pose matrix maps output
//! coordinates to input coordinates (inverse warping).

use crate::autodiff::{sigmoid, softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-sample 2×3 pose matrices stored row-major as
/// `(s_x, r_x, t_x, r_y, s_y, t_y)`; shape `n×6`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<S: Scalar = f32>(Tensor<S>);

impl<S: Scalar> AffineParams<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 6 {
            return Err(Error::Shape(format!("affine parameters must be n×6, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn from_rows(rows: &[[S; 6]]) -> Self {
        Self(Tensor::new(&[rows.len(), 6], rows.iter().flatten().copied().collect()).expect("n×6"))
    }

    pub fn identity(n: usize) -> Self {
        let (o, z) = (S::one(), S::zero());
        Self::from_rows(&vec![[o, z, z, z, o, z]; n])
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> [S; 6] {
        let r = self.0.outer(i);
        [r[0], r[1], r[2], r[3], r[4], r[5]]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }
}

/// `n×h×w×2` normalized input coordinates `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<S: Scalar = f32>(Tensor<S>);

impl<S: Scalar> SamplingGrid<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        if t.rank() != 4 || t.shape()[3] != 2 {
            return Err(Error::Shape(format!("sampling grid must be n×h×w×2, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    /// Coordinates of output pixel `(i, j)` in sample `n`.
    pub fn at(&self, n: usize, i: usize, j: usize) -> (S, S) {
        let s = self.0.shape();
        let off = ((n * s[1] + i) * s[2] + j) * 2;
        (self.0.data()[off], self.0.data()[off + 1])
    }
}

/// Normalized coordinate of pixel `i` on an axis of length `n`.
pub fn normalized_coord<S: Scalar>(i: usize, n: usize) -> S {
    if n <= 1 {
        return S::zero();
    }
    let last = S::from_f64((n - 1) as f64);
    (S::from_f64(2.0 * i as f64) - last) / last
}

fn check_s_min(s_min: f64) -> Result<()> {
    if s_min.is_nan() || s_min < 1.0 {
        return Err(Error::Config(format!("s_min must be at least 1 (got {s_min}); smaller objects would exceed the canvas")));
    }
    Ok(())
}

/// Maps a raw `n×6` head output to a pose with `s_x, s_y ≥ s_min` and
/// translation bounded by `s − 1`.
pub fn constrain_pose<S: Scalar>(raw: &Tensor<S>, s_min: f64) -> Result<AffineParams<S>> {
    check_s_min(s_min)?;
    if raw.rank() != 2 || raw.shape()[1] != 6 {
        return Err(Error::Shape(format!("raw pose must be n×6, got {:?}", raw.shape())));
    }
    let data = constrain_pose_slice(raw.data(), S::from_f64(s_min));
    AffineParams::new(Tensor::new(raw.shape(), data)?)
}

/// Sampling grid of `a` over an `h×w` output.
pub fn grid_generate<S: Scalar>(a: &AffineParams<S>, h: usize, w: usize) -> Result<SamplingGrid<S>> {
    if h == 0 || w == 0 {
        return Err(Error::Shape("grid size must be at least 1×1".into()));
    }
    let n = a.len();
    SamplingGrid::new(Tensor::new(&[n, h, w, 2], affine_grid_slice(a.tensor().data(), n, h, w))?)
}

/// Bilinear sampling with zeros outside the input extent.
pub fn sample_bilinear<S: Scalar>(input: &Tensor<S>, grid: &SamplingGrid<S>) -> Result<Tensor<S>> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::Shape(format!("sampler input must be NCHW, got {:?}", input.shape())));
    };
    let gs = grid.tensor().shape();
    if gs[0] != n {
        return Err(Error::Dimension { axis: "grid batch", expected: n, actual: gs[0] });
    }
    let (ho, wo) = (gs[1], gs[2]);
    Tensor::new(&[n, c, ho, wo], grid_sample_slice(input.data(), grid.tensor().data(), n, c, h, w, ho, wo))
}

/// `ST(x, a)`: warps `x` by `a` onto a canvas of the same size.
pub fn st<S: Scalar>(x: &Tensor<S>, a: &AffineParams<S>) -> Result<Tensor<S>> {
    let [_, _, h, w] = *x.shape() else {
        return Err(Error::Shape(format!("ST input must be NCHW, got {:?}", x.shape())));
    };
    sample_bilinear(x, &grid_generate(a, h, w)?)
}

/// Graph version of [`st`] for several same-sized inputs sharing one grid.
pub fn transform_many<S: Scalar>(g: &Graph<S>, inputs: &[Var], pose: Var) -> Result<Vec<Var>> {
    let first = inputs.first().ok_or_else(|| Error::Shape("nothing to transform".into()))?;
    let shape = g.shape(*first);
    let [_, _, h, w] = shape[..] else {
        return Err(Error::Shape(format!("ST input must be NCHW, got {shape:?}")));
    };
    let grid = g.affine_grid(pose, h, w)?;
    inputs.iter().map(|&x| g.grid_sample(x, grid)).collect()
}

// ---- raw kernels shared with the autodiff graph ----------------------------

pub(crate) fn constrain_pose_slice<S: Scalar>(raw: &[S], s_min: S) -> Vec<S> {
    let one = S::one();
    let mut out = Vec::with_capacity(raw.len());
    for r in raw.chunks(6) {
        let sx = s_min + softplus(r[0]);
        let sy = s_min + softplus(r[4]);
        out.extend_from_slice(&[sx, r[1], r[2].tanh() * (sx - one), r[3], sy, r[5].tanh() * (sy - one)]);
    }
    out
}

pub(crate) fn constrain_pose_backward<S: Scalar>(raw: &[S], g: &[S], s_min: S) -> Vec<S> {
    let one = S::one();
    let mut out = Vec::with_capacity(raw.len());
    for (r, g) in raw.chunks(6).zip(g.chunks(6)) {
        let (tx, ty) = (r[2].tanh(), r[5].tanh());
        let sx = s_min + softplus(r[0]);
        let sy = s_min + softplus(r[4]);
        out.extend_from_slice(&[
            (g[0] + g[2] * tx) * sigmoid(r[0]),
            g[1],
            g[2] * (one - tx * tx) * (sx - one),
            g[3],
            (g[4] + g[5] * ty) * sigmoid(r[4]),
            g[5] * (one - ty * ty) * (sy - one),
        ]);
    }
    out
}

pub(crate) fn affine_grid_slice<S: Scalar>(theta: &[S], n: usize, h: usize, w: usize) -> Vec<S> {
    let xs: Vec<S> = (0..w).map(|j| normalized_coord(j, w)).collect();
    let ys: Vec<S> = (0..h).map(|i| normalized_coord(i, h)).collect();
    let mut out = Vec::with_capacity(n * h * w * 2);
    for t in theta.chunks(6).take(n) {
        for &y in &ys {
            for &x in &xs {
                out.push(t[0] * x + t[1] * y + t[2]);
                out.push(t[3] * x + t[4] * y + t[5]);
            }
        }
    }
    out
}

pub(crate) fn affine_grid_backward<S: Scalar>(g: &[S], n: usize, h: usize, w: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * 6];
    for b in 0..n {
        let d = &mut out[b * 6..b * 6 + 6];
        for i in 0..h {
            let y = normalized_coord::<S>(i, h);
            for j in 0..w {
                let x = normalized_coord::<S>(j, w);
                let off = ((b * h + i) * w + j) * 2;
                let (gx, gy) = (g[off], g[off + 1]);
                d[0] += gx * x;
                d[1] += gx * y;
                d[2] += gx;
                d[3] += gy * x;
                d[4] += gy * y;
                d[5] += gy;
            }
        }
    }
    out
}

/// Pixel-space position and bilinear taps for one grid coordinate.
struct Taps<S> {
    x0: isize,
    y0: isize,
    tx: S,
    ty: S,
}

fn pixel_pos<S: Scalar>(coord: S, size: usize, snap: S) -> S {
    let half = S::from_f64((size.max(1) - 1) as f64 * 0.5);
    let u = (coord + S::one()) * half;
    // The mesh → pixel round trip is off by a few ulps; land exactly on the
    // pixel so aligned grids reproduce their input.
    let r = u.round();
    if (u - r).abs() <= snap {
        r
    } else {
        u
    }
}

fn taps<S: Scalar>(gx: S, gy: S, h: usize, w: usize) -> Option<Taps<S>> {
    if !gx.is_finite() || !gy.is_finite() {
        return None;
    }
    let snap = S::epsilon() * S::from_f64(4.0 * h.max(w) as f64);
    let u = pixel_pos(gx, w, snap);
    let v = pixel_pos(gy, h, snap);
    let (fu, fv) = (u.floor(), v.floor());
    // Coordinates this far away have no in-range tap.
    let far = S::from_f64((h.max(w) + 2) as f64);
    if fu.abs() > far || fv.abs() > far {
        return None;
    }
    Some(Taps { x0: fu.as_f64() as isize, y0: fv.as_f64() as isize, tx: u - fu, ty: v - fv })
}

#[inline]
fn tap_index(x: isize, y: isize, h: usize, w: usize) -> Option<usize> {
    (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grid_sample_slice<S: Scalar>(
    x: &[S],
    grid: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let one = S::one();
    let plane = h * w;
    let oplane = ho * wo;
    let mut out = vec![S::zero(); n * c * oplane];
    for b in 0..n {
        for q in 0..oplane {
            let off = (b * oplane + q) * 2;
            let Some(t) = taps(grid[off], grid[off + 1], h, w) else { continue };
            let corners = [
                (t.x0, t.y0, (one - t.tx) * (one - t.ty)),
                (t.x0 + 1, t.y0, t.tx * (one - t.ty)),
                (t.x0, t.y0 + 1, (one - t.tx) * t.ty),
                (t.x0 + 1, t.y0 + 1, t.tx * t.ty),
            ];
            for (cx, cy, wt) in corners {
                if wt == S::zero() {
                    continue;
                }
                let Some(p) = tap_index(cx, cy, h, w) else { continue };
                for ch in 0..c {
                    out[(b * c + ch) * oplane + q] += wt * x[(b * c + ch) * plane + p];
                }
            }
        }
    }
    out
}

/// Gradients of the sampler with respect to the input image and the grid.
#[allow(clippy::type_complexity)]
pub(crate) fn grid_sample_backward<S: Scalar>(
    x: &[S],
    grid: &[S],
    gout: &[S],
    (n, c, h, w): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
    need_x: bool,
    need_grid: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let one = S::one();
    let plane = h * w;
    let oplane = ho * wo;
    let mut dx = need_x.then(|| vec![S::zero(); x.len()]);
    let mut dgrid = need_grid.then(|| vec![S::zero(); grid.len()]);
    let half_w = S::from_f64((w.max(1) - 1) as f64 * 0.5);
    let half_h = S::from_f64((h.max(1) - 1) as f64 * 0.5);
    for b in 0..n {
        for q in 0..oplane {
            let off = (b * oplane + q) * 2;
            let Some(t) = taps(grid[off], grid[off + 1], h, w) else { continue };
            let idx = [
                tap_index(t.x0, t.y0, h, w),
                tap_index(t.x0 + 1, t.y0, h, w),
                tap_index(t.x0, t.y0 + 1, h, w),
                tap_index(t.x0 + 1, t.y0 + 1, h, w),
            ];
            let wts = [(one - t.tx) * (one - t.ty), t.tx * (one - t.ty), (one - t.tx) * t.ty, t.tx * t.ty];
            let (mut du, mut dv) = (S::zero(), S::zero());
            for ch in 0..c {
                let go = gout[(b * c + ch) * oplane + q];
                let base = (b * c + ch) * plane;
                let val = |k: usize| idx[k].map_or(S::zero(), |p| x[base + p]);
                if let Some(dx) = dx.as_mut() {
                    for k in 0..4 {
                        if let Some(p) = idx[k] {
                            dx[base + p] += go * wts[k];
                        }
                    }
                }
                if dgrid.is_some() {
                    let (v00, v10, v01, v11) = (val(0), val(1), val(2), val(3));
                    du += go * ((one - t.ty) * (v10 - v00) + t.ty * (v11 - v01));
                    dv += go * ((one - t.tx) * (v01 - v00) + t.tx * (v11 - v10));
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                dg[off] += du * half_w;
                dg[off + 1] += dv * half_h;
            }
        }
    }
    (dx, dgrid)
}
