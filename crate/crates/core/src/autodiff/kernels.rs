//! Convolution and matrix kernels behind the graph ops.
//!
//! Convolutions are lowered to GEMM one batch item at a time, through
//! im2col in general and through per-tap strided views for unit-stride
//! `k×1` kernels. Items are processed in parallel; weight gradients are
//! reduced in item order so results do not depend on the thread count.

use rayon::prelude::*;

/// Element type used for the GEMM inner loops.
pub(crate) trait Elem: Copy + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C = A·B + beta·C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        beta: f64,
        c: &mut [f64],
        rsc: usize,
    ) {
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, rsc, 1, c.len());
        // SAFETY: the extents of all three operands were checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            )
        }
    }
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (usize, usize),
        b: &[f32],
        (rsb, csb): (usize, usize),
        beta: f32,
        c: &mut [f32],
        rsc: usize,
    ) {
        check_extent(m, k, rsa, csa, a.len());
        check_extent(k, n, rsb, csb, b.len());
        check_extent(m, n, rsc, 1, c.len());
        // SAFETY: the extents of all three operands were checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            )
        }
    }
}

fn check_extent(rows: usize, cols: usize, rs: usize, cs: usize, len: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand too small: {last} >= {len}");
    }
}

/// Static description of a 2-D convolution. 1-D convolutions use a
/// width-1 kernel on width-1 inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    /// Output spatial size for an input of `(h, w)`, if the kernel fits.
    pub fn output_size(&self, (h, w): (usize, usize)) -> Option<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, d: usize, p: usize| {
            let span = d * (k - 1) + 1;
            let padded = n + 2 * p;
            (padded >= span && s > 0).then(|| (padded - span) / s + 1)
        };
        Some((
            dim(h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1)?,
        ))
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel.0 * self.kernel.1
    }
}

/// Per-call dimensions derived from the geometry and the input shape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

fn im2col<T: Elem>(x: &[f64], g: &ConvGeom, d: &ConvDims, cols: &mut [T]) {
    let (kh, kw) = g.kernel;
    let p = d.oh * d.ow;
    for ci in 0..g.in_ch {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                    let out = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(T::default());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if g.stride.1 == 1 {
                        let (lo, hi) = valid_span(kj * g.dilation.1, g.padding.1, d.w, d.ow);
                        out[..lo].fill(T::default());
                        out[hi..].fill(T::default());
                        let shift = lo + kj * g.dilation.1 - g.padding.1;
                        for (o, &v) in out[lo..hi].iter_mut().zip(&src[shift..]) {
                            *o = T::from_f64(v);
                        }
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                        *o = if ix < 0 || ix >= d.w as isize {
                            T::default()
                        } else {
                            T::from_f64(src[ix as usize])
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(cols: &[T], g: &ConvGeom, d: &ConvDims, dx: &mut [f64]) {
    let (kh, kw) = g.kernel;
    let p = d.oh * d.ow;
    for ci in 0..g.in_ch {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let row = &src[oy * d.ow..(oy + 1) * d.ow];
                    if g.stride.1 == 1 {
                        let (lo, hi) = valid_span(kj * g.dilation.1, g.padding.1, d.w, d.ow);
                        let shift = lo + kj * g.dilation.1 - g.padding.1;
                        for (o, v) in dst[shift..].iter_mut().zip(&row[lo..hi]) {
                            *o += v.to_f64();
                        }
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst[ix as usize] += src[oy * d.ow + ox].to_f64();
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox + offset - pad` lies
/// inside `0..w` (unit stride).
fn valid_span(offset: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).min(ow);
    let hi = (w + pad).saturating_sub(offset).clamp(lo, ow);
    (lo, hi)
}

/// Unit-stride `k×1` kernels with no horizontal padding. The shifted
/// input for each kernel row is then a strided view of the row-padded
/// input, so each tap is a single GEMM and no im2col buffer is needed.
fn is_vertical(g: &ConvGeom) -> bool {
    g.kernel.1 == 1 && g.stride == (1, 1) && g.padding.1 == 0
}

/// Copies one item into `[C, h + 2·pad, w]` with zero rows above and below.
fn pad_rows<T: Elem>(x: &[f64], c: usize, d: &ConvDims, pad: usize) -> Vec<T> {
    let plane = d.h * d.w;
    let hp = (d.h + 2 * pad) * d.w;
    let mut out = vec![T::default(); c * hp];
    for ci in 0..c {
        let dst = &mut out[ci * hp + pad * d.w..ci * hp + pad * d.w + plane];
        for (o, &v) in dst.iter_mut().zip(&x[ci * plane..(ci + 1) * plane]) {
            *o = T::from_f64(v);
        }
    }
    out
}

fn vertical_forward_item<T: Elem>(x: &[f64], wt: &[T], g: &ConvGeom, d: &ConvDims) -> Vec<T> {
    let kh = g.kernel.0;
    let p = d.oh * d.ow;
    let hp = (d.h + 2 * g.padding.0) * d.w;
    let xp: Vec<T> = pad_rows(x, g.in_ch, d, g.padding.0);
    let mut acc = vec![T::default(); g.out_ch * p];
    for ki in 0..kh {
        let beta = if ki == 0 { T::default() } else { T::from_f64(1.0) };
        let b = &xp[ki * g.dilation.0 * d.w..];
        // Y[O,P] += W_ki[O,C] · Xshift[C,P]
        T::gemm(g.out_ch, g.in_ch, p, &wt[ki..], (g.in_ch * kh, kh), b, (hp, 1), beta, &mut acc, p);
    }
    acc
}

fn vertical_backward_item<T: Elem>(
    x: &[f64],
    wt: &[T],
    dy: &[T],
    g: &ConvGeom,
    d: &ConvDims,
    need_dx: bool,
) -> (Vec<T>, Option<Vec<f64>>) {
    let (kh, c, o) = (g.kernel.0, g.in_ch, g.out_ch);
    let p = d.oh * d.ow;
    let hp = (d.h + 2 * g.padding.0) * d.w;
    let xp: Vec<T> = pad_rows(x, c, d, g.padding.0);
    let mut dw = vec![T::default(); o * c * kh];
    let mut tap = vec![T::default(); o * c];
    for ki in 0..kh {
        let b = &xp[ki * g.dilation.0 * d.w..];
        // dW_ki[O,C] = dY[O,P] · Xshift[C,P]ᵀ
        T::gemm(o, p, c, dy, (p, 1), b, (1, hp), T::default(), &mut tap, c);
        for (i, v) in tap.iter().enumerate() {
            dw[i * kh + ki] = *v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dxp = vec![T::default(); c * hp];
        for ki in 0..kh {
            let off = ki * g.dilation.0 * d.w;
            // dXshift[C,P] += W_kiᵀ[C,O] · dY[O,P]
            T::gemm(c, o, p, &wt[ki..], (kh, c * kh), dy, (p, 1), T::from_f64(1.0), &mut dxp[off..], hp);
        }
        let plane = d.h * d.w;
        let top = g.padding.0 * d.w;
        let mut dx = Vec::with_capacity(c * plane);
        for ci in 0..c {
            dx.extend(dxp[ci * hp + top..ci * hp + top + plane].iter().map(|v| v.to_f64()));
        }
        dx
    });
    (dw, dx)
}

fn to_elem<T: Elem>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

pub(crate) fn conv_forward<T: Elem>(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    d: &ConvDims,
) -> Vec<f64> {
    let k = g.patch_len();
    let p = d.oh * d.ow;
    let in_item = g.in_ch * d.h * d.w;
    let out_item = g.out_ch * p;
    let wt: Vec<T> = to_elem(w);
    let mut out = vec![0.0; d.batch * out_item];
    out.par_chunks_mut(out_item.max(1))
        .enumerate()
        .for_each(|(n, o)| {
            let item = &x[n * in_item..(n + 1) * in_item];
            let acc = if is_vertical(g) {
                vertical_forward_item(item, &wt, g, d)
            } else {
                let mut cols = vec![T::default(); k * p];
                im2col(item, g, d, &mut cols);
                let mut acc = vec![T::default(); out_item];
                T::gemm(g.out_ch, k, p, &wt, (k, 1), &cols, (p, 1), T::default(), &mut acc, p);
                acc
            };
            for oc in 0..g.out_ch {
                let b = bias.map_or(0.0, |b| b[oc]);
                for (dst, src) in o[oc * p..(oc + 1) * p].iter_mut().zip(&acc[oc * p..(oc + 1) * p]) {
                    *dst = src.to_f64() + b;
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv_backward<T: Elem>(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    d: &ConvDims,
    need_dx: bool,
) -> ConvGrads {
    let k = g.patch_len();
    let p = d.oh * d.ow;
    let in_item = g.in_ch * d.h * d.w;
    let out_item = g.out_ch * p;
    let wt: Vec<T> = to_elem(w);

    let per_item: Vec<(Vec<T>, Option<Vec<f64>>)> = (0..d.batch)
        .into_par_iter()
        .map(|n| {
            let item = &x[n * in_item..(n + 1) * in_item];
            let dy: Vec<T> = to_elem(&dout[n * out_item..(n + 1) * out_item]);
            if is_vertical(g) {
                return vertical_backward_item(item, &wt, &dy, g, d, need_dx);
            }
            let mut cols = vec![T::default(); k * p];
            im2col(item, g, d, &mut cols);
            let mut dw = vec![T::default(); g.out_ch * k];
            // dW[O,K] = dY[O,P] · cols[K,P]ᵀ
            T::gemm(g.out_ch, p, k, &dy, (p, 1), &cols, (1, p), T::default(), &mut dw, k);
            let dx = need_dx.then(|| {
                // dcols[K,P] = Wᵀ[K,O] · dY[O,P]
                T::gemm(k, g.out_ch, p, &wt, (1, k), &dy, (p, 1), T::default(), &mut cols, p);
                let mut dx = vec![0.0; in_item];
                col2im(&cols, g, d, &mut dx);
                dx
            });
            (dw, dx)
        })
        .collect();

    let mut dw = vec![0.0; g.out_ch * k];
    let mut dx = need_dx.then(|| Vec::with_capacity(d.batch * in_item));
    for (item_dw, item_dx) in per_item {
        for (a, b) in dw.iter_mut().zip(item_dw) {
            *a += b.to_f64();
        }
        if let (Some(dx), Some(item_dx)) = (dx.as_mut(), item_dx) {
            dx.extend_from_slice(&item_dx);
        }
    }
    let mut db = vec![0.0; g.out_ch];
    for n in 0..d.batch {
        for (oc, acc) in db.iter_mut().enumerate() {
            let start = n * out_item + oc * p;
            *acc += dout[start..start + p].iter().sum::<f64>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// `Y[N,O] = X[N,F] · W[O,F]ᵀ + b`.
pub(crate) fn linear_forward<T: Elem>(x: &[f64], w: &[f64], b: &[f64], n: usize, f: usize, o: usize) -> Vec<f64> {
    let xt: Vec<T> = to_elem(x);
    let wt: Vec<T> = to_elem(w);
    let mut y = vec![T::default(); n * o];
    T::gemm(n, f, o, &xt, (f, 1), &wt, (1, f), T::default(), &mut y, o);
    y.iter()
        .enumerate()
        .map(|(i, v)| v.to_f64() + b[i % o])
        .collect()
}

/// Returns `(dX, dW, db)`; `dX` only when requested.
pub(crate) fn linear_backward<T: Elem>(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    f: usize,
    o: usize,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let xt: Vec<T> = to_elem(x);
    let dyt: Vec<T> = to_elem(dy);
    let mut dw = vec![T::default(); o * f];
    // dW[O,F] = dYᵀ[O,N] · X[N,F]
    T::gemm(o, n, f, &dyt, (1, o), &xt, (f, 1), T::default(), &mut dw, f);
    let dx = need_dx.then(|| {
        let wt: Vec<T> = to_elem(w);
        let mut dx = vec![T::default(); n * f];
        T::gemm(n, o, f, &dyt, (o, 1), &wt, (f, 1), T::default(), &mut dx, f);
        dx.into_iter().map(Elem::to_f64).collect()
    });
    let mut db = vec![0.0; o];
    for row in dy.chunks(o) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    (dx, dw.into_iter().map(Elem::to_f64).collect(), db)
}
