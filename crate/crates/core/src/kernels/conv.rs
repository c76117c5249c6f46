//! Convolution kernels: dense (im2col + GEMM) and depthwise (direct loops).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that keeps `ceil(size / stride)` outputs per axis. The
    /// total pad is split evenly with the odd element going bottom/right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: Padding, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    pub fn same() -> Self {
        Self::new(1, Padding::Same, 1)
    }

    pub fn valid() -> Self {
        Self::new(1, Padding::Valid, 1)
    }
}

/// Effective extent of a kernel with holes: `k + (k - 1)(dilation - 1)`.
pub fn effective_extent(k: usize, dilation: usize) -> usize {
    k + (k - 1) * (dilation - 1)
}

/// Output size and leading pad along one spatial axis.
pub fn axis_output(
    op: &'static str,
    axis: &str,
    size: usize,
    k: usize,
    geom: ConvGeometry,
) -> Result<(usize, usize)> {
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::InvalidArgument(format!(
            "{op}: stride and dilation must be positive"
        )));
    }
    let eff = effective_extent(k, geom.dilation);
    match geom.padding {
        Padding::Same => {
            let out = size.div_ceil(geom.stride);
            let total = ((out - 1) * geom.stride + eff).saturating_sub(size);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if size < eff {
                return Err(Error::dim(
                    op,
                    format!(
                        "{axis} extent {size} is smaller than the effective kernel extent {eff}; \
                         valid padding would produce an empty output"
                    ),
                ));
            }
            Ok(((size - eff) / geom.stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Plan {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl Plan {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row for output row `oy` and kernel row `i`, or `None` inside the zero pad.
    #[inline]
    fn src_row(&self, oy: usize, i: usize) -> Option<usize> {
        (oy * self.stride + i * self.dilation)
            .checked_sub(self.pad_top)
            .filter(|&y| y < self.h)
    }

    #[inline]
    fn src_col(&self, ox: usize, j: usize) -> Option<usize> {
        (ox * self.stride + j * self.dilation)
            .checked_sub(self.pad_left)
            .filter(|&x| x < self.w)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

fn plan<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Plan> {
    let (n, c, h, w) = input.dims4(op)?;
    let (f, kc, kh, kw) = kernel.dims4(op)?;
    if kc != c {
        return Err(Error::shape(
            op,
            format!("channel axis: kernel expects {kc} input channels but input has {c}"),
        ));
    }
    if kh == 0 || kw == 0 || f == 0 {
        return Err(Error::shape(op, "kernel has a zero-sized axis"));
    }
    let (out_h, pad_top) = axis_output(op, "height", h, kh, geom)?;
    let (out_w, pad_left) = axis_output(op, "width", w, kw, geom)?;
    Ok(Plan {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride: geom.stride,
        dilation: geom.dilation,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, f: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::shape(
                op,
                format!("filter axis: bias shape {:?} does not match {f} filters", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Unfolds one sample `[C, H, W]` into a `[C·kh·kw, out_h·out_w]` patch matrix.
fn im2col<T: Element>(p: &Plan, x: &[T], col: &mut [T]) {
    let pixels = p.pixels();
    for c in 0..p.c {
        let plane = &x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for i in 0..p.kh {
            for j in 0..p.kw {
                let row = &mut col[((c * p.kh + i) * p.kw + j) * pixels..][..pixels];
                for oy in 0..p.out_h {
                    let dst = &mut row[oy * p.out_w..(oy + 1) * p.out_w];
                    match p.src_row(oy, i) {
                        None => dst.fill(T::zero()),
                        Some(y) => {
                            let src = &plane[y * p.w..(y + 1) * p.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = p.src_col(ox, j).map_or(T::zero(), |x| src[x]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one sample, accumulating overlaps.
fn col2im<T: Element>(p: &Plan, col: &[T], dx: &mut [T]) {
    let pixels = p.pixels();
    for c in 0..p.c {
        let plane = &mut dx[c * p.h * p.w..(c + 1) * p.h * p.w];
        for i in 0..p.kh {
            for j in 0..p.kw {
                let row = &col[((c * p.kh + i) * p.kw + j) * pixels..][..pixels];
                for oy in 0..p.out_h {
                    let Some(y) = p.src_row(oy, i) else { continue };
                    for ox in 0..p.out_w {
                        if let Some(x) = p.src_col(ox, j) {
                            plane[y * p.w + x] += row[oy * p.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution (cross-correlation) of `input [N,C,H,W]` with
/// `kernel [F,C,kh,kw]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let p = plan("conv2d", input, kernel, geom)?;
    check_bias("conv2d", bias, p.f)?;
    let (patch, pixels) = (p.patch(), p.pixels());
    let in_stride = p.c * p.h * p.w;
    let mut out = vec![T::zero(); p.n * p.f * pixels];
    if pixels == 0 {
        return Tensor::from_vec(&[p.n, p.f, p.out_h, p.out_w], out);
    }
    let x = input.data();
    let k = kernel.data();
    out.par_chunks_mut(p.f * pixels)
        .enumerate()
        .for_each(|(n, y)| {
            let xs = &x[n * in_stride..(n + 1) * in_stride];
            if let Some(b) = bias {
                for (f, row) in y.chunks_mut(pixels).enumerate() {
                    row.fill(b.data()[f]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if p.is_pointwise() {
                T::gemm(p.f, patch, pixels, T::one(), k, patch as isize, 1, xs, pixels as isize, 1, beta, y, pixels as isize, 1);
            } else {
                let mut col = vec![T::zero(); patch * pixels];
                im2col(&p, xs, &mut col);
                T::gemm(p.f, patch, pixels, T::one(), k, patch as isize, 1, &col, pixels as isize, 1, beta, y, pixels as isize, 1);
            }
        });
    Tensor::from_vec(&[p.n, p.f, p.out_h, p.out_w], out)
}

/// Gradients of a dense convolution.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let p = plan("conv2d_backward", input, kernel, geom)?;
    if grad_out.shape() != [p.n, p.f, p.out_h, p.out_w] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("output gradient has shape {:?}", grad_out.shape()),
        ));
    }
    let (patch, pixels) = (p.patch(), p.pixels());
    let in_stride = p.c * p.h * p.w;
    let x = input.data();
    let k = kernel.data();
    let dy = grad_out.data();

    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..p.n)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * in_stride..(n + 1) * in_stride];
            let dys = &dy[n * p.f * pixels..(n + 1) * p.f * pixels];
            let owned_col;
            let col: &[T] = if p.is_pointwise() {
                xs
            } else {
                let mut c = vec![T::zero(); patch * pixels];
                im2col(&p, xs, &mut c);
                owned_col = c;
                &owned_col
            };
            // dK = dY (F×P) · colᵀ (P×patch)
            let mut dk = vec![T::zero(); p.f * patch];
            T::gemm(p.f, pixels, patch, T::one(), dys, pixels as isize, 1, col, 1, pixels as isize, T::zero(), &mut dk, patch as isize, 1);
            let dx = need_input.then(|| {
                // dcol = Kᵀ (patch×F) · dY (F×P)
                let mut dcol = vec![T::zero(); patch * pixels];
                T::gemm(patch, p.f, pixels, T::one(), k, 1, patch as isize, dys, pixels as isize, 1, T::zero(), &mut dcol, pixels as isize, 1);
                if p.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); in_stride];
                    col2im(&p, &dcol, &mut dx);
                    dx
                }
            });
            (dk, dx)
        })
        .collect();

    let mut dk = vec![T::zero(); p.f * patch];
    let mut dx = need_input.then(|| Vec::with_capacity(p.n * in_stride));
    for (dk_n, dx_n) in per_sample {
        for (a, b) in dk.iter_mut().zip(dk_n) {
            *a += b;
        }
        if let (Some(acc), Some(d)) = (dx.as_mut(), dx_n) {
            acc.extend(d);
        }
    }
    let mut db = vec![T::zero(); p.f];
    for n in 0..p.n {
        for (f, acc) in db.iter_mut().enumerate() {
            *acc += dy[(n * p.f + f) * pixels..][..pixels].iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        input: dx
            .map(|d| Tensor::from_vec(input.shape(), d))
            .transpose()?,
        kernel: Tensor::from_vec(kernel.shape(), dk)?,
        bias: Tensor::from_vec(&[p.f], db)?,
    })
}

fn depthwise_plan<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Plan> {
    const OP: &str = "depthwise_conv2d";
    let (n, c, h, w) = input.dims4(OP)?;
    let (kc, kh, kw) = match kernel.shape() {
        &[kc, kh, kw] => (kc, kh, kw),
        other => {
            return Err(Error::shape(
                OP,
                format!("depth kernel must be C×k×k, got shape {other:?}"),
            ))
        }
    };
    if kc != c {
        return Err(Error::shape(
            OP,
            format!("channel axis: depth kernel has {kc} planes but input has {c} channels"),
        ));
    }
    let (out_h, pad_top) = axis_output(OP, "height", h, kh, geom)?;
    let (out_w, pad_left) = axis_output(OP, "width", w, kw, geom)?;
    Ok(Plan {
        n,
        c,
        h,
        w,
        f: c,
        kh,
        kw,
        stride: geom.stride,
        dilation: geom.dilation,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

/// Per-channel spatial convolution: channel `c` is filtered only by plane `c`
/// of `kernel [C,kh,kw]`. No bias; the pointwise stage that follows carries it.
pub fn depthwise_conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let p = depthwise_plan(input, kernel, geom)?;
    let pixels = p.pixels();
    let plane = p.h * p.w;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); p.n * p.c * pixels];
    if pixels > 0 {
        out.par_chunks_mut(pixels)
            .enumerate()
            .for_each(|(nc, y)| {
                let c = nc % p.c;
                let xs = &x[nc * plane..(nc + 1) * plane];
                let ks = &k[c * p.kh * p.kw..(c + 1) * p.kh * p.kw];
                for oy in 0..p.out_h {
                    for i in 0..p.kh {
                        let Some(sy) = p.src_row(oy, i) else { continue };
                        let row = &xs[sy * p.w..(sy + 1) * p.w];
                        for j in 0..p.kw {
                            let kv = ks[i * p.kw + j];
                            for ox in 0..p.out_w {
                                if let Some(sx) = p.src_col(ox, j) {
                                    y[oy * p.out_w + ox] += kv * row[sx];
                                }
                            }
                        }
                    }
                }
            });
    }
    Tensor::from_vec(&[p.n, p.c, p.out_h, p.out_w], out)
}

/// Gradients of [`depthwise_conv2d`] as `(input, kernel)`.
pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let p = depthwise_plan(input, kernel, geom)?;
    if grad_out.shape() != [p.n, p.c, p.out_h, p.out_w] {
        return Err(Error::shape(
            "depthwise_conv2d_backward",
            format!("output gradient has shape {:?}", grad_out.shape()),
        ));
    }
    let pixels = p.pixels();
    let plane = p.h * p.w;
    let taps = p.kh * p.kw;
    let x = input.data();
    let k = kernel.data();
    let dy = grad_out.data();

    let per_plane: Vec<(Vec<T>, Option<Vec<T>>)> = (0..p.n * p.c)
        .into_par_iter()
        .map(|nc| {
            let c = nc % p.c;
            let xs = &x[nc * plane..(nc + 1) * plane];
            let ks = &k[c * taps..(c + 1) * taps];
            let g = &dy[nc * pixels..(nc + 1) * pixels];
            let mut dk = vec![T::zero(); taps];
            let mut dx = need_input.then(|| vec![T::zero(); plane]);
            for oy in 0..p.out_h {
                for i in 0..p.kh {
                    let Some(sy) = p.src_row(oy, i) else { continue };
                    for j in 0..p.kw {
                        let kv = ks[i * p.kw + j];
                        let mut acc = T::zero();
                        for ox in 0..p.out_w {
                            if let Some(sx) = p.src_col(ox, j) {
                                let gv = g[oy * p.out_w + ox];
                                acc += gv * xs[sy * p.w + sx];
                                if let Some(d) = dx.as_mut() {
                                    d[sy * p.w + sx] += gv * kv;
                                }
                            }
                        }
                        dk[i * p.kw + j] += acc;
                    }
                }
            }
            (dk, dx)
        })
        .collect();

    let mut dk = vec![T::zero(); p.c * taps];
    let mut dx = need_input.then(|| Vec::with_capacity(p.n * p.c * plane));
    for (nc, (dk_p, dx_p)) in per_plane.into_iter().enumerate() {
        let c = nc % p.c;
        for (a, b) in dk[c * taps..(c + 1) * taps].iter_mut().zip(dk_p) {
            *a += b;
        }
        if let (Some(acc), Some(d)) = (dx.as_mut(), dx_p) {
            acc.extend(d);
        }
    }
    Ok((
        dx.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        Tensor::from_vec(kernel.shape(), dk)?,
    ))
}
