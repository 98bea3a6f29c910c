//! CPU kernels with autograd support that candle lacks or runs slowly:
//! dense convolution by im2col + GEMM, depthwise convolution, and sigmoid.
//!
//! Every op reads contiguous NCHW inputs. `f16` inputs are computed in `f32`.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};
use half::f16;

type CResult<T> = candle_core::Result<T>;

/// Upper bound on im2col buffer elements per tile.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.padding - k) / self.stride + 1
    }
}

/// Dims of one convolution: input `[n, c, h, w]`, kernel `[o, c, k, k]`.
#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
}

impl Dims {
    fn new(x: &Shape, w: &Shape, g: ConvGeom) -> CResult<Self> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, c2, k, k2) = w.dims4()?;
        if c != c2 || k != k2 || h + 2 * g.padding < k || wd + 2 * g.padding < k || g.stride == 0 {
            candle_core::bail!("conv2d: input {x:?} incompatible with kernel {w:?} ({g:?})");
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            ho: g.out_len(h, k),
            wo: g.out_len(wd, k),
            g,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.g.stride == 1 && self.g.padding == 0
    }

    fn tile_rows(&self) -> usize {
        (COLS_BUDGET / (self.ckk() * self.wo).max(1)).clamp(1, self.ho)
    }
}

trait Real: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> + 'static {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn zero() -> Self;
    fn one() -> Self;
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> f32 {
        0.0
    }
    fn one() -> f32 {
        1.0
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn zero() -> f64 {
        0.0
    }
    fn one() -> f64 {
        1.0
    }
}

/// Fills `cols[q * n + j]` for output rows `y0..y1`, `n = (y1 - y0) * wo`.
fn im2col<T: Real>(x: &[T], d: &Dims, y0: usize, y1: usize, cols: &mut [T]) {
    let n = (y1 - y0) * d.wo;
    let (s, p) = (d.g.stride as isize, d.g.padding as isize);
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let q = (c * d.k + ky) * d.k + kx;
                let row = &mut cols[q * n..(q + 1) * n];
                for (ty, oy) in (y0..y1).enumerate() {
                    let iy = oy as isize * s - p + ky as isize;
                    let dst = &mut row[ty * d.wo..(ty + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adds `cols` back into the input-shaped `dx` for output rows `y0..y1`.
fn col2im<T: Real>(cols: &[T], d: &Dims, y0: usize, y1: usize, dx: &mut [T]) {
    let n = (y1 - y0) * d.wo;
    let (s, p) = (d.g.stride as isize, d.g.padding as isize);
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let q = (c * d.k + ky) * d.k + kx;
                let row = &cols[q * n..(q + 1) * n];
                for (ty, oy) in (y0..y1).enumerate() {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in row[ty * d.wo..(ty + 1) * d.wo].iter().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_fwd<T: Real>(x: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let (hw, ohw, ckk) = (d.h * d.w, d.ho * d.wo, d.ckk());
    let mut out = vec![T::zero(); d.n * d.o * ohw];
    let rows = d.tile_rows();
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * rows * d.wo]
    };
    for b in 0..d.n {
        let xb = &x[b * d.c * hw..(b + 1) * d.c * hw];
        let ob = &mut out[b * d.o * ohw..(b + 1) * d.o * ohw];
        let mut y0 = 0;
        while y0 < d.ho {
            let y1 = (y0 + rows).min(d.ho);
            let n = (y1 - y0) * d.wo;
            let (bp, rsb) = if d.is_pointwise() {
                (xb[y0 * d.wo..].as_ptr(), hw as isize)
            } else {
                im2col(xb, d, y0, y1, &mut cols);
                (cols.as_ptr(), n as isize)
            };
            // SAFETY: every operand extent lies inside its slice by construction of the strides.
            unsafe {
                T::gemm(
                    d.o,
                    ckk,
                    n,
                    w.as_ptr(),
                    ckk as isize,
                    1,
                    bp,
                    rsb,
                    1,
                    T::zero(),
                    ob[y0 * d.wo..].as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
            y0 = y1;
        }
    }
    out
}

fn conv_bwd_input<T: Real>(dy: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let (hw, ohw, ckk) = (d.h * d.w, d.ho * d.wo, d.ckk());
    let mut dx = vec![T::zero(); d.n * d.c * hw];
    let rows = d.tile_rows();
    let mut cols = vec![T::zero(); ckk * rows * d.wo];
    for b in 0..d.n {
        let dyb = &dy[b * d.o * ohw..(b + 1) * d.o * ohw];
        let dxb = &mut dx[b * d.c * hw..(b + 1) * d.c * hw];
        let mut y0 = 0;
        while y0 < d.ho {
            let y1 = (y0 + rows).min(d.ho);
            let n = (y1 - y0) * d.wo;
            if d.is_pointwise() {
                // SAFETY: as in `conv_fwd`; dx rows are written in place with stride hw.
                unsafe {
                    T::gemm(
                        ckk,
                        d.o,
                        n,
                        w.as_ptr(),
                        1,
                        ckk as isize,
                        dyb[y0 * d.wo..].as_ptr(),
                        ohw as isize,
                        1,
                        T::zero(),
                        dxb[y0 * d.wo..].as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            } else {
                // SAFETY: as in `conv_fwd`.
                unsafe {
                    T::gemm(
                        ckk,
                        d.o,
                        n,
                        w.as_ptr(),
                        1,
                        ckk as isize,
                        dyb[y0 * d.wo..].as_ptr(),
                        ohw as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                col2im(&cols[..ckk * n], d, y0, y1, dxb);
            }
            y0 = y1;
        }
    }
    dx
}

fn conv_bwd_weight<T: Real>(x: &[T], dy: &[T], d: &Dims) -> Vec<T> {
    let (hw, ohw, ckk) = (d.h * d.w, d.ho * d.wo, d.ckk());
    let mut dw = vec![T::zero(); d.o * ckk];
    let rows = d.tile_rows();
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * rows * d.wo]
    };
    for b in 0..d.n {
        let xb = &x[b * d.c * hw..(b + 1) * d.c * hw];
        let dyb = &dy[b * d.o * ohw..(b + 1) * d.o * ohw];
        let mut y0 = 0;
        while y0 < d.ho {
            let y1 = (y0 + rows).min(d.ho);
            let n = (y1 - y0) * d.wo;
            let (bp, csb) = if d.is_pointwise() {
                (xb[y0 * d.wo..].as_ptr(), hw as isize)
            } else {
                im2col(xb, d, y0, y1, &mut cols);
                (cols.as_ptr(), n as isize)
            };
            // SAFETY: as in `conv_fwd`; B is the transposed column buffer.
            unsafe {
                T::gemm(
                    d.o,
                    n,
                    ckk,
                    dyb[y0 * d.wo..].as_ptr(),
                    ohw as isize,
                    1,
                    bp,
                    1,
                    csb,
                    T::one(),
                    dw.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }
            y0 = y1;
        }
    }
    dw
}

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom op needs contiguous input"),
    }
}

fn to_f32(s: &[f16]) -> Vec<f32> {
    s.iter().map(|v| v.to_f32()).collect()
}

fn from_f32(v: Vec<f32>) -> CpuStorage {
    CpuStorage::F16(v.into_iter().map(f16::from_f32).collect())
}

/// Runs a two-input kernel in the storage's dtype, computing `f16` in `f32`.
fn dispatch2(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    f32_op: impl Fn(&[f32], &[f32]) -> Vec<f32>,
    f64_op: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> CResult<CpuStorage> {
    Ok(match (s1, s2) {
        (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(f32_op(slice(s1, l1)?, slice(s2, l2)?)),
        (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(f64_op(slice(s1, l1)?, slice(s2, l2)?)),
        (CpuStorage::F16(_), CpuStorage::F16(_)) => {
            from_f32(f32_op(&to_f32(slice(s1, l1)?), &to_f32(slice(s2, l2)?)))
        }
        _ => candle_core::bail!(
            "custom op: unsupported dtypes {:?} and {:?}",
            s1.dtype(),
            s2.dtype()
        ),
    })
}

struct Conv2d(ConvGeom);
struct Conv2dInputGrad {
    g: ConvGeom,
    x_shape: Shape,
}
struct Conv2dWeightGrad {
    g: ConvGeom,
    w_shape: Shape,
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = Dims::new(l1.shape(), l2.shape(), self.0)?;
        let out = dispatch2(s1, l1, s2, l2, |x, w| conv_fwd(x, w, &d), |x, w| conv_fwd(x, w, &d))?;
        Ok((out, Shape::from((d.n, d.o, d.ho, d.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &Conv2dInputGrad {
                g: self.0,
                x_shape: x.shape().clone(),
            },
        )?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &Conv2dWeightGrad {
                g: self.0,
                w_shape: w.shape().clone(),
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = Dims::new(&self.x_shape, l2.shape(), self.g)?;
        if l1.shape().dims() != [d.n, d.o, d.ho, d.wo] {
            candle_core::bail!("conv2d input grad: unexpected gradient shape {:?}", l1.shape());
        }
        let out = dispatch2(
            s1,
            l1,
            s2,
            l2,
            |dy, w| conv_bwd_input(dy, w, &d),
            |dy, w| conv_bwd_input(dy, w, &d),
        )?;
        Ok((out, self.x_shape.clone()))
    }
}

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = Dims::new(l1.shape(), &self.w_shape, self.g)?;
        let out = dispatch2(
            s1,
            l1,
            s2,
            l2,
            |x, dy| conv_bwd_weight(x, dy, &d),
            |x, dy| conv_bwd_weight(x, dy, &d),
        )?;
        Ok((out, self.w_shape.clone()))
    }
}

/// Dense 2-D convolution, `x: [n, c, h, w]`, `w: [o, c, k, k]`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeom) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2d(g))
}

fn dw_fwd<T: Real>(x: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let (hw, ohw, kk) = (d.h * d.w, d.ho * d.wo, d.k * d.k);
    let (s, p) = (d.g.stride as isize, d.g.padding as isize);
    let mut out = vec![T::zero(); d.n * d.c * ohw];
    for b in 0..d.n {
        for c in 0..d.c {
            let xp = &x[(b * d.c + c) * hw..][..hw];
            let wk = &w[c * kk..][..kk];
            let op = &mut out[(b * d.c + c) * ohw..][..ohw];
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = T::zero();
                    for ky in 0..d.k {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < d.w as isize {
                                acc += xp[iy as usize * d.w + ix as usize] * wk[ky * d.k + kx];
                            }
                        }
                    }
                    op[oy * d.wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Both depthwise gradients in one sweep: returns `(dx, dw)`.
fn dw_bwd<T: Real>(x: &[T], w: &[T], dy: &[T], d: &Dims) -> (Vec<T>, Vec<T>) {
    let (hw, ohw, kk) = (d.h * d.w, d.ho * d.wo, d.k * d.k);
    let (s, p) = (d.g.stride as isize, d.g.padding as isize);
    let mut dx = vec![T::zero(); d.n * d.c * hw];
    let mut dwt = vec![T::zero(); d.c * kk];
    for b in 0..d.n {
        for c in 0..d.c {
            let base = (b * d.c + c) * hw;
            let wk = &w[c * kk..][..kk];
            let gp = &dy[(b * d.c + c) * ohw..][..ohw];
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let g = gp[oy * d.wo + ox];
                    for ky in 0..d.k {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < d.w as isize {
                                let i = base + iy as usize * d.w + ix as usize;
                                dx[i] += g * wk[ky * d.k + kx];
                                dwt[c * kk + ky * d.k + kx] += g * x[i];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dwt)
}

fn depthwise_dims(x: &Shape, w: &Shape, g: ConvGeom) -> CResult<Dims> {
    let (o, one, k, k2) = w.dims4()?;
    if one != 1 {
        candle_core::bail!("depthwise kernel must be [c, 1, k, k], got {w:?}");
    }
    let d = Dims::new(x, &Shape::from((o, x.dims4()?.1, k, k2)), g)?;
    if d.o != d.c {
        candle_core::bail!("depthwise kernel has {} filters for {} channels", d.o, d.c);
    }
    Ok(d)
}

struct Depthwise(ConvGeom);
/// Emits `dx` and `dw` concatenated into one flat buffer.
struct DepthwiseGrad(ConvGeom);

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = depthwise_dims(l1.shape(), l2.shape(), self.0)?;
        let out = dispatch2(s1, l1, s2, l2, |x, w| dw_fwd(x, w, &d), |x, w| dw_fwd(x, w, &d))?;
        Ok((out, Shape::from((d.n, d.c, d.ho, d.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let packed = x.apply_op3_no_bwd(w, &grad, &DepthwiseGrad(self.0))?;
        let nx = x.elem_count();
        let dx = packed.narrow(0, 0, nx)?.reshape(x.shape())?;
        let dw = packed.narrow(0, nx, w.elem_count())?.reshape(w.shape())?;
        Ok((Some(dx), Some(dw)))
    }
}

fn packed<T: Real>(x: &[T], w: &[T], dy: &[T], d: &Dims) -> Vec<T> {
    let (mut dx, dw) = dw_bwd(x, w, dy, d);
    dx.extend(dw);
    dx
}

impl CustomOp3 for DepthwiseGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let d = depthwise_dims(l1.shape(), l2.shape(), self.0)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(_), CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(packed(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, &d))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(packed(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, &d))
            }
            (CpuStorage::F16(_), CpuStorage::F16(_), CpuStorage::F16(_)) => from_f32(packed(
                &to_f32(slice(s1, l1)?),
                &to_f32(slice(s2, l2)?),
                &to_f32(slice(s3, l3)?),
                &d,
            )),
            _ => candle_core::bail!("depthwise grad: mixed dtypes"),
        };
        let len = l1.shape().elem_count() + l2.shape().elem_count();
        Ok((out, Shape::from(len)))
    }
}

/// Depthwise 2-D convolution, `x: [n, c, h, w]`, `w: [c, 1, k, k]`, no bias.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, g: ConvGeom) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise(g))
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(slice::<f32>(s, l)?.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()),
            CpuStorage::F64(_) => CpuStorage::F64(slice::<f64>(s, l)?.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()),
            CpuStorage::F16(_) => from_f32(
                slice::<f16>(s, l)?
                    .iter()
                    .map(|v| 1.0 / (1.0 + (-v.to_f32()).exp()))
                    .collect(),
            ),
            other => candle_core::bail!("sigmoid: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let ds = (res * res.affine(-1.0, 1.0)?)?;
        Ok(Some((grad * ds)?))
    }
}

pub fn sigmoid(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> CResult<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))
}

pub fn is_float(dtype: DType) -> bool {
    matches!(dtype, DType::F16 | DType::F32 | DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct seven-loop convolution.
    #[allow(clippy::too_many_arguments)]
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], g: ConvGeom, depthwise: bool) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [o, ci, k, _] = ws;
        let ho = (h + 2 * g.padding - k) / g.stride + 1;
        let wo = (wd + 2 * g.padding - k) / g.stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for icl in 0..ci {
                            let ic = if depthwise { oc } else { icl };
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * ci + icl) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    const CASES: &[([usize; 4], usize, usize, usize, usize)] = &[
        // (input, out channels, kernel, stride, padding)
        ([2, 3, 7, 6], 4, 3, 1, 1),
        ([1, 2, 8, 8], 3, 3, 2, 1),
        ([2, 5, 5, 4], 3, 1, 1, 0),
        ([1, 3, 9, 9], 2, 5, 2, 2),
        ([1, 4, 6, 6], 4, 1, 2, 0),
    ];

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(xs, o, k, s, p) in CASES {
            let ws = [o, xs[1], k, k];
            let g = ConvGeom { stride: s, padding: p };
            let x = random(&xs, &mut rng);
            let w = random(&ws, &mut rng);
            let xt = Tensor::from_vec(x.clone(), xs.to_vec(), &Device::Cpu).unwrap();
            let wt = Tensor::from_vec(w.clone(), ws.to_vec(), &Device::Cpu).unwrap();
            let got: Vec<f64> = conv2d(&xt, &wt, g).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            close(&got, &naive_conv(&x, xs, &w, ws, g, false), 1e-12);
            let got32: Vec<f32> = conv2d(
                &xt.to_dtype(DType::F32).unwrap(),
                &wt.to_dtype(DType::F32).unwrap(),
                g,
            )
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
            let got32: Vec<f64> = got32.into_iter().map(f64::from).collect();
            close(&got32, &naive_conv(&x, xs, &w, ws, g, false), 1e-5);
        }
    }

    /// Checks autograd of `sum(f(x, w) * r)` against central differences.
    fn check_grads(xs: [usize; 4], ws: [usize; 4], g: ConvGeom, depthwise: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&xs, &mut rng);
        let w = random(&ws, &mut rng);
        let dev = Device::Cpu;
        let xv = Var::from_vec(x.clone(), xs.to_vec(), &dev).unwrap();
        let wv = Var::from_vec(w.clone(), ws.to_vec(), &dev).unwrap();
        let f = |x: &Tensor, w: &Tensor| {
            if depthwise {
                depthwise_conv2d(x, w, g)
            } else {
                conv2d(x, w, g)
            }
        };
        let y = f(xv.as_tensor(), wv.as_tensor()).unwrap();
        let r: Vec<f64> = random(y.dims(), &mut rng);
        let rt = Tensor::from_vec(r.clone(), y.dims(), &dev).unwrap();
        let loss = (y * &rt).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let dx: Vec<f64> = grads.get(&xv).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let dw: Vec<f64> = grads.get(&wv).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let obj = |x: &[f64], w: &[f64]| -> f64 {
            naive_conv(x, xs, w, ws, g, depthwise)
                .iter()
                .zip(&r)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (obj(&a, &w) - obj(&b, &w)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}] {} vs {fd}", dx[i]);
        }
        for i in 0..w.len() {
            let (mut a, mut b) = (w.clone(), w.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (obj(&x, &a) - obj(&x, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dw[{i}] {} vs {fd}", dw[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (seed, &(xs, o, k, s, p)) in CASES.iter().enumerate() {
            check_grads(xs, [o, xs[1], k, k], ConvGeom { stride: s, padding: p }, false, seed as u64);
        }
    }

    #[test]
    fn depthwise_matches_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(xs, k, s, p) in &[([2, 3, 7, 7], 3, 1, 1), ([1, 4, 9, 8], 5, 2, 2), ([1, 2, 6, 6], 3, 2, 1)] {
            let ws = [xs[1], 1, k, k];
            let g = ConvGeom { stride: s, padding: p };
            let x = random(&xs, &mut rng);
            let w = random(&ws, &mut rng);
            let xt = Tensor::from_vec(x.clone(), xs.to_vec(), &Device::Cpu).unwrap();
            let wt = Tensor::from_vec(w.clone(), ws.to_vec(), &Device::Cpu).unwrap();
            let got: Vec<f64> = depthwise_conv2d(&xt, &wt, g)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            close(&got, &naive_conv(&x, xs, &w, ws, g, true), 1e-12);
            check_grads(xs, ws, g, true, 3);
        }
    }

    #[test]
    fn large_inputs_use_several_tiles() {
        // 16 * 9 * 200 columns per row puts a 3000-row output over the tile budget.
        let xs = [1, 16, 3000, 200];
        let d = Dims::new(&Shape::from(xs.to_vec()), &Shape::from((2, 16, 3, 3)), ConvGeom { stride: 1, padding: 1 }).unwrap();
        assert!(d.tile_rows() < d.ho);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = [1, 3, 40, 30];
        let x = random(&xs, &mut rng);
        let w = random(&[2, 3, 3, 3], &mut rng);
        let dims = Dims::new(&Shape::from(xs.to_vec()), &Shape::from((2, 3, 3, 3)), ConvGeom { stride: 1, padding: 1 }).unwrap();
        let tiled = {
            let d = dims;
            let rows = 7;
            let mut out = vec![0.0; 2 * 40 * 30];
            let mut cols = vec![0.0; 27 * rows * 30];
            let mut y0 = 0;
            while y0 < 40 {
                let y1 = (y0 + rows).min(40);
                let n = (y1 - y0) * 30;
                im2col(&x, &d, y0, y1, &mut cols);
                for o in 0..2 {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for q in 0..27 {
                            acc += w[o * 27 + q] * cols[q * n + j];
                        }
                        out[o * 1200 + y0 * 30 + j] = acc;
                    }
                }
                y0 = y1;
            }
            out
        };
        close(&conv_fwd(&x, &w, &dims), &tiled, 1e-12);
    }

    #[test]
    fn half_precision_is_close_to_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 4, 8, 8], &mut rng);
        let w: Vec<f64> = random(&[3, 4, 3, 3], &mut rng).iter().map(|v| v * 0.3).collect();
        let xt = Tensor::from_vec(x.clone(), (1, 4, 8, 8), &Device::Cpu).unwrap();
        let wt = Tensor::from_vec(w.clone(), (3, 4, 3, 3), &Device::Cpu).unwrap();
        let g = ConvGeom { stride: 1, padding: 1 };
        let y16: Vec<f32> = conv2d(&xt.to_dtype(DType::F16).unwrap(), &wt.to_dtype(DType::F16).unwrap(), g)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let want = naive_conv(&x, [1, 4, 8, 8], &w, [3, 4, 3, 3], g, false);
        for (a, b) in y16.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-2);
        }
    }

    #[test]
    fn sigmoid_value_and_gradient() {
        let xs = vec![-800.0f64, -3.0, 0.0, 2.5, 800.0];
        let v = Var::from_vec(xs.clone(), 5, &Device::Cpu).unwrap();
        let s = sigmoid(v.as_tensor()).unwrap();
        let got: Vec<f64> = s.to_vec1().unwrap();
        for (g, x) in got.iter().zip(&xs) {
            assert!((g - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
        }
        let grads = s.sum_all().unwrap().backward().unwrap();
        let d: Vec<f64> = grads.get(&v).unwrap().to_vec1().unwrap();
        for (d, s) in d.iter().zip(&got) {
            assert!(d.is_finite());
            assert!((d - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_repeats_pixels_and_sums_gradients() {
        let v = Var::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let up = upsample_nearest(v.as_tensor(), 2).unwrap();
        let rows: Vec<Vec<f64>> = up.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(rows[0], vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(rows[3], vec![3.0, 3.0, 4.0, 4.0]);
        let grads = up.sum_all().unwrap().backward().unwrap();
        let d: Vec<f64> = grads.get(&v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(d, vec![4.0; 4]);
    }
}
