//! CPU kernels exposed as differentiable ops: convolution (im2col + GEMM)
//! and the local feature correlation used by the flow decoder.
//!
//! A convolution and its transpose share three kernels: the forward pass,
//! the gradient with respect to the input ("data") and the gradient with
//! respect to the filter. The transposed convolution's forward pass is the
//! convolution's data gradient and vice versa.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use gemm::Parallelism;

type CResult<T> = candle_core::Result<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(n: usize, cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> CResult<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("input {h}x{w} too small for kernel {k} with padding {pad}");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

trait Elem: Copy + Default + Send + Sync + 'static + std::ops::AddAssign {
    const ONE: Self;
    fn wrap(v: Vec<Self>) -> CpuStorage;
    fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [Self]>;
}

impl Elem for f32 {
    const ONE: Self = 1.0;
    fn wrap(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F32(v)
    }
    fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [Self]> {
        contiguous_slice(s.as_slice::<f32>()?, l)
    }
}

impl Elem for f64 {
    const ONE: Self = 1.0;
    fn wrap(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F64(v)
    }
    fn slice<'a>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [Self]> {
        contiguous_slice(s.as_slice::<f64>()?, l)
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], l: &Layout) -> CResult<&'a [T]> {
    if !l.is_contiguous() {
        candle_core::bail!("convolution kernels need contiguous operands");
    }
    Ok(&data[l.start_offset()..l.start_offset() + l.shape().elem_count()])
}

fn im2col<T: Elem>(x: &[T], g: &Geometry, col: &mut [T]) {
    let (howo, hw) = (g.out_len(), g.h * g.w);
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::default());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::default()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(col: &[T], g: &Geometry, x: &mut [T]) {
    let (howo, hw) = (g.out_len(), g.h * g.w);
    for ci in 0..g.cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `dst(m×n) = [dst +] lhs(m×k) · rhs(k×n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given shapes and
    // strides, and `dst` does not alias the operands.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn forward<T: Elem>(x: &[T], weight: &[T], g: &Geometry) -> Vec<T> {
    let (ckk, howo) = (g.patch_len(), g.out_len());
    let mut col = vec![T::default(); ckk * howo];
    let mut y = vec![T::default(); g.n * g.cout * howo];
    let xs = g.cin * g.h * g.w;
    for b in 0..g.n {
        im2col(&x[b * xs..(b + 1) * xs], g, &mut col);
        let dst = &mut y[b * g.cout * howo..(b + 1) * g.cout * howo];
        matmul(g.cout, howo, ckk, dst, false, weight, ckk, 1, &col, howo, 1);
    }
    y
}

fn backward_data<T: Elem>(dy: &[T], weight: &[T], g: &Geometry) -> Vec<T> {
    let (ckk, howo) = (g.patch_len(), g.out_len());
    let mut dcol = vec![T::default(); ckk * howo];
    let xs = g.cin * g.h * g.w;
    let mut dx = vec![T::default(); g.n * xs];
    for b in 0..g.n {
        let dyb = &dy[b * g.cout * howo..(b + 1) * g.cout * howo];
        // weightᵀ (ckk×cout) · dy (cout×howo)
        matmul(ckk, howo, g.cout, &mut dcol, false, weight, 1, ckk, dyb, howo, 1);
        col2im(&dcol, g, &mut dx[b * xs..(b + 1) * xs]);
    }
    dx
}

fn backward_filter<T: Elem>(x: &[T], dy: &[T], g: &Geometry) -> Vec<T> {
    let (ckk, howo) = (g.patch_len(), g.out_len());
    let mut col = vec![T::default(); ckk * howo];
    let mut dw = vec![T::default(); g.cout * ckk];
    let xs = g.cin * g.h * g.w;
    for b in 0..g.n {
        im2col(&x[b * xs..(b + 1) * xs], g, &mut col);
        let dyb = &dy[b * g.cout * howo..(b + 1) * g.cout * howo];
        // dy (cout×howo) · colᵀ (howo×ckk)
        matmul(g.cout, ckk, howo, &mut dw, b > 0, dyb, howo, 1, &col, 1, howo);
    }
    dw
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let $a = f32::slice($s1, $l1)?;
                let $b = f32::slice($s2, $l2)?;
                f32::wrap($body)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let $a = f64::slice($s1, $l1)?;
                let $b = f64::slice($s2, $l2)?;
                f64::wrap($body)
            }
            _ => candle_core::bail!("convolution supports matching f32 or f64 operands, got {:?} and {:?}", $s1.dtype(), $s2.dtype()),
        }
    };
}

/// Forward convolution with a fixed geometry, no gradient.
struct ForwardKernel(Geometry);

impl CustomOp2 for ForwardKernel {
    fn name(&self) -> &'static str {
        "conv2d-forward"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(x, w, &g));
        Ok((out, Shape::from((g.n, g.cout, g.ho, g.wo))))
    }
}

/// Input gradient of a convolution: `(dy, weight) → dx`.
struct DataKernel(Geometry);

impl CustomOp2 for DataKernel {
    fn name(&self) -> &'static str {
        "conv2d-backward-data"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |dy, w| backward_data(dy, w, &g));
        Ok((out, Shape::from((g.n, g.cin, g.h, g.w))))
    }
}

/// Filter gradient of a convolution: `(x, dy) → dweight`.
struct FilterKernel(Geometry);

impl CustomOp2 for FilterKernel {
    fn name(&self) -> &'static str {
        "conv2d-backward-filter"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, dy| backward_filter(x, dy, &g));
        Ok((out, Shape::from((g.cout, g.cin, g.k, g.k))))
    }
}

struct Conv2dOp(Geometry);

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        ForwardKernel(self.0).cpu_fwd(s1, l1, s2, l2)
    }

    fn bwd(&self, x: &Tensor, weight: &Tensor, _res: &Tensor, dy: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let dy = dy.contiguous()?;
        let dx = dy.apply_op2_no_bwd(weight, &DataKernel(self.0))?;
        let dw = x.apply_op2_no_bwd(&dy, &FilterKernel(self.0))?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Transposed convolution, described by the geometry of the convolution it
/// inverts (whose input is this op's output).
struct ConvTranspose2dOp(Geometry);

impl CustomOp2 for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv-transpose2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        DataKernel(self.0).cpu_fwd(s1, l1, s2, l2)
    }

    fn bwd(&self, x: &Tensor, weight: &Tensor, _res: &Tensor, dy: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let dy = dy.contiguous()?;
        let dx = dy.apply_op2_no_bwd(weight, &ForwardKernel(self.0))?;
        let dw = dy.apply_op2_no_bwd(x, &FilterKernel(self.0))?;
        Ok((Some(dx), Some(dw)))
    }
}

/// `x: N×Cin×H×W`, `weight: Cout×Cin×k×k`, square kernel, no dilation.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        candle_core::bail!("conv2d: input {:?} incompatible with weight {:?}", x.dims(), weight.dims());
    }
    let g = Geometry::new(n, cin, h, w, cout, k, stride, pad)?;
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp(g))
}

/// `x: N×Cin×H×W`, `weight: Cin×Cout×k×k`; output side `(H − 1)·s − 2p + k`.
pub(crate) fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (wcin, cout, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        candle_core::bail!("conv_transpose2d: input {:?} incompatible with weight {:?}", x.dims(), weight.dims());
    }
    let (ho, wo) = ((h - 1) * stride + k - 2 * pad, (w - 1) * stride + k - 2 * pad);
    // the convolution mapping our output (cout channels) back to our input (cin channels)
    let g = Geometry::new(n, cout, ho, wo, cin, k, stride, pad)?;
    if (g.ho, g.wo) != (h, w) {
        candle_core::bail!("conv_transpose2d: geometry does not invert for input {h}x{w}");
    }
    x.contiguous()?.apply_op2(&weight.contiguous()?, ConvTranspose2dOp(g))
}

/// Shared geometry of the correlation kernels.
#[derive(Debug, Clone, Copy)]
struct Window {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: usize,
}

impl Window {
    fn side(&self) -> usize {
        2 * self.d + 1
    }

    /// Visits, per displacement channel `k` and output row `y`, the run of
    /// `len` pixels starting at `x0` whose displaced partners (row `ys`,
    /// starting column `xs`) lie inside the grid.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let side = self.side();
        for dv in 0..side {
            for du in 0..side {
                let k = dv * side + du;
                let (oy, ox) = (dv as isize - self.d as isize, du as isize - self.d as isize);
                let x0 = (-ox).max(0) as usize;
                let x1 = (self.w as isize - ox.max(0)).max(0) as usize;
                if x1 <= x0 {
                    continue;
                }
                for y in 0..self.h {
                    let ys = y as isize + oy;
                    if ys < 0 || ys >= self.h as isize {
                        continue;
                    }
                    f(k, y, x0, ys as usize, (x0 as isize + ox) as usize, x1 - x0);
                }
            }
        }
    }
}

fn correlate<T: Elem + std::ops::Mul<Output = T>>(a: &[T], b: &[T], g: &Window) -> Vec<T> {
    let (hw, kk) = (g.h * g.w, g.side() * g.side());
    let mut out = vec![T::default(); g.n * kk * hw];
    for bn in 0..g.n {
        let (a, b) = (&a[bn * g.c * hw..(bn + 1) * g.c * hw], &b[bn * g.c * hw..(bn + 1) * g.c * hw]);
        let out = &mut out[bn * kk * hw..(bn + 1) * kk * hw];
        g.for_each_segment(|k, y, x0, ys, xs, len| {
            let dst = &mut out[k * hw + y * g.w + x0..][..len];
            for ch in 0..g.c {
                let pa = &a[ch * hw + y * g.w + x0..][..len];
                let pb = &b[ch * hw + ys * g.w + xs..][..len];
                for ((o, &va), &vb) in dst.iter_mut().zip(pa).zip(pb) {
                    *o += va * vb;
                }
            }
        });
    }
    out
}

/// Gradient of the correlation with respect to one operand, given the other.
/// `wrt_first` selects whether `other` is the displaced operand.
fn correlate_grad<T: Elem + std::ops::Mul<Output = T>>(grad: &[T], other: &[T], g: &Window, wrt_first: bool) -> Vec<T> {
    let (hw, kk) = (g.h * g.w, g.side() * g.side());
    let mut out = vec![T::default(); g.n * g.c * hw];
    for bn in 0..g.n {
        let grad = &grad[bn * kk * hw..(bn + 1) * kk * hw];
        let other = &other[bn * g.c * hw..(bn + 1) * g.c * hw];
        let out = &mut out[bn * g.c * hw..(bn + 1) * g.c * hw];
        g.for_each_segment(|k, y, x0, ys, xs, len| {
            let gk = &grad[k * hw + y * g.w + x0..][..len];
            let (src_off, dst_off) = if wrt_first {
                (ys * g.w + xs, y * g.w + x0)
            } else {
                (y * g.w + x0, ys * g.w + xs)
            };
            for ch in 0..g.c {
                let src = &other[ch * hw + src_off..][..len];
                let dst = &mut out[ch * hw + dst_off..][..len];
                for ((o, &vg), &vs) in dst.iter_mut().zip(gk).zip(src) {
                    *o += vg * vs;
                }
            }
        });
    }
    out
}

struct CorrelationGrad {
    window: Window,
    wrt_first: bool,
}

impl CustomOp2 for CorrelationGrad {
    fn name(&self) -> &'static str {
        "correlation-backward"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (g, first) = (self.window, self.wrt_first);
        let out = dispatch!(s1, l1, s2, l2, |grad, other| correlate_grad(grad, other, &g, first));
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

struct CorrelationOp(Window);

impl CustomOp2 for CorrelationOp {
    fn name(&self) -> &'static str {
        "correlation"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |a, b| correlate(a, b, &g));
        Ok((out, Shape::from((g.n, g.side() * g.side(), g.h, g.w))))
    }

    fn bwd(&self, a: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let da = grad.apply_op2_no_bwd(b, &CorrelationGrad { window: self.0, wrt_first: true })?;
        let db = grad.apply_op2_no_bwd(a, &CorrelationGrad { window: self.0, wrt_first: false })?;
        Ok((Some(da), Some(db)))
    }
}

/// `out[k = (dv+d)(2d+1) + (du+d)](y, x) = Σ_c a[c](y, x) · b[c](y + dv, x + du)`,
/// zero where the displaced pixel leaves the grid.
pub(crate) fn correlation(a: &Tensor, b: &Tensor, d: usize) -> CResult<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    if b.dims() != a.dims() {
        candle_core::bail!("correlation operands differ: {:?} vs {:?}", a.dims(), b.dims());
    }
    a.contiguous()?.apply_op2(&b.contiguous()?, CorrelationOp(Window { n, c, h, w, d }))
}
