//! Dense convolution kernels via `im2col` and GEMM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window geometry shared by a convolution and its adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Very narrow stride-1 outputs skip the unfold: with one or two output
    /// channels the product degenerates to a matrix-vector one.
    fn is_direct(&self, cout: usize) -> bool {
        self.stride == 1 && cout <= 2 && !self.is_pointwise()
    }

    /// Calls `f(c, ky, kx, oy, iy, lo, hi)` for every stride-1 tap row that
    /// overlaps the input; output columns `lo..hi` read input columns
    /// `lo + kx − pad..hi + kx − pad`.
    fn for_each_tap_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let (lo, hi) = valid_span(kx, self.pad, self.width, wo);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        f(c, ky, kx, oy, iy as usize, lo, hi);
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution of one item without unfolding; accumulates into `dst`.
fn direct_forward(src: &[f64], w: &[f64], cout: usize, g: &ConvGeometry, dst: &mut [f64]) {
    let (k, wd, wo) = (g.kernel, g.width, g.out_width());
    let (plane_in, plane_out) = (g.height * wd, g.cols());
    for oc in 0..cout {
        let out = &mut dst[oc * plane_out..(oc + 1) * plane_out];
        g.for_each_tap_row(|c, ky, kx, oy, iy, lo, hi| {
            let wv = w[((oc * g.channels + c) * k + ky) * k + kx];
            let shift = kx as isize - g.pad as isize;
            let base = c * plane_in + iy * wd;
            let inp = &src[(base as isize + lo as isize + shift) as usize
                ..(base as isize + hi as isize + shift) as usize];
            for (o, i) in out[oy * wo + lo..oy * wo + hi].iter_mut().zip(inp) {
                *o += wv * i;
            }
        });
    }
}

/// Adjoint of [`direct_forward`] for one item.
fn direct_backward(
    src: &[f64],
    w: &[f64],
    gout: &[f64],
    cout: usize,
    g: &ConvGeometry,
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (k, wd, wo) = (g.kernel, g.width, g.out_width());
    let (plane_in, plane_out) = (g.height * wd, g.cols());
    for oc in 0..cout {
        let go = &gout[oc * plane_out..(oc + 1) * plane_out];
        g.for_each_tap_row(|c, ky, kx, oy, iy, lo, hi| {
            let wi = ((oc * g.channels + c) * k + ky) * k + kx;
            let shift = kx as isize - g.pad as isize;
            let start = (c * plane_in + iy * wd) as isize + lo as isize + shift;
            let range = start as usize..start as usize + (hi - lo);
            let grow = &go[oy * wo + lo..oy * wo + hi];
            dw[wi] += grow
                .iter()
                .zip(&src[range.clone()])
                .map(|(a, b)| a * b)
                .sum::<f64>();
            if let Some(dx) = dx.as_deref_mut() {
                for (d, gv) in dx[range].iter_mut().zip(grow) {
                    *d += w[wi] * gv;
                }
            }
        });
    }
}

/// Output columns `lo..hi` whose stride-1 input column `ox + kx − pad` is
/// inside `0..width`.
fn valid_span(kx: usize, pad: usize, width: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (width + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

/// Unfolds `img` (one item, `C×H×W`) into a `(C·k·k) × (Ho·Wo)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    im2col_rows(img, g, 0, g.out_height(), col);
}

/// [`im2col`] restricted to output rows `oy0..oy1`.
fn im2col_rows(img: &[f64], g: &ConvGeometry, oy0: usize, oy1: usize, col: &mut [f64]) {
    let wo = g.out_width();
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let n = (oy1 - oy0) * wo;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.width, wo);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let off = lo + kx - g.pad;
                        line[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        continue;
                    }
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back into `img`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    col2im_rows(col, g, 0, g.out_height(), img);
}

/// [`col2im`] restricted to output rows `oy0..oy1`.
fn col2im_rows(col: &[f64], g: &ConvGeometry, oy0: usize, oy1: usize, img: &mut [f64]) {
    let wo = g.out_width();
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let n = (oy1 - oy0) * wo;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let ry = oy - oy0;
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kx, g.pad, g.width, wo);
                        let off = lo + kx - g.pad;
                        let line = &src[ry * wo + lo..ry * wo + hi];
                        for (d, v) in dst[off..off + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[ry * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c` on row-major buffers.
///
/// `a` is `m×k` (or `k×m` stored when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the full m×k, k×n and m×n extents described
    // by the strides above, as asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Column-major-agnostic view: element `(i, j)` lives at `i·rs + j·cs`.
#[derive(Clone, Copy)]
struct View {
    rs: usize,
    cs: usize,
}

impl View {
    fn rows(ld: usize) -> Self {
        Self { rs: ld, cs: 1 }
    }

    fn cols(ld: usize) -> Self {
        Self { rs: 1, cs: ld }
    }

    fn extent(self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.rs + (c - 1) * self.cs + 1
        }
    }
}

/// `c ← op(a)·op(b) + beta·c` with explicit strides; `c` is row-major with
/// leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    assert!(va.extent(m, k) <= a.len());
    assert!(vb.extent(k, n) <= b.len());
    assert!(View::rows(ldc).extent(m, n) <= c.len());
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr(),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Output rows per im2col strip, sized so the strip stays cache resident.
fn strip_rows(g: &ConvGeometry) -> usize {
    const BUDGET: usize = 1 << 16;
    let per_row = g.rows() * g.out_width();
    (BUDGET / per_row.max(1)).clamp(1, g.out_height().max(1))
}

fn check_bias(b: Option<&Tensor>, c: usize) -> Result<()> {
    match b {
        Some(b) if b.len() != c => Err(Error::Input(format!(
            "bias has {} entries for {c} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Cross-correlation with `w: (Cout, Cin, k, k)`.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    if wcin != cin || k != k2 {
        return Err(Error::Input(format!(
            "conv weight {:?} does not accept {cin} input channels",
            w.shape()
        )));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::Input(format!(
            "conv kernel {k} larger than {h}x{wd} input"
        )));
    }
    check_bias(b, cout)?;
    let geo = ConvGeometry {
        channels: cin,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let plane = ho * wo;
    let strip = strip_rows(&geo);
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; geo.rows() * strip * wo]
    };
    for item in 0..n {
        let src = x.item(item);
        let dst = out.item_mut(item);
        if let Some(b) = b {
            for (oc, p) in dst.chunks_mut(plane).enumerate() {
                p.fill(b.data()[oc]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        if geo.is_pointwise() {
            gemm(
                cout,
                geo.rows(),
                plane,
                w.data(),
                false,
                src,
                false,
                beta,
                dst,
            );
            continue;
        }
        if geo.is_direct(cout) {
            direct_forward(src, w.data(), cout, &geo, dst);
            continue;
        }
        for oy0 in (0..ho).step_by(strip) {
            let oy1 = (oy0 + strip).min(ho);
            let ns = (oy1 - oy0) * wo;
            let col = &mut col[..geo.rows() * ns];
            im2col_rows(src, &geo, oy0, oy1, col);
            gemm_view(
                cout,
                geo.rows(),
                ns,
                w.data(),
                View::rows(geo.rows()),
                col,
                View::rows(ns),
                beta,
                &mut dst[oy0 * wo..],
                plane,
            );
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let geo = ConvGeometry {
        channels: cin,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
    };
    let (rows, cols) = (geo.rows(), geo.cols());
    let wo = geo.out_width();
    let strip = strip_rows(&geo);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([cout, 1, 1, 1]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![0.0; rows * strip * wo];
    let mut dcol = vec![0.0; rows * strip * wo];
    for item in 0..n {
        let g = gout.item(item);
        for (oc, plane) in g.chunks(cols).enumerate() {
            db.data_mut()[oc] += plane.iter().sum::<f64>();
        }
        let src = x.item(item);
        if geo.is_direct(cout) {
            let dx = dx.as_mut().map(|d| d.item_mut(item));
            direct_backward(src, w.data(), g, cout, &geo, dw.data_mut(), dx);
            continue;
        }
        if geo.is_pointwise() {
            // dW += dOut · Xᵀ,  dX = Wᵀ · dOut
            gemm(cout, cols, rows, g, false, src, true, 1.0, dw.data_mut());
            if let Some(dx) = dx.as_mut() {
                gemm(
                    rows,
                    cout,
                    cols,
                    w.data(),
                    true,
                    g,
                    false,
                    0.0,
                    dx.item_mut(item),
                );
            }
            continue;
        }
        for oy0 in (0..geo.out_height()).step_by(strip) {
            let oy1 = (oy0 + strip).min(geo.out_height());
            let ns = (oy1 - oy0) * wo;
            let gs = &g[oy0 * wo..];
            let col = &mut col[..rows * ns];
            im2col_rows(src, &geo, oy0, oy1, col);
            // dW += dOut_strip · col_stripᵀ
            gemm_view(
                cout,
                ns,
                rows,
                gs,
                View::rows(cols),
                col,
                View::cols(ns),
                1.0,
                dw.data_mut(),
                rows,
            );
            if let Some(dx) = dx.as_mut() {
                let dcol = &mut dcol[..rows * ns];
                // dcol = Wᵀ · dOut_strip
                gemm_view(
                    rows,
                    cout,
                    ns,
                    w.data(),
                    View::cols(rows),
                    gs,
                    View::rows(cols),
                    0.0,
                    dcol,
                    ns,
                );
                col2im_rows(dcol, &geo, oy0, oy1, dx.item_mut(item));
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with `w: (Cin, Cout, k, k)`; the adjoint of a
/// stride-`stride`, pad-`pad` convolution mapping the output size back to
/// the input size.
pub(crate) fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, cin, h, wd] = x.shape();
    let [wcin, cout, k, k2] = w.shape();
    if wcin != cin || k != k2 {
        return Err(Error::Input(format!(
            "transposed conv weight {:?} does not accept {cin} input channels",
            w.shape()
        )));
    }
    check_bias(b, cout)?;
    let ho = (h - 1) * stride + k;
    let wo = (wd - 1) * stride + k;
    if ho < 2 * pad + 1 || wo < 2 * pad + 1 {
        return Err(Error::Input("transposed conv padding too large".into()));
    }
    let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
    let geo = ConvGeometry {
        channels: cout,
        height: ho,
        width: wo,
        kernel: k,
        stride,
        pad,
    };
    debug_assert_eq!((geo.out_height(), geo.out_width()), (h, wd));
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let mut col = vec![0.0; geo.rows() * geo.cols()];
    for item in 0..n {
        // col = Wᵀ · x  with W viewed as Cin × (Cout·k·k)
        gemm(
            geo.rows(),
            cin,
            h * wd,
            w.data(),
            true,
            x.item(item),
            false,
            0.0,
            &mut col,
        );
        let dst = out.item_mut(item);
        col2im(&col, &geo, dst);
        if let Some(b) = b {
            for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
                let bias = b.data()[oc];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, k, _] = w.shape();
    let [_, _, ho, wo] = gout.shape();
    let geo = ConvGeometry {
        channels: cout,
        height: ho,
        width: wo,
        kernel: k,
        stride,
        pad,
    };
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([cout, 1, 1, 1]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dcol = vec![0.0; geo.rows() * geo.cols()];
    for item in 0..n {
        let g = gout.item(item);
        for (oc, plane) in g.chunks(ho * wo).enumerate() {
            db.data_mut()[oc] += plane.iter().sum::<f64>();
        }
        im2col(g, &geo, &mut dcol);
        // dW += x · dcolᵀ   (Cin × HW) · (HW × Cout·k·k)
        gemm(
            cin,
            h * wd,
            geo.rows(),
            x.item(item),
            false,
            &dcol,
            true,
            1.0,
            dw.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            // dX = W · dcol    (Cin × Cout·k·k) · (Cout·k·k × HW)
            gemm(
                cin,
                geo.rows(),
                h * wd,
                w.data(),
                false,
                &dcol,
                false,
                0.0,
                dx.item_mut(item),
            );
        }
    }
    (dx, dw, db)
}
