//! 2-D cross-correlation with zero padding, lowered to f64 GEMM through im2col.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Filter geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: (usize, usize), pad: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            pad_h: pad.0,
            pad_w: pad.1,
            stride_h: stride.0,
            stride_w: stride.1,
        }
    }

    /// 3×3, zero padding 1.
    pub const fn square() -> Self {
        Self::new((3, 3), (1, 1), (1, 1))
    }

    /// 1×3, padding (0, 1): needs only the current row.
    pub const fn row() -> Self {
        Self::new((1, 3), (0, 1), (1, 1))
    }

    /// 3×1, padding (1, 0).
    pub const fn column() -> Self {
        Self::new((3, 1), (1, 0), (1, 1))
    }

    pub const fn pointwise() -> Self {
        Self::new((1, 1), (0, 0), (1, 1))
    }

    pub const fn with_stride(mut self, stride: usize) -> Self {
        self.stride_h = stride;
        self.stride_w = stride;
        self
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::Param(format!("degenerate conv geometry {self:?}")));
        }
        Ok(())
    }

    /// Output extent along one axis, or an error if the window never fits.
    fn out_extent(axis: &str, input: usize, kernel: usize, pad: usize, stride: usize) -> Result<usize> {
        let padded = input + 2 * pad;
        if padded < kernel {
            return Err(Error::shape(
                "conv2d",
                axis,
                format!(">= {kernel} after padding"),
                padded,
            ));
        }
        Ok((padded - kernel) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        Ok((
            Self::out_extent("height", h, self.kernel_h, self.pad_h, self.stride_h)?,
            Self::out_extent("width", w, self.kernel_w, self.pad_w, self.stride_w)?,
        ))
    }
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn k(&self, g: &ConvGeometry) -> usize {
        self.cin * g.kernel_area()
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn check(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeometry) -> Result<Dims> {
    if x.rank() != 4 {
        return Err(Error::shape("conv2d", "input rank", 4, x.rank()));
    }
    if w.rank() != 4 {
        return Err(Error::shape("conv2d", "weight rank", 4, w.rank()));
    }
    let [n, cin, h, wd] = x.nchw();
    let [cout, wcin, kh, kw] = w.nchw();
    if wcin != cin {
        return Err(Error::shape("conv2d", "input channels (axis 1)", wcin, cin));
    }
    if kh != g.kernel_h {
        return Err(Error::shape("conv2d", "kernel height (weight axis 2)", g.kernel_h, kh));
    }
    if kw != g.kernel_w {
        return Err(Error::shape("conv2d", "kernel width (weight axis 3)", g.kernel_w, kw));
    }
    if let Some(b) = b {
        if b.numel() != cout {
            return Err(Error::shape("conv2d", "bias length", cout, b.numel()));
        }
    }
    let (oh, ow) = g.output_hw(h, wd)?;
    Ok(Dims {
        n,
        cin,
        h,
        w: wd,
        cout,
        oh,
        ow,
    })
}

/// Lowers `x` to a `[K, N·P]` column matrix.
fn im2col(x: &[f32], d: &Dims, g: &ConvGeometry) -> Vec<f64> {
    let p = d.p();
    let np = d.n * p;
    let mut col = vec![0.0f64; d.k(g) * np];
    for ci in 0..d.cin {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut col[row * np..(row + 1) * np];
                for n in 0..d.n {
                    let plane = &x[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                    for oy in 0..d.oh {
                        let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * d.w..][..d.w];
                        let dst = &mut dst_row[n * p + oy * d.ow..][..d.ow];
                        for (ox, out) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                            if ix >= 0 && ix < d.w as isize {
                                *out = src[ix as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], d: &Dims, g: &ConvGeometry) -> Vec<f64> {
    let p = d.p();
    let np = d.n * p;
    let mut dx = vec![0.0f64; d.n * d.cin * d.h * d.w];
    for ci in 0..d.cin {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &dcol[row * np..(row + 1) * np];
                for n in 0..d.n {
                    let plane = &mut dx[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                    for oy in 0..d.oh {
                        let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * d.w..][..d.w];
                        let src = &src_row[n * p + oy * d.ow..][..d.ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `c[m×n] = a[m×k] · b[k×n]` with explicit strides, f64 accumulation.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size `a`, `b` and `c` so every strided index stays in bounds.
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeometry) -> Result<Tensor> {
    let d = check(x, w, b, g)?;
    let k = d.k(g);
    let p = d.p();
    let np = d.n * p;
    let col = im2col(x.data(), &d, g);
    let w64: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f64; d.cout * np];
    gemm(d.cout, k, np, &w64, (k, 1), &col, (np, 1), &mut out, false);

    let mut y = vec![0.0f32; d.n * d.cout * p];
    for co in 0..d.cout {
        let bias = b.map_or(0.0, |b| b.data()[co] as f64);
        for n in 0..d.n {
            let src = &out[co * np + n * p..][..p];
            let dst = &mut y[(n * d.cout + co) * p..][..p];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v + bias) as f32;
            }
        }
    }
    Tensor::new(&[d.n, d.cout, d.oh, d.ow], y)
}

/// Gradients of a convolution. Entries are `None` when not requested.
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeometry,
    dy: &Tensor,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let d = check(x, w, None, g)?;
    let k = d.k(g);
    let p = d.p();
    let np = d.n * p;
    let (need_dx, need_dw, need_db) = need;
    if dy.dims() != [d.n, d.cout, d.oh, d.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            "output gradient",
            format!("{:?}", [d.n, d.cout, d.oh, d.ow]),
            format!("{:?}", dy.dims()),
        ));
    }

    // dY as [Cout, N·P]
    let mut dy64 = vec![0.0f64; d.cout * np];
    for n in 0..d.n {
        for co in 0..d.cout {
            let src = &dy.data()[(n * d.cout + co) * p..][..p];
            let dst = &mut dy64[co * np + n * p..][..p];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v as f64;
            }
        }
    }

    let db = need_db.then(|| {
        let sums: Vec<f32> = dy64
            .chunks(np)
            .map(|row| row.iter().sum::<f64>() as f32)
            .collect();
        Tensor::from_vec(sums)
    });

    let dw = if need_dw {
        let col = im2col(x.data(), &d, g);
        let mut dw64 = vec![0.0f64; d.cout * k];
        gemm(d.cout, np, k, &dy64, (np, 1), &col, (1, np), &mut dw64, false);
        Some(Tensor::new(
            w.dims(),
            dw64.into_iter().map(|v| v as f32).collect(),
        )?)
    } else {
        None
    };

    let dx = if need_dx {
        let w64: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
        let mut dcol = vec![0.0f64; k * np];
        gemm(k, d.cout, np, &w64, (1, k), &dy64, (np, 1), &mut dcol, false);
        let dx64 = col2im(&dcol, &d, g);
        Some(Tensor::new(
            x.dims(),
            dx64.into_iter().map(|v| v as f32).collect(),
        )?)
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}
