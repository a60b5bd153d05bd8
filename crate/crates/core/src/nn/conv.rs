//! im2col + GEMM convolution kernels for `f32` CPU tensors.
//!
//! candle's CPU backward for `conv2d` routes through a direct transposed
//! convolution, which dominates training time for the generator. These ops
//! express the forward pass, the input gradient and the weight gradient as
//! matrix products over an unfolded column buffer, and register each other as
//! backward passes. `ConvWeightGrad` has no backward, so these ops do not
//! support second-order gradients. The gradient penalty does not need them:
//! the discriminator writes its input gradient out as explicit transposed
//! convolutions, which only have to be differentiated once.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    height: usize,
    width: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }
}

fn out_size(n: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if n + 2 * pad < kernel {
        candle_core::bail!("conv input extent {n} (pad {pad}) smaller than kernel {kernel}");
    }
    Ok((n + 2 * pad - kernel) / stride + 1)
}

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> Result<&'a [f32]> {
    let CpuStorage::F32(data) = s else {
        candle_core::bail!("{what}: only f32 storage is supported");
    };
    let Some((start, end)) = l.contiguous_offsets() else {
        candle_core::bail!("{what}: input must be contiguous");
    };
    Ok(&data[start..end])
}

/// Valid `o` range with `0 <= o * stride + offset < n` for `o in 0..out`.
fn valid_range(out: usize, stride: usize, offset: isize, n: usize) -> (usize, usize) {
    let n = n as isize;
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = if n - offset <= 0 {
        0
    } else {
        ((n - offset + s - 1) / s).min(out as isize)
    };
    (lo.max(0) as usize, hi.max(lo.max(0)) as usize)
}

fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let off_y = ky as isize - g.pad as isize;
                let off_x = kx as isize - g.pad as isize;
                let (y0, y1) = valid_range(g.out_h, s, off_y, g.height);
                let (x0, x1) = valid_range(g.out_w, s, off_x, g.width);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < y0 || oy >= y1 {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = (oy * s) as isize + off_y;
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    if s == 1 {
                        let ix0 = (x0 as isize + off_x) as usize;
                        line[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate().take(x1).skip(x0) {
                            *v = src[((ox * s) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, x: &mut [f32]) {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let xc = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let off_y = ky as isize - g.pad as isize;
                let off_x = kx as isize - g.pad as isize;
                let (y0, y1) = valid_range(g.out_h, s, off_y, g.height);
                let (x0, x1) = valid_range(g.out_w, s, off_x, g.width);
                for oy in y0..y1 {
                    let iy = ((oy * s) as isize + off_y) as usize;
                    let dst = &mut xc[iy * g.width..(iy + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = ((x0 * s) as isize + off_x) as usize;
                    if s == 1 {
                        for (d, v) in dst[ix0..ix0 + (x1 - x0)].iter_mut().zip(&line[x0..x1]) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[ix0..].iter_mut().step_by(s).zip(&line[x0..x1]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `dst (m x n, row-major) = [dst +] lhs * rhs`.
fn matmul(dst: &mut [f32], lhs: Mat, rhs: Mat, accumulate: bool) {
    let (m, k) = lhs.shape();
    let (k2, n) = rhs.shape();
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!(dst.len(), m * n, "destination size");
    let (lrs, lcs) = lhs.strides();
    let (rrs, rcs) = rhs.strides();
    // SAFETY: all three buffers hold exactly the extents described by their
    // shapes and strides, checked above, and `dst` does not alias the inputs.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.data.as_ptr(),
            lcs,
            lrs,
            rhs.data.as_ptr(),
            rcs,
            rrs,
            1.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn conv_forward(x: &[f32], w: &[f32], g: &Geometry) -> Vec<f32> {
    let mut out = vec![0f32; g.batch * g.c_out * g.out_plane()];
    let mut cols = vec![0f32; g.cols_rows() * g.out_plane()];
    let wm = Mat::new(w, g.c_out, g.cols_rows());
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()];
        im2col(xb, g, &mut cols);
        let ob = &mut out[b * g.c_out * g.out_plane()..(b + 1) * g.c_out * g.out_plane()];
        matmul(ob, wm, Mat::new(&cols, g.cols_rows(), g.out_plane()), false);
    }
    out
}

fn conv_input_grad(grad: &[f32], w: &[f32], g: &Geometry) -> Vec<f32> {
    let mut gx = vec![0f32; g.batch * g.c_in * g.in_plane()];
    let mut cols = vec![0f32; g.cols_rows() * g.out_plane()];
    let wt = Mat::new(w, g.c_out, g.cols_rows()).t();
    for b in 0..g.batch {
        let gb = &grad[b * g.c_out * g.out_plane()..(b + 1) * g.c_out * g.out_plane()];
        matmul(&mut cols, wt, Mat::new(gb, g.c_out, g.out_plane()), false);
        let xb = &mut gx[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()];
        col2im(&cols, g, xb);
    }
    gx
}

fn conv_weight_grad(x: &[f32], grad: &[f32], g: &Geometry) -> Vec<f32> {
    let mut gw = vec![0f32; g.c_out * g.cols_rows()];
    let mut cols = vec![0f32; g.cols_rows() * g.out_plane()];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()];
        im2col(xb, g, &mut cols);
        let gb = &grad[b * g.c_out * g.out_plane()..(b + 1) * g.c_out * g.out_plane()];
        matmul(
            &mut gw,
            Mat::new(gb, g.c_out, g.out_plane()),
            Mat::new(&cols, g.cols_rows(), g.out_plane()).t(),
            b > 0,
        );
    }
    gw
}

/// Square-kernel convolution, `x: (B, C, H, W)`, `w: (O, C, K, K)`, no bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dOp {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dOp {
    fn geometry(&self, x: &Layout, w: &Layout) -> Result<Geometry> {
        let (batch, c_in, height, width) = x.shape().dims4()?;
        let (c_out, wc, kh, kw) = w.shape().dims4()?;
        if wc != c_in || kh != kw {
            candle_core::bail!(
                "conv weight {:?} does not fit input {:?}",
                w.shape(),
                x.shape()
            );
        }
        Ok(Geometry {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel: kh,
            stride: self.stride,
            pad: self.pad,
            out_h: out_size(height, kh, self.stride, self.pad)?,
            out_w: out_size(width, kw, self.stride, self.pad)?,
        })
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1, l2)?;
        let out = conv_forward(f32_slice(s1, l1, "conv input")?, f32_slice(s2, l2, "conv weight")?, &g);
        Ok((
            CpuStorage::F32(out),
            Shape::from((g.batch, g.c_out, g.out_h, g.out_w)),
        ))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2(
            w,
            ConvInputGrad {
                stride: self.stride,
                pad: self.pad,
                height: h,
                width: wd,
            },
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad,
            &ConvWeightGrad {
                stride: self.stride,
                pad: self.pad,
                kernel: w.dim(2)?,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Adjoint of [`Conv2dOp`] with respect to its input; applied to a feature
/// map this is a transposed convolution with weight layout `(C_in, C_out, K, K)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvInputGrad {
    pub stride: usize,
    pub pad: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvInputGrad {
    fn geometry(&self, grad: &Layout, w: &Layout) -> Result<Geometry> {
        let (batch, c_out, out_h, out_w) = grad.shape().dims4()?;
        let (wo, c_in, kh, kw) = w.shape().dims4()?;
        if wo != c_out || kh != kw {
            candle_core::bail!(
                "weight {:?} does not fit gradient {:?}",
                w.shape(),
                grad.shape()
            );
        }
        let g = Geometry {
            batch,
            c_in,
            height: self.height,
            width: self.width,
            c_out,
            kernel: kh,
            stride: self.stride,
            pad: self.pad,
            out_h,
            out_w,
        };
        if out_size(g.height, kh, g.stride, g.pad)? != out_h
            || out_size(g.width, kw, g.stride, g.pad)? != out_w
        {
            candle_core::bail!("inconsistent transposed-conv geometry {g:?}");
        }
        Ok(g)
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1, l2)?;
        let out = conv_input_grad(f32_slice(s1, l1, "gradient")?, f32_slice(s2, l2, "weight")?, &g);
        Ok((
            CpuStorage::F32(out),
            Shape::from((g.batch, g.c_in, g.height, g.width)),
        ))
    }

    fn bwd(
        &self,
        grad_in: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let g_in = grad.apply_op2(
            w,
            Conv2dOp {
                stride: self.stride,
                pad: self.pad,
            },
        )?;
        let g_w = grad.apply_op2_no_bwd(
            grad_in,
            &ConvWeightGrad {
                stride: self.stride,
                pad: self.pad,
                kernel: w.dim(2)?,
            },
        )?;
        Ok((Some(g_in), Some(g_w)))
    }
}

/// Gradient of [`Conv2dOp`] with respect to its weight: `(x, grad) -> (O, C, K, K)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvWeightGrad {
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (batch, c_in, height, width) = l1.shape().dims4()?;
        let (gb, c_out, out_h, out_w) = l2.shape().dims4()?;
        let g = Geometry {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h,
            out_w,
        };
        if gb != batch
            || out_size(height, self.kernel, self.stride, self.pad)? != out_h
            || out_size(width, self.kernel, self.stride, self.pad)? != out_w
        {
            candle_core::bail!("inconsistent weight-gradient geometry {g:?}");
        }
        let out = conv_weight_grad(f32_slice(s1, l1, "input")?, f32_slice(s2, l2, "gradient")?, &g);
        Ok((
            CpuStorage::F32(out),
            Shape::from((c_out, c_in, self.kernel, self.kernel)),
        ))
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dOp { stride, pad })
}

/// Transposed convolution, `w: (C_in, C_out, K, K)`; output extent
/// `(n - 1) * stride - 2 * pad + K`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, _, h, wd) = x.dims4()?;
    let k = w.dim(2)?;
    let extent = |n: usize| (n - 1) * stride + k - 2 * pad;
    x.contiguous()?.apply_op2(
        &w.contiguous()?,
        ConvInputGrad {
            stride,
            pad,
            height: extent(h),
            width: extent(wd),
        },
    )
}
