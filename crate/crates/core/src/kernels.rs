//! Numeric kernels behind the differentiable ops. Everything here is plain
//! slice arithmetic; the tape in `autodiff` owns the bookkeeping.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Convolution geometry. `kernel` is (out_channels, in_channels, kh, kw).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: Shape,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(kernel: Shape) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Output (height, width) for an input of the given spatial size.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("stride and dilation must be positive"));
        }
        let extent = |size: usize, k: usize| -> i64 {
            let span = size as i64 + 2 * self.padding as i64 - self.dilation as i64 * (k as i64 - 1) - 1;
            span.div_euclid(self.stride as i64) + 1
        };
        let oh = extent(height, self.kernel.height);
        let ow = extent(width, self.kernel.width);
        if oh < 1 || ow < 1 || self.kernel.height == 0 || self.kernel.width == 0 {
            return Err(Error::EmptyOutput {
                op: "conv2d",
                height: oh,
                width: ow,
            });
        }
        Ok((oh as usize, ow as usize))
    }

    pub(crate) fn check(&self, input: Shape, kernel: Shape, bias: Shape) -> Result<Shape> {
        if kernel != self.kernel {
            return Err(Error::invalid(format!(
                "kernel tensor {kernel} does not match conv spec {}",
                self.kernel
            )));
        }
        if input.channels != kernel.channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dimension: "input channels",
                expected: kernel.channels,
                actual: input.channels,
            });
        }
        if bias.numel() != kernel.batch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dimension: "bias length",
                expected: kernel.batch,
                actual: bias.numel(),
            });
        }
        let (oh, ow) = self.output_size(input.height, input.width)?;
        Ok(Shape::new(input.batch, kernel.batch, oh, ow))
    }

    /// Half-open range of output coordinates whose tap `k` lands inside `[0, size)`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let shift = (k * self.dilation) as i64 - self.padding as i64;
        // need 0 <= o*s + shift <= size-1
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_incl = (size as i64 - 1 - shift).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out as i64);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let out_shape = spec.check(input.shape(), kernel.shape(), bias.shape())?;
    let is = input.shape();
    let ks = kernel.shape();
    let (oh, ow) = (out_shape.height, out_shape.width);
    let mut out = Tensor::zeros(out_shape);
    let x = input.data();
    let w = kernel.data();
    let b = bias.data();
    let od = out.data_mut();
    let in_plane = is.plane();
    let out_plane = oh * ow;
    for n in 0..is.batch {
        for oc in 0..ks.batch {
            let o_base = (n * ks.batch + oc) * out_plane;
            od[o_base..o_base + out_plane].fill(b[oc]);
            for ic in 0..ks.channels {
                let i_base = (n * is.channels + ic) * in_plane;
                for ky in 0..ks.height {
                    let (y_lo, y_hi) = spec.valid_range(ky, is.height, oh);
                    for kx in 0..ks.width {
                        let (x_lo, x_hi) = spec.valid_range(kx, is.width, ow);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let wv = w[((oc * ks.channels + ic) * ks.height + ky) * ks.width + kx];
                        for oy in y_lo..y_hi {
                            let iy = oy * spec.stride + ky * spec.dilation - spec.padding;
                            let orow = &mut od[o_base + oy * ow..o_base + oy * ow + ow];
                            let irow = &x[i_base + iy * is.width..i_base + (iy + 1) * is.width];
                            if spec.stride == 1 {
                                let ix0 = x_lo + kx * spec.dilation - spec.padding;
                                let n_cols = x_hi - x_lo;
                                for (o, &i) in orow[x_lo..x_hi].iter_mut().zip(&irow[ix0..ix0 + n_cols]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = ox * spec.stride + kx * spec.dilation - spec.padding;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution. Each destination is accumulated into, not overwritten.
pub struct ConvGrads<'a> {
    pub input: Option<&'a mut [f64]>,
    pub kernel: Option<&'a mut [f64]>,
    pub bias: Option<&'a mut [f64]>,
}

pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, spec: &ConvSpec, grads: ConvGrads<'_>) {
    let is = input.shape();
    let ks = kernel.shape();
    let os = grad_out.shape();
    let (oh, ow) = (os.height, os.width);
    let x = input.data();
    let w = kernel.data();
    let g = grad_out.data();
    let in_plane = is.plane();
    let out_plane = oh * ow;
    let ConvGrads {
        input: mut gin,
        kernel: mut gk,
        bias: gb,
    } = grads;

    if let Some(gb) = gb {
        for n in 0..is.batch {
            for (oc, slot) in gb.iter_mut().enumerate() {
                let base = (n * ks.batch + oc) * out_plane;
                *slot += g[base..base + out_plane].iter().sum::<f64>();
            }
        }
    }

    if gin.is_none() && gk.is_none() {
        return;
    }

    for n in 0..is.batch {
        for oc in 0..ks.batch {
            let o_base = (n * ks.batch + oc) * out_plane;
            for ic in 0..ks.channels {
                let i_base = (n * is.channels + ic) * in_plane;
                for ky in 0..ks.height {
                    let (y_lo, y_hi) = spec.valid_range(ky, is.height, oh);
                    for kx in 0..ks.width {
                        let (x_lo, x_hi) = spec.valid_range(kx, is.width, ow);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let k_idx = ((oc * ks.channels + ic) * ks.height + ky) * ks.width + kx;
                        let wv = w[k_idx];
                        let mut acc = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = oy * spec.stride + ky * spec.dilation - spec.padding;
                            let grow = &g[o_base + oy * ow..o_base + oy * ow + ow];
                            let row_start = i_base + iy * is.width;
                            if spec.stride == 1 {
                                let ix0 = x_lo + kx * spec.dilation - spec.padding;
                                let n_cols = x_hi - x_lo;
                                let gs = &grow[x_lo..x_hi];
                                if gk.is_some() {
                                    let irow = &x[row_start + ix0..row_start + ix0 + n_cols];
                                    acc += gs.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gin) = gin.as_deref_mut() {
                                    let dst = &mut gin[row_start + ix0..row_start + ix0 + n_cols];
                                    for (d, &gv) in dst.iter_mut().zip(gs) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = ox * spec.stride + kx * spec.dilation - spec.padding;
                                    acc += grow[ox] * x[row_start + ix];
                                    if let Some(gin) = gin.as_deref_mut() {
                                        gin[row_start + ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[k_idx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2, stride-2 max pooling. Returns the pooled tensor and, per output cell,
/// the flat input index that won (first in row-major order on ties).
pub fn max_pool2d_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.height % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "max_pool2d",
            dimension: "height (must be even)",
            expected: s.height + 1,
            actual: s.height,
        });
    }
    if s.width % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "max_pool2d",
            dimension: "width (must be even)",
            expected: s.width + 1,
            actual: s.width,
        });
    }
    if s.height == 0 || s.width == 0 {
        return Err(Error::EmptyOutput {
            op: "max_pool2d",
            height: 0,
            width: 0,
        });
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let out_shape = Shape::new(s.batch, s.channels, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let x = input.data();
    for nc in 0..s.batch * s.channels {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * s.width + 2 * ox;
                let candidates = [top, top + 1, top + s.width, top + s.width + 1];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(out_shape, out)?, argmax))
}

/// Source sample position for align-corners resampling: (lower index, upper index, fraction).
pub(crate) fn align_corners_coord(out_index: usize, in_size: usize, out_size: usize) -> (usize, usize, f64) {
    if in_size == 1 || out_size == 1 {
        return (0, 0, 0.0);
    }
    let src = out_index as f64 * (in_size - 1) as f64 / (out_size - 1) as f64;
    let lo = (src.floor() as usize).min(in_size - 1);
    let hi = (lo + 1).min(in_size - 1);
    let frac = if hi == lo { 0.0 } else { src - lo as f64 };
    (lo, hi, frac)
}

/// Align-corners bilinear resampling of each (batch, channel) plane.
pub fn upsample_bilinear_forward(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyOutput {
            op: "upsample_bilinear",
            height: out_h as i64,
            width: out_w as i64,
        });
    }
    if s.height == 0 || s.width == 0 {
        return Err(Error::invalid("cannot resample an empty map"));
    }
    if out_h == s.height && out_w == s.width {
        return Ok(input.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|o| align_corners_coord(o, s.height, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|o| align_corners_coord(o, s.width, out_w)).collect();
    let out_shape = Shape::new(s.batch, s.channels, out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    let x = input.data();
    for nc in 0..s.batch * s.channels {
        let base = nc * s.plane();
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let a = x[base + y0 * s.width + x0];
                let b = x[base + y0 * s.width + x1];
                let c = x[base + y1 * s.width + x0];
                let d = x[base + y1 * s.width + x1];
                let top = a + fx * (b - a);
                let bottom = c + fx * (d - c);
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn upsample_bilinear_backward(in_shape: Shape, grad_out: &Tensor, grad_in: &mut [f64]) {
    let os = grad_out.shape();
    let (out_h, out_w) = (os.height, os.width);
    if out_h == in_shape.height && out_w == in_shape.width {
        for (d, g) in grad_in.iter_mut().zip(grad_out.data()) {
            *d += g;
        }
        return;
    }
    let rows: Vec<_> = (0..out_h).map(|o| align_corners_coord(o, in_shape.height, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|o| align_corners_coord(o, in_shape.width, out_w)).collect();
    let g = grad_out.data();
    let w = in_shape.width;
    let mut k = 0;
    for nc in 0..in_shape.batch * in_shape.channels {
        let base = nc * in_shape.plane();
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let gv = g[k];
                k += 1;
                grad_in[base + y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                grad_in[base + y0 * w + x1] += gv * fx * (1.0 - fy);
                grad_in[base + y1 * w + x0] += gv * (1.0 - fx) * fy;
                grad_in[base + y1 * w + x1] += gv * fx * fy;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
