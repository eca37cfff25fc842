//! Patch extraction for convolutions expressed as matrix products.
//!
//! `im2col` and `col2im` are adjoint linear maps, so each serves as the
//! backward pass of the other.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(col_index, image_index, len)` for every run of in-bounds taps
    /// of one image; runs are contiguous on both sides.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (k, s, pad) = (self.kernel, self.stride, self.pad);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    // Output columns whose input column lies inside the image.
                    let lo = pad.saturating_sub(kx).div_ceil(s);
                    let hi = ((self.width + pad).saturating_sub(kx)).div_ceil(s).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = (c * self.height + iy as usize) * self.width;
                        let col_row = (row * ho + oy) * wo;
                        if s == 1 {
                            f(col_row + lo, img_row + lo + kx - pad, hi - lo);
                        } else {
                            for ox in lo..hi {
                                f(col_row + ox, img_row + ox * s + kx - pad, 1);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let col_len = self.rows() * ho * wo;
        let img_len = self.channels * self.height * self.width;
        let mut out = vec![T::from_f64(0.0); batch * col_len];
        for b in 0..batch {
            let img = &src[b * img_len..(b + 1) * img_len];
            let col = &mut out[b * col_len..(b + 1) * col_len];
            self.for_each_run(|ci, ii, n| col[ci..ci + n].copy_from_slice(&img[ii..ii + n]));
        }
        out
    }

    fn col2im<T: WithDType>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let col_len = self.rows() * ho * wo;
        let img_len = self.channels * self.height * self.width;
        let mut out = vec![T::from_f64(0.0); batch * img_len];
        for b in 0..batch {
            let col = &src[b * col_len..(b + 1) * col_len];
            let img = &mut out[b * img_len..(b + 1) * img_len];
            self.for_each_run(|ci, ii, n| {
                for (d, v) in img[ii..ii + n].iter_mut().zip(&col[ci..ci + n]) {
                    *d += *v;
                }
            });
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (b, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (g.channels, g.height, g.width) {
            candle_core::bail!("im2col geometry mismatch");
        }
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((b, g.rows(), ho * wo));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.im2col(contiguous(d, layout)?, b)),
            CpuStorage::F64(d) => CpuStorage::F64(g.im2col(contiguous(d, layout)?, b)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (b, rows, n) = layout.shape().dims3()?;
        let (ho, wo) = g.out_hw();
        if rows != g.rows() || n != ho * wo {
            candle_core::bail!("col2im geometry mismatch");
        }
        let shape = Shape::from((b, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(g.col2im(contiguous(d, layout)?, b)),
            CpuStorage::F64(d) => CpuStorage::F64(g.col2im(contiguous(d, layout)?, b)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `(B, C, H, W)` to `(B, C·k·k, Ho·Wo)` with zero padding. Rows are ordered
/// `(channel, ky, kx)`, matching a `(C_out, C, k, k)` weight reshaped to
/// `(C_out, C·k·k)`.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, channels, height, width) = x.dims4()?;
    let g = Geometry { channels, height, width, kernel, stride, pad };
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Output spatial size of [`im2col`].
pub fn im2col_out_hw(height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
    Geometry { channels: 1, height, width, kernel, stride, pad }.out_hw()
}
