//! Fused CPU ops with closed-form backward passes: group normalization,
//! per-channel affine maps and nearest-neighbour upsampling.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("group norm expects a contiguous input"),
    }
}

/// Mean and `1/σ` of one group, accumulated in f64.
fn stats<T: WithDType>(g: &[T], eps: f64) -> (f64, f64) {
    let n = g.len() as f64;
    let mean = g.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = g.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

struct Normalize {
    group_len: usize,
    eps: f64,
}

struct NormalizeGrad {
    group_len: usize,
    eps: f64,
}

impl Normalize {
    fn run<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::from_f64(0.0); x.len()];
        for (g, o) in x.chunks_exact(self.group_len).zip(out.chunks_exact_mut(self.group_len)) {
            let (mean, inv) = stats(g, self.eps);
            for (v, y) in g.iter().zip(o) {
                *y = T::from_f64((v.to_f64() - mean) * inv);
            }
        }
        out
    }
}

impl NormalizeGrad {
    /// `dx = (dy - mean(dy) - y·mean(dy·y)) / σ` per group.
    fn run<T: WithDType>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let mut out = vec![T::from_f64(0.0); x.len()];
        let n = self.group_len as f64;
        for ((g, d), o) in x.chunks_exact(self.group_len).zip(dy.chunks_exact(self.group_len)).zip(out.chunks_exact_mut(self.group_len)) {
            let (mean, inv) = stats(g, self.eps);
            let mut sum_d = 0.0;
            let mut sum_dy = 0.0;
            for (v, dv) in g.iter().zip(d) {
                let y = (v.to_f64() - mean) * inv;
                sum_d += dv.to_f64();
                sum_dy += dv.to_f64() * y;
            }
            let (md, mdy) = (sum_d / n, sum_dy / n);
            for ((v, dv), r) in g.iter().zip(d).zip(o) {
                let y = (v.to_f64() - mean) * inv;
                *r = T::from_f64((dv.to_f64() - md - y * mdy) * inv);
            }
        }
        out
    }
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(self.run(contiguous(d, l)?)),
            CpuStorage::F64(d) => CpuStorage::F64(self.run(contiguous(d, l)?)),
            _ => candle_core::bail!("group norm supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = NormalizeGrad { group_len: self.group_len, eps: self.eps };
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "group-normalize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(d)) => CpuStorage::F32(self.run(contiguous(x, l1)?, contiguous(d, l2)?)),
            (CpuStorage::F64(x), CpuStorage::F64(d)) => CpuStorage::F64(self.run(contiguous(x, l1)?, contiguous(d, l2)?)),
            _ => candle_core::bail!("group norm supports f32 and f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `(outer, channels, inner)` view of a tensor whose channel axis is dim 1.
fn channel_dims(shape: &Shape) -> candle_core::Result<(usize, usize, usize)> {
    let dims = shape.dims();
    if dims.len() < 2 {
        candle_core::bail!("channel op expects at least two dimensions");
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

fn float_op1(s: &CpuStorage, l: &Layout, f32_f: impl Fn(&[f32]) -> Vec<f32>, f64_f: impl Fn(&[f64]) -> Vec<f64>) -> candle_core::Result<CpuStorage> {
    Ok(match s {
        CpuStorage::F32(d) => CpuStorage::F32(f32_f(contiguous(d, l)?)),
        CpuStorage::F64(d) => CpuStorage::F64(f64_f(contiguous(d, l)?)),
        _ => candle_core::bail!("fused ops support f32 and f64"),
    })
}

macro_rules! float_op2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            _ => candle_core::bail!("fused ops support f32 and f64"),
        }
    };
}

/// Per-channel `x·scale + shift`.
struct ChannelAffine;
/// Per-channel `x + shift`.
struct ChannelShift;
/// `x·scale` per channel (backward helper).
struct ChannelScale;
/// Sum over everything but the channel axis (backward helper).
struct ChannelSum;
/// `Σ a·b` per channel (backward helper).
struct ChannelDot;

fn affine<T: WithDType>(x: &[T], scale: Option<&[T]>, shift: Option<&[T]>, c: usize, inner: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for (i, row) in out.chunks_exact_mut(inner).enumerate() {
        let ch = i % c;
        let a = scale.map_or(T::one(), |s| s[ch]);
        let b = shift.map_or(T::zero(), |s| s[ch]);
        for v in row {
            *v = *v * a + b;
        }
    }
    out
}

fn channel_sum<T: WithDType>(x: &[T], y: Option<&[T]>, c: usize, inner: usize) -> Vec<T> {
    let mut acc = vec![0f64; c];
    for (i, row) in x.chunks_exact(inner).enumerate() {
        let s: f64 = match y {
            Some(y) => row.iter().zip(&y[i * inner..(i + 1) * inner]).map(|(a, b)| a.to_f64() * b.to_f64()).sum(),
            None => row.iter().map(|a| a.to_f64()).sum(),
        };
        acc[i % c] += s;
    }
    acc.into_iter().map(T::from_f64).collect()
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, inner) = channel_dims(l1.shape())?;
        if l2.shape().elem_count() != c || l3.shape().elem_count() != c {
            candle_core::bail!("channel affine parameter size mismatch");
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(affine(contiguous(x, l1)?, Some(contiguous(a, l2)?), Some(contiguous(b, l3)?), c, inner))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(affine(contiguous(x, l1)?, Some(contiguous(a, l2)?), Some(contiguous(b, l3)?), c, inner))
            }
            _ => candle_core::bail!("fused ops support f32 and f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, scale: &Tensor, _shift: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(&scale.contiguous()?, &ChannelScale)?;
        let dscale = grad.apply_op2_no_bwd(&x.contiguous()?, &ChannelDot)?.reshape(scale.shape())?;
        let dshift = grad.apply_op1_no_bwd(&ChannelSum)?.reshape(scale.shape())?;
        Ok((Some(dx), Some(dscale), Some(dshift)))
    }
}

impl CustomOp2 for ChannelShift {
    fn name(&self) -> &'static str {
        "channel-shift"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, inner) = channel_dims(l1.shape())?;
        if l2.shape().elem_count() != c {
            candle_core::bail!("channel shift size mismatch");
        }
        Ok((float_op2!(s1, l1, s2, l2, |x, b| affine(x, None, Some(b), c, inner)), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, shift: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dshift = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?.reshape(shift.shape())?;
        Ok((Some(grad.clone()), Some(dshift)))
    }
}

impl CustomOp2 for ChannelScale {
    fn name(&self) -> &'static str {
        "channel-scale"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, inner) = channel_dims(l1.shape())?;
        Ok((float_op2!(s1, l1, s2, l2, |x, a| affine(x, Some(a), None, c, inner)), l1.shape().clone()))
    }
}

impl CustomOp2 for ChannelDot {
    fn name(&self) -> &'static str {
        "channel-dot"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, inner) = channel_dims(l1.shape())?;
        Ok((float_op2!(s1, l1, s2, l2, |a, b| channel_sum(a, Some(b), c, inner)), Shape::from(c)))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, inner) = channel_dims(l.shape())?;
        Ok((float_op1(s, l, |x| channel_sum(x, None, c, inner), |x| channel_sum(x, None, c, inner))?, Shape::from(c)))
    }
}

/// `x·scale + shift` with `scale` and `shift` of length `x.dim(1)`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(scale, shift, ChannelAffine)?)
}

/// `x + shift` with `shift` of length `x.dim(1)`.
pub fn channel_shift(x: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(shift, ChannelShift)?)
}

/// Nearest-neighbour ×2 upsampling of `(B, C, H, W)`.
struct Upsample2;
/// Sum over 2×2 blocks, the adjoint of [`Upsample2`].
struct SumPool2;

fn upsample<T: WithDType>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * 4);
    for plane in x.chunks_exact(h * w) {
        for row in plane.chunks_exact(w) {
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + 2 * w);
        }
    }
    out
}

fn sum_pool<T: WithDType>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(x.len() / 4);
    for plane in x.chunks_exact(h * w) {
        for oy in 0..ho {
            let (r0, r1) = (&plane[2 * oy * w..(2 * oy + 1) * w], &plane[(2 * oy + 1) * w..(2 * oy + 2) * w]);
            for ox in 0..wo {
                out.push(r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        Ok((float_op1(s, l, |x| upsample(x, h, w), |x| upsample(x, h, w))?, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(SumPool2)?))
    }
}

impl CustomOp1 for SumPool2 {
    fn name(&self) -> &'static str {
        "sum-pool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("sum pool expects even spatial dims");
        }
        Ok((float_op1(s, l, |x| sum_pool(x, h, w), |x| sum_pool(x, h, w))?, Shape::from((b, c, h / 2, w / 2))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Upsample2)?))
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

/// Zero-mean, unit-variance normalization of each of `groups` contiguous
/// channel groups of a `(B, C, H, W)` tensor (no affine part).
pub fn group_normalize(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let op = Normalize { group_len: (c / groups) * h * w, eps };
    Ok(x.contiguous()?.apply_op1(op)?)
}
