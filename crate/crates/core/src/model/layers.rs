use candle_core::{DType, Device, Tensor, D};

use super::fused::{channel_affine, channel_shift, group_normalize};
use super::im2col::{im2col, im2col_out_hw};
use super::params::{Init, ParamStore, Path};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, path: &Path, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.get_or_init(&path.name("weight"), (c_out, c_in, kernel, kernel), Init::Normal(fan_in.powf(-0.5)))?;
        let bias = store.get_or_init(&path.name("bias"), c_out, Init::Zeros)?;
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    /// Patch extraction followed by one matrix product per image.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let (c_out, _, k, _) = self.weight.dims4()?;
        let (ho, wo) = im2col_out_hw(h, w, k, self.stride, self.padding);
        let cols = if k == 1 && self.stride == 1 {
            x.reshape((b, c_in, h * w))?
        } else {
            im2col(x, k, self.stride, self.padding)?
        };
        let y = self.weight.reshape((c_out, c_in * k * k))?.broadcast_matmul(&cols)?;
        Ok(channel_shift(&y, &self.bias)?.reshape((b, c_out, ho, wo))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, path: &Path, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = store.get_or_init(&path.name("weight"), (d_out, d_in), Init::Normal((d_in as f64).powf(-0.5)))?;
        let bias = if bias { Some(store.get_or_init(&path.name("bias"), d_out, Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    /// `forward` computed in `dtype`; inputs and parameters are cast.
    pub fn forward_in(&self, x: &Tensor, dtype: DType) -> Result<Tensor> {
        let y = x.to_dtype(dtype)?.broadcast_matmul(&self.weight.to_dtype(dtype)?.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.to_dtype(dtype)?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, path: &Path, channels: usize, groups: usize) -> Result<Self> {
        let weight = store.get_or_init(&path.name("weight"), channels, Init::Ones)?;
        let bias = store.get_or_init(&path.name("bias"), channels, Init::Zeros)?;
        Ok(Self { weight, bias, groups, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        channel_affine(&group_normalize(x, self.groups, self.eps)?, &self.weight, &self.bias)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Softmax over the last dimension. The max shift is detached; it does not
/// change the value and contributes nothing to the gradient.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Sinusoidal embedding of integer timesteps, `[sin | cos]` halves.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * ti as f64).collect();
        v.extend(freqs.iter().map(|a| a.sin()));
        v.extend(freqs.iter().map(|a| a.cos()));
        v.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, path: &Path, c_in: usize, c_out: usize, temb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &path.sub("norm1"), c_in, groups)?,
            conv1: Conv2d::new(store, &path.sub("conv1"), c_in, c_out, 3, 1)?,
            time: Linear::new(store, &path.sub("time"), temb, c_out, true)?,
            norm2: GroupNorm::new(store, &path.sub("norm2"), c_out, groups)?,
            conv2: Conv2d::new(store, &path.sub("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out { Some(Conv2d::new(store, &path.sub("skip"), c_in, c_out, 1, 1)?) } else { None },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let (b, c, _, _) = h.dims4()?;
        let t = self.time.forward(&silu(temb)?)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

pub use super::fused::upsample2;
