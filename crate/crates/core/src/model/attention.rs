//! Cross-attention over task tokens with per-slot spatial confinement.
//!
//! Each prompt slot owns a boolean grid at every attention resolution. For a
//! query cell outside slot `i`'s grid, the pre-softmax score of token `i` is
//! overwritten with the minimum score of that head's full score matrix, so
//! the token can never out-compete any unmasked entry there.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use super::layers::{softmax_last, GroupNorm, Linear};
use super::params::{ParamStore, Path};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::taskvocab::{Slot, TaskPrompt};

/// Per-resolution, per-slot downsampled masks. SKIP slots get all-true grids.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    levels: BTreeMap<usize, Vec<Mask>>,
}

impl MaskPyramid {
    pub fn resolutions(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels.keys().copied()
    }

    pub fn level(&self, resolution: usize) -> Option<&[Mask]> {
        self.levels.get(&resolution).map(|v| v.as_slice())
    }

    /// `(1, 1, r·r, k)` u8 tensor: entry `[q, i]` is 1 when query cell `q`
    /// (row-major) lies inside slot `i`'s grid.
    pub fn level_tensor(&self, resolution: usize, device: &Device) -> Result<Tensor> {
        let grids = self
            .levels
            .get(&resolution)
            .ok_or_else(|| Error::ShapeMismatch(format!("mask pyramid has no level at resolution {resolution}")))?;
        grids_to_tensor(grids, device)
    }

    /// All levels as tensors, ready for a batch of one.
    pub fn to_tensors(&self, device: &Device) -> Result<PyramidTensors> {
        let mut out = BTreeMap::new();
        for &r in self.levels.keys() {
            out.insert(r, self.level_tensor(r, device)?);
        }
        Ok(PyramidTensors(out))
    }

    /// Same pyramid with slots reordered: slot `i` of the result is slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            levels: self.levels.iter().map(|(&r, g)| (r, perm.iter().map(|&i| g[i].clone()).collect())).collect(),
        }
    }
}

pub fn grids_to_tensor(grids: &[Mask], device: &Device) -> Result<Tensor> {
    let k = grids.len();
    let (w, h) = grids.first().map(|g| g.dims()).unwrap_or((0, 0));
    let q = w * h;
    let mut v = vec![0u8; q * k];
    for (i, g) in grids.iter().enumerate() {
        for (qi, &b) in g.data().iter().enumerate() {
            v[qi * k + i] = b as u8;
        }
    }
    Ok(Tensor::from_vec(v, (1, 1, q, k), device)?)
}

/// Batched pyramid: resolution → `(B, 1, r·r, k)` u8 tensor.
#[derive(Debug, Clone)]
pub struct PyramidTensors(pub BTreeMap<usize, Tensor>);

impl PyramidTensors {
    pub fn get(&self, resolution: usize) -> Result<&Tensor> {
        self.0
            .get(&resolution)
            .ok_or_else(|| Error::ShapeMismatch(format!("no mask pyramid level for resolution {resolution}")))
    }

    pub fn stack(items: &[PyramidTensors]) -> Result<PyramidTensors> {
        let first = items.first().ok_or_else(|| Error::ShapeMismatch("empty pyramid batch".into()))?;
        let mut out = BTreeMap::new();
        for &r in first.0.keys() {
            let parts = items.iter().map(|p| p.get(r).cloned()).collect::<Result<Vec<_>>>()?;
            out.insert(r, Tensor::cat(&parts, 0)?);
        }
        Ok(PyramidTensors(out))
    }
}

/// Max-pool a full-resolution mask onto an `r×r` grid: a cell is inside when
/// any pixel it covers is inside.
pub fn downsample_mask(mask: &Mask, resolution: usize) -> Result<Mask> {
    let (w, h) = mask.dims();
    if resolution == 0 || w % resolution != 0 || h % resolution != 0 || w != h {
        return Err(Error::ShapeMismatch(format!("cannot pool a {w}x{h} mask onto a {resolution}x{resolution} grid")));
    }
    let f = w / resolution;
    let mut out = Mask::new(resolution, resolution);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                out.set(x / f, y / f, true);
            }
        }
    }
    Ok(out)
}

pub fn build_mask_pyramid(masks: &[Mask], prompt: &TaskPrompt, resolutions: &[usize], image_size: usize) -> Result<MaskPyramid> {
    prompt.validate_masks(masks.len())?;
    for (task, idx) in prompt.active() {
        let m = &masks[idx];
        if m.dims() != (image_size, image_size) {
            return Err(Error::ShapeMismatch(format!(
                "mask for {task} is {}x{}, image is {image_size}x{image_size}",
                m.width(),
                m.height()
            )));
        }
    }
    let mut levels = BTreeMap::new();
    for &r in resolutions {
        let grids = prompt
            .slots()
            .iter()
            .map(|slot| match *slot {
                Slot::Active { mask_index, .. } => downsample_mask(&masks[mask_index], r),
                Slot::Skip => Ok(Mask::full(r, r)),
            })
            .collect::<Result<Vec<_>>>()?;
        levels.insert(r, grids);
    }
    Ok(MaskPyramid { levels })
}

/// Overwrites out-of-grid scores with the per-head minimum.
///
/// `scores`: `(B, heads, Q, K)`, already scaled by `1/√d_head`.
/// `grid`: `(B or 1, 1, Q, K)` u8, shared across heads. In-grid entries are
/// passed through untouched (bitwise).
pub fn apply_ca_mask(scores: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (b, heads, q, k) = scores.dims4()?;
    let (gb, gh, gq, gk) = grid.dims4()?;
    if gh != 1 || gq != q || gk != k || (gb != b && gb != 1) {
        return Err(Error::ShapeMismatch(format!(
            "attention scores {:?} vs mask grid {:?}",
            scores.dims(),
            grid.dims()
        )));
    }
    let min = scores.flatten_from(2)?.min_keepdim(2)?.unsqueeze(3)?.broadcast_as((b, heads, q, k))?;
    // Skip tokens repeat, so the minimum is often tied. The gradient is split
    // evenly across ties; `smooth - smooth` keeps the value bit-exact.
    let ties = scores.eq(&min)?.to_dtype(scores.dtype())?;
    let count = ties.flatten_from(2)?.sum_keepdim(2)?.unsqueeze(3)?;
    let smooth = (scores * &ties)?.flatten_from(2)?.sum_keepdim(2)?.unsqueeze(3)?.broadcast_div(&count)?;
    let smooth = smooth.broadcast_as((b, heads, q, k))?;
    let min = (min.detach() + (&smooth - smooth.detach())?)?;
    let grid = grid.to_dtype(DType::U8)?.broadcast_as((b, heads, q, k))?;
    Ok(grid.where_cond(scores, &min)?)
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    proj: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, path: &Path, channels: usize, token_dim: usize, heads: usize, groups: usize) -> Result<Self> {
        if !channels.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            norm: GroupNorm::new(store, &path.sub("norm"), channels, groups)?,
            to_q: Linear::new(store, &path.sub("to_q"), channels, channels, false)?,
            to_k: Linear::new(store, &path.sub("to_k"), token_dim, channels, false)?,
            to_v: Linear::new(store, &path.sub("to_v"), token_dim, channels, false)?,
            proj: Linear::new(store, &path.sub("proj"), channels, channels, true)?,
            heads,
        })
    }

    /// Pre-softmax scaled scores `(B, heads, HW, k)` and the per-head values,
    /// both f64.
    fn scores_and_values(&self, h: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, q, c) = h.dims3()?;
        let k = tokens.dim(1)?;
        let hd = c / self.heads;
        let split = |x: Tensor, n: usize| -> Result<Tensor> {
            Ok(x.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let qh = split(self.to_q.forward(h)?.to_dtype(DType::F64)?, q)?;
        let kh = split(self.to_k.forward_in(tokens, DType::F64)?, k)?;
        let vh = split(self.to_v.forward_in(tokens, DType::F64)?, k)?;
        let scores = (qh.matmul(&kh.t()?)? * (hd as f64).powf(-0.5))?;
        Ok((scores, vh))
    }

    /// `x`: `(B, C, H, W)`; `tokens`: `(B, k, d)`; `grid`: `(B, 1, H·W, k)`.
    pub fn forward(&self, x: &Tensor, tokens: &Tensor, grid: &Tensor) -> Result<Tensor> {
        let (b, c, hgt, wid) = x.dims4()?;
        let h = self.norm.forward(x)?.reshape((b, c, hgt * wid))?.transpose(1, 2)?.contiguous()?;
        let (scores, vh) = self.scores_and_values(&h, tokens)?;
        let out = mix(&scores, Some(grid), &vh, x.dtype())?.transpose(1, 2)?.reshape((b, hgt * wid, c))?;
        let out = self.proj.forward(&out)?.transpose(1, 2)?.reshape((b, c, hgt, wid))?;
        Ok((x + out)?)
    }

    /// Attention output before the residual projection, for inspection.
    pub fn attend(&self, features: &Tensor, tokens: &Tensor, grid: Option<&Tensor>) -> Result<Tensor> {
        let (scores, vh) = self.scores_and_values(features, tokens)?;
        let (b, _, q, _) = scores.dims4()?;
        let c = features.dim(2)?;
        Ok(mix(&scores, grid, &vh, features.dtype())?.transpose(1, 2)?.reshape((b, q, c))?)
    }
}

/// Masked softmax over the k tokens and the weighted sum of values, in f64.
/// Everything that touches slots runs in f64, so the result is cast back to
/// `dtype` without depending on slot order.
fn mix(scores: &Tensor, grid: Option<&Tensor>, values: &Tensor, dtype: DType) -> Result<Tensor> {
    let scores = match grid {
        Some(g) => apply_ca_mask(scores, g)?,
        None => scores.clone(),
    };
    let out = softmax_last(&scores)?.matmul(values)?;
    Ok(out.to_dtype(dtype)?)
}
