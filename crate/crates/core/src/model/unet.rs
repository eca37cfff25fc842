use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::attention::{CrossAttention, PyramidTensors};
use super::layers::{silu, timestep_embedding, upsample2, Conv2d, GroupNorm, Linear, ResBlock};
use super::params::{ParamStore, Path};
use crate::error::{Error, Result};

/// Noisy image and source image, concatenated on the channel axis.
pub const INPUT_CHANNELS: usize = 6;
pub const OUTPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub token_dim: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            res_blocks_per_level: 2,
            attention_resolutions: vec![16, 8],
            heads: 4,
            token_dim: 128,
            time_embed_dim: 128,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    /// Feature resolution at each level; the middle block runs one halving
    /// below the last level.
    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len()).map(|l| self.image_size >> l).collect()
    }

    pub fn mid_resolution(&self) -> usize {
        self.image_size >> self.channel_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be non-empty and positive".into());
        }
        if self.base_channels == 0 || self.res_blocks_per_level == 0 || self.heads == 0 || self.token_dim == 0 {
            return bad("channel, block, head and token sizes must be positive".into());
        }
        if self.time_embed_dim < 2 {
            return bad("time embedding needs at least 2 dimensions".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << levels) {
            return bad(format!("image size {} must be divisible by 2^{levels}", self.image_size));
        }
        let reachable: Vec<usize> = (0..=levels).map(|l| self.image_size >> l).collect();
        for r in &self.attention_resolutions {
            if !reachable.contains(r) {
                return bad(format!("attention resolution {r} is not one of {reachable:?}"));
            }
        }
        for m in &self.channel_multipliers {
            let c = self.base_channels * m;
            if !c.is_multiple_of(self.norm_groups) {
                return bad(format!("{c} channels not divisible by {} norm groups", self.norm_groups));
            }
            if !c.is_multiple_of(self.heads) {
                return bad(format!("{c} channels not divisible by {} heads", self.heads));
            }
        }
        if !self.base_channels.is_multiple_of(self.norm_groups) {
            return bad("base channels must be divisible by norm groups".into());
        }
        Ok(())
    }

    fn attends_at(&self, res: usize) -> bool {
        self.attention_resolutions.contains(&res)
    }
}

/// Inputs of one denoiser evaluation, batch-first.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    /// `(B, 3, H, W)` noisy image in model space (`[-1, 1]` scale).
    pub z_t: &'a Tensor,
    /// One timestep per batch element, in `[1, T]`.
    pub t: &'a [usize],
    /// `(B, 3, H, W)` source image in model space.
    pub source: &'a Tensor,
    /// `(B, k, d)` prompt embeddings.
    pub tokens: &'a Tensor,
    pub masks: &'a PyramidTensors,
}

/// Anything that predicts the added noise. Samplers and the loss are generic
/// over it so that tests can plug in oracles and call counters.
pub trait NoisePredictor {
    fn predict(&self, input: &DenoiseInput<'_>) -> Result<Tensor>;
}

struct Block {
    res: ResBlock,
    attn: Option<CrossAttention>,
}

impl Block {
    fn forward(&self, x: &Tensor, temb: &Tensor, tokens: &Tensor, masks: &PyramidTensors) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(a) => {
                let (_, _, hh, _) = h.dims4()?;
                a.forward(&h, tokens, masks.get(hh)?)
            }
            None => Ok(h),
        }
    }
}

/// Conditional UNet ε_θ(z_t, t, I_src, tokens, masks).
pub struct Denoiser {
    config: UNetConfig,
    store: ParamStore,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<(Vec<Block>, Option<Conv2d>)>,
    mid: (ResBlock, Option<CrossAttention>, ResBlock),
    up: Vec<Vec<Block>>,
    up_convs: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser").field("config", &self.config).field("params", &self.num_params()).finish()
    }
}

impl Denoiser {
    pub fn init(config: &UNetConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(config, ParamStore::new(seed, dtype, device))
    }

    /// Builds the network around an existing store; every stored tensor must
    /// be consumed and have the expected shape.
    pub fn build(config: &UNetConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let c = config;
        let g = c.norm_groups;
        let root = Path::root("");
        let temb = c.time_embed_dim;
        let time_in = Linear::new(&mut store, &root.sub("time_in"), temb, temb, true)?;
        let time_out = Linear::new(&mut store, &root.sub("time_out"), temb, temb, true)?;
        let conv_in = Conv2d::new(&mut store, &root.sub("conv_in"), INPUT_CHANNELS, c.base_channels, 3, 1)?;

        let levels = c.channel_multipliers.len();
        let resolutions = c.level_resolutions();
        let mut skip_channels = vec![c.base_channels];
        let mut ch = c.base_channels;
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let out = c.base_channels * c.channel_multipliers[l];
            let res = resolutions[l];
            let path = root.sub("down").sub(l);
            let mut blocks = Vec::new();
            for i in 0..c.res_blocks_per_level {
                let bp = path.sub(i);
                let res_block = ResBlock::new(&mut store, &bp.sub("res"), ch, out, temb, g)?;
                let attn = if c.attends_at(res) {
                    Some(CrossAttention::new(&mut store, &bp.sub("attn"), out, c.token_dim, c.heads, g)?)
                } else {
                    None
                };
                blocks.push(Block { res: res_block, attn });
                ch = out;
                skip_channels.push(ch);
            }
            let ds = Conv2d::new(&mut store, &path.sub("downsample"), ch, ch, 3, 2)?;
            if l + 1 < levels {
                skip_channels.push(ch);
            }
            down.push((blocks, Some(ds)));
        }

        let mid_res = c.mid_resolution();
        let mp = root.sub("mid");
        let mid = (
            ResBlock::new(&mut store, &mp.sub("res0"), ch, ch, temb, g)?,
            if c.attends_at(mid_res) {
                Some(CrossAttention::new(&mut store, &mp.sub("attn"), ch, c.token_dim, c.heads, g)?)
            } else {
                None
            },
            ResBlock::new(&mut store, &mp.sub("res1"), ch, ch, temb, g)?,
        );

        let mut up = Vec::with_capacity(levels);
        let mut up_convs = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let out = c.base_channels * c.channel_multipliers[l];
            let res = resolutions[l];
            let path = root.sub("up").sub(l);
            up_convs.push(Conv2d::new(&mut store, &path.sub("upsample"), ch, ch, 3, 1)?);
            let mut blocks = Vec::new();
            for i in 0..=c.res_blocks_per_level {
                let skip = skip_channels.pop().expect("skip bookkeeping");
                let bp = path.sub(i);
                let res_block = ResBlock::new(&mut store, &bp.sub("res"), ch + skip, out, temb, g)?;
                let attn = if c.attends_at(res) {
                    Some(CrossAttention::new(&mut store, &bp.sub("attn"), out, c.token_dim, c.heads, g)?)
                } else {
                    None
                };
                blocks.push(Block { res: res_block, attn });
                ch = out;
            }
            up.push(blocks);
        }
        debug_assert!(skip_channels.is_empty());

        let norm_out = GroupNorm::new(&mut store, &root.sub("norm_out"), ch, g)?;
        let conv_out = Conv2d::new(&mut store, &root.sub("conv_out"), ch, OUTPUT_CHANNELS, 3, 1)?;
        store.ensure_all_used()?;
        Ok(Self { config: config.clone(), store, time_in, time_out, conv_in, down, mid, up, up_convs, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Resolutions at which a mask pyramid level is required.
    pub fn mask_resolutions(&self) -> Vec<usize> {
        self.config.attention_resolutions.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn denoise(&self, input: &DenoiseInput<'_>) -> Result<Tensor> {
        let c = &self.config;
        let (b, ch, h, w) = input.z_t.dims4()?;
        if ch != 3 || h != c.image_size || w != c.image_size {
            return Err(Error::ShapeMismatch(format!(
                "noisy input {:?}, model expects (B, 3, {s}, {s})",
                input.z_t.dims(),
                s = c.image_size
            )));
        }
        if input.source.dims() != input.z_t.dims() {
            return Err(Error::ShapeMismatch(format!(
                "source {:?} vs noisy input {:?}",
                input.source.dims(),
                input.z_t.dims()
            )));
        }
        if input.t.len() != b {
            return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {b}", input.t.len())));
        }
        let (tb, _, td) = input.tokens.dims3()?;
        if tb != b || td != c.token_dim {
            return Err(Error::ShapeMismatch(format!("token embeddings {:?}", input.tokens.dims())));
        }
        for r in self.mask_resolutions() {
            input.masks.get(r)?;
        }

        let temb = timestep_embedding(input.t, c.time_embed_dim, self.dtype(), self.device())?;
        let temb = self.time_out.forward(&silu(&self.time_in.forward(&temb)?)?)?;
        let tokens = input.tokens;
        let masks = input.masks;

        let x = Tensor::cat(&[input.z_t, input.source], 1)?;
        let mut h = self.conv_in.forward(&x)?;
        let mut skips = vec![h.clone()];
        let levels = self.down.len();
        for (l, (blocks, ds)) in self.down.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(&h, &temb, tokens, masks)?;
                skips.push(h.clone());
            }
            if let Some(ds) = ds {
                h = ds.forward(&h)?;
                if l + 1 < levels {
                    skips.push(h.clone());
                }
            }
        }

        h = self.mid.0.forward(&h, &temb)?;
        if let Some(a) = &self.mid.1 {
            let (_, _, hh, _) = h.dims4()?;
            h = a.forward(&h, tokens, masks.get(hh)?)?;
        }
        h = self.mid.2.forward(&h, &temb)?;

        for (blocks, up_conv) in self.up.iter().zip(&self.up_convs) {
            h = up_conv.forward(&upsample2(&h)?)?;
            for blk in blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                h = blk.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, tokens, masks)?;
            }
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, input: &DenoiseInput<'_>) -> Result<Tensor> {
        self.denoise(input)
    }
}
