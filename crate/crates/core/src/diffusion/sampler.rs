use std::cell::Cell;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::{build_mask_pyramid, DenoiseInput, NoisePredictor, PyramidTensors};
use crate::taskvocab::{encode_prompt, EmbeddingTable, TaskPrompt, Vocab};

pub const DEFAULT_STEPS: usize = 4;
const X0_CLIP: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
#[derive(Default)]
pub enum Guidance {
    #[default]
    Off,
    Dual { s_img: f64, s_txt: f64 },
}


impl Guidance {
    pub fn nfe_per_step(&self) -> usize {
        match self {
            Guidance::Off => 1,
            Guidance::Dual { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: Guidance,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, guidance: Guidance::Off, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("sampler steps must be at least 1".into()));
        }
        if let Guidance::Dual { s_img, s_txt } = self.guidance {
            if !(s_img >= 0.0 && s_txt >= 0.0 && s_img.is_finite() && s_txt.is_finite()) {
                return Err(Error::InvalidConfig("guidance scales must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// `steps` timesteps evenly spaced from `T` down to 1.
pub fn timestep_grid(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidConfig(format!("sampler steps must be in [1, {t_max}], got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut grid: Vec<usize> = (0..steps)
        .map(|i| {
            let v = t_max as f64 - (t_max - 1) as f64 * i as f64 / (steps - 1) as f64;
            v.round() as usize
        })
        .collect();
    grid.dedup();
    Ok(grid)
}

/// Deterministic DDIM update from `t` to `t_prev` (`t_prev == 0` yields the
/// clean estimate).
pub fn ddim_step(z_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidConfig(format!("DDIM step must decrease t, got {t} -> {t_prev}")));
    }
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t_prev);
    let x0 = ((z_t - (eps_hat * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?.clamp(-X0_CLIP, X0_CLIP)?;
    Ok(((x0 * a_prev.sqrt())? + (eps_hat * (1.0 - a_prev).sqrt())?)?)
}

/// Two-scale classifier-free guidance over image and text conditioning.
pub fn cfg_combine(eps_uncond: &Tensor, eps_img: &Tensor, eps_full: &Tensor, s_img: f64, s_txt: f64) -> Result<Tensor> {
    let img_term = ((eps_img - eps_uncond)? * s_img)?;
    let txt_term = ((eps_full - eps_img)? * s_txt)?;
    Ok(((eps_uncond + img_term)? + txt_term)?)
}

/// Maps `[0, 1]` pixels to a `(1, 3, H, W)` tensor in `[-1, 1]`.
pub fn image_to_tensor(img: &Image, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dims();
    let chw: Vec<f32> = (0..3)
        .flat_map(|c| img.data().iter().skip(c).step_by(3).map(|v| v * 2.0 - 1.0).collect::<Vec<_>>())
        .collect();
    Ok(Tensor::from_vec(chw, (1, 3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`image_to_tensor`] for one `(3, H, W)` or `(1, 3, H, W)`
/// tensor, clamped to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let chw: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut data = vec![0f32; h * w * 3];
    for ch in 0..3 {
        for i in 0..h * w {
            data[i * 3 + ch] = ((chw[ch * h * w + i] + 1.0) * 0.5).clamp(0.0, 1.0);
        }
    }
    Image::from_raw(w, h, data)
}

/// Standard normal noise of shape `(1, 3, H, W)` from a seeded stream.
pub fn seeded_noise(seed: u64, height: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..3 * height * width).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, (1, 3, height, width), device)?.to_dtype(dtype)?)
}

/// Prompt-independent pieces needed to turn an edit request into tensors.
#[derive(Clone, Copy)]
pub struct Conditioner<'a> {
    pub vocab: &'a Vocab,
    pub table: &'a EmbeddingTable,
    pub resolutions: &'a [usize],
    pub image_size: usize,
}

/// Model-ready conditioning for a batch.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub source: Tensor,
    pub tokens: Tensor,
    pub masks: PyramidTensors,
}

impl Conditioner<'_> {
    pub fn device(&self) -> &Device {
        self.table.var().device()
    }

    pub fn dtype(&self) -> DType {
        self.table.var().dtype()
    }

    fn check_size(&self, img: &Image) -> Result<()> {
        if img.dims() != (self.image_size, self.image_size) {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, model expects {s}x{s}",
                img.width(),
                img.height(),
                s = self.image_size
            )));
        }
        Ok(())
    }

    pub fn condition(&self, source: &Image, prompt: &TaskPrompt, masks: &[Mask]) -> Result<Conditioning> {
        self.check_size(source)?;
        let pyramid = build_mask_pyramid(masks, prompt, self.resolutions, self.image_size)?;
        Ok(Conditioning {
            source: image_to_tensor(source, self.dtype(), self.device())?,
            tokens: encode_prompt(prompt, self.vocab, self.table)?.unsqueeze(0)?,
            masks: pyramid.to_tensors(self.device())?,
        })
    }

    /// Stacks per-item conditionings along the batch axis.
    pub fn stack(items: &[Conditioning]) -> Result<Conditioning> {
        let src: Vec<&Tensor> = items.iter().map(|c| &c.source).collect();
        let tok: Vec<&Tensor> = items.iter().map(|c| &c.tokens).collect();
        let masks: Vec<PyramidTensors> = items.iter().map(|c| c.masks.clone()).collect();
        Ok(Conditioning {
            source: Tensor::cat(&src, 0)?,
            tokens: Tensor::cat(&tok, 0)?,
            masks: PyramidTensors::stack(&masks)?,
        })
    }

    /// Same batch with the task prompt replaced by all-SKIP tokens.
    pub fn drop_text(&self, cond: &Conditioning) -> Result<Conditioning> {
        let b = cond.source.dim(0)?;
        let skip = TaskPrompt::all_skip(self.vocab);
        let one = self.condition_tokens_only(&skip)?;
        let mut items = Vec::with_capacity(b);
        items.resize(b, one);
        let stacked = Self::stack(&items)?;
        Ok(Conditioning { source: cond.source.clone(), tokens: stacked.tokens, masks: stacked.masks })
    }

    /// Same batch with text dropped and the source image zeroed.
    pub fn drop_all(&self, cond: &Conditioning) -> Result<Conditioning> {
        let c = self.drop_text(cond)?;
        Ok(Conditioning { source: c.source.zeros_like()?, ..c })
    }

    fn condition_tokens_only(&self, prompt: &TaskPrompt) -> Result<Conditioning> {
        let pyramid = build_mask_pyramid(&[], prompt, self.resolutions, self.image_size)?;
        Ok(Conditioning {
            source: Tensor::zeros((1, 3, self.image_size, self.image_size), self.dtype(), self.device())?,
            tokens: encode_prompt(prompt, self.vocab, self.table)?.unsqueeze(0)?,
            masks: pyramid.to_tensors(self.device())?,
        })
    }
}

/// Counts network evaluations (one per batched call).
#[derive(Debug, Default)]
pub struct NfeCounter(Cell<usize>);

impl NfeCounter {
    pub fn get(&self) -> usize {
        self.0.get()
    }

    fn bump(&self) {
        self.0.set(self.0.get() + 1);
    }
}

fn predict<P: NoisePredictor + ?Sized>(model: &P, z: &Tensor, t: usize, cond: &Conditioning, nfe: &NfeCounter) -> Result<Tensor> {
    let b = z.dim(0)?;
    let ts = vec![t; b];
    nfe.bump();
    model.predict(&DenoiseInput { z_t: z, t: &ts, source: &cond.source, tokens: &cond.tokens, masks: &cond.masks })
}

/// One edit to run through the sampler.
#[derive(Debug, Clone)]
pub struct EditJob {
    pub source: Image,
    pub prompt: TaskPrompt,
    pub masks: Vec<Mask>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub images: Vec<Image>,
    /// Network evaluations for the whole batch.
    pub nfe: usize,
}

/// Batched DDIM sampling. Each job draws its starting noise from its own seed.
/// `config.seed` is ignored here; see [`sample`].
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &Conditioner<'_>,
    jobs: &[EditJob],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleOutput> {
    config.validate()?;
    if jobs.is_empty() {
        return Ok(SampleOutput { images: Vec::new(), nfe: 0 });
    }
    let grid = timestep_grid(schedule.timesteps(), config.steps)?;
    let items = jobs.iter().map(|j| cond.condition(&j.source, &j.prompt, &j.masks)).collect::<Result<Vec<_>>>()?;
    let full = Conditioner::stack(&items)?;
    let guided = match config.guidance {
        Guidance::Off => None,
        Guidance::Dual { s_img, s_txt } => Some((cond.drop_all(&full)?, cond.drop_text(&full)?, s_img, s_txt)),
    };
    let s = cond.image_size;
    let noise = jobs
        .iter()
        .map(|j| seeded_noise(j.seed, s, s, cond.dtype(), cond.device()))
        .collect::<Result<Vec<_>>>()?;
    let mut z = Tensor::cat(&noise, 0)?;
    let nfe = NfeCounter::default();
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let eps = match &guided {
            None => predict(model, &z, t, &full, &nfe)?,
            Some((uncond, img_only, s_img, s_txt)) => {
                let e_u = predict(model, &z, t, uncond, &nfe)?;
                let e_i = predict(model, &z, t, img_only, &nfe)?;
                let e_f = predict(model, &z, t, &full, &nfe)?;
                cfg_combine(&e_u, &e_i, &e_f, *s_img, *s_txt)?
            }
        };
        // Parameters are tracked variables; detaching drops the graph so
        // memory stays flat across steps.
        z = ddim_step(&z, &eps.detach(), t, t_prev, schedule)?;
    }
    let images = (0..jobs.len()).map(|i| tensor_to_image(&z.get(i)?)).collect::<Result<Vec<_>>>()?;
    Ok(SampleOutput { images, nfe: nfe.get() })
}

/// Single-edit sampling seeded by `config.seed`. Returns the image and NFE.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &Conditioner<'_>,
    source: &Image,
    prompt: &TaskPrompt,
    masks: &[Mask],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<(Image, usize)> {
    let job = EditJob { source: source.clone(), prompt: prompt.clone(), masks: masks.to_vec(), seed: config.seed };
    let out = sample_batch(model, cond, std::slice::from_ref(&job), config, schedule)?;
    Ok((out.images.into_iter().next().expect("one job"), out.nfe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn grid_endpoints() {
        let g = timestep_grid(1000, 50).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 1000);
        assert_eq!(*g.last().unwrap(), 1);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timestep_grid(1000, 1).unwrap(), vec![1000]);
        assert!(timestep_grid(1000, 0).is_err());
        assert!(timestep_grid(10, 11).is_err());
    }

    #[test]
    fn ddim_with_exact_noise_recovers_x0() {
        let s = make_schedule(1000, "linear").unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[[[0.3f64, -0.7]]]], &dev).unwrap();
        let eps = Tensor::new(&[[[[1.1f64, 0.4]]]], &dev).unwrap();
        let z = crate::diffusion::q_sample(&x0, &[700], &eps, &s).unwrap();
        let out: Vec<f64> = ddim_step(&z, &eps, 700, 0, &s).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!((out[0] - 0.3).abs() < 1e-12 && (out[1] + 0.7).abs() < 1e-12);
        assert!(ddim_step(&z, &eps, 10, 10, &s).is_err());
    }

    #[test]
    fn cfg_unit_scales_give_full_prediction() {
        let dev = Device::Cpu;
        let u = Tensor::new(&[1.0f64, 2.0], &dev).unwrap();
        let i = Tensor::new(&[3.0f64, -1.0], &dev).unwrap();
        let f = Tensor::new(&[0.5f64, 0.25], &dev).unwrap();
        let out: Vec<f64> = cfg_combine(&u, &i, &f, 1.0, 1.0).unwrap().to_vec1().unwrap();
        assert_eq!(out, vec![0.5, 0.25]);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = Image::from_fn(5, 5, |x, y| [x as f32 / 4.0, y as f32 / 4.0, 0.5]);
        let t = image_to_tensor(&img, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 5, 5]);
        let back = tensor_to_image(&t).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
