use std::time::Instant;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::sampler::{Conditioner, Conditioning};
use super::schedule::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{DenoiseInput, NoisePredictor};
use crate::pipeline::EditModel;
use crate::synthgen::AtomicSample;
use crate::taskvocab::{make_training_prompt, TaskPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_drop_text: f64,
    pub p_drop_image: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 4,
            lr: 5e-5,
            weight_decay: 0.01,
            p_drop_text: 0.05,
            p_drop_image: 0.05,
            seed: 0,
            log_every: 100,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.p_drop_text) || !(0.0..1.0).contains(&self.p_drop_image) {
            return bad("dropout probabilities must lie in [0, 1)");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// One training example with all of its random draws fixed.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub sample: &'a AtomicSample,
    pub t: usize,
    pub prompt: TaskPrompt,
    pub drop_image: bool,
    /// `3·H·W` standard normal values in CHW order.
    pub noise: Vec<f32>,
}

/// Draws the batch for `step`. The stream depends only on `(seed, step)`, so
/// a resumed run sees exactly the batches an uninterrupted one would.
pub fn draw_batch<'a>(
    data: &'a [AtomicSample],
    cond: &Conditioner<'_>,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    step: usize,
) -> Result<Vec<TrainItem<'a>>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(step as u64);
    let n = 3 * cond.image_size * cond.image_size;
    (0..config.batch_size)
        .map(|_| {
            let sample = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=schedule.timesteps());
            let prompt = if rng.random_bool(config.p_drop_text) {
                TaskPrompt::all_skip(cond.vocab)
            } else {
                make_training_prompt(cond.vocab, sample.task, &mut rng)?
            };
            let drop_image = rng.random_bool(config.p_drop_image);
            let noise = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Ok(TrainItem { sample, t, prompt, drop_image, noise })
        })
        .collect()
}

/// Mean squared error between the true and predicted noise.
pub fn training_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &Conditioner<'_>,
    items: &[TrainItem<'_>],
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let s = cond.image_size;
    let mut parts = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut noise = Vec::with_capacity(items.len());
    for it in items {
        let masks = std::slice::from_ref(&it.sample.mask);
        let mut c = cond.condition(&it.sample.source, &it.prompt, masks)?;
        if it.drop_image {
            c.source = c.source.zeros_like()?;
        }
        parts.push(c);
        targets.push(super::sampler::image_to_tensor(&it.sample.target, cond.dtype(), cond.device())?);
        noise.push(Tensor::from_vec(it.noise.clone(), (1, 3, s, s), cond.device())?.to_dtype(cond.dtype())?);
    }
    let c: Conditioning = Conditioner::stack(&parts)?;
    let x0 = Tensor::cat(&targets, 0)?;
    let eps = Tensor::cat(&noise, 0)?;
    let t: Vec<usize> = items.iter().map(|i| i.t).collect();
    let z = q_sample(&x0, &t, &eps, schedule)?;
    let pred = model.predict(&DenoiseInput { z_t: &z, t: &t, source: &c.source, tokens: &c.tokens, masks: &c.masks })?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

/// Owns a model and its optimizer state for the duration of a run.
pub struct Trainer {
    model: EditModel,
    optimizer: AdamW,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: EditModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(model.trainable_vars(), config.optimizer())?;
        Ok(Self { model, optimizer, config })
    }

    pub fn from_parts(model: EditModel, optimizer: AdamW, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, optimizer, config })
    }

    pub fn model(&self) -> &EditModel {
        &self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.optimizer.step_count()
    }

    pub fn into_model(self) -> EditModel {
        self.model
    }

    /// One optimizer update. Returns the loss before the update.
    pub fn train_step(&mut self, data: &[AtomicSample]) -> Result<f64> {
        let step = self.step();
        let loss = {
            let cond = self.model.conditioner();
            let items = draw_batch(data, &cond, &self.config, &self.model.schedule, step)?;
            training_loss(&self.model.denoiser, &cond, &items, &self.model.schedule)?
        };
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1, loss: value });
        }
        let grads = loss.backward()?;
        self.optimizer.step(&grads)?;
        Ok(value)
    }

    /// Trains until `config.steps`, calling `on_log` every `log_every` steps
    /// with the mean loss since the previous log, and `on_checkpoint` every
    /// `checkpoint_every` steps (if non-zero).
    pub fn run(
        &mut self,
        data: &[AtomicSample],
        mut on_log: impl FnMut(&StepLog) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let start = Instant::now();
        let mut acc = 0.0;
        let mut n = 0usize;
        while self.step() < self.config.steps {
            acc += self.train_step(data)?;
            n += 1;
            let step = self.step();
            if step.is_multiple_of(self.config.log_every) || step == self.config.steps {
                on_log(&StepLog { step, loss: acc / n as f64, lr: self.config.lr, elapsed_s: start.elapsed().as_secs_f64() })?;
                acc = 0.0;
                n = 0;
            }
            if self.config.checkpoint_every > 0 && step.is_multiple_of(self.config.checkpoint_every) {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}
