//! A trained editor: vocabulary, embeddings, denoiser and schedule together.

use candle_core::{DType, Device, Var};

use crate::diffusion::{sample, sample_batch, Conditioner, EditJob, NoiseSchedule, SampleOutput, SamplerConfig, ScheduleSpec};
use crate::error::Result;
use crate::image::{Image, Mask};
use crate::model::{Denoiser, UNetConfig};
use crate::taskvocab::{build_vocab_with, EmbeddingTable, TaskId, TaskPrompt, Vocab};

pub const EMBEDDING_PARAM: &str = "embeddings";
pub const UNET_PREFIX: &str = "unet.";

pub struct EditModel {
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    resolutions: Vec<usize>,
}

impl std::fmt::Debug for EditModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EditModel")
            .field("tasks", &self.vocab.tasks())
            .field("config", self.denoiser.config())
            .field("schedule", &self.schedule.spec())
            .finish()
    }
}

impl EditModel {
    pub fn new(vocab: Vocab, table: EmbeddingTable, denoiser: Denoiser, schedule: NoiseSchedule) -> Result<Self> {
        if table.k() != vocab.k() || table.dim() != denoiser.config().token_dim {
            return Err(crate::Error::ShapeMismatch(format!(
                "embedding table {}x{} for {} tasks and token_dim {}",
                table.k() + 1,
                table.dim(),
                vocab.k(),
                denoiser.config().token_dim
            )));
        }
        let resolutions = denoiser.mask_resolutions();
        Ok(Self { vocab, table, denoiser, schedule, resolutions })
    }

    /// Fresh, randomly initialized model.
    pub fn init(config: &UNetConfig, tasks: &[TaskId], schedule: ScheduleSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let (vocab, table) = build_vocab_with(tasks, config.token_dim, seed, dtype, device)?;
        let denoiser = Denoiser::init(config, seed, dtype, device)?;
        Self::new(vocab, table, denoiser, NoiseSchedule::new(schedule)?)
    }

    pub fn config(&self) -> &UNetConfig {
        self.denoiser.config()
    }

    pub fn image_size(&self) -> usize {
        self.config().image_size
    }

    pub fn conditioner(&self) -> Conditioner<'_> {
        Conditioner { vocab: &self.vocab, table: &self.table, resolutions: &self.resolutions, image_size: self.image_size() }
    }

    /// Every trainable tensor with its checkpoint name.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let mut out = vec![(EMBEDDING_PARAM.to_string(), self.table.var().clone())];
        out.extend(self.denoiser.params().vars().iter().map(|(k, v)| (format!("{UNET_PREFIX}{k}"), v.clone())));
        out
    }

    pub fn num_params(&self) -> usize {
        self.trainable_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn edit(&self, source: &Image, prompt: &TaskPrompt, masks: &[Mask], config: &SamplerConfig) -> Result<(Image, usize)> {
        sample(&self.denoiser, &self.conditioner(), source, prompt, masks, config, &self.schedule)
    }

    pub fn edit_batch(&self, jobs: &[EditJob], config: &SamplerConfig) -> Result<SampleOutput> {
        sample_batch(&self.denoiser, &self.conditioner(), jobs, config, &self.schedule)
    }
}
