//! Noise schedule, sampler, training loop and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, save_trainer, CheckpointHeader, LoadedCheckpoint};
pub use optim::{AdamW, AdamWConfig};
pub use sampler::{
    cfg_combine, ddim_step, image_to_tensor, sample, sample_batch, tensor_to_image, timestep_grid, Conditioner, Conditioning,
    EditJob, Guidance, SampleOutput, SamplerConfig, DEFAULT_STEPS,
};
pub use schedule::{make_schedule, q_sample, NoiseSchedule, ScheduleKind, ScheduleSpec, DEFAULT_TIMESTEPS};
pub use train::{draw_batch, training_loss, StepLog, TrainConfig, TrainItem, Trainer};
