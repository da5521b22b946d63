//! Diffusion core: noise schedule, the orbit-wide noise-prediction network,
//! and the training loop.

pub mod model;
pub mod nn;
pub mod schedule;
pub mod train;

pub use model::{
    azimuth_embedding, time_embedding, AttentionTap, Cache, Conditioning, Denoiser, DenoiserParams,
    ForwardOutput, ModelConfig, ParamEntry, ParamLayout, TapEntry, TapMode,
};
pub use schedule::{make_schedule, q_sample, DiffusionConfig, Schedule};
pub use train::{load_latest_checkpoint, Checkpoint, TrainConfig, TrainReport, Trainer};
