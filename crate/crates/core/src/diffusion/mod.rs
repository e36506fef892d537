//! A miniature DDPM whose denoiser is conditioned on concept tokens through
//! cross-attention.

mod concept;
mod dataset;
mod denoiser;
mod params;
mod sample;
mod schedule;
mod train;

pub use concept::{Condition, ConceptBank, ConceptEmbedding, BLANK};
pub use dataset::{ConceptClass, ToyDataset};
pub use denoiser::{forward, predict, backward, ContextKv, ForwardTrace, KvGrad};
pub use params::{DenoiserParams, ModelDims, ParamScope};
pub use sample::sample;
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule};
pub use train::{dm_loss, train_dm, DmExample, TrainHyper, TrainReport};
