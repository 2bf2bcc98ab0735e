//! The toy two-branch re-identification network, its data and its training.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use config::{BackboneConfig, Config, DataConfig, EmbeddingSpec, TrainSchedule, Variant};
pub use dataset::{make_toy_dataset, Sample, ToyDataset};
pub use model::{ForwardOptions, ForwardOutput, Model, OfRequest, OF_SITES, OW_LAYERS};
pub use train::{evaluate_retrieval, run, train, EpochRecord, RetrievalMetrics, Run, RunSeeds, TrainOutcome, Trainer};
