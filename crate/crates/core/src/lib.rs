//! Keypoint-based group activity recognition with a multiscale transformer
//! and cross-scale prototype clustering.

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod params;
pub mod augment;
pub mod cluster;
pub mod config;
pub mod model;
pub mod mstransformer;
pub mod synth;
pub mod tokenize;
pub mod train;

pub use config::{TrainConfig, KEYS};
pub use dataset::{load_dataset, save_dataset, ClipFeatures, FeatureStats, Manifest, RawClip};
pub use error::{CheckpointError, ConfigError, DatasetError, Error, ModelError};
pub use model::{AttentionExport, AttentionMap, Model};
pub use synth::{generate_dataset, split_train_test, SynthConfig};
pub use train::{
    evaluate, grad_check, load_checkpoint, save_checkpoint, EvalReport, GradCheckReport, LinearBaseline, Trainer,
};
