//! Data preparation, training, inference and evaluation for the two-stage model.

mod checkpoint;
mod config;
mod data;
mod infer;
mod models;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{AnchorSource, Config, SEED_ENV};
pub use data::{
    eval_split, generate, input_views, load_dataset, sample_views, write_scenes, SceneData, ViewSample, EVAL_SEED_OFFSET, OCC_FILE,
};
pub use infer::{evaluate, summarize, Predictor, Reconstruction};
pub use models::{anchors_from_probabilities, build_proposal, build_recon, ReconModel};
pub use optim::{adamw_step, clip_grad_norm, lr_at, AdamState, AdamW};
pub use train::{StepLog, Trainer};
