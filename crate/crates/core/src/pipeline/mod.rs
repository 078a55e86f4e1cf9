//! Training and inference on synthetic scenes.
//!
//! A two-stage conv extractor produces `F_0`; during training it is perturbed
//! for `T` steps, encoded, and the kernel solved from the last encoding adjusts
//! `F_0` into `F_hat`. Proposals pooled from both feed the heads and the
//! alignment losses.

pub mod check;
mod config;
mod model;
mod scene;
mod train;

pub use config::{ParamGroup, TrainConfig};
pub use model::{
    load_checkpoint, manifest_path, save_checkpoint, ExtractorParams, ModelParams, ModelState, ModelVars,
    PARAM_TENSORS, W0_SCALE,
};
pub use scene::{generate_scenes, ToyScene};
pub use train::{
    baseline_config, benchmark, benchmark_csv, evaluate, infer, init_model, mean_std, metrics_csv, pooled_proposals, stream, train,
    train_step, training_losses, training_scenes, BenchModels, BenchRow, MetricRow, Predictions, RejectedStep, SceneBatch, Stream,
    TrainRun, BENCH_HEADER, METRICS_HEADER,
};
