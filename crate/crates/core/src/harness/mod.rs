//! Synthetic tasks, FP training, and the end-to-end quantization pipeline.

pub mod data;
pub mod pipeline;
pub mod train;

pub use data::{generate, load_data, sample_calib, save_data, DataBundle, DatasetSpec, Split, TaskSpec, ToyDataset};
pub use pipeline::*;
pub use train::{cnn_model, evaluate, mlp_model, model_for, train_fp, Classifier, TrainConfig};
