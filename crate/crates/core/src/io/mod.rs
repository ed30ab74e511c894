//! Dataset ingestion, binary checkpoints, and run configuration.

pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod idx;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingPhase};
pub use cifar::load_cifar_binary;
pub use config::RunConfig;
pub use idx::{load_idx_images, load_idx_labels, load_mnist_dir};
