//! CIFAR-10 data, the VGG13/ResNet18 model zoo, training, MAC accounting
//! and the co-design experiment pipeline.

pub mod augment;
pub mod config;
pub mod data;
pub mod experiment;
pub mod macs;
pub mod model;
pub mod train;

pub use augment::{augment_normalize, AugmentConfig};
pub use config::ExperimentConfig;
pub use data::{load_cifar10, synthetic_cifar10, write_synthetic_cifar10, Cifar10Set};
pub use experiment::{run_experiment, run_experiment_on, ExperimentReport, ReportLine};
pub use macs::{count_trace, Domain, LayerOp, MacReport, MacRow, OpKind};
pub use model::{build_model, count_macs, Architecture, Model, ModelSpec, Variant};
pub use train::{evaluate, top1, train, train_with, EpochMetrics, Schedule, TrainConfig};
