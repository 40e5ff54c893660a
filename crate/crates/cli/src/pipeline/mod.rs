//! Experiment pipeline: dataset generation, training, distillation,
//! benchmarking, and standalone inference.

pub mod bench;
pub mod dataset;
pub mod infer;
pub mod train;

pub use bench::{run_benchmark, BenchOutcome, MethodReport};
pub use dataset::{build_dataset, load_dataset, DatasetManifest, FrameEntry, Split};
pub use infer::{run_infer, InferArgs};
pub use train::{run_distillation, run_training, TrainSummary};
