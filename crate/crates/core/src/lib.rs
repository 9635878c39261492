//! Trojan scanning for image classifiers by adversarial shifts of near-OOD
//! samples, plus a desk-scale benchmark harness that trains clean and
//! trojaned toy classifiers to exercise the scanner end to end.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod augmentation;
pub mod benchmark;
pub mod calibration;
pub mod error;
pub mod linalg;
pub mod model_io;
pub mod nn;
pub mod scanner;
pub mod tensor;

pub use error::{Error, Result};
pub use model_io::{load_model, save_model, ModelBundle, ModelMeta, Provenance, TrainingMode};
pub use nn::{LayerSpec, Network, Objective, Params};
pub use tensor::{softmax, Tensor};
pub use attack::AttackConfig;
pub use augmentation::{OodBatch, TransformSpec};
pub use benchmark::dataset::{load_dataset, save_dataset, Dataset};
pub use benchmark::protocol::{run_protocol, EvalMode, EvalProtocol, ProtocolRun};
pub use benchmark::zoo::{ZooConfig, ZooEvaluation, ZooManifest};
pub use calibration::{calibrate, CalibrationOptions, CalibrationResult, CompareSpace};
pub use scanner::{scan, scan_with_sources, ScanConfig, ScanMode, ScanReport, Verdict};
