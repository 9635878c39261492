//! Desk-scale benchmark: synthetic data, poisoning, training, model zoos
//! and the adversarial-risk experiment.

pub mod dataset;
pub mod poison;
pub mod protocol;
pub mod risk;
pub mod train;
pub mod zoo;
