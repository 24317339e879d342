//! Wound-healing stage analysis: a small VGG-style CNN with transfer-learning
//! fine-tuning, LayerCAM and guided-backpropagation explanations, and
//! structure-tensor coherency quantification of collagen fibers.

pub mod config;
pub mod datapipe;
pub mod explain;
pub mod fiberquant;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod trainer;
