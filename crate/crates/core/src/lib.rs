//! Federated learning with mixed-precision gradient quantization.
//!
//! The crate bundles a small neural-network core ([`nn`]), the per-tensor
//! quantization codec and its wire format ([`quant`]), an in-process FedAvg
//! simulator ([`fl`]), a gradient-inversion attacker ([`attack`]), a Gaussian
//! DP baseline ([`dp`]), dataset loaders ([`data`]) and the experiment runner
//! that ties them together ([`experiment`]).

pub mod attack;
pub mod data;
pub mod dp;
pub mod experiment;
pub mod fl;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use nn::{Batch, GradSet, Layer, ModelSpec, ParamSet, Role};
pub use tensor::Tensor;
