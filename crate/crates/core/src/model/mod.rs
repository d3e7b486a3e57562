//! The Siamese sleep transformer.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::{ModelConfig, PathGeometry, EPOCH_SECONDS, LAYERNORM_EPS, SECOND_KERNEL};
pub use forward::{
    cnn_block_forward, encoder_block_forward, multi_head_attention, positional_encoding, sst_forward,
    sst_forward_pair, ForwardTrace,
};
pub use params::{parameter_count, parameter_shapes, BoundParams, ConvPath, EncoderWeights, ModelParams, SstWeights};

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::Tensor;

/// A config together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sst {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Sst {
    pub fn new(config: ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Inference logits `[B, S, n_classes]` with `X' = X`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let xv = g.constant(x);
        let trace = sst_forward(&mut g, &bound, &self.config, xv, xv)?;
        Ok(g.tensor(trace.logits))
    }
}
