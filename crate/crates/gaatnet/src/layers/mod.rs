//! Neural building blocks: multi-head graph attention, the
//! distant-neighbor bias encoder, the biased transformer encoder, the
//! residual self-adapter, and the attention-enhancement output head.
//!
//! Layers are pure functions of (inputs, parameters) plus an explicit
//! dropout generator, so they can be evaluated concurrently on disjoint
//! tapes.

mod adapter;
mod gat;
mod transformer;

pub use adapter::{adapter_forward, AdapterParams};
pub use gat::{attention_enhance, gat_forward, GatHeadParams, GatLayerParams, GatStructure, HeadAggregation};
pub use transformer::{
    biased_attention, distant_bias, distant_mean_matrix, transformer_encoder, DistantBiasParams,
    TransformerLayerParams, TransformerParams,
};

/// Dropout configuration threaded through forward passes. `train = false`
/// disables dropout entirely (evaluation mode).
#[derive(Debug, Clone, Copy)]
pub struct DropoutCfg {
    pub rate: f64,
    pub train: bool,
}

impl DropoutCfg {
    pub fn eval() -> Self {
        DropoutCfg {
            rate: 0.0,
            train: false,
        }
    }

    pub fn train(rate: f64) -> Self {
        DropoutCfg { rate, train: true }
    }
}
