// SPDX-License-Identifier: MIT OR Apache-2.0

//! The decoder-only MoE transformer.

pub mod config;
pub mod forward;
pub mod intervention;
pub mod io;
pub mod weights;

pub use config::{Activation, ModelConfig};
pub use forward::{
    attention_layer, expert_forward, forward, gate, logit_lens_log_probs, logit_lens_logprob, moe_layer, rank_of,
    AttentionOutput, ForwardTrace, LayerTrace, MoeRecord, Routing, Selected,
};
pub use intervention::{ExpertRef, InterventionSpec, RoutingMode};
pub use io::{decode_model, encode_model, load_model, save_model};
pub use weights::{init_model, AttentionHead, Expert, Layer, ModelWeights};
