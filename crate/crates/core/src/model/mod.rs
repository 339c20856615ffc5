//! Decoder-only toy transformer, dense and mixture-of-experts.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{decode_container, encode_container, Checkpoint, StoredTensor, FORMAT_VERSION, MAGIC};
pub(crate) use checkpoint::{fill_params, params_to_stored};
pub use config::{Arch, FfnConfig, ModelConfig, Nonlinearity};
pub use forward::{
    attention_forward, expert_ffn, layer_norm, moe_layer_forward, AttnTrace, ComponentMask,
    FfnTrace, ForwardOptions, ForwardTrace, HeadTrace, Injection, LayerTrace, Model, NormTrace,
    Route, RoutingRecord, Site,
};
pub use params::{ExpertParams, FfnParams, HeadParams, LayerParams, NormParams, Params, TensorRank};
