//! Minimal reverse-mode autodiff and the denoiser network built on it.

pub mod array;
pub mod graph;
pub mod net;
pub mod params;

pub use array::Array;
pub use graph::{Gradients, Graph, NodeId};
pub use net::{
    build_forward, check_params, denoiser_forward, init_params, time_embedding, window_attention,
    window_attention_weights, NetConfig, NetDenoiser, Variant,
};
pub use params::ParamSet;
