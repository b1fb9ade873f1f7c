//! The multi-head attention deep & cross network.
//!
//! The assembled input `Z` (standardized dense fields followed by one
//! embedding per sparse field) feeds three parallel branches:
//!
//! - a cross stack with `x_0 = Z` and `x_{l+1} = (⟨w_l, x_l⟩ + b_l) · x_0 + x_l`,
//! - a ReLU MLP on `Z + R`, where `R` is Gaussian noise drawn only while
//!   training,
//! - multi-head attention over per-field tokens (see [`attention`]).
//!
//! The branch outputs are concatenated and mapped to the targets by a linear
//! output head.

pub mod attention;
mod io;
mod layers;
mod model;
mod suite;

pub use attention::{attention_forward, AttentionBlock, AttentionParams, HeadParams, TokenLayout};
pub use io::{load_model, save_model, MAGIC};
pub use layers::{
    assemble_input, cross_forward, deep_forward, embed_lookup, inject_noise, Activation, CrossLayerParams,
    DenseLayerParams, EmbeddingProbe, EmbeddingTable, Mode, NoiseConfig,
};
pub use model::{
    model_forward, ForwardMode, MadcnModel, ModelConfig, ModelKind, ModelParams, ModelProbe, TargetScaler,
};
pub use suite::{grad_check_suite, GradCheckCase};
