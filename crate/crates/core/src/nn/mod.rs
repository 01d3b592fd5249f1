//! Reverse-mode autodiff and the network blocks used by the fusion heads.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, Var};
pub use layers::{
    cross_attention_forward, mlp_forward, unet_forward, Activation, Conv2d, CrossAttention, Linear, Mlp, MlpSpec,
    OutputActivation, UNet, UNetSpec,
};
pub use params::{ParamId, ParamStore, Tensor};
