//! Dense tensors, reverse-mode differentiation and the graph attention network.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use layers::{
    attention_logits, gat_layer, global_attention_pool, masked_softmax, DenseParams, GatLayerParams,
    GraphBatch, Mode, PoolParams,
};
pub use model::{
    forward, forward_batch, init_parameters, loss, Architecture, Batch, ForwardPass, Gradients,
    ModelParameters, OutputLayout, PENALIZED, TENSOR_NAMES,
};
pub use tape::{Tape, TapeGradients, Var};
pub use tensor::Tensor;
