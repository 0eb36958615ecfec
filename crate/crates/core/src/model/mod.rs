//! The masked autoencoder: parameters, attention kernels, forward and
//! backward passes, checkpoints and gradient verification.

mod attention;
mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod layers;
mod params;
mod reach;

pub use attention::{
    aligned_to_dense, dense_kernel, kernel_bwd, masked_attention, sparse_attention, sparse_kernel, unmasked_attention,
    Kernel,
};
pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{LossScope, MaskFill, ModelConfig};
pub use forward::{
    batch_loss_grad, cls_features, embed, encode, forward_reconstruct, reconstruction_loss, record_loss,
    record_loss_grad, BatchItem, Embedded, ForwardOptions, ForwardTrace, LayerTrace, Reconstruction,
};
pub use gradcheck::{grad_check, toy_records, ClassCheck, GradCheckReport};
pub use layers::{gelu, layernorm_fwd, linear_bwd, linear_fwd};
pub use params::{decays, tensor_class, Block, LayerNorm, Linear, Params};
pub use reach::influencing_inputs;
