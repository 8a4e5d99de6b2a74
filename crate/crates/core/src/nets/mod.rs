//! Small strided-convolution encoder, masked-mean fusion, and upsampling
//! decoder with hand-written backward passes.
//!
//! Latent maps are global-average-pooled to `D`-vectors for alignment; the
//! full maps go through fusion and decoding. Missing modalities are dropped
//! at the feature level and never zero-imputed.

mod checkpoint;
mod layers;
mod loss;
mod model;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry,
};
pub use layers::{global_avg_pool, upsample2, Conv2d, Tensor4};
pub use loss::{segmentation_loss, softmax_backward, softmax_channels, SegLoss};
pub use model::{
    argmax_labels, batch_inputs, modality_tensor, DecodeTrace, EncodePass, Encoder, EncoderConfig, EncoderGrads,
    EncoderStyle, EncoderTrace, FuseTrace, Model, ModelConfig,
};
