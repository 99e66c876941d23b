//! Transformer encoder with autoregressive, query-token and encoder-input
//! decoders; parameters, objectives and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod objective;
pub mod params;
pub mod transformer;

pub use config::{DecoderKind, ModelConfig};
pub use objective::{student_loss, teacher_loss, ExampleGrad, StudentObjective};
pub use params::ModelParams;
pub use transformer::{
    causal_mask, decode_ar_step, decode_ar_teacher_forced, decode_parallel,
    decode_parallel_encoder_input, encode, DecoderOutput, EncoderOutput, Graph,
};
