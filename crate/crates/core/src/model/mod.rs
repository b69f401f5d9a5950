//! The tiny language model, its parameter registry, LoRA adapters and
//! checkpoint persistence.

mod checkpoint;
mod lora;
mod registry;
mod tinylm;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, importance_section_len, load_checkpoint, save_checkpoint, Checkpoint,
    IMPT_ENTRY_OVERHEAD, IMPT_FIXED_HEADER, MAGIC, VERSION,
};
pub use lora::{LoraAdapter, LoraSpec, ScaleMode};
pub use registry::{BoundParams, Gradients, ParameterRegistry};
pub use tinylm::{block_param, ModelConfig, TinyLm, EMBED, HEAD_BIAS, HEAD_WEIGHT};
