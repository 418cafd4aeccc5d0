//! Layer stack, forward pass, generation, parameter counting, the byte
//! tokenizer with chat formatting, and toy training.

mod config;
mod forward;
mod tokenizer;
pub mod train;
mod weights;

pub use config::{layer_kinds, render_pattern, ModelConfig, PublishedParams, PRESETS_ENV, PRESET_NAMES};
pub use forward::{argmax, GenerateOptions, Model, Sampler};
pub use tokenizer::{
    detokenize, format_chat, tokenize, tokenize_with_bos, ChatTurn, Role, BOS_ID, END_OF_TURN,
    END_OF_TURN_ID, EOS, EOS_ID, START_OF_TURN, START_OF_TURN_ID, VOCAB_SIZE,
};
pub use weights::{config_path, count_params, manifest_path, tensor_shapes, LayerParams, ModelParams, ParamCount, Weights};
