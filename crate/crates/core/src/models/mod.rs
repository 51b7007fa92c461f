//! Model zoo: LeNet variants and a compact residual network.
//!
//! Every convolution and fully-connected layer is an *analog* layer: its
//! weight matrix lives on a simulated crossbar and is the only place weight
//! noise and weight quantization apply. Biases and batch norm stay digital.

mod checkpoint;
mod network;
mod stats;
mod zoo;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{AnalogInfo, BnState, ForwardOptions, ForwardOutput, LayerQuant, Network};
pub use stats::{clip_weights, layer_weight_std, population_std};
pub use zoo::{build_model, Family, ModelConfig, Variant};
