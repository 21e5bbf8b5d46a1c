//! Encoder, channel-aware dual-branch blocks, dual decoders and reconstruction.

mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use config::{Ablation, ModelConfig};
pub use forward::{passthrough, prepare_input, reconstruct, Network};
pub use gradcheck::{gradcheck_signals, model_gradcheck, GradcheckEntry, GradcheckReport, FD_AGREEMENT, MODEL_FD_STEPS, NORM_CANCELLED};
pub use params::{count_parameters, init_parameters, parameter_specs, Init, ModelParameters, ParamSpec, ParameterCount};

#[cfg(test)]
mod tests;
