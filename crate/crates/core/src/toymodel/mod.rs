//! Attention sources: a deterministic toy decoder and a planted oracle.

mod model;
mod oracle;
mod trace;

pub use model::{
    build_toy_model, decode_teacher_forced, AttentionRows, Model, ModelSpec, PrefillOutput,
};
pub use oracle::{
    oracle_trace, oracle_window_attention, token_key, PlantedHead, PlantedOracleSpec, PrefillShape,
};
pub use trace::{AttentionTrace, StepRecord};
