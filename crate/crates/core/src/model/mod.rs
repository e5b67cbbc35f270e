//! The learnable model: feature encoder, conditioning and vector field estimator.

pub mod checkpoint;
pub mod config;
pub mod embed;
mod kernels;
pub mod layers;
pub mod network;
pub mod params;

pub use checkpoint::{
    load_model, model_from_checkpoint, read_checkpoint, save_checkpoint, Checkpoint,
};
pub use config::VfeConfig;
pub use embed::freq_positional_embedding;
pub use network::{ConditioningSet, SrModel};
pub use params::{no_grad, NoGradGuard, ParamBuilder, ParamStore};

/// Learnable scalar counts per component (`encoder`, `vfe`) and in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub feature_encoder: usize,
    pub vfe: usize,
    pub total: usize,
}

pub fn count_parameters(params: &ParamStore) -> ParameterCounts {
    let by = params.count_by_component();
    ParameterCounts {
        feature_encoder: by.get("encoder").copied().unwrap_or(0),
        vfe: by.get("vfe").copied().unwrap_or(0),
        total: params.count(),
    }
}
