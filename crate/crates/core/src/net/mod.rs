//! The deformation network: embedding, plain message-passing layers,
//! deformation layers that update the lattice, and the invariant
//! feed-forward baseline.

mod checkpoint;
mod layers;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::fields::{FieldKind, LambdaSpec};
use crate::material::MAX_ATOMIC_NUMBER;

pub use checkpoint::{parameter_layout, ModelCheckpoint, ParamInit, FORMAT_VERSION};
pub use layers::{
    apply_deformation, deform_lattice, deformation_weights, lattice_params_tape, message_edge, node_update, rbf_encode, weighted_generator,
    GruWeights, HeadWeights, MessageWeights, TapeGeometry, TripletTape,
};
pub use model::{bind_parameters, ff_baseline_forward, forward, forward_tape, BoundParams, ForwardOutput, Prepared, TapeOutput};

/// Bound applied to raw deformation weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightScale {
    Unbounded,
    /// `w = limit · (2σ(raw) − 1)`.
    SigmoidScaled {
        limit: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Empnn,
    FfBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub rbf_bins: usize,
    /// RBF spacing and width δ in Å.
    pub rbf_delta: f64,
    pub n_plain_layers: usize,
    pub n_deform_layers: usize,
    pub knn_k: usize,
    pub lambda_spec: LambdaSpec,
    pub weight_scale: WeightScale,
    pub deformation_step: f64,
    pub max_atomic_number: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Empnn,
            feature_dim: 128,
            rbf_bins: 16,
            rbf_delta: 0.5,
            n_plain_layers: 6,
            n_deform_layers: 4,
            knn_k: 8,
            lambda_spec: LambdaSpec::single(FieldKind::EdgeKetBra),
            weight_scale: WeightScale::SigmoidScaled { limit: 0.01 },
            deformation_step: 1.0,
            max_atomic_number: MAX_ATOMIC_NUMBER,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.rbf_bins == 0 || self.knn_k == 0 {
            return Err(domain!("feature_dim, rbf_bins and knn_k must be at least 1"));
        }
        if !(self.rbf_delta > 0.0 && self.rbf_delta.is_finite()) {
            return Err(domain!("rbf_delta must be positive, got {}", self.rbf_delta));
        }
        if !(self.deformation_step > 0.0 && self.deformation_step.is_finite()) {
            return Err(domain!("deformation_step must be positive, got {}", self.deformation_step));
        }
        if let WeightScale::SigmoidScaled { limit } = self.weight_scale {
            if !(limit > 0.0 && limit.is_finite()) {
                return Err(domain!("weight scale limit must be positive, got {limit}"));
            }
        }
        if self.max_atomic_number == 0 || self.max_atomic_number > MAX_ATOMIC_NUMBER {
            return Err(domain!("max_atomic_number must be in 1..={MAX_ATOMIC_NUMBER}"));
        }
        self.lambda_spec.validate()
    }
}
