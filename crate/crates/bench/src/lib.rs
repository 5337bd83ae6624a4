//! Fixtures shared by the kernel benchmarks.

use empnn::net::{ModelCheckpoint, ModelConfig};
use empnn::train::{synth_dataset, Family, Normalizer};
use empnn::{FieldKind, LambdaSpec, Material};

/// Deterministic mixed-family materials.
pub fn materials(n: usize) -> Vec<Material> {
    synth_dataset(n, Family::Mixed, 7).expect("synthetic data")
}

/// A freshly initialised model with the given field and width.
pub fn checkpoint(kind: FieldKind, feature_dim: usize) -> ModelCheckpoint {
    let cfg = ModelConfig { feature_dim, n_plain_layers: 2, n_deform_layers: 2, lambda_spec: LambdaSpec::single(kind), ..ModelConfig::default() };
    let mut ckpt = ModelCheckpoint::init(cfg, 0).expect("valid config");
    ckpt.normalizer = Some(Normalizer::fit(&materials(32)).expect("normalizer"));
    ckpt
}
