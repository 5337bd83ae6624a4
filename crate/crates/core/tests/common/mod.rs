#![allow(dead_code)]

use empnn::fields::{FieldKind, LambdaSpec};
use empnn::net::{ModelCheckpoint, ModelConfig, ModelKind, WeightScale};
use empnn::train::{synth_dataset, Family, Normalizer};
use empnn::Material;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(spec: LambdaSpec) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        rbf_bins: 6,
        rbf_delta: 1.0,
        n_plain_layers: 1,
        n_deform_layers: 2,
        knn_k: 6,
        lambda_spec: spec,
        weight_scale: WeightScale::SigmoidScaled { limit: 0.05 },
        ..ModelConfig::default()
    }
}

pub fn all_fields(symmetrize: bool) -> LambdaSpec {
    LambdaSpec::new(FieldKind::ALL.to_vec(), symmetrize).unwrap()
}

/// A checkpoint whose parameters are all non-zero, so every path of the
/// network is exercised.
pub fn random_checkpoint(cfg: ModelConfig, seed: u64) -> ModelCheckpoint {
    let mut ckpt = ModelCheckpoint::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for t in ckpt.parameters.values_mut() {
        let b = 1.5 / (t.rows as f64).sqrt();
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-b..b));
    }
    if ckpt.config.kind == ModelKind::FfBaseline {
        ckpt.normalizer = Some(Normalizer::fit(&materials(30, 77)).unwrap());
    }
    ckpt
}

pub fn materials(n: usize, seed: u64) -> Vec<Material> {
    synth_dataset(n, Family::Mixed, seed).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Relative error for finite-difference checks of a function whose value has
/// magnitude `scale`. The floor absorbs the central-difference roundoff,
/// about machine epsilon · scale / h.
pub fn fd_err(analytic: f64, fd: f64, scale: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6 * scale.max(1.0))
}
