use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::material::{lattice_params, Material};

/// Below this spread a parameter is treated as constant and left unscaled.
const MIN_STD: f64 = 1e-8;

/// Per-parameter z-scoring of `[a, b, c, α, β, γ]` (Å, radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer { mean: [0.0; 6], std: [1.0; 6] }
    }

    pub fn fit(materials: &[Material]) -> Result<Self> {
        if materials.is_empty() {
            return Err(domain!("cannot fit a normalizer on an empty dataset"));
        }
        let params = materials.iter().map(|m| lattice_params(&m.rho).map(|p| p.to_radian_array())).collect::<Result<Vec<_>>>()?;
        let n = params.len() as f64;
        let mut mean = [0.0; 6];
        let mut std = [0.0; 6];
        for k in 0..6 {
            mean[k] = params.iter().map(|p| p[k]).sum::<f64>() / n;
            let var = params.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = if var.sqrt() < MIN_STD { 1.0 } else { var.sqrt() };
        }
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, p: &[f64; 6]) -> [f64; 6] {
        std::array::from_fn(|k| (p[k] - self.mean[k]) / self.std[k])
    }

    pub fn denormalize(&self, z: &[f64; 6]) -> [f64; 6] {
        std::array::from_fn(|k| z[k] * self.std[k] + self.mean[k])
    }
}
