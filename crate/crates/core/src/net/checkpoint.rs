use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelKind};
use crate::error::{domain, Error, Result};
use crate::tape::Tensor;
use crate::train::Normalizer;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// Uniform in `±1/√fan_in`.
    Uniform {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    Zero,
}

fn matrix(out: &mut Vec<(String, [usize; 2], ParamInit)>, name: String, rows: usize, cols: usize) {
    out.push((name, [rows, cols], ParamInit::Uniform { fan_in: rows }));
}

fn push_message(out: &mut Vec<(String, [usize; 2], ParamInit)>, prefix: &str, cfg: &ModelConfig) {
    let (f, d) = (cfg.feature_dim, cfg.rbf_bins);
    matrix(out, format!("{prefix}.msg.w"), 2 * f + d, f);
    matrix(out, format!("{prefix}.msg.w_out"), f, f);
    for gate in ["r", "z", "n"] {
        matrix(out, format!("{prefix}.gru.w_i{gate}"), f, f);
        matrix(out, format!("{prefix}.gru.w_h{gate}"), f, f);
        out.push((format!("{prefix}.gru.b_i{gate}"), [1, f], ParamInit::Uniform { fan_in: f }));
        out.push((format!("{prefix}.gru.b_h{gate}"), [1, f], ParamInit::Uniform { fan_in: f }));
    }
}

/// Every parameter of a model in initialisation order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, [usize; 2], ParamInit)> {
    let (f, d) = (cfg.feature_dim, cfg.rbf_bins);
    let mut out = vec![("embedding".to_string(), [cfg.max_atomic_number as usize, f], ParamInit::Normal { std: 1.0 / (f as f64).sqrt() })];
    for l in 0..cfg.n_plain_layers {
        push_message(&mut out, &format!("plain.{l}"), cfg);
    }
    match cfg.kind {
        ModelKind::Empnn => {
            let (me, mt) = (cfg.lambda_spec.edge_channels(), cfg.lambda_spec.triplet_channels());
            for l in 0..cfg.n_deform_layers {
                let prefix = format!("deform.{l}");
                push_message(&mut out, &prefix, cfg);
                if me > 0 {
                    matrix(&mut out, format!("{prefix}.edge_head.w"), 2 * f + d, f);
                    out.push((format!("{prefix}.edge_head.w_out"), [f, me], ParamInit::Zero));
                }
                if mt > 0 {
                    matrix(&mut out, format!("{prefix}.triplet_head.w"), 3 * f + 2 * d + 2, f);
                    out.push((format!("{prefix}.triplet_head.w_out"), [f, mt], ParamInit::Zero));
                }
            }
        }
        ModelKind::FfBaseline => {
            for k in 0..5 {
                let width = if k == 4 { 6 } else { f };
                matrix(&mut out, format!("ff.{k}.w"), f, width);
                out.push((format!("ff.{k}.b"), [1, width], ParamInit::Uniform { fan_in: f }));
            }
        }
    }
    out
}

/// A model configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub rng_seed: u64,
    pub parameters: BTreeMap<String, Tensor>,
    /// Lattice-parameter scaling fitted on the training split.
    pub normalizer: Option<Normalizer>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredCheckpoint {
    format_version: u32,
    config: ModelConfig,
    rng_seed: u64,
    parameters: BTreeMap<String, StoredTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalizer: Option<Normalizer>,
}

impl ModelCheckpoint {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parameters = BTreeMap::new();
        for (name, [rows, cols], init) in parameter_layout(&config) {
            let n = rows * cols;
            let data = match init {
                ParamInit::Uniform { fan_in } => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-b, b).map_err(|e| Error::Internal(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                ParamInit::Normal { std } => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Internal(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                ParamInit::Zero => vec![0.0; n],
            };
            parameters.insert(name, Tensor::new(rows, cols, data)?);
        }
        Ok(ModelCheckpoint { format_version: FORMAT_VERSION, config, rng_seed: seed, parameters, normalizer: None })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.parameters.get(name).ok_or_else(|| domain!("checkpoint has no parameter '{name}'"))
    }

    /// Checks the version and that every parameter matches the configuration.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {} (expected {FORMAT_VERSION})", self.format_version)));
        }
        self.config.validate()?;
        let layout = parameter_layout(&self.config);
        if layout.len() != self.parameters.len() {
            return Err(Error::Format(format!("checkpoint has {} parameters, configuration needs {}", self.parameters.len(), layout.len())));
        }
        for (name, shape, _) in layout {
            let t = self.parameters.get(&name).ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("parameter '{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter '{name}' is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let parameters = self
            .parameters
            .iter()
            .map(|(k, t)| {
                let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), StoredTensor { shape: vec![t.rows, t.cols], data: STANDARD.encode(bytes) })
            })
            .collect();
        let stored = StoredCheckpoint {
            format_version: self.format_version,
            config: self.config.clone(),
            rng_seed: self.rng_seed,
            parameters,
            normalizer: self.normalizer.clone(),
        };
        Ok(serde_json::to_string_pretty(&stored)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_str(s)?;
        if stored.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {} (expected {FORMAT_VERSION})", stored.format_version)));
        }
        let mut parameters = BTreeMap::new();
        for (name, st) in stored.parameters {
            let [rows, cols] =
                <[usize; 2]>::try_from(st.shape.as_slice()).map_err(|_| Error::Format(format!("parameter '{name}' must be two-dimensional")))?;
            let bytes = STANDARD.decode(st.data.as_bytes()).map_err(|e| Error::Format(format!("parameter '{name}': {e}")))?;
            if bytes.len() != rows * cols * 8 {
                return Err(Error::Format(format!("parameter '{name}' has {} bytes for shape {rows}×{cols}", bytes.len())));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            parameters.insert(name, Tensor { rows, cols, data });
        }
        let ckpt = ModelCheckpoint {
            format_version: stored.format_version,
            config: stored.config,
            rng_seed: stored.rng_seed,
            parameters,
            normalizer: stored.normalizer,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelCheckpoint::from_json(&std::fs::read_to_string(path)?)
    }
}
