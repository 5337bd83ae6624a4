//! Run configuration: defaults, then an optional JSON file, then flags.

use std::path::{Path, PathBuf};

use empnn::fields::{FieldKind, LambdaSpec};
use empnn::net::{ModelConfig, ModelKind, WeightScale};
use empnn::train::{LossSpec, Task, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::cli::TrainArgs;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Directory holding `train.jsonl` and `val.jsonl`.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Wrap out-of-range fractional coordinates instead of rejecting them.
    pub wrap: bool,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> empnn::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| empnn::Error::Format(format!("{}: {e}", path.display())))
    }

    /// Builds the configuration for `train`, flags taking precedence.
    pub fn resolve(args: &TrainArgs) -> empnn::Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        set(&mut t.total_steps, args.steps);
        set(&mut t.lr, args.lr);
        set(&mut t.loss, args.loss);
        set(&mut t.sigma, args.sigma);
        set(&mut t.batch_size, args.batch_size);
        set(&mut t.seed, args.seed);
        set(&mut t.grad_clip, args.grad_clip);
        set(&mut t.val_every, args.val_every);
        set(&mut t.task, args.task);
        let m = &mut cfg.model;
        if args.baseline.is_some() {
            m.kind = ModelKind::FfBaseline;
        }
        set(&mut m.feature_dim, args.feature_dim);
        set(&mut m.rbf_bins, args.rbf_bins);
        set(&mut m.rbf_delta, args.rbf_delta);
        set(&mut m.n_plain_layers, args.plain_layers);
        set(&mut m.n_deform_layers, args.deform_layers);
        set(&mut m.knn_k, args.knn);
        set(&mut m.deformation_step, args.deformation_step);
        if let Some(fields) = &args.fields {
            m.lambda_spec = LambdaSpec::new(fields.clone(), args.symmetrize || m.lambda_spec.symmetrize)?;
        } else if args.symmetrize {
            m.lambda_spec.symmetrize = true;
        }
        if args.unbounded {
            m.weight_scale = WeightScale::Unbounded;
        } else if let Some(limit) = args.weight_limit {
            m.weight_scale = WeightScale::SigmoidScaled { limit };
        }
        if args.data.is_some() {
            cfg.data.clone_from(&args.data);
        }
        if args.out.is_some() {
            cfg.out.clone_from(&args.out);
        }
        cfg.wrap |= args.wrap;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> empnn::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.kind == ModelKind::FfBaseline && !self.train.loss.is_param() {
            return Err(empnn::Error::Domain(format!(
                "the baseline predicts lattice parameters; use param-mae or param-mse, not {}",
                self.train.loss.name()
            )));
        }
        if self.data.is_none() || self.out.is_none() {
            return Err(empnn::Error::Domain("both a data directory and an output directory are required".into()));
        }
        Ok(())
    }
}

fn set<T: Clone>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn parse_loss(s: &str) -> Result<LossSpec, String> {
    LossSpec::parse(s).map_err(|e| e.to_string())
}

pub fn parse_field(s: &str) -> Result<FieldKind, String> {
    FieldKind::parse(s).map_err(|e| e.to_string())
}

pub fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "denoise" => Ok(Task::Denoise),
        "reconstruct" => Ok(Task::Reconstruct),
        _ => Err(format!("unknown task '{s}', expected denoise or reconstruct")),
    }
}
