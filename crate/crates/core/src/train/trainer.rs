use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{make_noisy_pair, reconstruction_input};
use super::eval::{evaluate, EvalMode};
use super::loss::{loss_tape, param_loss_tape, LossSpec};
use super::normalize::Normalizer;
use super::optim::{clip_global_norm, Adam};
use crate::error::{domain, numeric, Result};
use crate::material::{lattice_params, Material};
use crate::net::{bind_parameters, forward_tape, ModelCheckpoint, ModelKind, Prepared};
use crate::tape::{Tape, Tensor};

/// Offset between the training seed and the frozen validation noise.
const VALIDATION_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Denoise,
    Reconstruct,
}

impl Task {
    pub fn mode(self) -> EvalMode {
        match self {
            Task::Denoise => EvalMode::Denoise,
            Task::Reconstruct => EvalMode::Reconstruct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub grad_clip: f64,
    pub loss: LossSpec,
    pub seed: u64,
    pub task: Task,
    /// Steps between validation passes.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.1,
            lr: 1e-4,
            batch_size: 256,
            total_steps: 32768,
            grad_clip: 1.0,
            loss: LossSpec::ParamMae,
            seed: 0,
            task: Task::Denoise,
            val_every: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(domain!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(domain!("learning rate must be non-negative, got {}", self.lr));
        }
        if !(self.grad_clip > 0.0) {
            return Err(domain!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.val_every == 0 {
            return Err(domain!("batch_size, total_steps and val_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean batch loss before the update of this step.
    pub loss: f64,
    pub val_length: Option<f64>,
    pub val_angle: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub curve: Vec<CurvePoint>,
    /// Global gradient norm after clipping, one per step.
    pub clip_norms: Vec<f64>,
}

impl TrainOutcome {
    /// `step,loss,val_length,val_angle`; validation columns are empty
    /// between validation passes.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss,val_length,val_angle\n");
        for p in &self.curve {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", p.step, p.loss, opt(p.val_length), opt(p.val_angle)));
        }
        s
    }
}

type Grads = BTreeMap<String, Tensor>;

/// Loss and parameter gradients for one training example.
fn sample_gradient(ckpt: &ModelCheckpoint, clean: &Material, noise_seed: u64, cfg: &TrainConfig, norm: &Normalizer) -> Result<(f64, Grads)> {
    let input = match cfg.task {
        Task::Denoise => make_noisy_pair(clean, cfg.sigma, &mut ChaCha8Rng::seed_from_u64(noise_seed))?.0,
        Task::Reconstruct => reconstruction_input(clean),
    };
    let prep = Prepared::new(&input, &ckpt.config)?;
    let mut tape = Tape::new();
    let params = bind_parameters(&mut tape, ckpt, true);
    let out = forward_tape(&mut tape, &params, &ckpt.config, &prep)?;
    let loss = match (ckpt.config.kind, out.params) {
        (ModelKind::FfBaseline, Some(z)) => {
            let target = lattice_params(&clean.rho)?.to_radian_array();
            param_loss_tape(&mut tape, cfg.loss, z, &target, norm)?
        }
        _ => loss_tape(&mut tape, cfg.loss, out.rho, &clean.rho, Some(norm))?,
    };
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss);
    let mut out = Grads::new();
    for (name, var) in params.iter() {
        if let Some(g) = grads.take(*var) {
            out.insert(name.clone(), g);
        }
    }
    Ok((value, out))
}

/// Adam on `cfg.loss` with fresh noise every step. Batch members run on the
/// rayon pool; their gradients are reduced in batch order so results do not
/// depend on the worker count.
pub fn train(init: ModelCheckpoint, train_set: &[Material], val_set: &[Material], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if train_set.is_empty() {
        return Err(domain!("training set is empty"));
    }
    if init.config.kind == ModelKind::FfBaseline && !cfg.loss.is_param() {
        return Err(domain!("the baseline predicts lattice parameters and trains only with param-mae or param-mse"));
    }
    let mut ckpt = init;
    let norm = match &ckpt.normalizer {
        Some(n) => n.clone(),
        None => Normalizer::fit(train_set)?,
    };
    ckpt.normalizer = Some(norm.clone());
    ckpt.rng_seed = cfg.seed;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.total_steps);
    let mut clip_norms = Vec::with_capacity(cfg.total_steps);
    let val_seed = cfg.seed.wrapping_add(VALIDATION_SEED_OFFSET);

    for step in 0..cfg.total_steps {
        let batch: Vec<(usize, u64)> = (0..cfg.batch_size).map(|_| (rng.random_range(0..train_set.len()), rng.random::<u64>())).collect();
        let results: Vec<Result<(f64, Grads)>> = batch.par_iter().map(|&(i, seed)| sample_gradient(&ckpt, &train_set[i], seed, cfg, &norm)).collect();
        let mut total = 0.0;
        let mut grads = Grads::new();
        for ((i, _), r) in batch.iter().zip(results) {
            let (l, g) = r.map_err(|e| numeric!("step {step}, sample {}: {e}", train_set[*i].id))?;
            total += l;
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let loss = total * scale;
        grads.values_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x *= scale));
        if !loss.is_finite() || !grads.values().all(Tensor::is_finite) {
            let ids: Vec<&str> = batch.iter().map(|(i, _)| train_set[*i].id.as_str()).collect();
            return Err(numeric!("non-finite loss or gradient at step {step}; batch samples {ids:?}"));
        }
        clip_norms.push(clip_global_norm(&mut grads, cfg.grad_clip));
        adam.step(&mut ckpt.parameters, &grads);

        let done = step + 1;
        let mut point = CurvePoint { step, loss, val_length: None, val_angle: None };
        if !val_set.is_empty() && (done % cfg.val_every == 0 || done == cfg.total_steps) {
            let report = evaluate(&ckpt, val_set, cfg.sigma, val_seed, cfg.task.mode())?;
            point.val_length = Some(report.length);
            point.val_angle = Some(report.angle);
        }
        curve.push(point);
    }
    Ok(TrainOutcome { checkpoint: ckpt, curve, clip_norms })
}
