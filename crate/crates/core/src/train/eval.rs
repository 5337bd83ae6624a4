use std::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{make_noisy_pair, reconstruction_input};
use crate::error::{domain, Result};
use crate::linalg::Mat3;
use crate::material::{lattice_params, LatticeParams, Material};
use crate::net::{ff_baseline_forward, forward, ModelCheckpoint, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Recover the clean cell from `exp(A)·rho`.
    Denoise,
    /// Rebuild the cell starting from the 1 Å cube.
    Reconstruct,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(EvalMode::Denoise),
            "reconstruct" => Ok(EvalMode::Reconstruct),
            _ => Err(domain!("unknown mode '{s}', expected denoise or reconstruct")),
        }
    }
}

/// Per-sample mean absolute errors (lengths in Å, angles in degrees) of the
/// model input and output against the clean cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub len_noisy: f64,
    pub len_denoised: f64,
    pub angle_noisy: f64,
    pub angle_denoised: f64,
    pub len_improvement: f64,
    pub angle_improvement: f64,
    /// Atoms per Å³ of the clean, input and output cells.
    pub density_original: f64,
    pub density_input: f64,
    pub density_output: f64,
}

impl SampleReport {
    /// Output length error relative to the input's.
    pub fn ratio(&self) -> f64 {
        self.len_denoised / self.len_noisy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeformationReport {
    pub mode: EvalMode,
    pub samples: Vec<SampleReport>,
    /// `(sample id, error)` for samples excluded from the aggregates.
    pub failures: Vec<(String, String)>,
    /// Mean length improvement (denoise) or mean length error (reconstruct).
    pub length: f64,
    /// Same for angles, in degrees.
    pub angle: f64,
    pub n: usize,
    pub failed: usize,
}

fn l1(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_report(clean: &Material, input: &Material, pred: &Mat3) -> Result<SampleReport> {
    let (p, q, o): (LatticeParams, LatticeParams, LatticeParams) = (lattice_params(&clean.rho)?, lattice_params(&input.rho)?, lattice_params(pred)?);
    let len_noisy = l1(q.lengths(), p.lengths());
    let len_denoised = l1(o.lengths(), p.lengths());
    let angle_noisy = l1(q.angles(), p.angles());
    let angle_denoised = l1(o.angles(), p.angles());
    let n = clean.n_atoms() as f64;
    Ok(SampleReport {
        sample_id: clean.id.clone(),
        len_noisy,
        len_denoised,
        angle_noisy,
        angle_denoised,
        len_improvement: len_noisy - len_denoised,
        angle_improvement: angle_noisy - angle_denoised,
        density_original: clean.density(),
        density_input: input.density(),
        density_output: n / pred.determinant().abs(),
    })
}

/// Scores `predict` on `dataset`. Inputs are drawn sequentially from `seed`
/// so the report does not depend on the worker count.
pub fn evaluate_with<F>(predict: F, dataset: &[Material], sigma: f64, seed: u64, mode: EvalMode) -> Result<DeformationReport>
where
    F: Fn(&Material) -> Result<Mat3> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = dataset
        .iter()
        .map(|m| match mode {
            EvalMode::Denoise => make_noisy_pair(m, sigma, &mut rng).map(|(noisy, _)| noisy),
            EvalMode::Reconstruct => Ok(reconstruction_input(m)),
        })
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<SampleReport>> = dataset
        .par_iter()
        .zip(&inputs)
        .map(|(clean, input)| {
            let pred = predict(input)?;
            let r = sample_report(clean, input, &pred)?;
            if [r.len_denoised, r.angle_denoised].iter().all(|v| v.is_finite()) {
                Ok(r)
            } else {
                Err(domain!("non-finite prediction"))
            }
        })
        .collect();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (m, r) in dataset.iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => failures.push((m.id.clone(), e.to_string())),
        }
    }
    let (length, angle) = match mode {
        EvalMode::Denoise => (mean(samples.iter().map(|s| s.len_improvement)), mean(samples.iter().map(|s| s.angle_improvement))),
        EvalMode::Reconstruct => (mean(samples.iter().map(|s| s.len_denoised)), mean(samples.iter().map(|s| s.angle_denoised))),
    };
    Ok(DeformationReport { mode, n: samples.len(), failed: failures.len(), samples, failures, length, angle })
}

/// Scores a checkpoint, using the baseline head for baseline checkpoints.
pub fn evaluate(ckpt: &ModelCheckpoint, dataset: &[Material], sigma: f64, seed: u64, mode: EvalMode) -> Result<DeformationReport> {
    ckpt.validate()?;
    match ckpt.config.kind {
        ModelKind::Empnn => evaluate_with(|m| forward(m, ckpt).map(|o| o.rho), dataset, sigma, seed, mode),
        ModelKind::FfBaseline => evaluate_with(|m| ff_baseline_forward(m, ckpt), dataset, sigma, seed, mode),
    }
}

impl DeformationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,len_noisy,len_denoised,angle_noisy,angle_denoised,len_improvement,angle_improvement\n");
        for r in &self.samples {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.sample_id, r.len_noisy, r.len_denoised, r.angle_noisy, r.angle_denoised, r.len_improvement, r.angle_improvement
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn density_csv(&self) -> String {
        let mut s = String::from("sample_id,density_original,density_input,density_output,ratio\n");
        for r in &self.samples {
            writeln!(s, "{},{},{},{},{}", r.sample_id, r.density_original, r.density_input, r.density_output, r.ratio())
                .expect("writing to a String");
        }
        s
    }

    /// `{length, angle, n, failed}`.
    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::json!({ "length": self.length, "angle": self.angle, "n": self.n, "failed": self.failed })
    }
}
