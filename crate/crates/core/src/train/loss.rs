use serde::{Deserialize, Serialize};

use super::Normalizer;
use crate::error::{domain, Result};
use crate::linalg::Mat3;
use crate::material::{lattice_params, metric_tensor};
use crate::net::lattice_params_tape;
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    ParamMae,
    ParamMse,
    RhoMae,
    RhoMse,
    /// `trace(F(ρ′)·F(ρ))`, which is not minimised at `ρ′ = ρ`.
    RhoRiemann,
}

impl LossSpec {
    pub const ALL: [LossSpec; 5] = [LossSpec::ParamMae, LossSpec::ParamMse, LossSpec::RhoMae, LossSpec::RhoMse, LossSpec::RhoRiemann];

    pub fn name(self) -> &'static str {
        match self {
            LossSpec::ParamMae => "param-mae",
            LossSpec::ParamMse => "param-mse",
            LossSpec::RhoMae => "rho-mae",
            LossSpec::RhoMse => "rho-mse",
            LossSpec::RhoRiemann => "rho-riemann",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LossSpec::ALL.into_iter().find(|l| l.name() == s).ok_or_else(|| {
            let names: Vec<_> = LossSpec::ALL.iter().map(|l| l.name()).collect();
            domain!("unknown loss '{s}', expected one of {}", names.join(", "))
        })
    }

    pub fn is_param(self) -> bool {
        matches!(self, LossSpec::ParamMae | LossSpec::ParamMse)
    }
}

fn require(normalizer: Option<&Normalizer>) -> Result<&Normalizer> {
    normalizer.ok_or_else(|| domain!("parameter losses need a fitted normalizer"))
}

/// Per-structure loss between a predicted and a target lattice. Parameter
/// losses sum over the six normalised parameters; metric-tensor losses sum
/// over the nine entries.
pub fn loss(spec: LossSpec, rho_pred: &Mat3, rho_target: &Mat3, normalizer: Option<&Normalizer>) -> Result<f64> {
    match spec {
        LossSpec::ParamMae | LossSpec::ParamMse => {
            let n = require(normalizer)?;
            let p = n.normalize(&lattice_params(rho_pred)?.to_radian_array());
            let q = n.normalize(&lattice_params(rho_target)?.to_radian_array());
            let diff = p.iter().zip(&q).map(|(a, b)| a - b);
            Ok(if spec == LossSpec::ParamMae { diff.map(f64::abs).sum() } else { diff.map(|d| d * d).sum() })
        }
        LossSpec::RhoMae | LossSpec::RhoMse => {
            let d = metric_tensor(rho_pred) - metric_tensor(rho_target);
            Ok(if spec == LossSpec::RhoMae { d.abs().sum() } else { d.component_mul(&d).sum() })
        }
        LossSpec::RhoRiemann => Ok((metric_tensor(rho_pred) * metric_tensor(rho_target)).trace()),
    }
}

/// Parameter loss between normalised predictions (any shape with six
/// entries) and raw target parameters `[a, b, c, α, β, γ]` (Å, radians).
pub fn param_loss_tape(tape: &mut Tape, spec: LossSpec, z_pred: Var, target: &[f64; 6], normalizer: &Normalizer) -> Result<Var> {
    let shape = tape.value(z_pred).shape();
    if shape[0] * shape[1] != 6 {
        return Err(domain!("expected six predicted parameters, got shape {shape:?}"));
    }
    let zt = normalizer.normalize(target);
    let t = tape.constant(Tensor::new(shape[0], shape[1], zt.to_vec())?);
    let d = tape.sub(z_pred, t);
    let e = match spec {
        LossSpec::ParamMae => tape.abs(d),
        LossSpec::ParamMse => tape.square(d),
        _ => return Err(domain!("{} is not a parameter loss", spec.name())),
    };
    Ok(tape.sum(e))
}

/// [`loss`] on the tape, differentiable in `rho_pred`.
pub fn loss_tape(tape: &mut Tape, spec: LossSpec, rho_pred: Var, rho_target: &Mat3, normalizer: Option<&Normalizer>) -> Result<Var> {
    if spec.is_param() {
        let n = require(normalizer)?;
        let p = lattice_params_tape(tape, rho_pred);
        // normalise on the tape: (p - mean) / std
        let inv_std = tape.constant(Tensor::column(n.std.iter().map(|s| 1.0 / s).collect()));
        let mean = tape.constant(Tensor::column(n.mean.to_vec()));
        let c = tape.sub(p, mean);
        let z = tape.mul(c, inv_std);
        let target = lattice_params(rho_target)?.to_radian_array();
        return param_loss_tape(tape, spec, z, &target, n);
    }
    let rt = tape.transpose(rho_pred);
    let f = tape.matmul(rho_pred, rt);
    let target = tape.constant(Tensor::from_mat3(&metric_tensor(rho_target)));
    let out = match spec {
        LossSpec::RhoMae | LossSpec::RhoMse => {
            let d = tape.sub(f, target);
            let e = if spec == LossSpec::RhoMae { tape.abs(d) } else { tape.square(d) };
            tape.sum(e)
        }
        _ => {
            // both factors are symmetric, so the trace is the entrywise sum
            let m = tape.mul(f, target);
            tape.sum(m)
        }
    };
    Ok(out)
}
