use std::collections::BTreeMap;
use std::rc::Rc;

use super::layers::{
    deform_lattice, deformation_weights, message_edge, node_update, source_segments, weighted_generator, GruWeights, HeadWeights, MessageWeights,
    TapeGeometry,
};
use super::{ModelCheckpoint, ModelConfig, ModelKind, WeightScale};
use crate::error::{domain, numeric, Result};
use crate::graph::{build_graph, GraphPolicy, PeriodicGraph};
use crate::linalg::Mat3;
use crate::material::{params_to_lattice, LatticeParams, Material};
use crate::tape::{Segments, Tape, Tensor, Var};

/// Topology and index tables of one input, fixed for the whole forward pass.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: PeriodicGraph,
    pub rho: Mat3,
    efrac: Tensor,
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    first: Rc<[usize]>,
    second: Rc<[usize]>,
    segments: Rc<Segments>,
    species: Rc<[usize]>,
}

impl Prepared {
    pub fn new(m: &Material, cfg: &ModelConfig) -> Result<Self> {
        m.validate()?;
        if let Some(z) = m.z.iter().find(|&&z| z > cfg.max_atomic_number) {
            return Err(domain!("atomic number {z} exceeds the model's table of {}", cfg.max_atomic_number));
        }
        let graph = build_graph(m, &GraphPolicy::KnnShell(cfg.knn_k))?;
        let frac = graph.frac_vectors(&m.x);
        let efrac = Tensor::new(frac.len(), 3, frac.iter().flat_map(|e| [e.x, e.y, e.z]).collect())?;
        let src: Rc<[usize]> = graph.edges.iter().map(|e| e.src).collect();
        let dst: Rc<[usize]> = graph.edges.iter().map(|e| e.dst).collect();
        let first = graph.triplets.iter().map(|t| t.first).collect();
        let second = graph.triplets.iter().map(|t| t.second).collect();
        let segments = source_segments(&src, m.n_atoms())?;
        let species = m.z.iter().map(|&z| z as usize - 1).collect();
        Ok(Prepared { graph, rho: m.rho, efrac, src, dst, first, second, segments, species })
    }

    pub fn n_atoms(&self) -> usize {
        self.graph.n_vertices
    }
}

/// Checkpoint parameters placed on a tape.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| domain!("parameter '{name}' is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn message(&self, prefix: &str) -> Result<MessageWeights> {
        Ok(MessageWeights { w: self.get(&format!("{prefix}.msg.w"))?, w_out: self.get(&format!("{prefix}.msg.w_out"))? })
    }

    fn gru(&self, prefix: &str) -> Result<GruWeights> {
        let g = |n: &str| self.get(&format!("{prefix}.gru.{n}"));
        Ok(GruWeights {
            w_ir: g("w_ir")?,
            w_iz: g("w_iz")?,
            w_in: g("w_in")?,
            w_hr: g("w_hr")?,
            w_hz: g("w_hz")?,
            w_hn: g("w_hn")?,
            b_ir: g("b_ir")?,
            b_iz: g("b_iz")?,
            b_in: g("b_in")?,
            b_hr: g("b_hr")?,
            b_hz: g("b_hz")?,
            b_hn: g("b_hn")?,
        })
    }

    fn head(&self, name: &str) -> Result<Option<HeadWeights>> {
        match self.vars.get(&format!("{name}.w")) {
            Some(&w) => Ok(Some(HeadWeights { w, w_out: self.get(&format!("{name}.w_out"))? })),
            None => Ok(None),
        }
    }
}

/// Places every parameter on `tape`, as leaves when `trainable`.
pub fn bind_parameters(tape: &mut Tape, ckpt: &ModelCheckpoint, trainable: bool) -> BoundParams {
    let vars = ckpt.parameters.iter().map(|(k, t)| (k.clone(), if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })).collect();
    BoundParams { vars }
}

/// Result of the network on one tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutput {
    /// Predicted lattice (EMPNN) or the unchanged input lattice (baseline).
    pub rho: Var,
    /// Final node features, `n × F`.
    pub features: Var,
    /// Normalised lattice parameters, `1 × 6` (baseline only).
    pub params: Option<Var>,
}

fn message_layer(tape: &mut Tape, p: &BoundParams, prefix: &str, h: Var, geo: &TapeGeometry, prep: &Prepared) -> Result<Var> {
    let msg = message_edge(tape, &p.message(prefix)?, h, &prep.src, &prep.dst, geo.rbf)?;
    let agg = tape.segment_sum(msg, prep.segments.clone());
    node_update(tape, &p.gru(prefix)?, h, agg)
}

/// Builds the full network for `prep` on `tape`.
pub fn forward_tape(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, prep: &Prepared) -> Result<TapeOutput> {
    let efrac = tape.constant(prep.efrac.clone());
    let mut rho = tape.constant(Tensor::from_mat3(&prep.rho));
    let table = p.get("embedding")?;
    let mut h = tape.gather(table, prep.species.clone());

    let geo = TapeGeometry::new(tape, rho, efrac, None, cfg.rbf_bins, cfg.rbf_delta)?;
    for l in 0..cfg.n_plain_layers {
        h = message_layer(tape, p, &format!("plain.{l}"), h, &geo, prep)?;
    }

    if cfg.kind == ModelKind::FfBaseline {
        let n = prep.n_atoms();
        let pool = tape.constant(Tensor::new(1, n, vec![1.0 / n as f64; n])?);
        let mut x = tape.matmul(pool, h);
        for k in 0..5 {
            let y = tape.matmul(x, p.get(&format!("ff.{k}.w"))?);
            x = tape.add_row(y, p.get(&format!("ff.{k}.b"))?);
            if k < 4 {
                x = tape.silu(x);
            }
        }
        return Ok(TapeOutput { rho, features: h, params: Some(x) });
    }

    let spec = &cfg.lambda_spec;
    let wants_triplets = spec.triplet_members().next().is_some();
    for l in 0..cfg.n_deform_layers {
        let prefix = format!("deform.{l}");
        let trip = wants_triplets.then_some((&prep.first, &prep.second));
        let geo = TapeGeometry::new(tape, rho, efrac, trip, cfg.rbf_bins, cfg.rbf_delta)?;
        h = message_layer(tape, p, &prefix, h, &geo, prep)?;
        let edge_head = p.head(&format!("{prefix}.edge_head"))?;
        let triplet_head = p.head(&format!("{prefix}.triplet_head"))?;
        let (we, wt) = deformation_weights(tape, edge_head.as_ref(), triplet_head.as_ref(), h, &geo, &prep.src, &prep.dst, cfg.weight_scale)?;
        let (lambda, c) = weighted_generator(tape, spec, &geo, we, wt)?;
        let before = frobenius(tape.value(rho));
        rho = deform_lattice(tape, rho, lambda, cfg.deformation_step);
        let after = frobenius(tape.value(rho));
        if !after.is_finite() {
            return Err(numeric!("lattice became non-finite in deformation layer {l}"));
        }
        if let WeightScale::SigmoidScaled { limit } = cfg.weight_scale {
            let allowed = (1.0 + cfg.deformation_step * limit * c) * before;
            if after > allowed * (1.0 + 1e-12) {
                return Err(numeric!("deformation layer {l} grew the lattice norm {before} to {after}, bound {allowed}"));
            }
        }
    }
    Ok(TapeOutput { rho, features: h, params: None })
}

fn frobenius(t: &Tensor) -> f64 {
    t.sum_squares().sqrt()
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub rho: Mat3,
    pub features: Tensor,
}

/// Predicted lattice and final node features of the deformation network.
pub fn forward(m: &Material, ckpt: &ModelCheckpoint) -> Result<ForwardOutput> {
    if ckpt.config.kind != ModelKind::Empnn {
        return Err(domain!("forward needs a deformation-network checkpoint"));
    }
    let prep = Prepared::new(m, &ckpt.config)?;
    let mut tape = Tape::new();
    let p = bind_parameters(&mut tape, ckpt, false);
    let out = forward_tape(&mut tape, &p, &ckpt.config, &prep)?;
    Ok(ForwardOutput { rho: tape.value(out.rho).to_mat3(), features: tape.value(out.features).clone() })
}

/// Lattice predicted by the invariant baseline: denormalised parameters
/// turned into a lower-triangular cell.
pub fn ff_baseline_forward(m: &Material, ckpt: &ModelCheckpoint) -> Result<Mat3> {
    if ckpt.config.kind != ModelKind::FfBaseline {
        return Err(domain!("ff_baseline_forward needs a baseline checkpoint"));
    }
    let norm = ckpt.normalizer.as_ref().ok_or_else(|| domain!("baseline checkpoint lacks a normalizer"))?;
    let prep = Prepared::new(m, &ckpt.config)?;
    let mut tape = Tape::new();
    let p = bind_parameters(&mut tape, ckpt, false);
    let out = forward_tape(&mut tape, &p, &ckpt.config, &prep)?;
    let z = tape.value(out.params.expect("baseline outputs parameters"));
    let z: [f64; 6] = z.data.as_slice().try_into().expect("six parameters");
    params_to_lattice(&LatticeParams::from_radian_array(&norm.denormalize(&z)))
}
