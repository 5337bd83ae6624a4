//! Tape-level building blocks of the network.

use std::rc::Rc;

use crate::error::{domain, numeric, Result};
use crate::fields::{FieldKind, LambdaSpec};
use crate::graph::COLLINEAR_TOL;
use crate::linalg::Mat3;
use crate::tape::{Segments, Tape, Tensor, Var};

use super::WeightScale;

/// `exp(-(d - kδ)² / δ)` for `k = 0..bins`.
pub fn rbf_encode(d: f64, bins: usize, delta: f64) -> Result<Vec<f64>> {
    if !(d >= 0.0) || !(delta > 0.0) {
        return Err(domain!("rbf_encode needs d ≥ 0 and δ > 0, got d = {d}, δ = {delta}"));
    }
    Ok((0..bins)
        .map(|k| {
            let c = d - k as f64 * delta;
            (-c * c / delta).exp()
        })
        .collect())
}

/// `W′ silu(W [h_i ‖ h_j ‖ rbf])` with `W` stored as `(2F + D) × F`.
#[derive(Debug, Clone, Copy)]
pub struct MessageWeights {
    pub w: Var,
    pub w_out: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_ir: Var,
    pub w_iz: Var,
    pub w_in: Var,
    pub w_hr: Var,
    pub w_hz: Var,
    pub w_hn: Var,
    pub b_ir: Var,
    pub b_iz: Var,
    pub b_in: Var,
    pub b_hr: Var,
    pub b_hz: Var,
    pub b_hn: Var,
}

/// Deformation-weight head: a hidden layer then one output per channel.
#[derive(Debug, Clone, Copy)]
pub struct HeadWeights {
    pub w: Var,
    pub w_out: Var,
}

/// Projects the concatenation `[x_0 ‖ x_1 ‖ …]` through `w` without forming
/// it: each block of rows of `w` multiplies its own input.
fn split_linear(tape: &mut Tape, w: Var, blocks: &[(Var, Option<&Rc<[usize]>>)]) -> Result<Var> {
    let mut offset = 0;
    let mut acc: Option<Var> = None;
    for &(x, idx) in blocks {
        let width = tape.value(x).cols;
        if offset + width > tape.value(w).rows {
            return Err(domain!("input of width {} exceeds weight rows {}", offset + width, tape.value(w).rows));
        }
        let wb = tape.slice_rows(w, offset, width);
        let mut p = tape.matmul(x, wb);
        if let Some(idx) = idx {
            p = tape.gather(p, idx.clone());
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, p),
            None => p,
        });
        offset += width;
    }
    if offset != tape.value(w).rows {
        return Err(domain!("input width {offset} does not match weight rows {}", tape.value(w).rows));
    }
    acc.ok_or_else(|| domain!("empty input"))
}

/// Messages for every edge, `E × F`.
pub fn message_edge(tape: &mut Tape, mw: &MessageWeights, h: Var, src: &Rc<[usize]>, dst: &Rc<[usize]>, rbf: Var) -> Result<Var> {
    if tape.value(rbf).rows != src.len() || src.len() != dst.len() {
        return Err(domain!("edge index and RBF rows disagree"));
    }
    let pre = split_linear(tape, mw.w, &[(h, Some(src)), (h, Some(dst)), (rbf, None)])?;
    let hidden = tape.silu(pre);
    if tape.value(mw.w_out).rows != tape.value(hidden).cols {
        return Err(domain!("message output weight has the wrong shape"));
    }
    Ok(tape.matmul(hidden, mw.w_out))
}

/// Gated recurrent update with `h` as hidden state and `x` as input.
pub fn node_update(tape: &mut Tape, g: &GruWeights, h: Var, x: Var) -> Result<Var> {
    let (sh, sx) = (tape.value(h).shape(), tape.value(x).shape());
    if sh != sx || tape.value(g.w_ir).shape() != [sx[1], sh[1]] {
        return Err(domain!("node_update shapes {sh:?} and {sx:?} do not match the cell"));
    }
    let gate = |tape: &mut Tape, wi: Var, bi: Var, wh: Var, bh: Var| {
        let a = tape.matmul(x, wi);
        let a = tape.add_row(a, bi);
        let b = tape.matmul(h, wh);
        let b = tape.add_row(b, bh);
        (a, b)
    };
    let (ra, rb) = gate(tape, g.w_ir, g.b_ir, g.w_hr, g.b_hr);
    let r = tape.add(ra, rb);
    let r = tape.sigmoid(r);
    let (za, zb) = gate(tape, g.w_iz, g.b_iz, g.w_hz, g.b_hz);
    let z = tape.add(za, zb);
    let z = tape.sigmoid(z);
    let (na, nb) = gate(tape, g.w_in, g.b_in, g.w_hn, g.b_hn);
    let rn = tape.mul(r, nb);
    let n = tape.add(na, rn);
    let n = tape.tanh(n);
    // (1 - z)·n + z·h
    let d = tape.sub(h, n);
    let zd = tape.mul(z, d);
    Ok(tape.add(n, zd))
}

/// Edge and triplet geometry on the tape, recomputed from the lattice.
#[derive(Debug, Clone)]
pub struct TapeGeometry {
    pub v: Var,
    pub r: Var,
    pub u: Var,
    pub rbf: Var,
    pub triplets: Option<TripletTape>,
}

#[derive(Debug, Clone)]
pub struct TripletTape {
    pub first: Rc<[usize]>,
    pub second: Rc<[usize]>,
    pub va: Var,
    pub vb: Var,
    pub ua: Var,
    pub ub: Var,
    /// Unit normal; rows of collinear triplets are zero.
    pub omega: Var,
    pub cos: Var,
    pub sin: Var,
    /// 1 for regular triplets, 0 for collinear ones.
    pub mask: Var,
}

impl TapeGeometry {
    /// `efrac` holds one fractional edge vector per row; physical vectors are
    /// `efrac · rho`.
    pub fn new(tape: &mut Tape, rho: Var, efrac: Var, triplets: Option<(&Rc<[usize]>, &Rc<[usize]>)>, bins: usize, delta: f64) -> Result<Self> {
        let v = tape.matmul(efrac, rho);
        let r = tape.row_norm(v);
        if tape.value(r).data.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(numeric!("edge of zero or non-finite length"));
        }
        let inv_r = tape.recip(r);
        let u = tape.mul_col(v, inv_r);
        let rbf = tape.rbf(r, delta, bins);
        let triplets = triplets.map(|(first, second)| Self::triplets(tape, v, r, u, first, second));
        Ok(TapeGeometry { v, r, u, rbf, triplets })
    }

    fn triplets(tape: &mut Tape, v: Var, r: Var, u: Var, first: &Rc<[usize]>, second: &Rc<[usize]>) -> TripletTape {
        let va = tape.gather(v, first.clone());
        let vb = tape.gather(v, second.clone());
        let ua = tape.gather(u, first.clone());
        let ub = tape.gather(u, second.clone());
        let ra = tape.gather(r, first.clone());
        let rb = tape.gather(r, second.clone());
        let c = tape.cross(va, vb);
        let s = tape.row_norm(c);
        let dot = tape.row_dot(va, vb);
        let rr = tape.mul(ra, rb);
        let inv_rr = tape.recip(rr);
        let cos = tape.mul(dot, inv_rr);
        let sin = tape.mul(s, inv_rr);
        let regular: Vec<f64> =
            tape.value(s).data.iter().zip(&tape.value(rr).data).map(|(s, rr)| if *s >= COLLINEAR_TOL * rr { 1.0 } else { 0.0 }).collect();
        let fill: Vec<f64> = regular.iter().map(|m| 1.0 - m).collect();
        let mask = tape.constant(Tensor::column(regular));
        let fill = tape.constant(Tensor::column(fill));
        let s_masked = tape.mul(s, mask);
        let s_safe = tape.add(s_masked, fill);
        let inv_s = tape.recip(s_safe);
        let inv_s = tape.mul(inv_s, mask);
        let omega = tape.mul_col(c, inv_s);
        TripletTape { first: first.clone(), second: second.clone(), va, vb, ua, ub, omega, cos, sin, mask }
    }
}

fn scale_weights(tape: &mut Tape, raw: Var, scale: WeightScale) -> Var {
    match scale {
        WeightScale::Unbounded => raw,
        WeightScale::SigmoidScaled { limit } => {
            let s = tape.sigmoid(raw);
            tape.affine(s, 2.0 * limit, -limit)
        }
    }
}

/// Per-edge (`E × m_e`) and per-triplet (`T × m_t`) deformation weights.
/// Triplet inputs are `[h_i ‖ h_j ‖ h_k ‖ rbf(r_γ) ‖ rbf(r_γ′) ‖ cos θ ‖ sin θ]`
/// for the chain `i → j → k`.
#[allow(clippy::too_many_arguments)]
pub fn deformation_weights(
    tape: &mut Tape,
    edge_head: Option<&HeadWeights>,
    triplet_head: Option<&HeadWeights>,
    h: Var,
    geo: &TapeGeometry,
    src: &Rc<[usize]>,
    dst: &Rc<[usize]>,
    scale: WeightScale,
) -> Result<(Option<Var>, Option<Var>)> {
    let edge = match edge_head {
        Some(head) => {
            let pre = split_linear(tape, head.w, &[(h, Some(src)), (h, Some(dst)), (geo.rbf, None)])?;
            let hidden = tape.silu(pre);
            let raw = tape.matmul(hidden, head.w_out);
            Some(scale_weights(tape, raw, scale))
        }
        None => None,
    };
    let triplet = match (triplet_head, &geo.triplets) {
        (Some(head), Some(t)) if !t.first.is_empty() => {
            let ti: Rc<[usize]> = t.first.iter().map(|&e| src[e]).collect();
            let tj: Rc<[usize]> = t.first.iter().map(|&e| dst[e]).collect();
            let tk: Rc<[usize]> = t.second.iter().map(|&e| dst[e]).collect();
            let angles = tape.concat_cols(&[t.cos, t.sin]);
            let pre = split_linear(
                tape,
                head.w,
                &[(h, Some(&ti)), (h, Some(&tj)), (h, Some(&tk)), (geo.rbf, Some(&t.first)), (geo.rbf, Some(&t.second)), (angles, None)],
            )?;
            let hidden = tape.silu(pre);
            let raw = tape.matmul(hidden, head.w_out);
            Some(scale_weights(tape, raw, scale))
        }
        (Some(_), None) => return Err(domain!("triplet head without triplet geometry")),
        _ => None,
    };
    Ok((edge, triplet))
}

/// `(a, b, coefficient)`: the generator `coefficient · Σ_i w_i a_i b_iᵀ`.
type Term = (Var, Var, f64);

fn edge_terms(kind: FieldKind, geo: &TapeGeometry) -> Vec<Vec<Term>> {
    match kind {
        FieldKind::EdgeKetBra => vec![vec![(geo.u, geo.u, 1.0)]],
        FieldKind::EdgeGradR => vec![vec![(geo.v, geo.u, 1.0)]],
        _ => unreachable!("not an edge field"),
    }
}

fn triplet_terms(tape: &mut Tape, kind: FieldKind, t: &TripletTape) -> Vec<Vec<Term>> {
    match kind {
        FieldKind::TripletKetBraDiag => vec![vec![(t.ua, t.ua, 1.0)]],
        FieldKind::TripletKetBraCross => vec![vec![(t.ua, t.ub, 1.0)]],
        FieldKind::TripletKetBraCrossSym => vec![vec![(t.ua, t.ub, 1.0), (t.ub, t.ua, 1.0)]],
        FieldKind::TripletGradR => vec![vec![(t.va, t.ua, 1.0)], vec![(t.vb, t.ub, 1.0)]],
        FieldKind::TripletGradTheta => {
            let wb = tape.cross(t.omega, t.ub);
            let wa = tape.cross(t.omega, t.ua);
            vec![vec![(wb, t.ub, 1.0), (wa, t.ua, -1.0)]]
        }
        FieldKind::TripletGradArea => {
            let wa = tape.cross(t.vb, t.omega);
            let wb = tape.cross(t.omega, t.va);
            vec![vec![(wa, t.va, 0.5), (wb, t.vb, 0.5)]]
        }
        _ => unreachable!("not a triplet field"),
    }
}

fn masked(kind: FieldKind) -> bool {
    matches!(kind, FieldKind::TripletGradTheta | FieldKind::TripletGradArea)
}

/// Largest `‖a_i‖·‖b_i‖` over the rows.
fn max_outer_norm(tape: &Tape, a: Var, b: Var) -> f64 {
    let (ta, tb) = (tape.value(a), tape.value(b));
    (0..ta.rows)
        .map(|i| {
            let na: f64 = ta.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = tb.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            na * nb
        })
        .fold(0.0, f64::max)
}

/// The generator `Λ = (1/|Γ₁|) Σ w_γ λ_γ + (1/|Γ₂|) Σ w_γγ′ λ_γγ′`,
/// symmetrised if the spec asks for it, together with an upper bound on
/// `‖Λ‖_F / max|w|`.
pub fn weighted_generator(
    tape: &mut Tape,
    spec: &LambdaSpec,
    geo: &TapeGeometry,
    w_edges: Option<Var>,
    w_triplets: Option<Var>,
) -> Result<(Var, f64)> {
    let n_edges = tape.value(geo.v).rows;
    if n_edges == 0 {
        return Err(domain!("cannot deform along an empty edge set"));
    }
    let mut parts = Vec::new();
    let mut bound = 0.0;
    let mut channel = 0;
    for kind in spec.edge_members() {
        let w = w_edges.ok_or_else(|| domain!("edge weights missing"))?;
        for terms in edge_terms(kind, geo) {
            let wc = tape.slice_cols(w, channel, 1);
            channel += 1;
            let mut sum: Option<Var> = None;
            for (a, b, coef) in terms {
                bound += coef.abs() * max_outer_norm(tape, a, b);
                let wk = if coef == 1.0 { wc } else { tape.scale(wc, coef) };
                let o = tape.outer_sum(a, b, wk);
                sum = Some(sum.map_or(o, |s| tape.add(s, o)));
            }
            let s = sum.expect("at least one term");
            parts.push(tape.scale(s, 1.0 / n_edges as f64));
        }
    }
    let mut channel = 0;
    let n_triplets = geo.triplets.as_ref().map_or(0, |t| t.first.len());
    if n_triplets > 0 {
        let t = geo.triplets.clone().expect("triplet geometry");
        for kind in spec.triplet_members() {
            let w = w_triplets.ok_or_else(|| domain!("triplet weights missing"))?;
            for terms in triplet_terms(tape, kind, &t) {
                let mut wc = tape.slice_cols(w, channel, 1);
                channel += 1;
                if masked(kind) {
                    wc = tape.mul(wc, t.mask);
                }
                let mut sum: Option<Var> = None;
                for (a, b, coef) in terms {
                    bound += coef.abs() * max_outer_norm(tape, a, b);
                    let wk = if coef == 1.0 { wc } else { tape.scale(wc, coef) };
                    let o = tape.outer_sum(a, b, wk);
                    sum = Some(sum.map_or(o, |s| tape.add(s, o)));
                }
                let s = sum.expect("at least one term");
                parts.push(tape.scale(s, 1.0 / n_triplets as f64));
            }
        }
    }
    let mut total = match parts.split_first() {
        Some((&first, rest)) => rest.iter().fold(first, |acc, &p| tape.add(acc, p)),
        // only triplet members and no triplets: no deformation
        None => tape.constant(Tensor::zeros(3, 3)),
    };
    if spec.symmetrize {
        let tr = tape.transpose(total);
        let s = tape.add(total, tr);
        total = tape.scale(s, 0.5);
    }
    Ok((total, bound))
}

/// First-order lattice update `rho ↦ (I + kΛ)·rho` acting on generator rows.
pub fn deform_lattice(tape: &mut Tape, rho: Var, lambda: Var, k: f64) -> Var {
    let lt = tape.transpose(lambda);
    let step = tape.matmul(rho, lt);
    let step = tape.scale(step, k);
    tape.add(rho, step)
}

/// Plain-matrix form of the lattice update for explicit weights and generators.
pub fn apply_deformation(rho: &Mat3, edge_terms: &[(f64, Mat3)], triplet_terms: &[(f64, Mat3)], k: f64) -> Result<Mat3> {
    if edge_terms.is_empty() {
        return Err(domain!("cannot deform along an empty edge set"));
    }
    if !(k > 0.0) {
        return Err(domain!("deformation step must be positive, got {k}"));
    }
    let mean = |terms: &[(f64, Mat3)]| terms.iter().map(|(w, l)| *w * l).sum::<Mat3>() / terms.len() as f64;
    let mut lambda = mean(edge_terms);
    if !triplet_terms.is_empty() {
        lambda += mean(triplet_terms);
    }
    Ok(rho + k * rho * lambda.transpose())
}

/// Lattice parameters `[a, b, c, α, β, γ]` (Å, radians) as a `6 × 1` column.
pub fn lattice_params_tape(tape: &mut Tape, rho: Var) -> Var {
    let lengths = tape.row_norm(rho);
    let a = tape.slice_rows(rho, 0, 1);
    let b = tape.slice_rows(rho, 1, 1);
    let c = tape.slice_rows(rho, 2, 1);
    let left = tape.concat_rows(&[b, a, a]);
    let right = tape.concat_rows(&[c, c, b]);
    let cr = tape.cross(left, right);
    let s = tape.row_norm(cr);
    let d = tape.row_dot(left, right);
    let angles = tape.atan2(s, d);
    tape.concat_rows(&[lengths, angles])
}

/// Row segments for summing edge messages into their source atom.
pub(crate) fn source_segments(src: &[usize], n_atoms: usize) -> Result<Rc<Segments>> {
    Ok(Rc::new(Segments::new(src.to_vec(), n_atoms)?))
}
