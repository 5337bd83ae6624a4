//! Lattice vector fields: per-edge and per-triplet 3×3 generators that the
//! deformation layers weight and sum.
//!
//! Two matrix layouts appear here. A *lattice gradient* `G` is laid out like
//! `rho` itself, so that `δf = Σ G_ab δrho_ab` (see [`crate::linalg::pairing`]).
//! A *generator* `X` lives in physical space and deforms the lattice as
//! `rho ↦ exp(X)·rho`, i.e. every generator vector `a ↦ exp(X)·a`. The
//! generator matching a lattice gradient is `Gᵀ·rho` ([`to_generator`]);
//! it transforms as `X ↦ gXgᵀ` under rotations and is unchanged by lattice
//! re-basing, which the raw gradient is not.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::graph::{EdgeGeometry, GraphGeometry, PeriodicGraph, TripletGeometry};
use crate::linalg::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldKind {
    #[serde(rename = "edge-ketbra")]
    EdgeKetBra,
    #[serde(rename = "triplet-ketbra-diag")]
    TripletKetBraDiag,
    #[serde(rename = "triplet-ketbra-cross")]
    TripletKetBraCross,
    #[serde(rename = "triplet-ketbra-cross-sym")]
    TripletKetBraCrossSym,
    #[serde(rename = "edge-grad-r")]
    EdgeGradR,
    #[serde(rename = "triplet-grad-r")]
    TripletGradR,
    #[serde(rename = "triplet-grad-theta")]
    TripletGradTheta,
    #[serde(rename = "triplet-grad-area")]
    TripletGradArea,
}

impl FieldKind {
    pub const ALL: [FieldKind; 8] = [
        FieldKind::EdgeKetBra,
        FieldKind::TripletKetBraDiag,
        FieldKind::TripletKetBraCross,
        FieldKind::TripletKetBraCrossSym,
        FieldKind::EdgeGradR,
        FieldKind::TripletGradR,
        FieldKind::TripletGradTheta,
        FieldKind::TripletGradArea,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::EdgeKetBra => "edge-ketbra",
            FieldKind::TripletKetBraDiag => "triplet-ketbra-diag",
            FieldKind::TripletKetBraCross => "triplet-ketbra-cross",
            FieldKind::TripletKetBraCrossSym => "triplet-ketbra-cross-sym",
            FieldKind::EdgeGradR => "edge-grad-r",
            FieldKind::TripletGradR => "triplet-grad-r",
            FieldKind::TripletGradTheta => "triplet-grad-theta",
            FieldKind::TripletGradArea => "triplet-grad-area",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FieldKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = FieldKind::ALL.iter().map(|k| k.name()).collect();
            domain!("unknown field '{s}', expected one of {}", names.join(", "))
        })
    }

    /// 1 for fields living on edges, 2 for fields on triplets.
    pub fn grade(self) -> u8 {
        match self {
            FieldKind::EdgeKetBra | FieldKind::EdgeGradR => 1,
            _ => 2,
        }
    }

    /// Number of generators (and therefore weights) per graph element.
    pub fn channels(self) -> usize {
        match self {
            FieldKind::TripletGradR => 2,
            _ => 1,
        }
    }
}

/// A union of field families plus the symmetrisation switch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSpec {
    pub members: Vec<FieldKind>,
    #[serde(default)]
    pub symmetrize: bool,
}

impl LambdaSpec {
    pub fn new(members: Vec<FieldKind>, symmetrize: bool) -> Result<Self> {
        let spec = LambdaSpec { members, symmetrize };
        spec.validate()?;
        Ok(spec)
    }

    pub fn single(kind: FieldKind) -> Self {
        LambdaSpec { members: vec![kind], symmetrize: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(domain!("a field specification needs at least one member"));
        }
        for (i, k) in self.members.iter().enumerate() {
            if self.members[..i].contains(k) {
                return Err(domain!("field '{}' listed twice", k.name()));
            }
        }
        Ok(())
    }

    pub fn edge_members(&self) -> impl Iterator<Item = FieldKind> + '_ {
        self.members.iter().copied().filter(|k| k.grade() == 1)
    }

    pub fn triplet_members(&self) -> impl Iterator<Item = FieldKind> + '_ {
        self.members.iter().copied().filter(|k| k.grade() == 2)
    }

    pub fn edge_channels(&self) -> usize {
        self.edge_members().map(FieldKind::channels).sum()
    }

    pub fn triplet_channels(&self) -> usize {
        self.triplet_members().map(FieldKind::channels).sum()
    }
}

/// A 3×3 deformation generator in physical space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeGenerator(pub Mat3);

/// `|u⟩⟨w| = u·wᵀ`.
pub fn ketbra(u: &Vec3, w: &Vec3) -> Mat3 {
    u * w.transpose()
}

/// `∂r/∂rho` for an edge: `e·uᵀ` in the row layout (`δr = uᵀ δrhoᵀ e`).
pub fn grad_r(g: &EdgeGeometry) -> Mat3 {
    g.e * g.u.transpose()
}

/// `∂θ/∂rho` for the angle between the edge vectors of `a` and `b`.
///
/// With `ω` the unit normal, moving `v_b` along `ω×u_b` opens the angle and
/// moving `v_a` along `ω×u_a` closes it, each at rate `1/r`:
/// `δθ = ⟨ω×u_b, δv_b⟩/r_b − ⟨ω×u_a, δv_a⟩/r_a` with `δv = δrhoᵀ e`.
pub fn grad_theta(a: &EdgeGeometry, b: &EdgeGeometry, t: &TripletGeometry) -> Result<Mat3> {
    let omega = t.omega.ok_or_else(|| domain!("angle gradient of a collinear triplet"))?;
    let da = omega.cross(&a.u) / a.r;
    let db = omega.cross(&b.u) / b.r;
    Ok(b.e * db.transpose() - a.e * da.transpose())
}

/// `∂A/∂rho` for the area `A = ½|v_a × v_b|`:
/// `δA = ½ n·(δv_a × v_b + v_a × δv_b)`.
pub fn grad_area(a: &EdgeGeometry, b: &EdgeGeometry, t: &TripletGeometry) -> Result<Mat3> {
    let n = t.omega.ok_or_else(|| domain!("area gradient of a degenerate triangle"))?;
    let wa = b.v.cross(&n);
    let wb = n.cross(&a.v);
    Ok(0.5 * (a.e * wa.transpose() + b.e * wb.transpose()))
}

/// Physical generator `X` such that `⟨grad, δrho⟩` along `rho ↦ (I + εX)·rho`
/// equals `ε⟨X_out, X⟩`.
pub fn to_generator(grad: &Mat3, rho: &Mat3) -> Mat3 {
    grad.transpose() * rho
}

pub fn symmetrized(m: &Mat3) -> Mat3 {
    0.5 * (m + m.transpose())
}

/// Generators of one channel, one per edge or per triplet, in canonical order.
#[derive(Debug, Clone)]
pub struct FieldChannel {
    pub kind: FieldKind,
    pub grade: u8,
    pub values: Vec<LatticeGenerator>,
}

fn edge_generators(kind: FieldKind, rho: &Mat3, g: &EdgeGeometry) -> Vec<Mat3> {
    match kind {
        FieldKind::EdgeKetBra => vec![ketbra(&g.u, &g.u)],
        FieldKind::EdgeGradR => vec![to_generator(&grad_r(g), rho)],
        _ => unreachable!("not an edge field"),
    }
}

fn triplet_generators(kind: FieldKind, rho: &Mat3, a: &EdgeGeometry, b: &EdgeGeometry, t: &TripletGeometry) -> Vec<Mat3> {
    match kind {
        FieldKind::TripletKetBraDiag => vec![ketbra(&a.u, &a.u)],
        FieldKind::TripletKetBraCross => vec![ketbra(&a.u, &b.u)],
        FieldKind::TripletKetBraCrossSym => vec![ketbra(&a.u, &b.u) + ketbra(&b.u, &a.u)],
        FieldKind::TripletGradR => vec![to_generator(&grad_r(a), rho), to_generator(&grad_r(b), rho)],
        // collinear triplets contribute nothing
        FieldKind::TripletGradTheta => {
            vec![grad_theta(a, b, t).map_or(Mat3::zeros(), |gr| to_generator(&gr, rho))]
        }
        FieldKind::TripletGradArea => {
            vec![grad_area(a, b, t).map_or(Mat3::zeros(), |gr| to_generator(&gr, rho))]
        }
        _ => unreachable!("not a triplet field"),
    }
}

/// Evaluates every member of `spec` on `graph`, one [`FieldChannel`] per
/// channel, members in spec order.
pub fn lambda_eval(spec: &LambdaSpec, graph: &PeriodicGraph, geometry: &GraphGeometry, rho: &Mat3) -> Result<Vec<FieldChannel>> {
    spec.validate()?;
    if geometry.edges.len() != graph.edges.len() || geometry.triplets.len() != graph.triplets.len() {
        return Err(domain!("geometry was computed on a different graph"));
    }
    let finish = |m: Mat3| LatticeGenerator(if spec.symmetrize { symmetrized(&m) } else { m });
    let mut out = Vec::new();
    for kind in spec.members.iter().copied() {
        let per_element: Vec<Vec<Mat3>> = if kind.grade() == 1 {
            geometry.edges.iter().map(|g| edge_generators(kind, rho, g)).collect()
        } else {
            graph
                .triplets
                .iter()
                .zip(&geometry.triplets)
                .map(|(t, tg)| triplet_generators(kind, rho, &geometry.edges[t.first], &geometry.edges[t.second], tg))
                .collect()
        };
        for c in 0..kind.channels() {
            out.push(FieldChannel { kind, grade: kind.grade(), values: per_element.iter().map(|v| finish(v[c])).collect() });
        }
    }
    Ok(out)
}
