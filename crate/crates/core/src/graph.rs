//! Periodic directed 2-graphs: edges `(i, j, τ)` between atom `i` and the
//! image of atom `j` shifted by lattice vector `τ`, and triplets of chained
//! edges.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::material::{cartesian, for_each_image, supercell_bound, tau_vec, Material};

/// Two edges are tied when their lengths agree after rounding to this.
const TIE_RESOLUTION: f64 = 1e-9;
pub(crate) const COLLINEAR_TOL: f64 = 1e-10;
const MAX_RADIUS_DOUBLINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub tau: [i32; 3],
}

impl Edge {
    pub fn is_reverse_of(&self, other: &Edge) -> bool {
        self.src == other.dst && self.dst == other.src && self.tau == other.tau.map(|t| -t)
    }

    /// Fractional edge vector `x_dst - x_src + τ`.
    pub fn frac_vector(&self, x: &[Vec3]) -> Vec3 {
        x[self.dst] - x[self.src] + tau_vec(self.tau)
    }
}

/// A pair of chained edges: `edges[first].dst == edges[second].src`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub first: usize,
    pub second: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GraphPolicy {
    /// The `k` nearest images of every atom.
    Knn(usize),
    /// The `k` nearest images plus every further image tied with the k-th
    /// distance (within 1e-9 Å). Unlike [`GraphPolicy::Knn`] the selection
    /// depends on distances only, so it commutes with changes of basis.
    KnnShell(usize),
    /// Per-atom strict cutoff radii in Å.
    Cutoff(Vec<f64>),
}

impl GraphPolicy {
    pub fn uniform_cutoff(c: f64, n: usize) -> Self {
        GraphPolicy::Cutoff(vec![c; n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicGraph {
    pub n_vertices: usize,
    /// Sorted by `(src, dst, τ)`.
    pub edges: Vec<Edge>,
    /// Sorted by `(first, second)`.
    pub triplets: Vec<Triplet>,
    pub policy: GraphPolicy,
}

struct Candidate {
    edge: Edge,
    r: f64,
}

fn candidates_within(m: &Material, i: usize, radius: f64, bound: [i32; 3]) -> Vec<Candidate> {
    let mut out = Vec::new();
    for j in 0..m.n_atoms() {
        let base = m.x[j] - m.x[i];
        for_each_image(bound, |tau| {
            if i == j && tau == [0, 0, 0] {
                return;
            }
            let r = cartesian(&m.rho, &(base + tau_vec(tau))).norm();
            if r <= radius && r > 0.0 {
                out.push(Candidate { edge: Edge { src: i, dst: j, tau }, r });
            }
        });
    }
    out
}

/// Ranking key for nearest-neighbour selection. Self images `±τ` share a
/// key prefix so that the two members of a pair are always adjacent.
fn knn_key(c: &Candidate) -> (i64, usize, [i32; 3], [i32; 3]) {
    let tau = c.edge.tau;
    let canon = if c.edge.dst == c.edge.src { tau.min(tau.map(|t| -t)) } else { tau };
    ((c.r / TIE_RESOLUTION).round() as i64, c.edge.dst, canon, tau)
}

fn knn_edges(m: &Material, k: usize, complete_shell: bool) -> Result<Vec<Edge>> {
    let n = m.n_atoms();
    let volume = m.rho.determinant().abs();
    let mut radius = 2.0 * (volume / n as f64).cbrt() * (k as f64).cbrt();
    'search: for _ in 0..MAX_RADIUS_DOUBLINGS {
        let bound = supercell_bound(&m.rho, radius)?;
        let per_atom: Vec<Vec<Candidate>> = (0..n).map(|i| candidates_within(m, i, radius, bound)).collect();
        if per_atom.iter().any(|c| c.len() < k) {
            radius *= 2.0;
            continue;
        }
        let mut edges = Vec::with_capacity(n * k);
        for (i, mut cands) in per_atom.into_iter().enumerate() {
            cands.sort_by_key(knn_key);
            let mut take = k;
            if complete_shell {
                let rk = cands[k - 1].r;
                take += cands[k..].iter().take_while(|c| c.r <= rk + TIE_RESOLUTION).count();
                if take == cands.len() {
                    // the tied shell may continue past the search radius
                    radius *= 2.0;
                    continue 'search;
                }
            } else {
                // never split a pair of opposite self images
                let last = &cands[k - 1].edge;
                if last.dst == i && cands.get(k).is_some_and(|c| c.edge.is_reverse_of(last)) {
                    take += 1;
                }
            }
            edges.extend(cands[..take].iter().map(|c| c.edge));
        }
        return Ok(edges);
    }
    Err(Error::Internal(format!("no {k} neighbours found within the search radius {radius}")))
}

fn cutoff_edges(m: &Material, cutoffs: &[f64]) -> Result<Vec<Edge>> {
    let n = m.n_atoms();
    if cutoffs.len() != n {
        return Err(domain!("{} cutoffs for {n} atoms", cutoffs.len()));
    }
    if let Some(c) = cutoffs.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(domain!("cutoff radius must be positive, got {c}"));
    }
    let max_c = cutoffs.iter().copied().fold(0.0, f64::max);
    let bound = supercell_bound(&m.rho, max_c)?;
    let mut edges = Vec::new();
    for (i, &c) in cutoffs.iter().enumerate() {
        edges.extend(candidates_within(m, i, c, bound).into_iter().filter(|cand| cand.r < c).map(|cand| cand.edge));
    }
    Ok(edges)
}

/// Chained edge pairs, skipping the pair that walks straight back.
pub fn triplets_of(edges: &[Edge], n_vertices: usize) -> Vec<Triplet> {
    let mut start = vec![0usize; n_vertices + 1];
    for e in edges {
        start[e.src + 1] += 1;
    }
    for v in 0..n_vertices {
        start[v + 1] += start[v];
    }
    let mut out = Vec::new();
    for (first, e) in edges.iter().enumerate() {
        for second in start[e.dst]..start[e.dst + 1] {
            if !edges[second].is_reverse_of(e) {
                out.push(Triplet { first, second });
            }
        }
    }
    out
}

pub fn build_graph(m: &Material, policy: &GraphPolicy) -> Result<PeriodicGraph> {
    m.validate()?;
    let mut edges = match policy {
        GraphPolicy::Knn(0) | GraphPolicy::KnnShell(0) => return Err(domain!("knn requires k >= 1")),
        GraphPolicy::Knn(k) => knn_edges(m, *k, false)?,
        GraphPolicy::KnnShell(k) => knn_edges(m, *k, true)?,
        GraphPolicy::Cutoff(c) => cutoff_edges(m, c)?,
    };
    edges.sort_unstable();
    let triplets = triplets_of(&edges, m.n_atoms());
    Ok(PeriodicGraph { n_vertices: m.n_atoms(), edges, triplets, policy: policy.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeGeometry {
    /// Fractional edge vector.
    pub e: Vec3,
    /// Physical edge vector (Å).
    pub v: Vec3,
    pub r: f64,
    pub u: Vec3,
}

impl EdgeGeometry {
    pub fn from_frac(rho: &Mat3, e: Vec3) -> Result<Self> {
        let v = cartesian(rho, &e);
        let r = v.norm();
        if !(r > 0.0) {
            return Err(domain!("edge of zero length"));
        }
        Ok(EdgeGeometry { e, v, r, u: v / r })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletGeometry {
    /// Unoriented angle between the two edge vectors, in radians.
    pub theta: f64,
    /// Area of the triangle spanned by the two edge vectors (Å²).
    pub area: f64,
    /// Unit normal of the spanned plane; `None` when the edges are collinear.
    pub omega: Option<Vec3>,
}

impl TripletGeometry {
    pub fn from_edges(a: &EdgeGeometry, b: &EdgeGeometry) -> Self {
        let cross = a.v.cross(&b.v);
        let cn = cross.norm();
        TripletGeometry { theta: cn.atan2(a.v.dot(&b.v)), area: 0.5 * cn, omega: (cn >= COLLINEAR_TOL * a.r * b.r).then(|| cross / cn) }
    }

    pub fn is_collinear(&self) -> bool {
        self.omega.is_none()
    }
}

pub fn edge_geometry(m: &Material, edge: &Edge) -> Result<EdgeGeometry> {
    EdgeGeometry::from_frac(&m.rho, edge.frac_vector(&m.x))
}

pub fn triplet_geometry(m: &Material, graph: &PeriodicGraph, t: &Triplet) -> Result<TripletGeometry> {
    let a = edge_geometry(m, &graph.edges[t.first])?;
    let b = edge_geometry(m, &graph.edges[t.second])?;
    Ok(TripletGeometry::from_edges(&a, &b))
}

/// Geometry of every edge and triplet of `graph` evaluated on lattice `rho`.
#[derive(Debug, Clone)]
pub struct GraphGeometry {
    pub edges: Vec<EdgeGeometry>,
    pub triplets: Vec<TripletGeometry>,
}

impl PeriodicGraph {
    pub fn frac_vectors(&self, x: &[Vec3]) -> Vec<Vec3> {
        self.edges.iter().map(|e| e.frac_vector(x)).collect()
    }

    pub fn geometry(&self, rho: &Mat3, x: &[Vec3]) -> Result<GraphGeometry> {
        let edges = self.frac_vectors(x).into_iter().map(|e| EdgeGeometry::from_frac(rho, e)).collect::<Result<Vec<_>>>()?;
        let triplets = self.triplets.iter().map(|t| TripletGeometry::from_edges(&edges[t.first], &edges[t.second])).collect();
        Ok(GraphGeometry { edges, triplets })
    }

    /// Debug dump: `{"edges": [[i, j, τ0, τ1, τ2], ...], "triplets": [[γ, γ'], ...]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<[i64; 5]> =
            self.edges.iter().map(|e| [e.src as i64, e.dst as i64, i64::from(e.tau[0]), i64::from(e.tau[1]), i64::from(e.tau[2])]).collect();
        let triplets: Vec<[usize; 2]> = self.triplets.iter().map(|t| [t.first, t.second]).collect();
        serde_json::json!({ "edges": edges, "triplets": triplets })
    }
}
