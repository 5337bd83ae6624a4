//! Featured materials: a lattice, fractional positions and atomic numbers.
//!
//! Lattice generators are stored as the ROWS of `rho`. The physical position
//! of fractional coordinate `f` is `rhoᵀ·f`, i.e. `f₁a + f₂b + f₃c`.
//! Physical-space linear maps `X` (rotations, deformation generators) act on a
//! lattice as `rho ↦ rho·Xᵀ`, which maps every generator `a ↦ X·a`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::linalg::{expm, Mat3, Vec3};

/// Largest accepted atomic number.
pub const MAX_ATOMIC_NUMBER: u32 = 100;

const WRAP_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub rho: Mat3,
    pub x: Vec<Vec3>,
    pub z: Vec<u32>,
    pub id: String,
}

impl Material {
    /// Builds a material after checking every representation invariant.
    pub fn new(rho: Mat3, x: Vec<Vec3>, z: Vec<u32>) -> Result<Self> {
        let m = Material { rho, x, z, id: String::new() };
        m.validate()?;
        Ok(m)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn n_atoms(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(domain!("material has no atoms"));
        }
        if self.x.len() != self.z.len() {
            return Err(domain!("{} positions but {} atomic numbers", self.x.len(), self.z.len()));
        }
        if !self.rho.iter().all(|v| v.is_finite()) {
            return Err(domain!("lattice has non-finite entries"));
        }
        if self.rho.determinant() == 0.0 {
            return Err(numeric!("singular lattice"));
        }
        for (i, xi) in self.x.iter().enumerate() {
            if !xi.iter().all(|v| v.is_finite() && (0.0..1.0).contains(v)) {
                return Err(domain!("fractional position {i} = {xi:?} outside [0,1)"));
            }
        }
        for &zi in &self.z {
            if zi == 0 || zi > MAX_ATOMIC_NUMBER {
                return Err(domain!("unsupported atomic number {zi}"));
            }
        }
        Ok(())
    }

    /// Physical position of atom `i` shifted by the lattice image `tau`.
    pub fn position(&self, i: usize, tau: [i32; 3]) -> Vec3 {
        cartesian(&self.rho, &(self.x[i] + tau_vec(tau)))
    }

    /// Atoms per Å³.
    pub fn density(&self) -> f64 {
        self.n_atoms() as f64 / self.rho.determinant().abs()
    }
}

pub fn tau_vec(tau: [i32; 3]) -> Vec3 {
    Vec3::new(f64::from(tau[0]), f64::from(tau[1]), f64::from(tau[2]))
}

/// Physical vector of a fractional (lattice-coordinate) vector.
pub fn cartesian(rho: &Mat3, frac: &Vec3) -> Vec3 {
    rho.tr_mul(frac)
}

/// Applies a physical-space linear map to every generator.
pub fn transform_lattice(rho: &Mat3, map: &Mat3) -> Mat3 {
    rho * map.transpose()
}

/// Reduces a vector onto the torus `[0,1)³`.
///
/// Components within 1e-12 below an integer are snapped up to it, so
/// `0.9999999999999` wraps to `0`.
pub fn wrap_frac(v: &Vec3) -> Result<Vec3> {
    if !v.iter().all(|c| c.is_finite()) {
        return Err(domain!("cannot wrap non-finite vector {v:?}"));
    }
    Ok(v.map(wrap_scalar))
}

fn wrap_scalar(c: f64) -> f64 {
    let f = c - c.floor();
    if f >= 1.0 - WRAP_SNAP {
        0.0
    } else {
        f
    }
}

/// Gram matrix of the lattice generators (`rho·rhoᵀ` in row storage).
pub fn metric_tensor(rho: &Mat3) -> Mat3 {
    rho * rho.transpose()
}

/// Lengths in Å and angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LatticeParams {
    pub fn lengths(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    /// `[a, b, c, α, β, γ]` with angles converted to radians.
    pub fn to_radian_array(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.alpha.to_radians(), self.beta.to_radians(), self.gamma.to_radians()]
    }

    pub fn from_radian_array(p: &[f64; 6]) -> Self {
        LatticeParams { a: p[0], b: p[1], c: p[2], alpha: p[3].to_degrees(), beta: p[4].to_degrees(), gamma: p[5].to_degrees() }
    }

    fn validate(&self) -> Result<()> {
        let lengths_ok = self.lengths().iter().all(|l| l.is_finite() && *l > 0.0);
        let angles_ok = self.angles().iter().all(|t| t.is_finite() && *t > 0.0 && *t < 180.0);
        if lengths_ok && angles_ok {
            Ok(())
        } else {
            Err(domain!("invalid lattice parameters {self:?}"))
        }
    }
}

fn angle_between(u: &Vec3, v: &Vec3) -> f64 {
    u.cross(v).norm().atan2(u.dot(v))
}

pub fn lattice_params(rho: &Mat3) -> Result<LatticeParams> {
    let rows: [Vec3; 3] = [0, 1, 2].map(|i| rho.row(i).transpose());
    let lengths = rows.each_ref().map(|r| r.norm());
    let scale = lengths[0] * lengths[1] * lengths[2];
    if !(scale > 0.0) || rho.determinant().abs() <= 1e-12 * scale {
        return Err(numeric!("degenerate lattice, generators are coplanar"));
    }
    Ok(LatticeParams {
        a: lengths[0],
        b: lengths[1],
        c: lengths[2],
        alpha: angle_between(&rows[1], &rows[2]).to_degrees(),
        beta: angle_between(&rows[0], &rows[2]).to_degrees(),
        gamma: angle_between(&rows[0], &rows[1]).to_degrees(),
    })
}

/// Lower-triangular cell with `a` along x and `b` in the xy-plane.
pub fn params_to_lattice(p: &LatticeParams) -> Result<Mat3> {
    p.validate()?;
    let (ca, cb, cg) = (p.alpha.to_radians().cos(), p.beta.to_radians().cos(), p.gamma.to_radians().cos());
    let sg = p.gamma.to_radians().sin();
    let cy = (ca - cb * cg) / sg;
    let cz2 = 1.0 - cb * cb - cy * cy;
    if !(cz2 > 1e-12) {
        return Err(numeric!("angles {p:?} do not describe a 3D cell"));
    }
    Ok(Mat3::new(p.a, 0.0, 0.0, p.b * cg, p.b * sg, 0.0, p.c * cb, p.c * cy, p.c * cz2.sqrt()))
}

/// Norms of the reciprocal vectors, i.e. of the rows of `rho⁻ᵀ`.
pub fn reciprocal_norms(rho: &Mat3) -> Result<[f64; 3]> {
    let inv = rho.try_inverse().ok_or_else(|| numeric!("singular lattice"))?;
    Ok([0, 1, 2].map(|k| inv.column(k).norm()))
}

/// Per-axis image range that contains every displacement of length at most
/// `radius` between two atoms of the cell.
pub fn supercell_bound(rho: &Mat3, radius: f64) -> Result<[i32; 3]> {
    let recip = reciprocal_norms(rho)?;
    Ok(recip.map(|r| (radius * r).ceil() as i32 + 1))
}

/// Calls `f` for every `tau` in the box `[-t, t]` in lexicographic order.
pub fn for_each_image(bound: [i32; 3], mut f: impl FnMut([i32; 3])) {
    for t0 in -bound[0]..=bound[0] {
        for t1 in -bound[1]..=bound[1] {
            for t2 in -bound[2]..=bound[2] {
                f([t0, t1, t2]);
            }
        }
    }
}

/// All periodic images within `radius` of the cell origin, ordered by atom
/// index then image offset.
pub fn expand_cloud(m: &Material, radius: f64) -> Result<Vec<(Vec3, u32)>> {
    if !(radius > 0.0) {
        return Err(domain!("radius must be positive, got {radius}"));
    }
    let bound = supercell_bound(&m.rho, radius)?;
    let mut out = Vec::new();
    for i in 0..m.n_atoms() {
        for_each_image(bound, |tau| {
            let p = m.position(i, tau);
            if p.norm() <= radius {
                out.push((p, m.z[i]));
            }
        });
    }
    Ok(out)
}

/// Draws `A` with i.i.d. `N(0, sigma)` entries and returns `(exp(A)·rho, A)`,
/// where `exp(A)` acts on the generators in physical space.
pub fn random_deformation<R: Rng + ?Sized>(rho: &Mat3, sigma: f64, rng: &mut R) -> Result<(Mat3, Mat3)> {
    if !(sigma >= 0.0) {
        return Err(domain!("noise scale must be non-negative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok((*rho, Mat3::zeros()));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| domain!("{e}"))?;
    let mut a = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            a[(i, j)] = normal.sample(rng);
        }
    }
    Ok((transform_lattice(rho, &expm(&a)), a))
}
