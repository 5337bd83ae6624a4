//! Group actions that leave the physical crystal unchanged: atom
//! relabelling, isometries of physical space, and changes of lattice basis.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, numeric, Result};
use crate::linalg::{Mat3, Vec3};
use crate::material::{transform_lattice, wrap_frac, Material};

pub type IntMat3 = [[i64; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
pub enum GroupElement {
    /// `perm[i]` is the new index of atom `i`.
    Permutation(Vec<usize>),
    /// Orthogonal map of physical space (rotations and reflections).
    Orthogonal(Mat3),
    /// Physical translation in Å.
    Translation(Vec3),
    /// Change of lattice basis: an integer matrix with determinant one.
    Slz(IntMat3),
    /// Applied front to back.
    Composite(Vec<GroupElement>),
}

impl GroupElement {
    pub fn identity_orthogonal() -> Self {
        GroupElement::Orthogonal(Mat3::identity())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GroupElement::Permutation(p) => {
                let mut seen = vec![false; p.len()];
                for &j in p {
                    if j >= p.len() || std::mem::replace(&mut seen[j], true) {
                        return Err(domain!("{p:?} is not a permutation"));
                    }
                }
                Ok(())
            }
            GroupElement::Orthogonal(g) => {
                let err = (g.transpose() * g - Mat3::identity()).abs().max();
                if err <= 1e-10 {
                    Ok(())
                } else {
                    Err(domain!("matrix is not orthogonal (|gᵀg - I| = {err:e})"))
                }
            }
            GroupElement::Translation(v) => {
                if v.iter().all(|c| c.is_finite()) {
                    Ok(())
                } else {
                    Err(domain!("non-finite translation"))
                }
            }
            GroupElement::Slz(g) => {
                if int_det(g) == 1 {
                    Ok(())
                } else {
                    Err(domain!("integer matrix {g:?} has determinant {}", int_det(g)))
                }
            }
            GroupElement::Composite(items) => items.iter().try_for_each(|g| g.validate()),
        }
    }
}

pub fn int_det(g: &IntMat3) -> i64 {
    g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1]) - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
        + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0])
}

/// Exact inverse of a unimodular matrix (the adjugate).
pub fn int_inverse(g: &IntMat3) -> IntMat3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| g[r0][c0] * g[r1][c1] - g[r0][c1] * g[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let det = int_det(g);
    adj.map(|row| row.map(|v| v * det))
}

pub fn int_mul(a: &IntMat3, b: &IntMat3) -> IntMat3 {
    let mut out = [[0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn int_to_mat(g: &IntMat3) -> Mat3 {
    Mat3::from_fn(|i, j| g[i][j] as f64)
}

/// Applies `g` to a material.
pub fn act(g: &GroupElement, m: &Material) -> Result<Material> {
    g.validate()?;
    let mut out = m.clone();
    match g {
        GroupElement::Permutation(p) => {
            if p.len() != m.n_atoms() {
                return Err(domain!("permutation of size {} acting on {} atoms", p.len(), m.n_atoms()));
            }
            for (i, &j) in p.iter().enumerate() {
                out.x[j] = m.x[i];
                out.z[j] = m.z[i];
            }
        }
        GroupElement::Orthogonal(q) => {
            out.rho = transform_lattice(&m.rho, q);
        }
        GroupElement::Translation(v) => {
            let shift = m.rho.transpose().try_inverse().ok_or_else(|| numeric!("singular lattice"))? * v;
            for xi in out.x.iter_mut() {
                *xi = wrap_frac(&(*xi + shift))?;
            }
        }
        GroupElement::Slz(g) => {
            let gi = int_to_mat(&int_inverse(g));
            let gm = int_to_mat(g);
            out.rho = gi.transpose() * m.rho;
            for xi in out.x.iter_mut() {
                *xi = wrap_frac(&(gm * *xi))?;
            }
        }
        GroupElement::Composite(items) => {
            for item in items {
                out = act(item, &out)?;
            }
        }
    }
    Ok(out)
}

/// Applies `g` to a bare lattice (the part of the action that touches `rho`).
pub fn act_on_lattice(g: &GroupElement, rho: &Mat3) -> Result<Mat3> {
    g.validate()?;
    Ok(match g {
        GroupElement::Permutation(_) | GroupElement::Translation(_) => *rho,
        GroupElement::Orthogonal(q) => transform_lattice(rho, q),
        GroupElement::Slz(g) => int_to_mat(&int_inverse(g)).transpose() * rho,
        GroupElement::Composite(items) => {
            let mut out = *rho;
            for item in items {
                out = act_on_lattice(item, &out)?;
            }
            out
        }
    })
}

/// Random orthogonal matrix (Haar-ish: Gram–Schmidt of a Gaussian matrix,
/// with a random reflection half of the time).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let a = Mat3::from_fn(|_, _| StandardNormal.sample(rng));
        let qr = a.qr();
        let mut q = qr.q();
        if q.determinant().abs() < 0.5 {
            continue;
        }
        if rng.random_bool(0.5) {
            q.column_mut(0).neg_mut();
        }
        return q;
    }
}

/// Random element of SL₃(ℤ) built from elementary shears and signed swaps.
pub fn random_slz<R: Rng + ?Sized>(rng: &mut R, n_factors: usize) -> IntMat3 {
    let mut g = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
    for _ in 0..n_factors {
        let i = rng.random_range(0..3);
        let j = (i + rng.random_range(1..3)) % 3;
        let mut e = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
        if rng.random_bool(0.8) {
            e[i][j] = if rng.random_bool(0.5) { 1 } else { -1 };
        } else {
            // rotation by 90° in the (i, j) plane: a swap with one sign flip
            e[i][i] = 0;
            e[j][j] = 0;
            e[i][j] = -1;
            e[j][i] = 1;
        }
        g = int_mul(&e, &g);
    }
    g
}

pub fn random_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn random_translation<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-scale..scale))
}
