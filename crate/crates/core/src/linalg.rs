//! Small dense helpers for 3×3 lattice matrices.

use nalgebra::{Matrix3, Vector3};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

const TAYLOR_ORDER: u32 = 12;

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// The squaring depth is `max(0, ceil(log2(|A|_1)) + 4)`, so the scaled
/// argument always has 1-norm at most 1/16 before the order-12 series is
/// evaluated.
pub fn expm(a: &Mat3) -> Mat3 {
    let norm = one_norm(a);
    if norm == 0.0 {
        return Mat3::identity();
    }
    let depth = (norm.log2().ceil() as i32 + 4).max(0);
    let scaled = a / f64::powi(2.0, depth);

    let id = Mat3::identity();
    let mut p = id;
    for k in (1..=TAYLOR_ORDER).rev() {
        p = id + scaled * p / f64::from(k);
    }
    for _ in 0..depth {
        p = p * p;
    }
    p
}

/// Maximum absolute column sum.
pub fn one_norm(a: &Mat3) -> f64 {
    (0..3).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn mat_from_rows(rows: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| rows[i][j])
}

pub fn mat_to_rows(m: &Mat3) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

/// `sum(a ∘ b)`: the pairing used for every gradient matrix in this crate.
pub fn pairing(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

/// Pairwise (cascade) summation. The result only depends on the order of
/// `values`, never on how callers batch them.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

pub fn is_finite_mat(m: &Mat3) -> bool {
    m.iter().all(|v| v.is_finite())
}
