use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::linalg::{Mat3, Vec3};
use crate::material::{cartesian, for_each_image, params_to_lattice, random_deformation, supercell_bound, LatticeParams, Material};

pub const ATOMIC_NUMBERS: [u32; 5] = [1, 6, 8, 14, 26];
const MIN_DISTANCE: f64 = 0.7;
const MAX_ATTEMPTS: usize = 1000;
/// Triclinic cells flatter than this (`|det| / abc`) are redrawn.
const MIN_VOLUME_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Cubic,
    Orthorhombic,
    Triclinic,
    Mixed,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Cubic, Family::Orthorhombic, Family::Triclinic, Family::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Family::Cubic => "cubic",
            Family::Orthorhombic => "orthorhombic",
            Family::Triclinic => "triclinic",
            Family::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| domain!("unknown family '{s}', expected cubic, orthorhombic, triclinic or mixed"))
    }
}

fn draw_lattice(family: Family, rng: &mut ChaCha8Rng) -> Result<Mat3> {
    let mut len = || rng.random_range(2.0..=10.0);
    match family {
        Family::Cubic => {
            let a = len();
            params_to_lattice(&LatticeParams { a, b: a, c: a, alpha: 90.0, beta: 90.0, gamma: 90.0 })
        }
        Family::Orthorhombic => {
            let (a, b, c) = (len(), len(), len());
            params_to_lattice(&LatticeParams { a, b, c, alpha: 90.0, beta: 90.0, gamma: 90.0 })
        }
        Family::Triclinic => {
            for _ in 0..MAX_ATTEMPTS {
                let (a, b, c) = (rng.random_range(2.0..=10.0), rng.random_range(2.0..=10.0), rng.random_range(2.0..=10.0));
                let mut ang = || rng.random_range(60.0..=120.0);
                let p = LatticeParams { a, b, c, alpha: ang(), beta: ang(), gamma: ang() };
                if let Ok(rho) = params_to_lattice(&p) {
                    if rho.determinant().abs() >= MIN_VOLUME_FRACTION * a * b * c {
                        return Ok(rho);
                    }
                }
            }
            Err(numeric!("could not draw a non-degenerate triclinic cell"))
        }
        Family::Mixed => {
            let f = [Family::Cubic, Family::Orthorhombic, Family::Triclinic][rng.random_range(0..3)];
            draw_lattice(f, rng)
        }
    }
}

/// Shortest distance between `a` and any image of `b` (excluding `a` itself
/// when they coincide).
fn min_image_distance(rho: &Mat3, a: &Vec3, b: &Vec3, bound: [i32; 3]) -> f64 {
    let mut best = f64::INFINITY;
    for_each_image(bound, |tau| {
        let d = cartesian(rho, &(b - a + Vec3::new(tau[0] as f64, tau[1] as f64, tau[2] as f64))).norm();
        if d > 0.0 {
            best = best.min(d);
        }
    });
    best
}

/// One random material of `family`; `id` is stored on the result.
pub fn synth_material(family: Family, rng: &mut ChaCha8Rng, id: String) -> Result<Material> {
    let mut attempts = 0;
    loop {
        let rho = draw_lattice(family, rng)?;
        let bound = supercell_bound(&rho, MIN_DISTANCE)?;
        // a cell whose own images are too close cannot host any atom
        let origin = Vec3::zeros();
        if min_image_distance(&rho, &origin, &origin, bound) < MIN_DISTANCE {
            attempts += 1;
            if attempts >= MAX_ATTEMPTS {
                return Err(numeric!("no usable lattice after {MAX_ATTEMPTS} attempts"));
            }
            continue;
        }
        let n = rng.random_range(2..=8);
        let mut x: Vec<Vec3> = Vec::with_capacity(n);
        while x.len() < n {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(numeric!("rejection sampling of positions failed after {MAX_ATTEMPTS} attempts"));
            }
            let p = Vec3::from_fn(|_, _| rng.random_range(0.0..1.0));
            if x.iter().all(|q| min_image_distance(&rho, q, &p, bound) >= MIN_DISTANCE) {
                x.push(p);
            }
        }
        let z = (0..n).map(|_| ATOMIC_NUMBERS[rng.random_range(0..ATOMIC_NUMBERS.len())]).collect();
        return Ok(Material::new(rho, x, z)?.with_id(id));
    }
}

/// `n` materials of `family`, deterministic in `seed`.
pub fn synth_dataset(n: usize, family: Family, seed: u64) -> Result<Vec<Material>> {
    if n == 0 {
        return Err(domain!("dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synth_material(family, &mut rng, format!("{}-{seed}-{i:06}", family.name()))).collect()
}

/// `(noisy, clean)` where the noisy copy has lattice `exp(A)·rho` and the
/// same fractional positions and species.
pub fn make_noisy_pair<R: Rng + ?Sized>(m: &Material, sigma: f64, rng: &mut R) -> Result<(Material, Material)> {
    let (rho, _) = random_deformation(&m.rho, sigma, rng)?;
    let noisy = Material { rho, ..m.clone() };
    Ok((noisy, m.clone()))
}

/// `m` with its lattice replaced by the 1 Å cube.
pub fn reconstruction_input(m: &Material) -> Material {
    Material { rho: Mat3::identity(), ..m.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{expand_cloud, lattice_params};

    #[test]
    fn families_have_their_shape() {
        for m in synth_dataset(30, Family::Cubic, 1).unwrap() {
            let p = lattice_params(&m.rho).unwrap();
            assert_eq!([p.alpha, p.beta, p.gamma], [90.0; 3]);
            assert!((p.a - p.b).abs() < 1e-12 && (p.a - p.c).abs() < 1e-12);
        }
        for m in synth_dataset(30, Family::Orthorhombic, 2).unwrap() {
            let p = lattice_params(&m.rho).unwrap();
            assert_eq!([p.alpha, p.beta, p.gamma], [90.0; 3]);
            assert!(p.lengths().iter().all(|l| (2.0..=10.0).contains(l)));
        }
        for m in synth_dataset(30, Family::Triclinic, 3).unwrap() {
            let p = lattice_params(&m.rho).unwrap();
            assert!(p.angles().iter().all(|t| (60.0 - 1e-9..=120.0 + 1e-9).contains(t)));
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = synth_dataset(40, Family::Mixed, 9).unwrap();
        assert_eq!(a, synth_dataset(40, Family::Mixed, 9).unwrap());
        assert_ne!(a, synth_dataset(40, Family::Mixed, 10).unwrap());
        for m in &a {
            assert!((2..=8).contains(&m.n_atoms()));
            assert!(m.z.iter().all(|z| ATOMIC_NUMBERS.contains(z)));
            m.validate().unwrap();
        }
        assert!(synth_dataset(0, Family::Cubic, 1).is_err());
        assert!(Family::parse("hexagonal").is_err());
    }

    #[test]
    fn minimum_distance_holds_by_brute_force() {
        for m in synth_dataset(60, Family::Mixed, 4).unwrap() {
            // every image within 0.7 Å of an atom must be that atom itself
            for i in 0..m.n_atoms() {
                let shifted = Material { x: m.x.iter().map(|x| crate::material::wrap_frac(&(x - m.x[i])).unwrap()).collect(), ..m.clone() };
                let close = expand_cloud(&shifted, MIN_DISTANCE - 1e-9).unwrap();
                assert_eq!(close.len(), 1, "{}", m.id);
            }
        }
    }

    #[test]
    fn noisy_pairs() {
        let m = &synth_dataset(1, Family::Orthorhombic, 5).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (noisy, clean) = make_noisy_pair(m, 0.0, &mut rng).unwrap();
        assert_eq!(noisy, clean);
        let a = make_noisy_pair(m, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = make_noisy_pair(m, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.x, m.x);

        // mean relative change of generator lengths grows with sigma
        let data = synth_dataset(50, Family::Mixed, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut means = Vec::new();
        for sigma in [0.05, 0.1, 0.3] {
            let mut total = 0.0;
            for m in &data {
                let (noisy, _) = make_noisy_pair(m, sigma, &mut rng).unwrap();
                for k in 0..3 {
                    total += (noisy.rho.row(k).norm() / m.rho.row(k).norm() - 1.0).abs();
                }
            }
            means.push(total / (3.0 * data.len() as f64));
        }
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
        assert!(means[1] > 0.02 && means[1] < 0.2);
    }
}
