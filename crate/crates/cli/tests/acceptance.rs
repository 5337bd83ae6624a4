//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! `EMPNN_ACCEPTANCE=1,2,9` restricts the run to the listed criteria.
//! Expected values come from oracles written here, not from the library.

use std::collections::HashMap;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use empnn::fields::{grad_area, grad_r, grad_theta};
use empnn::graph::{EdgeGeometry, TripletGeometry};
use empnn::net::{bind_parameters, ff_baseline_forward, forward, forward_tape, ModelCheckpoint, ModelConfig, ModelKind, Prepared, WeightScale};
use empnn::tape::Tape;
use empnn::train::{
    evaluate, evaluate_with, loss, loss_tape, param_loss_tape, synth_dataset, train, DeformationReport, EvalMode, Family, LossSpec, Normalizer, Task,
    TrainConfig,
};
use empnn::{
    act, build_graph, expand_cloud, lattice_params, random_deformation, wrap_frac, Edge, FieldKind, GraphPolicy, GroupElement, LambdaSpec, Mat3,
    Material, Vec3,
};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type IntMat = [[i64; 3]; 3];

const GROUP_TOL: f64 = 1e-10;
const CLOUD_TOL: f64 = 1e-9;
const FD_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-8;
const LOSS_TOL: f64 = 1e-10;

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("EMPNN_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn(&mut Shared) -> Outcome); 9] = [
        (1, "group actions", group_actions),
        (2, "graph oracle", graph_oracle),
        (3, "gradients", gradients),
        (4, "model equivariance", model_equivariance),
        (5, "losses", losses),
        (6, "denoising smoke", denoising_smoke),
        (7, "reconstruction smoke", reconstruction_smoke),
        (8, "field families", field_families),
        (9, "determinism", determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}

/// Results reused across criteria.
#[derive(Default)]
struct Shared {
    smoke: Option<Smoke>,
}

struct Smoke {
    train: Vec<Material>,
    val: Vec<Material>,
    test: Vec<Material>,
    edge_ketbra: Option<DeformationReport>,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within_time(secs: f64, limit: f64) -> Result<(), String> {
    ensure(secs < limit, || format!("took {secs:.1} s, limit {limit} s"))
}

// ---------------------------------------------------------------------------
// independent geometry

/// Generator rows from lengths (Å) and angles (degrees).
fn cell(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Option<Mat3> {
    let (ca, cb, cg) = (alpha.to_radians().cos(), beta.to_radians().cos(), gamma.to_radians().cos());
    let sg = gamma.to_radians().sin();
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz2 = c * c - cx * cx - cy * cy;
    (cz2 > 0.1 * c * c).then(|| Matrix3::new(a, 0.0, 0.0, b * cg, b * sg, 0.0, cx, cy, cz2.sqrt()))
}

fn rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let g: Mat3 = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let qr = g.qr();
        let r = qr.r();
        if (0..3).any(|i| r[(i, i)].abs() < 1e-3) {
            continue;
        }
        let mut q = qr.q() * Matrix3::from_diagonal(&Vector3::from_fn(|i, _| r[(i, i)].signum()));
        if rng.random_bool(0.5) {
            q.column_mut(0).neg_mut();
        }
        return q;
    }
}

fn random_cell(rng: &mut ChaCha8Rng, lengths: (f64, f64)) -> Mat3 {
    loop {
        let l = [0; 3].map(|_| rng.random_range(lengths.0..lengths.1));
        let ang = [0; 3].map(|_| rng.random_range(65.0..115.0));
        if let Some(c) = cell(l[0], l[1], l[2], ang[0], ang[1], ang[2]) {
            return c * rotation(rng).transpose();
        }
    }
}

fn random_material(rng: &mut ChaCha8Rng, lengths: (f64, f64), max_atoms: usize) -> Material {
    let rho = random_cell(rng, lengths);
    let n = rng.random_range(1..=max_atoms);
    let x = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..1.0))).collect();
    let z = (0..n).map(|_| [1, 6, 8, 14, 26][rng.random_range(0..5)]).collect();
    Material::new(rho, x, z).expect("valid material")
}

fn elementary(i: usize, j: usize, s: i64) -> IntMat {
    let mut e = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
    e[i][j] = s;
    e
}

fn imul(a: &IntMat, b: &IntMat) -> IntMat {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn iinv(g: &IntMat) -> IntMat {
    let c =
        |r: usize, s: usize| g[(r + 1) % 3][(s + 1) % 3] * g[(r + 2) % 3][(s + 2) % 3] - g[(r + 1) % 3][(s + 2) % 3] * g[(r + 2) % 3][(s + 1) % 3];
    std::array::from_fn(|i| std::array::from_fn(|j| c(j, i)))
}

fn imat(g: &IntMat) -> Mat3 {
    Matrix3::from_fn(|i, j| g[i][j] as f64)
}

/// Product of unit shears and signed swaps.
fn random_slz(rng: &mut ChaCha8Rng) -> IntMat {
    let mut g = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
    for _ in 0..rng.random_range(1..=5) {
        let i = rng.random_range(0..3);
        let j = (i + rng.random_range(1..3)) % 3;
        let e = if rng.random_bool(0.75) {
            elementary(i, j, if rng.random_bool(0.5) { 1 } else { -1 })
        } else {
            let mut e = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
            e[i][i] = 0;
            e[j][j] = 0;
            e[i][j] = 1;
            e[j][i] = -1;
            e
        };
        g = imul(&e, &g);
    }
    g
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn random_vector(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

fn torus_gap(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).iter().map(|d| (d - d.round()).abs()).fold(0.0, f64::max)
}

fn material_gap(a: &Material, b: &Material) -> f64 {
    if a.z != b.z {
        return f64::INFINITY;
    }
    let rho = (a.rho - b.rho).abs().max();
    a.x.iter().zip(&b.x).map(|(p, q)| torus_gap(p, q)).fold(rho, f64::max)
}

fn close_materials(a: &Material, b: &Material, what: &str) -> Result<(), String> {
    let gap = material_gap(a, b);
    ensure(gap <= GROUP_TOL, || format!("{what}: materials differ by {gap:e}"))
}

/// Every periodic image within `radius` of the origin, by direct enumeration
/// over a box sized from the plane spacings of the cell.
fn brute_cloud(m: &Material, radius: f64) -> Vec<(Vec3, u32)> {
    let r = m.rho;
    let volume = r.determinant().abs();
    let rows = [r.row(0).transpose(), r.row(1).transpose(), r.row(2).transpose()];
    let span = |k: usize| {
        let h = volume / rows[(k + 1) % 3].cross(&rows[(k + 2) % 3]).norm();
        (radius / h).ceil() as i32 + 2
    };
    let t = [span(0), span(1), span(2)];
    let mut out = Vec::new();
    for (x, &z) in m.x.iter().zip(&m.z) {
        for i in -t[0]..=t[0] {
            for j in -t[1]..=t[1] {
                for k in -t[2]..=t[2] {
                    let f = x + Vector3::new(i as f64, j as f64, k as f64);
                    let p = rows[0] * f[0] + rows[1] * f[1] + rows[2] * f[2];
                    if p.norm() <= radius {
                        out.push((p, z));
                    }
                }
            }
        }
    }
    out
}

/// Multiset equality up to `tol`, ignoring points within `margin` of the
/// sphere boundary, where rounding decides membership.
fn same_cloud(a: &[(Vec3, u32)], b: &[(Vec3, u32)], radius: f64, margin: f64, tol: f64) -> Result<(), String> {
    let inner = |c: &[(Vec3, u32)]| -> Vec<(Vec3, u32)> {
        let mut v: Vec<_> = c.iter().filter(|(p, _)| p.norm() < radius - margin).copied().collect();
        v.sort_by(|x, y| x.0.norm().total_cmp(&y.0.norm()));
        v
    };
    let (a, b) = (inner(a), inner(b));
    ensure(a.len() == b.len(), || format!("clouds have {} and {} interior points", a.len(), b.len()))?;
    let mut used = vec![false; b.len()];
    for (p, z) in &a {
        let lo = b.partition_point(|q| q.0.norm() < p.norm() - 2.0 * tol);
        let hit =
            (lo..b.len()).take_while(|&k| b[k].0.norm() <= p.norm() + 2.0 * tol).find(|&k| !used[k] && b[k].1 == *z && (b[k].0 - p).norm() <= tol);
        match hit {
            Some(k) => used[k] = true,
            None => return Err(format!("point {p:?} (z={z}) has no partner")),
        }
    }
    Ok(())
}

fn rotate_cloud(q: &Mat3, c: &[(Vec3, u32)]) -> Vec<(Vec3, u32)> {
    c.iter().map(|(p, z)| (q * p, *z)).collect()
}

fn gram(rho: &Mat3) -> Mat3 {
    Matrix3::from_fn(|i, j| rho.row(i).dot(&rho.row(j)))
}

/// Lengths and angles (degrees) from generator rows.
fn lengths_angles(rho: &Mat3) -> ([f64; 3], [f64; 3]) {
    let v = [rho.row(0), rho.row(1), rho.row(2)];
    let len = v.map(|r| r.norm());
    let ang = |i: usize, j: usize| (v[i].dot(&v[j]) / (len[i] * len[j])).clamp(-1.0, 1.0).acos().to_degrees();
    (len, [ang(1, 2), ang(0, 2), ang(0, 1)])
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

// ---------------------------------------------------------------------------
// 1

fn group_actions(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let radius = 5.0;
    let instances = 1000;
    for t in 0..instances {
        let m = random_material(&mut rng, (3.0, 6.0), 4);
        let n = m.n_atoms();
        let at = |e: &str| format!("instance {t}: {e}");

        // wrapping lands on the torus and only moves by lattice vectors
        let v = random_vector(&mut rng, 50.0);
        let w = lift(wrap_frac(&v))?;
        ensure(w.iter().all(|c| (0.0..1.0).contains(c)), || at("wrap left [0,1)"))?;
        ensure(torus_gap(&v, &w) <= GROUP_TOL, || at("wrap moved off the lattice coset"))?;
        ensure(lift(wrap_frac(&w))? == w, || at("wrap is not idempotent"))?;

        let q = rotation(&mut rng);
        let q2 = rotation(&mut rng);
        let g = random_slz(&mut rng);
        let g2 = random_slz(&mut rng);
        let p = random_permutation(&mut rng, n);
        let p2 = random_permutation(&mut rng, n);
        let tv = random_vector(&mut rng, 5.0);
        let tv2 = random_vector(&mut rng, 5.0);
        let o = GroupElement::Orthogonal(q);
        let s = GroupElement::Slz(g);
        let pe = GroupElement::Permutation(p.clone());
        let tr = GroupElement::Translation(tv);
        let apply = |e: &GroupElement, m: &Material| lift(act(e, m));

        // the periodic point cloud is preserved (SLZ, permutation) or moved rigidly
        let cloud = brute_cloud(&m, radius);
        same_cloud(&brute_cloud(&apply(&s, &m)?, radius), &cloud, radius, 1e-6, GROUP_TOL).map_err(|e| at(&format!("slz cloud: {e}")))?;
        same_cloud(&brute_cloud(&apply(&pe, &m)?, radius), &cloud, radius, 1e-6, GROUP_TOL).map_err(|e| at(&format!("permutation cloud: {e}")))?;
        same_cloud(&brute_cloud(&apply(&o, &m)?, radius), &rotate_cloud(&q, &cloud), radius, 1e-6, GROUP_TOL)
            .map_err(|e| at(&format!("orthogonal cloud: {e}")))?;
        let moved = apply(&tr, &m)?;
        let inv_t = m.rho.transpose().try_inverse().unwrap();
        for i in 0..n {
            let shift = inv_t * (m.rho.transpose() * moved.x[i] - m.rho.transpose() * m.x[i] - tv);
            ensure(shift.iter().all(|c| (c - c.round()).abs() <= GROUP_TOL), || at("translation is not a rigid shift"))?;
        }
        for (i, &j) in p.iter().enumerate() {
            ensure(apply(&pe, &m)?.z[j] == m.z[i], || at("permutation lost a species"))?;
        }

        // metric tensor: O(3)-invariant, congruent under SLZ
        let f = gram(&m.rho);
        ensure((gram(&apply(&o, &m)?.rho) - f).abs().max() <= GROUP_TOL * f.abs().max(), || at("metric tensor not O(3)-invariant"))?;
        let gi = imat(&iinv(&g));
        let expect = gi.transpose() * f * gi;
        ensure((gram(&apply(&s, &m)?.rho) - expect).abs().max() <= GROUP_TOL * expect.abs().max(), || at("metric tensor not congruent under SLZ"))?;

        // identities and inverses
        for e in [
            GroupElement::Orthogonal(Mat3::identity()),
            GroupElement::Slz([[1, 0, 0], [0, 1, 0], [0, 0, 1]]),
            GroupElement::Translation(Vec3::zeros()),
        ] {
            close_materials(&apply(&e, &m)?, &m, "identity")?;
        }
        close_materials(&apply(&GroupElement::Orthogonal(q.transpose()), &apply(&o, &m)?)?, &m, &at("orthogonal inverse"))?;
        close_materials(&apply(&GroupElement::Slz(iinv(&g)), &apply(&s, &m)?)?, &m, &at("slz inverse"))?;
        close_materials(&apply(&GroupElement::Translation(-tv), &apply(&tr, &m)?)?, &m, &at("translation inverse"))?;
        let mut pinv = vec![0; n];
        for (i, &j) in p.iter().enumerate() {
            pinv[j] = i;
        }
        close_materials(&apply(&GroupElement::Permutation(pinv), &apply(&pe, &m)?)?, &m, &at("permutation inverse"))?;

        // composition laws
        let both = |a: &GroupElement, b: &GroupElement| -> Result<Material, String> { apply(b, &apply(a, &m)?) };
        close_materials(&both(&o, &GroupElement::Orthogonal(q2))?, &apply(&GroupElement::Orthogonal(q2 * q), &m)?, &at("orthogonal product"))?;
        close_materials(&both(&s, &GroupElement::Slz(g2))?, &apply(&GroupElement::Slz(imul(&g2, &g)), &m)?, &at("slz product"))?;
        close_materials(&both(&tr, &GroupElement::Translation(tv2))?, &apply(&GroupElement::Translation(tv + tv2), &m)?, &at("translation sum"))?;
        let composed: Vec<usize> = (0..n).map(|i| p2[p[i]]).collect();
        close_materials(
            &both(&pe, &GroupElement::Permutation(p2.clone()))?,
            &apply(&GroupElement::Permutation(composed), &m)?,
            &at("permutation product"),
        )?;
        let composite = GroupElement::Composite(vec![o.clone(), s.clone(), tr.clone(), pe.clone()]);
        close_materials(&apply(&composite, &m)?, &apply(&pe, &apply(&tr, &apply(&s, &apply(&o, &m)?)?)?)?, &at("composite order"))?;

        // commutation, and O(3) conjugating translations
        let pairs = [(&o, &s), (&o, &pe), (&s, &pe), (&s, &tr), (&tr, &pe)];
        for (a, b) in pairs {
            close_materials(&both(a, b)?, &both(b, a)?, &at("actions do not commute"))?;
        }
        close_materials(&both(&tr, &o)?, &both(&o, &GroupElement::Translation(q * tv))?, &at("O(3) does not conjugate translations"))?;

        // expand_cloud: brute force, SLZ invariance, O(3) equivariance
        let lib = lift(expand_cloud(&m, radius))?;
        same_cloud(&lib, &cloud, radius, 1e-9, CLOUD_TOL).map_err(|e| at(&format!("expand_cloud vs brute force: {e}")))?;
        same_cloud(&lift(expand_cloud(&apply(&s, &m)?, radius))?, &lib, radius, 1e-7, CLOUD_TOL)
            .map_err(|e| at(&format!("expand_cloud under SLZ: {e}")))?;
        same_cloud(&lift(expand_cloud(&apply(&o, &m)?, radius))?, &rotate_cloud(&q, &lib), radius, 1e-7, CLOUD_TOL)
            .map_err(|e| at(&format!("expand_cloud under O(3): {e}")))?;
    }
    within_time(start.elapsed().as_secs_f64(), 30.0)?;
    Ok(format!("{instances} instances, tolerance {GROUP_TOL:e} (clouds {CLOUD_TOL:e})"))
}

// ---------------------------------------------------------------------------
// 2

fn brute_edges(m: &Material, cutoffs: &[f64]) -> Vec<Edge> {
    let r = m.rho;
    let volume = r.determinant().abs();
    let rows = [r.row(0).transpose(), r.row(1).transpose(), r.row(2).transpose()];
    let max_c = cutoffs.iter().copied().fold(0.0, f64::max);
    let t: Vec<i32> = (0..3).map(|k| (max_c * rows[(k + 1) % 3].cross(&rows[(k + 2) % 3]).norm() / volume).ceil() as i32 + 2).collect();
    let mut out = Vec::new();
    for i in 0..m.n_atoms() {
        for j in 0..m.n_atoms() {
            for a in -t[0]..=t[0] {
                for b in -t[1]..=t[1] {
                    for c in -t[2]..=t[2] {
                        let f = m.x[j] - m.x[i] + Vector3::new(a as f64, b as f64, c as f64);
                        let d = (r.transpose() * f).norm();
                        if d > 0.0 && d < cutoffs[i] {
                            out.push(Edge { src: i, dst: j, tau: [a, b, c] });
                        }
                    }
                }
            }
        }
    }
    out.sort();
    out
}

fn graph_oracle(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut total = 0;
    for t in 0..200 {
        let m = random_material(&mut rng, (2.0, 7.0), 8);
        let cutoffs: Vec<f64> =
            if t % 4 == 3 { (0..m.n_atoms()).map(|_| rng.random_range(1.0..6.0)).collect() } else { vec![rng.random_range(1.0..6.0); m.n_atoms()] };
        let graph = lift(build_graph(&m, &GraphPolicy::Cutoff(cutoffs.clone())))?;
        let expect = brute_edges(&m, &cutoffs);
        let mut got = graph.edges.clone();
        got.sort();
        ensure(got == expect, || format!("cell {t}: {} edges built, {} by enumeration", got.len(), expect.len()))?;
        ensure(graph.edges.windows(2).all(|w| w[0] < w[1]), || format!("cell {t}: edges not in canonical order"))?;
        let mut triplets = 0;
        for a in &graph.edges {
            for b in &graph.edges {
                if a.dst == b.src && !(b.src == a.dst && b.dst == a.src && b.tau == a.tau.map(|v| -v)) {
                    triplets += 1;
                }
            }
        }
        ensure(graph.triplets.len() == triplets, || format!("cell {t}: {} triplets, expected {triplets}", graph.triplets.len()))?;
        total += expect.len();
    }
    within_time(start.elapsed().as_secs_f64(), 60.0)?;
    Ok(format!("200 cells, {total} edges, exact set equality"))
}

// ---------------------------------------------------------------------------
// 3

const FD_H: f64 = 1e-5;

fn fd_matrix(f: impl Fn(&Mat3) -> f64, rho: &Mat3) -> Mat3 {
    Matrix3::from_fn(|i, j| {
        let mut plus = *rho;
        let mut minus = *rho;
        plus[(i, j)] += FD_H;
        minus[(i, j)] -= FD_H;
        (f(&plus) - f(&minus)) / (2.0 * FD_H)
    })
}

fn matrix_error(a: &Mat3, b: &Mat3) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-6)
}

fn scalar_error(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6 * scale.max(1.0))
}

fn small_config(spec: LambdaSpec, unbounded: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        rbf_bins: 6,
        rbf_delta: 1.0,
        n_plain_layers: 1,
        n_deform_layers: 2,
        knn_k: 6,
        lambda_spec: spec,
        weight_scale: if unbounded { WeightScale::Unbounded } else { WeightScale::SigmoidScaled { limit: 0.05 } },
        deformation_step: if unbounded { 0.05 } else { 1.0 },
        ..ModelConfig::default()
    }
}

/// Every parameter drawn non-zero; baseline output weights kept small so the
/// predicted parameters stay a valid cell.
fn random_checkpoint(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelCheckpoint, String> {
    let mut ckpt = lift(ModelCheckpoint::init(cfg, rng.random()))?;
    let baseline = ckpt.config.kind == ModelKind::FfBaseline;
    for (name, t) in ckpt.parameters.iter_mut() {
        let mut b = 1.5 / (t.rows as f64).sqrt();
        if baseline && name.starts_with("ff.4.") {
            b *= 0.1;
        }
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-b..b));
    }
    let data = lift(synth_dataset(20, Family::Mixed, rng.random()))?;
    ckpt.normalizer = Some(lift(Normalizer::fit(&data))?);
    Ok(ckpt)
}

fn model_loss(ckpt: &ModelCheckpoint, m: &Material, target: &Mat3, spec: LossSpec) -> Result<f64, String> {
    let pred = match ckpt.config.kind {
        ModelKind::Empnn => lift(forward(m, ckpt))?.rho,
        ModelKind::FfBaseline => lift(ff_baseline_forward(m, ckpt))?,
    };
    lift(loss(spec, &pred, target, ckpt.normalizer.as_ref()))
}

fn gradients(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 4];
    let mut counts = [0usize; 3];
    let frac = |rng: &mut ChaCha8Rng| -> Vec3 {
        loop {
            let e = random_vector(rng, 1.5);
            if e.norm() > 0.3 {
                return e;
            }
        }
    };
    let length = |e: Vec3| move |r: &Mat3| (r.transpose() * e).norm();
    let angle = |a: Vec3, b: Vec3| {
        move |r: &Mat3| {
            let (va, vb) = (r.transpose() * a, r.transpose() * b);
            (va.dot(&vb) / (va.norm() * vb.norm())).acos()
        }
    };
    let area = |a: Vec3, b: Vec3| move |r: &Mat3| 0.5 * (r.transpose() * a).cross(&(r.transpose() * b)).norm();

    while counts.iter().any(|&c| c < 100) {
        let rho = random_cell(&mut rng, (2.0, 8.0));
        let (ea, eb) = (frac(&mut rng), frac(&mut rng));
        let ga = lift(EdgeGeometry::from_frac(&rho, ea))?;
        let gb = lift(EdgeGeometry::from_frac(&rho, eb))?;
        if counts[0] < 100 {
            let err = matrix_error(&grad_r(&ga), &fd_matrix(length(ea), &rho));
            worst[0] = worst[0].max(err);
            counts[0] += 1;
        }
        let sin = ga.u.cross(&gb.u).norm();
        if sin < 0.1 {
            continue;
        }
        let tg = TripletGeometry::from_edges(&ga, &gb);
        for (k, (analytic, f)) in [
            (lift(grad_theta(&ga, &gb, &tg))?, Box::new(angle(ea, eb)) as Box<dyn Fn(&Mat3) -> f64>),
            (lift(grad_area(&ga, &gb, &tg))?, Box::new(area(ea, eb))),
        ]
        .into_iter()
        .enumerate()
        {
            if counts[k + 1] < 100 {
                worst[k + 1] = worst[k + 1].max(matrix_error(&analytic, &fd_matrix(f, &rho)));
                counts[k + 1] += 1;
            }
        }
    }
    for (name, w) in ["grad_r", "grad_theta", "grad_area"].iter().zip(&worst) {
        ensure(*w <= FD_TOL, || format!("{name}: relative error {w:e}"))?;
    }

    // tape gradients of every parameter tensor against differences of the
    // plain forward pass and loss
    let kinds = FieldKind::ALL;
    let mut checked = 0;
    for t in 0..100 {
        let baseline = t % 9 == 8;
        let kind = kinds[t % kinds.len()];
        let spec = lift(LambdaSpec::new(vec![kind], t % 2 == 1))?;
        let mut cfg = small_config(spec, t % 3 == 2);
        if baseline {
            cfg.kind = ModelKind::FfBaseline;
        }
        let loss_spec = if baseline { [LossSpec::ParamMae, LossSpec::ParamMse][t % 2] } else { LossSpec::ALL[t % 5] };
        let ckpt = random_checkpoint(cfg, &mut rng)?;
        let m = random_material(&mut rng, (3.0, 6.0), 4);
        let target = random_cell(&mut rng, (3.0, 6.0));
        let norm = ckpt.normalizer.clone().unwrap();

        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &ckpt, true);
        let prep = lift(Prepared::new(&m, &ckpt.config))?;
        let out = lift(forward_tape(&mut tape, &params, &ckpt.config, &prep))?;
        let l = match out.params {
            Some(z) => lift(param_loss_tape(&mut tape, loss_spec, z, &lift(lattice_params(&target))?.to_radian_array(), &norm))?,
            None => lift(loss_tape(&mut tape, loss_spec, out.rho, &target, Some(&norm)))?,
        };
        let value = tape.scalar(l);
        let base = model_loss(&ckpt, &m, &target, loss_spec)?;
        ensure(scalar_error(value, base, 1.0) <= 1e-12, || format!("instance {t}: tape loss {value} vs plain {base}"))?;
        let grads = tape.backward(l);
        for (name, var) in params.iter() {
            let len = ckpt.parameters[name].data.len();
            let dir: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let shifted = |s: f64| -> Result<f64, String> {
                let mut c = ckpt.clone();
                c.parameters.get_mut(name).unwrap().data.iter_mut().zip(&dir).for_each(|(v, d)| *v += s * d);
                model_loss(&c, &m, &target, loss_spec)
            };
            let h = 10.0 * FD_H;
            let fd = (8.0 * (shifted(h)? - shifted(-h)?) - shifted(2.0 * h)? + shifted(-2.0 * h)?) / (12.0 * h);
            let an: f64 = grads.get(*var).map_or(0.0, |g| g.data.iter().zip(&dir).map(|(a, b)| a * b).sum());
            let err = scalar_error(an, fd, value.abs());
            worst[3] = worst[3].max(err);
            ensure(err <= FD_TOL, || format!("instance {t} ({} / {}): {name}: tape {an} vs fd {fd}", kind.name(), loss_spec.name()))?;
            checked += 1;
        }
    }
    within_time(start.elapsed().as_secs_f64(), 120.0)?;
    Ok(format!(
        "100 instances each; worst relative error r {:.1e}, theta {:.1e}, area {:.1e}, model {:.1e} over {checked} parameter tensors",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------------------
// 4

fn model_equivariance(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for t in 0..20 {
        let spec = lift(LambdaSpec::new(FieldKind::ALL.to_vec(), t % 2 == 1))?;
        let cfg = small_config(spec, t % 3 == 2);
        let ckpt = random_checkpoint(cfg.clone(), &mut rng)?;
        let m = random_material(&mut rng, (3.0, 6.0), 5);
        let out = lift(forward(&m, &ckpt))?;
        ensure((out.rho - m.rho).abs().max() > 1e-6, || format!("material {t}: model does not deform the lattice"))?;
        let mut check = |a: &Mat3, b: &Mat3, what: &str| -> Result<(), String> {
            let err = (a - b).abs().max();
            worst = worst.max(err);
            ensure(err <= MODEL_TOL, || format!("material {t}: {what} off by {err:e}"))
        };
        let q = rotation(&mut rng);
        check(&lift(forward(&lift(act(&GroupElement::Orthogonal(q), &m))?, &ckpt))?.rho, &(out.rho * q.transpose()), "O(3)")?;
        let g = random_slz(&mut rng);
        let gi = imat(&iinv(&g));
        check(&lift(forward(&lift(act(&GroupElement::Slz(g), &m))?, &ckpt))?.rho, &(gi.transpose() * out.rho), "SLZ")?;
        let tv = random_vector(&mut rng, 5.0);
        check(&lift(forward(&lift(act(&GroupElement::Translation(tv), &m))?, &ckpt))?.rho, &out.rho, "translation")?;
        let p = random_permutation(&mut rng, m.n_atoms());
        check(&lift(forward(&lift(act(&GroupElement::Permutation(p), &m))?, &ckpt))?.rho, &out.rho, "permutation")?;

        let ff = random_checkpoint(ModelConfig { kind: ModelKind::FfBaseline, ..cfg }, &mut rng)?;
        let base = lift(ff_baseline_forward(&m, &ff))?;
        let all = GroupElement::Composite(vec![
            GroupElement::Orthogonal(rotation(&mut rng)),
            GroupElement::Slz(random_slz(&mut rng)),
            GroupElement::Translation(random_vector(&mut rng, 5.0)),
            GroupElement::Permutation(random_permutation(&mut rng, m.n_atoms())),
        ]);
        check(&lift(ff_baseline_forward(&lift(act(&all, &m))?, &ff))?, &base, "baseline invariance")?;
    }
    Ok(format!("20 materials, all eight fields, worst deviation {worst:.1e} (tolerance {MODEL_TOL:e})"))
}

// ---------------------------------------------------------------------------
// 5

fn losses(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let pred = random_cell(&mut rng, (2.0, 8.0));
        let target = random_cell(&mut rng, (2.0, 8.0));
        let norm =
            Normalizer { mean: std::array::from_fn(|_| rng.random_range(-1.0..3.0)), std: std::array::from_fn(|_| rng.random_range(0.2..2.0)) };
        let q = rotation(&mut rng);
        for spec in LossSpec::ALL {
            let l = |a: &Mat3, b: &Mat3| lift(loss(spec, a, b, Some(&norm)));
            let base = l(&pred, &target)?;
            let rotated = l(&(pred * q.transpose()), &(target * q.transpose()))?;
            let err = (base - rotated).abs() / base.abs().max(1.0);
            worst = worst.max(err);
            ensure(err <= LOSS_TOL, || format!("{} not O(3)-invariant: {base} vs {rotated}", spec.name()))?;
            if spec == LossSpec::RhoRiemann {
                let expect = (gram(&pred) * gram(&target)).trace();
                ensure((base - expect).abs() <= LOSS_TOL * expect.abs(), || format!("rho-riemann {base}, formula {expect}"))?;
            } else {
                let zero = l(&target, &target)?;
                ensure(zero.abs() <= LOSS_TOL, || format!("{} at identical arguments is {zero}", spec.name()))?;
            }
        }
    }
    let two = Mat3::identity() * 2.0;
    let mae = lift(loss(LossSpec::RhoMae, &two, &Mat3::identity(), None))?;
    ensure(mae == 9.0, || format!("rho-mae(2I, I) = {mae}, expected 9"))?;

    // one change of basis moves the parameter loss
    let pred = cell(4.0, 4.0, 4.0, 90.0, 90.0, 90.0).unwrap();
    let target = cell(4.2, 4.0, 4.0, 90.0, 90.0, 90.0).unwrap();
    let g: IntMat = [[1, 1, 0], [0, 1, 0], [0, 0, 1]];
    let gi = imat(&iinv(&g)).transpose();
    let id = Normalizer::identity();
    let before = lift(loss(LossSpec::ParamMae, &pred, &target, Some(&id)))?;
    let after = lift(loss(LossSpec::ParamMae, &(gi * pred), &(gi * target), Some(&id)))?;
    ensure((before - after).abs() > 0.1, || format!("param-mae unchanged under SLZ: {before} vs {after}"))?;
    Ok(format!("1000 instances, worst O(3) deviation {worst:.1e}; param-mae {before:.3} becomes {after:.3} under g = {g:?}"))
}

// ---------------------------------------------------------------------------
// 6-8

const SIGMA: f64 = 0.1;
const EVAL_SEED: u64 = 17;

fn smoke_model(spec: LambdaSpec) -> ModelConfig {
    ModelConfig {
        feature_dim: 32,
        rbf_bins: 16,
        rbf_delta: 0.5,
        n_plain_layers: 2,
        n_deform_layers: 2,
        knn_k: 8,
        lambda_spec: spec,
        weight_scale: WeightScale::Unbounded,
        deformation_step: 1.0,
        ..ModelConfig::default()
    }
}

fn smoke_train(steps: usize, batch_size: usize, task: Task) -> TrainConfig {
    TrainConfig { sigma: SIGMA, lr: 1e-3, batch_size, total_steps: steps, grad_clip: 1.0, loss: LossSpec::ParamMae, seed: 0, task, val_every: 1000 }
}

fn smoke_data(shared: &mut Shared) -> Result<&mut Smoke, String> {
    if shared.smoke.is_none() {
        shared.smoke = Some(Smoke {
            train: lift(synth_dataset(1000, Family::Mixed, 1))?,
            val: lift(synth_dataset(100, Family::Mixed, 2))?,
            test: lift(synth_dataset(100, Family::Mixed, 3))?,
            edge_ketbra: None,
        });
    }
    Ok(shared.smoke.as_mut().unwrap())
}

fn train_and_denoise(smoke: &Smoke, model: ModelConfig, steps: usize, batch_size: usize) -> Result<DeformationReport, String> {
    let init = lift(ModelCheckpoint::init(model, 0))?;
    let outcome = lift(train(init, &smoke.train, &smoke.val, &smoke_train(steps, batch_size, Task::Denoise)))?;
    let report = lift(evaluate(&outcome.checkpoint, &smoke.test, SIGMA, EVAL_SEED, EvalMode::Denoise))?;
    ensure(report.failed == 0, || format!("{} samples failed", report.failed))?;
    ensure(report.length.is_finite() && report.angle.is_finite(), || "non-finite metrics".into())?;
    Ok(report)
}

/// Mean l1 error of the noisy inputs: the improvement of a perfect denoiser.
fn oracle_maximum(test: &[Material]) -> Result<(f64, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let mut len = Vec::new();
    let mut ang = Vec::new();
    for m in test {
        let (noisy, _) = lift(random_deformation(&m.rho, SIGMA, &mut rng))?;
        let (l0, a0) = lengths_angles(&m.rho);
        let (l1, a1) = lengths_angles(&noisy);
        len.push(mean((0..3).map(|k| (l1[k] - l0[k]).abs())));
        ang.push(mean((0..3).map(|k| (a1[k] - a0[k]).abs())));
    }
    Ok((mean(len), mean(ang)))
}

fn denoising_smoke(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let smoke = smoke_data(shared)?;
    let report = train_and_denoise(smoke, smoke_model(LambdaSpec::single(FieldKind::EdgeKetBra)), 4000, 64)?;
    let secs = start.elapsed().as_secs_f64();
    smoke.edge_ketbra = Some(report.clone());

    let (len_max, ang_max) = oracle_maximum(&smoke.test)?;
    // a perfect denoiser scored by the library must reach the same maximum
    let clean: HashMap<&str, Mat3> = smoke.test.iter().map(|m| (m.id.as_str(), m.rho)).collect();
    let perfect = lift(evaluate_with(|m| Ok(clean[m.id.as_str()]), &smoke.test, SIGMA, EVAL_SEED, EvalMode::Denoise))?;
    ensure((perfect.length - len_max).abs() <= 1e-9 && (perfect.angle - ang_max).abs() <= 1e-9, || {
        format!("perfect denoiser scores {} Å / {}°, oracle {len_max} Å / {ang_max}°", perfect.length, perfect.angle)
    })?;

    let (fl, fa) = (report.length / len_max, report.angle / ang_max);
    let detail = format!(
        "length {:+.4} Å ({:.1}% of {len_max:.4}), angle {:+.4}° ({:.1}% of {ang_max:.4}), {secs:.0} s",
        report.length,
        100.0 * fl,
        report.angle,
        100.0 * fa
    );
    let ok = report.length > 0.0 && report.angle > 0.0 && fl >= 0.4 && fa >= 0.4 && secs <= 900.0;
    if ok {
        Ok(detail)
    } else {
        Err(format!("{detail}; needs both improvements > 0 and >= 40% of the oracle maximum within 900 s"))
    }
}

fn reconstruction_smoke(shared: &mut Shared) -> Outcome {
    let smoke = smoke_data(shared)?;
    let steps = 2000;
    let cfg = smoke_train(steps, 64, Task::Reconstruct);
    let empnn = lift(train(lift(ModelCheckpoint::init(smoke_model(LambdaSpec::single(FieldKind::EdgeKetBra)), 0))?, &smoke.train, &smoke.val, &cfg))?;
    let ff_model = ModelConfig { kind: ModelKind::FfBaseline, ..smoke_model(LambdaSpec::single(FieldKind::EdgeKetBra)) };
    let ff = lift(train(lift(ModelCheckpoint::init(ff_model, 0))?, &smoke.train, &smoke.val, &cfg))?;
    let a = lift(evaluate(&empnn.checkpoint, &smoke.test, SIGMA, EVAL_SEED, EvalMode::Reconstruct))?;
    let b = lift(evaluate(&ff.checkpoint, &smoke.test, SIGMA, EVAL_SEED, EvalMode::Reconstruct))?;
    ensure(a.failed == 0 && b.failed == 0, || format!("{} / {} samples failed", a.failed, b.failed))?;
    let detail =
        format!("{steps} steps; length MAE {:.4} Å vs baseline {:.4} Å, angle MAE {:.4}° vs baseline {:.4}°", a.length, b.length, a.angle, b.angle);
    if a.length < b.length && a.angle < b.angle {
        Ok(detail)
    } else {
        Err(format!("{detail}; the model must beat the baseline on both"))
    }
}

fn field_families(shared: &mut Shared) -> Outcome {
    let smoke = smoke_data(shared)?;
    let (steps, batch) = (800, 32);
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for kind in FieldKind::ALL {
        let report = match (kind, &smoke.edge_ketbra) {
            (FieldKind::EdgeKetBra, Some(r)) => r.clone(),
            _ => match train_and_denoise(smoke, smoke_model(LambdaSpec::single(kind)), steps, batch) {
                Ok(r) => r,
                Err(e) => {
                    problems.push(format!("{}: {e}", kind.name()));
                    continue;
                }
            },
        };
        rows.push(format!("{} {:+.4} Å {:+.4}°", kind.name(), report.length, report.angle));
        if matches!(kind, FieldKind::EdgeKetBra | FieldKind::EdgeGradR) && !(report.length > 0.0 && report.angle > 0.0) {
            problems.push(format!("{} improvements not positive", kind.name()));
        }
    }
    let detail = format!("{steps} steps at batch {batch} (edge-ketbra from criterion 6): {}", rows.join(", "));
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 9

fn determinism(_: &mut Shared) -> Outcome {
    let tmp = lift(TempDir::new())?;
    let bin = env!("CARGO_BIN_EXE_empnn");
    let path = |p: &std::path::Path| p.to_str().unwrap().to_owned();
    let data = tmp.path().join("data");
    let status = lift(Command::new(bin).args(["gen", "--n", "40", "--seed", "5", "--out", &path(&data)]).output())?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let mut outputs = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = tmp.path().join(run);
        let o = lift(
            Command::new(bin)
                .args(["--threads", threads, "train", "--data", &path(&data), "--out", &path(&out)])
                .args(["--steps", "30", "--batch-size", "8", "--seed", "3", "--lr", "1e-3"])
                .args(["--feature-dim", "8", "--rbf-bins", "8", "--plain-layers", "1", "--deform-layers", "1", "--knn", "6"])
                .output(),
        )?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        outputs.push(lift(fs::read(out.join("checkpoint.json")))?);
    }
    ensure(outputs[0] == outputs[1], || "two identical runs wrote different checkpoints".into())?;
    ensure(outputs[0] == outputs[2], || "the worker count changed the checkpoint".into())?;
    Ok(format!("three runs (1, 1 and 2 threads) wrote identical {}-byte checkpoints", outputs[0].len()))
}
