//! Randomised property suites: group-action laws, neighbour-graph oracles,
//! field equivariance, finite-difference gradients, model equivariance and
//! loss invariance.
//!
//! Trial `t` of a run with base seed `s` draws everything from
//! `ChaCha8Rng::seed_from_u64(s + t)`, so a failure is replayed with
//! `--trials 1 --seed <s + t>`.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{domain, Result};
use crate::fields::{grad_area, grad_r, grad_theta, lambda_eval, FieldKind, LambdaSpec};
use crate::graph::{build_graph, EdgeGeometry, GraphPolicy, TripletGeometry};
use crate::group::{
    act, act_on_lattice, int_inverse, int_mul, int_to_mat, random_orthogonal, random_permutation, random_slz, random_translation, GroupElement,
};
use crate::linalg::{pairing, Mat3, Vec3};
use crate::material::{expand_cloud, lattice_params, metric_tensor, params_to_lattice, wrap_frac, LatticeParams, Material};
use crate::net::{bind_parameters, ff_baseline_forward, forward, forward_tape, ModelCheckpoint, ModelConfig, ModelKind, Prepared, WeightScale};
use crate::tape::Tape;
use crate::train::{loss, loss_tape, param_loss_tape, synth_material, Family, LossSpec, Normalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    GroupActions,
    GraphOracle,
    FieldsEquivariance,
    FdGradients,
    ModelEquivariance,
    LossInvariance,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::GroupActions, Suite::GraphOracle, Suite::FieldsEquivariance, Suite::FdGradients, Suite::ModelEquivariance, Suite::LossInvariance];

    pub fn name(self) -> &'static str {
        match self {
            Suite::GroupActions => "group-actions",
            Suite::GraphOracle => "graph-oracle",
            Suite::FieldsEquivariance => "fields-equivariance",
            Suite::FdGradients => "fd-gradients",
            Suite::ModelEquivariance => "model-equivariance",
            Suite::LossInvariance => "loss-invariance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
            domain!("unknown suite '{s}', expected one of {}", names.join(", "))
        })
    }

    pub fn default_trials(self) -> usize {
        match self {
            Suite::GroupActions | Suite::LossInvariance => 1000,
            Suite::GraphOracle => 200,
            Suite::FieldsEquivariance | Suite::FdGradients => 100,
            Suite::ModelEquivariance => 20,
        }
    }

    fn trial(self, rng: &mut ChaCha8Rng, index: usize) -> Result<(), String> {
        match self {
            Suite::GroupActions => group_actions(rng),
            Suite::GraphOracle => graph_oracle(rng),
            Suite::FieldsEquivariance => fields_equivariance(rng),
            Suite::FdGradients => fd_gradients(rng, index),
            Suite::ModelEquivariance => model_equivariance(rng, index),
            Suite::LossInvariance => loss_invariance(rng),
        }
    }
}

/// One failing trial, serialisable for replay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub suite: Suite,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub seed: u64,
    pub failures: Vec<Failure>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut failures = Vec::new();
    for t in 0..trials {
        let trial_seed = seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        // the trial seed also selects deterministic per-trial variants
        if let Err(message) = suite.trial(&mut rng, trial_seed as usize) {
            failures.push(Failure { suite, seed: trial_seed, message });
        }
    }
    SuiteReport { suite, trials, seed, failures, seconds: start.elapsed().as_secs_f64() }
}

type Check = Result<(), String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn lift<T>(r: Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rel_close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
    (a - b).abs().max() <= tol * a.abs().max().max(b.abs().max()).max(1.0)
}

fn torus_dist(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).iter().map(|d| (d - d.round()).abs()).fold(0.0, f64::max)
}

fn material_close(a: &Material, b: &Material, tol: f64, what: &str) -> Check {
    ensure(rel_close(&a.rho, &b.rho, tol), || format!("{what}: lattices differ\n{}\n{}", a.rho, b.rho))?;
    ensure(a.z == b.z, || format!("{what}: species differ"))?;
    for (i, (p, q)) in a.x.iter().zip(&b.x).enumerate() {
        ensure(torus_dist(p, q) <= tol, || format!("{what}: atom {i} at {p:?} vs {q:?}"))?;
    }
    Ok(())
}

fn random_material(rng: &mut ChaCha8Rng) -> Result<Material, String> {
    lift(synth_material(Family::Mixed, rng, "check".into()))
}

/// A generic cell: random parameters, then a mild basis change and a rotation.
fn random_cell(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let [a, b, c] = [0; 3].map(|_| rng.random_range(2.0..6.0));
        let [alpha, beta, gamma] = [0; 3].map(|_| rng.random_range(60.0..120.0));
        let p = LatticeParams { a, b, c, alpha, beta, gamma };
        let Ok(rho) = params_to_lattice(&p) else { continue };
        if rho.determinant().abs() < 0.3 * p.a * p.b * p.c {
            continue;
        }
        let g = GroupElement::Slz(random_slz(rng, 1));
        let q = GroupElement::Orthogonal(random_orthogonal(rng));
        return act_on_lattice(&q, &act_on_lattice(&g, &rho).unwrap()).unwrap();
    }
}

fn group_actions(rng: &mut ChaCha8Rng) -> Check {
    // torus arithmetic
    let a = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    let b = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    let lhs = lift(wrap_frac(&(lift(wrap_frac(&a))? + b)))?;
    let rhs = lift(wrap_frac(&(a + b)))?;
    ensure(torus_dist(&lhs, &rhs) <= 1e-12, || format!("wrap(wrap(a)+b) {lhs:?} vs wrap(a+b) {rhs:?}"))?;
    let g = random_slz(rng, 3);
    let gm = int_to_mat(&g);
    let lhs = lift(wrap_frac(&(gm * lift(wrap_frac(&a))?)))?;
    let rhs = lift(wrap_frac(&(gm * a)))?;
    ensure(torus_dist(&lhs, &rhs) <= 1e-10, || format!("wrap(g wrap(x)) {lhs:?} vs wrap(g x) {rhs:?}"))?;

    let m = random_material(rng)?;
    let n = m.n_atoms();
    let (q1, q2) = (random_orthogonal(rng), random_orthogonal(rng));
    let (g1, g2) = (random_slz(rng, 3), random_slz(rng, 3));
    let (p1, p2) = (random_permutation(rng, n), random_permutation(rng, n));
    let (t1, t2) = (random_translation(rng, 5.0), random_translation(rng, 5.0));
    let run = |g: GroupElement, m: &Material| lift(act(&g, m));

    // identities
    material_close(&run(GroupElement::identity_orthogonal(), &m)?, &m, 0.0, "orthogonal identity")?;
    material_close(&run(GroupElement::Slz([[1, 0, 0], [0, 1, 0], [0, 0, 1]]), &m)?, &m, 0.0, "slz identity")?;
    material_close(&run(GroupElement::Translation(Vec3::zeros()), &m)?, &m, 0.0, "translation identity")?;
    material_close(&run(GroupElement::Permutation((0..n).collect()), &m)?, &m, 0.0, "permutation identity")?;

    // composition within each subgroup
    let seq = |a: GroupElement, b: GroupElement| run(a, &run(b, &m)?);
    material_close(
        &seq(GroupElement::Orthogonal(q1), GroupElement::Orthogonal(q2))?,
        &run(GroupElement::Orthogonal(q1 * q2), &m)?,
        1e-10,
        "orthogonal composition",
    )?;
    material_close(&seq(GroupElement::Slz(g1), GroupElement::Slz(g2))?, &run(GroupElement::Slz(int_mul(&g1, &g2)), &m)?, 1e-10, "slz composition")?;
    let p12: Vec<usize> = (0..n).map(|i| p1[p2[i]]).collect();
    material_close(
        &seq(GroupElement::Permutation(p1.clone()), GroupElement::Permutation(p2.clone()))?,
        &run(GroupElement::Permutation(p12), &m)?,
        0.0,
        "permutation composition",
    )?;
    material_close(
        &seq(GroupElement::Translation(t1), GroupElement::Translation(t2))?,
        &run(GroupElement::Translation(t1 + t2), &m)?,
        1e-10,
        "translation composition",
    )?;
    material_close(&seq(GroupElement::Slz(g1), GroupElement::Slz(int_inverse(&g1)))?, &m, 1e-10, "slz inverse")?;

    // commuting pairs; an isometry conjugates a translation into a rotated one
    let elems = [
        ("orthogonal", GroupElement::Orthogonal(q1)),
        ("slz", GroupElement::Slz(g1)),
        ("permutation", GroupElement::Permutation(p1)),
        ("translation", GroupElement::Translation(t1)),
    ];
    for (i, (na, a)) in elems.iter().enumerate() {
        for (nb, b) in &elems[i + 1..] {
            let (lhs, rhs) = if *na == "orthogonal" && *nb == "translation" {
                (seq(a.clone(), b.clone())?, seq(GroupElement::Translation(q1 * t1), a.clone())?)
            } else {
                (seq(a.clone(), b.clone())?, seq(b.clone(), a.clone())?)
            };
            material_close(&lhs, &rhs, 1e-10, &format!("{na} and {nb} commute"))?;
        }
    }

    // the infinite point cloud
    let radius = rng.random_range(3.0..6.0);
    let cloud = lift(expand_cloud(&m, radius))?;
    let moved = lift(expand_cloud(&run(GroupElement::Slz(g1), &m)?, radius))?;
    same_cloud(&cloud, &moved, radius, "slz cloud")?;
    let rotated: Vec<(Vec3, u32)> = cloud.iter().map(|(p, z)| (q1 * p, *z)).collect();
    same_cloud(&rotated, &lift(expand_cloud(&run(GroupElement::Orthogonal(q1), &m)?, radius))?, radius, "rotated cloud")?;

    // metric tensor
    let f = metric_tensor(&m.rho);
    ensure(rel_close(&metric_tensor(&act_on_lattice(&GroupElement::Orthogonal(q1), &m.rho).unwrap()), &f, 1e-10), || {
        "metric tensor is not orthogonally invariant".into()
    })?;
    let gi = int_to_mat(&int_inverse(&g1));
    let expect = gi.transpose() * f * gi;
    let got = metric_tensor(&act_on_lattice(&GroupElement::Slz(g1), &m.rho).unwrap());
    ensure(rel_close(&got, &expect, 1e-10), || format!("metric tensor under slz\n{got}\n{expect}"))
}

/// Multiset equality of two clouds within 1e-9, ignoring points within 1e-9
/// of the boundary sphere.
fn same_cloud(a: &[(Vec3, u32)], b: &[(Vec3, u32)], radius: f64, what: &str) -> Check {
    let interior = |c: &[(Vec3, u32)]| -> Vec<(Vec3, u32)> { c.iter().filter(|(p, _)| (p.norm() - radius).abs() > 1e-9).copied().collect() };
    let (a, b) = (interior(a), interior(b));
    ensure(a.len() == b.len(), || format!("{what}: {} vs {} points", a.len(), b.len()))?;
    let mut used = vec![false; b.len()];
    for (p, z) in &a {
        let hit = b.iter().enumerate().position(|(k, (q, w))| !used[k] && w == z && (p - q).norm() <= 1e-9);
        match hit {
            Some(k) => used[k] = true,
            None => return Err(format!("{what}: point {p:?} (z={z}) has no partner")),
        }
    }
    Ok(())
}

type EdgeKey = (usize, usize, [i32; 3]);

/// All edges `(i, j, τ)` with `0 < r < cutoff`, by exhaustive search over a
/// box derived from the smallest singular value of `rho`.
fn brute_force_edges(m: &Material, cutoff: f64) -> Vec<(EdgeKey, f64)> {
    let smin = m.rho.singular_values().min();
    let t = (cutoff / smin).ceil() as i32 + 1;
    let mut out = Vec::new();
    for i in 0..m.n_atoms() {
        for j in 0..m.n_atoms() {
            for a in -t..=t {
                for b in -t..=t {
                    for c in -t..=t {
                        let e = m.x[j] - m.x[i] + Vec3::new(a.into(), b.into(), c.into());
                        let r = (m.rho.transpose() * e).norm();
                        if r > 0.0 && r < cutoff {
                            out.push(((i, j, [a, b, c]), r));
                        }
                    }
                }
            }
        }
    }
    out
}

fn graph_oracle(rng: &mut ChaCha8Rng) -> Check {
    let rho = random_cell(rng);
    let n = rng.random_range(1..=8);
    let x = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..1.0))).collect();
    let z = (0..n).map(|_| rng.random_range(1..=10)).collect();
    let m = lift(Material::new(rho, x, z))?;
    let cutoff = rng.random_range(1.0..6.0);

    let graph = lift(build_graph(&m, &GraphPolicy::uniform_cutoff(cutoff, n)))?;
    let oracle = brute_force_edges(&m, cutoff);
    let got: BTreeSet<EdgeKey> = graph.edges.iter().map(|e| (e.src, e.dst, e.tau)).collect();
    let want: BTreeSet<EdgeKey> = oracle.iter().map(|(k, _)| *k).collect();
    ensure(got.len() == graph.edges.len(), || "duplicate edges".into())?;
    if got != want {
        let extra: Vec<_> = got.difference(&want).take(3).collect();
        let missing: Vec<_> = want.difference(&got).take(3).collect();
        return Err(format!("cutoff {cutoff}: extra {extra:?}, missing {missing:?}"));
    }
    let keys: Vec<EdgeKey> = graph.edges.iter().map(|e| (e.src, e.dst, e.tau)).collect();
    ensure(keys.windows(2).all(|w| w[0] < w[1]), || "edges not in canonical order".into())?;

    // triplets: every chained pair except the immediate reverse image
    let mut want_t = Vec::new();
    for (a, ea) in keys.iter().enumerate() {
        for (b, eb) in keys.iter().enumerate() {
            let reverse = eb.1 == ea.0 && eb.2 == ea.2.map(|t| -t);
            if ea.1 == eb.0 && !reverse {
                want_t.push((a, b));
            }
        }
    }
    let got_t: Vec<(usize, usize)> = graph.triplets.iter().map(|t| (t.first, t.second)).collect();
    ensure(got_t == want_t, || format!("triplets differ: {} vs {}", got_t.len(), want_t.len()))?;

    // knn: the k shortest distances per atom
    let k = rng.random_range(1..=12);
    let knn = lift(build_graph(&m, &GraphPolicy::Knn(k)))?;
    let big = (1..).map(|s| cutoff.max(2.0) * f64::from(s)).find(|&c| {
        let found = brute_force_edges(&m, c);
        (0..n).all(|i| found.iter().filter(|((s, _, _), _)| *s == i).count() >= k)
    });
    let pool = brute_force_edges(&m, big.unwrap() + 1.0);
    for i in 0..n {
        let mut want: Vec<f64> = pool.iter().filter(|((s, _, _), _)| *s == i).map(|(_, r)| *r).collect();
        want.sort_by(f64::total_cmp);
        want.truncate(k + 1);
        let mut got: Vec<f64> = knn.edges.iter().filter(|e| e.src == i).map(|e| (m.rho.transpose() * e.frac_vector(&m.x)).norm()).collect();
        got.sort_by(f64::total_cmp);
        // a pair of opposite self images at the k-th distance is kept whole
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        let prefix = got.len() >= k && got[..k].iter().zip(&want).all(|(a, b)| near(*a, *b));
        let tail = got.len() == k || (got.len() == k + 1 && near(got[k], want[k - 1]) && near(want[k], want[k - 1]));
        ensure(prefix && tail, || format!("knn k={k} atom {i}: {got:?} vs {want:?}"))?;
    }
    let shell = lift(build_graph(&m, &GraphPolicy::KnnShell(k)))?;
    for i in 0..n {
        let mut all: Vec<f64> = pool.iter().filter(|((s, _, _), _)| *s == i).map(|(_, r)| *r).collect();
        all.sort_by(f64::total_cmp);
        let rk = all[k - 1];
        let want = all.iter().filter(|r| **r <= rk + 1e-9).count();
        let got = shell.edges.iter().filter(|e| e.src == i).count();
        ensure(got == want, || format!("knn shell k={k} atom {i}: {got} edges, expected {want}"))?;
    }

    // topology invariance: per-atom distance lists survive every action
    let perm = random_permutation(rng, n);
    let g = GroupElement::Composite(vec![
        GroupElement::Slz(random_slz(rng, 3)),
        GroupElement::Orthogonal(random_orthogonal(rng)),
        GroupElement::Translation(random_translation(rng, 4.0)),
        GroupElement::Permutation(perm.clone()),
    ]);
    let moved = lift(act(&g, &m))?;
    let distances = |mm: &Material, policy: &GraphPolicy| -> Result<Vec<Vec<f64>>, String> {
        let gr = lift(build_graph(mm, policy))?;
        let mut out = vec![Vec::new(); n];
        for e in &gr.edges {
            out[e.src].push((mm.rho.transpose() * e.frac_vector(&mm.x)).norm());
        }
        out.iter_mut().for_each(|v| v.sort_by(f64::total_cmp));
        Ok(out)
    };
    for policy in [GraphPolicy::uniform_cutoff(cutoff, n), GraphPolicy::Knn(k), GraphPolicy::KnnShell(k)] {
        let (before, after) = (distances(&m, &policy)?, distances(&moved, &policy)?);
        for i in 0..n {
            let (a, b) = (&before[i], &after[perm[i]]);
            let near = |u: &f64, v: &f64| (u - v).abs() <= 1e-9 * u.max(1.0);
            // a cutoff edge sitting on the boundary may flip; require equal lists otherwise
            let boundary = a.iter().chain(b).any(|r| (r - cutoff).abs() < 1e-9);
            ensure(boundary || (a.len() == b.len() && a.iter().zip(b).all(|(u, v)| near(u, v))), || {
                format!("{policy:?}: atom {i} neighbourhood changed under the group action")
            })?;
        }
    }
    Ok(())
}

/// Per-channel sums of the field generators over the whole graph.
fn field_sums(m: &Material, spec: &LambdaSpec) -> Result<Vec<Mat3>> {
    let graph = build_graph(m, &GraphPolicy::KnnShell(6))?;
    let geometry = graph.geometry(&m.rho, &m.x)?;
    let channels = lambda_eval(spec, &graph, &geometry, &m.rho)?;
    Ok(channels.iter().map(|c| c.values.iter().fold(Mat3::zeros(), |acc, g| acc + g.0)).collect())
}

fn fields_equivariance(rng: &mut ChaCha8Rng) -> Check {
    let m = random_material(rng)?;
    let spec = lift(LambdaSpec::new(FieldKind::ALL.to_vec(), rng.random_bool(0.5)))?;
    let base = lift(field_sums(&m, &spec))?;
    let q = random_orthogonal(rng);
    let cases = [
        ("orthogonal", GroupElement::Orthogonal(q)),
        ("slz", GroupElement::Slz(random_slz(rng, 3))),
        ("translation", GroupElement::Translation(random_translation(rng, 5.0))),
        ("permutation", GroupElement::Permutation(random_permutation(rng, m.n_atoms()))),
    ];
    for (name, g) in cases {
        let moved = lift(field_sums(&lift(act(&g, &m))?, &spec))?;
        for (c, (a, b)) in base.iter().zip(&moved).enumerate() {
            let expect = if name == "orthogonal" { q * a * q.transpose() } else { *a };
            ensure(rel_close(b, &expect, 1e-9), || format!("{name}: channel {c}\n{b}\n{expect}"))?;
        }
    }
    Ok(())
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Relative error with a floor for central-difference roundoff on a function
/// of magnitude `scale`.
fn fd_error(analytic: f64, fd: f64, scale: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6 * scale.max(1.0))
}

fn fd_gradients(rng: &mut ChaCha8Rng, index: usize) -> Check {
    // invariant geometry as a function of the lattice
    let rho = random_cell(rng);
    let frac = |rng: &mut ChaCha8Rng| Vec3::from_fn(|_, _| rng.random_range(-1.5..1.5));
    let (ea, eb) = (frac(rng), frac(rng));
    let dir = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let geo = |r: &Mat3| -> Result<(EdgeGeometry, EdgeGeometry, TripletGeometry)> {
        let a = EdgeGeometry::from_frac(r, ea)?;
        let b = EdgeGeometry::from_frac(r, eb)?;
        let t = TripletGeometry::from_edges(&a, &b);
        Ok((a, b, t))
    };
    let (a, b, t) = lift(geo(&rho))?;
    if t.is_collinear() || t.theta < 0.05 || t.theta > std::f64::consts::PI - 0.05 {
        return Ok(());
    }
    let central = |f: &dyn Fn(&Mat3) -> Result<f64>| -> Result<f64, String> {
        Ok((lift(f(&(rho + FD_STEP * dir)))? - lift(f(&(rho - FD_STEP * dir)))?) / (2.0 * FD_STEP))
    };
    let checks: [(&str, Mat3, f64, &dyn Fn(&Mat3) -> Result<f64>); 3] = [
        ("grad_r", grad_r(&a), a.r, &|r| geo(r).map(|g| g.0.r)),
        ("grad_theta", lift(grad_theta(&a, &b, &t))?, t.theta, &|r| geo(r).map(|g| g.2.theta)),
        ("grad_area", lift(grad_area(&a, &b, &t))?, t.area, &|r| geo(r).map(|g| g.2.area)),
    ];
    for (name, grad, value, f) in checks {
        let (an, fd) = (pairing(&grad, &dir), central(f)?);
        ensure(fd_error(an, fd, value) <= FD_TOL, || format!("{name}: analytic {an} vs fd {fd}"))?;
    }

    // model parameters through the tape
    let ff = index % 9 == 8;
    let kind = FieldKind::ALL[index % 8];
    let spec = lift(LambdaSpec::new(vec![kind], rng.random_bool(0.5)))?;
    let mut cfg = small_config(spec);
    if ff {
        cfg.kind = ModelKind::FfBaseline;
    }
    let ckpt = lift(random_checkpoint(cfg, rng))?;
    let m = random_material(rng)?;
    let target = random_material(rng)?.rho;
    let loss_spec = if ff { [LossSpec::ParamMae, LossSpec::ParamMse][index % 2] } else { LossSpec::ALL[index % 5] };
    let norm = ckpt.normalizer.clone().unwrap_or_else(Normalizer::identity);
    let prep = lift(Prepared::new(&m, &ckpt.config))?;
    let evaluate = |c: &ModelCheckpoint| -> Result<(Tape, crate::net::BoundParams, crate::tape::Var)> {
        let mut tape = Tape::new();
        let p = bind_parameters(&mut tape, c, true);
        let out = forward_tape(&mut tape, &p, &c.config, &prep)?;
        let l = match out.params {
            Some(z) => param_loss_tape(&mut tape, loss_spec, z, &lattice_params(&target)?.to_radian_array(), &norm)?,
            None => loss_tape(&mut tape, loss_spec, out.rho, &target, Some(&norm))?,
        };
        Ok((tape, p, l))
    };
    let (tape, params, l) = lift(evaluate(&ckpt))?;
    let scale = tape.scalar(l).abs();
    let grads = tape.backward(l);
    for (name, var) in params.iter() {
        let len = ckpt.parameters[name].data.len();
        let dir: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted = |s: f64| -> Result<f64, String> {
            let mut c = ckpt.clone();
            c.parameters.get_mut(name).unwrap().data.iter_mut().zip(&dir).for_each(|(v, d)| *v += s * d);
            let (tape, _, l) = lift(evaluate(&c))?;
            Ok(tape.scalar(l))
        };
        let h = 10.0 * FD_STEP;
        let fd = (8.0 * (shifted(h)? - shifted(-h)?) - shifted(2.0 * h)? + shifted(-2.0 * h)?) / (12.0 * h);
        let an: f64 = grads.get(*var).map_or(0.0, |g| g.data.iter().zip(&dir).map(|(a, b)| a * b).sum());
        ensure(fd_error(an, fd, scale) <= FD_TOL, || format!("{} / {}: parameter {name}: tape {an} vs fd {fd}", kind.name(), loss_spec.name()))?;
    }
    Ok(())
}

fn small_config(spec: LambdaSpec) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        rbf_bins: 6,
        rbf_delta: 1.0,
        n_plain_layers: 1,
        n_deform_layers: 2,
        knn_k: 6,
        lambda_spec: spec,
        weight_scale: WeightScale::SigmoidScaled { limit: 0.05 },
        ..ModelConfig::default()
    }
}

/// A checkpoint with every parameter non-zero, so all paths carry signal.
fn random_checkpoint(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelCheckpoint> {
    let mut ckpt = ModelCheckpoint::init(cfg, rng.random())?;
    for t in ckpt.parameters.values_mut() {
        let b = 1.5 / (t.rows as f64).sqrt();
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-b..b));
    }
    if ckpt.config.kind == ModelKind::FfBaseline {
        let data = (0..20).map(|_| synth_material(Family::Mixed, rng, String::new())).collect::<Result<Vec<_>>>()?;
        ckpt.normalizer = Some(Normalizer::fit(&data)?);
    }
    Ok(ckpt)
}

fn model_equivariance(rng: &mut ChaCha8Rng, index: usize) -> Check {
    let spec = lift(LambdaSpec::new(FieldKind::ALL.to_vec(), index % 2 == 1))?;
    let mut cfg = small_config(spec);
    if index % 3 == 2 {
        cfg.weight_scale = WeightScale::Unbounded;
        cfg.deformation_step = 0.05;
    }
    let ckpt = lift(random_checkpoint(cfg.clone(), rng))?;
    let m = random_material(rng)?;
    let base = lift(forward(&m, &ckpt))?;
    ensure((base.rho - m.rho).abs().max() > 1e-6, || "model does not deform the lattice".into())?;
    let close = |a: &Mat3, b: &Mat3, what: &str| -> Check {
        let err = (a - b).abs().max();
        ensure(err <= 1e-8, || format!("{what}: {err:e}\n{a}\n{b}"))
    };
    let q = GroupElement::Orthogonal(random_orthogonal(rng));
    close(&lift(forward(&lift(act(&q, &m))?, &ckpt))?.rho, &act_on_lattice(&q, &base.rho).unwrap(), "orthogonal")?;
    let s = GroupElement::Slz(random_slz(rng, 4));
    close(&lift(forward(&lift(act(&s, &m))?, &ckpt))?.rho, &act_on_lattice(&s, &base.rho).unwrap(), "slz")?;
    let t = GroupElement::Translation(random_translation(rng, 5.0));
    close(&lift(forward(&lift(act(&t, &m))?, &ckpt))?.rho, &base.rho, "translation")?;
    let perm = random_permutation(rng, m.n_atoms());
    let out = lift(forward(&lift(act(&GroupElement::Permutation(perm.clone()), &m))?, &ckpt))?;
    close(&out.rho, &base.rho, "permutation")?;
    for (i, &j) in perm.iter().enumerate() {
        let err = base.features.row(i).iter().zip(out.features.row(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-8, || format!("features of atom {i} not permuted ({err:e})"))?;
    }

    let mut ff = lift(random_checkpoint(ModelConfig { kind: ModelKind::FfBaseline, ..cfg }, rng))?;
    // keep the predicted parameters near the dataset mean so they stay valid
    for name in ["ff.4.w", "ff.4.b"] {
        ff.parameters.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v *= 0.1);
    }
    let g = GroupElement::Composite(vec![
        GroupElement::Orthogonal(random_orthogonal(rng)),
        GroupElement::Slz(random_slz(rng, 4)),
        GroupElement::Permutation(random_permutation(rng, m.n_atoms())),
        GroupElement::Translation(random_translation(rng, 3.0)),
    ]);
    let a = lift(ff_baseline_forward(&m, &ff))?;
    let b = lift(ff_baseline_forward(&lift(act(&g, &m))?, &ff))?;
    close(&a, &b, "baseline invariance")
}

fn loss_invariance(rng: &mut ChaCha8Rng) -> Check {
    let pred = random_cell(rng);
    let target = random_cell(rng);
    let norm = Normalizer { mean: std::array::from_fn(|_| rng.random_range(-1.0..3.0)), std: std::array::from_fn(|_| rng.random_range(0.2..2.0)) };
    let q = GroupElement::Orthogonal(random_orthogonal(rng));
    let (pq, tq) = (act_on_lattice(&q, &pred).unwrap(), act_on_lattice(&q, &target).unwrap());
    for spec in LossSpec::ALL {
        let l = lift(loss(spec, &pred, &target, Some(&norm)))?;
        let lq = lift(loss(spec, &pq, &tq, Some(&norm)))?;
        ensure((l - lq).abs() <= 1e-10 * l.abs().max(1.0), || format!("{}: {l} vs rotated {lq}", spec.name()))?;
        if spec == LossSpec::RhoRiemann {
            let (fp, ft) = (pred * pred.transpose(), target * target.transpose());
            let verbatim: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| fp[(i, j)] * ft[(j, i)]).sum();
            ensure((l - verbatim).abs() <= 1e-10 * verbatim.abs(), || format!("rho-riemann {l} vs trace {verbatim}"))?;
        } else {
            let zero = lift(loss(spec, &pred, &pred, Some(&norm)))?;
            ensure(zero == 0.0, || format!("{} of identical lattices is {zero}", spec.name()))?;
        }
    }
    // a change of basis describes the same crystal yet changes the parameters
    let shear = GroupElement::Slz([[1, 1, 0], [0, 1, 0], [0, 0, 1]]);
    let sheared = act_on_lattice(&shear, &Mat3::identity()).unwrap();
    let l = lift(loss(LossSpec::ParamMae, &Mat3::identity(), &sheared, Some(&Normalizer::identity())))?;
    ensure(l > 0.1, || format!("param-mae of a pure basis change is {l}"))
}
