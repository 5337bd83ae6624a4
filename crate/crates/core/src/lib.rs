//! Periodic equivariant message passing for crystal lattice deformation.
//!
//! A material is a lattice (generators as rows of a 3×3 matrix), fractional
//! atomic positions and atomic numbers. The crate provides the group actions
//! that leave a crystal unchanged, periodic neighbour graphs, invariant
//! geometry and its lattice gradients, the deformation network with its
//! reverse-mode tape, and the training / evaluation loop.

pub mod check;
pub mod error;
pub mod fields;
pub mod graph;
pub mod group;
pub mod io;
pub mod linalg;
pub mod material;
pub mod net;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use fields::{FieldKind, LambdaSpec, LatticeGenerator};
pub use graph::{build_graph, Edge, GraphPolicy, PeriodicGraph, Triplet};
pub use group::{act, GroupElement};
pub use io::{read_materials, write_materials, Ingest};
pub use linalg::{expm, Mat3, Vec3};
pub use material::{expand_cloud, lattice_params, metric_tensor, params_to_lattice, random_deformation, wrap_frac, LatticeParams, Material};
