//! Finite element continuation for `−Δu + u = 0` in a planar domain with the
//! nonlinear flux condition `∂u/∂η = λ f(u)` on the boundary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod condensed;
pub mod continuation;
pub mod mesh;
pub mod nonlinearity;
pub mod oracle_radial;
pub mod sparse;
pub mod steklov;

pub use assembly::{DiscreteOperator, Discretization, DofVector, OperatorKind};
pub use mesh::{generate_disk_mesh, generate_rectangle_mesh, load_mesh, DomainTag, MeshGeometry};
pub use nonlinearity::{analyze, bootstrap_exponents, Direction, HypothesisReport, NonlinearitySpec};
pub use steklov::{solve_steklov_first, SteklovPair};
