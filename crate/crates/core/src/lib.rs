//! Equivariant wrappers around arbitrary differentiable backbones.
//!
//! Three ways to make a pretrained, non-equivariant model `M` equivariant to a
//! finite group `G`:
//!
//! * **equitune** — uniform group averaging, `(1/|G|) Σ_g g⁻¹ M(g x)`;
//! * **equizero** — canonical selection, `g*⁻¹ M(g* x)` with `g*` minimising a
//!   proxy loss of the transformed outputs;
//! * **λ-equitune** — weighted averaging with positive importance weights
//!   `λ(g x)` produced by a small network.
//!
//! The crate also carries the substrate these need (finite groups and their
//! actions, a small reverse-mode autodiff engine), synthetic datasets, toy
//! environments and the experiment harness used by the `equikit` CLI.

pub mod data;
pub mod diff;
pub mod group;
pub mod harness;
pub mod models;
pub mod rl;
pub mod rng;
pub mod seqlm;
pub mod wrap;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
