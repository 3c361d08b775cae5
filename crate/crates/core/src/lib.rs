//! Finite discounted MDPs with (1−γ)-normalized rewards: policy evaluation, occupancy
//! geometry and the Kakade divergence, entropy-regularized solutions, Kakade and σ-family
//! gradient flows, natural policy gradients, and certificates for their convergence bounds.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod generators;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod npg;
pub mod ode;
pub mod regularized;
pub mod soft;

pub use error::{Error, Result};
pub use mdp::{
    ActionFaces, MdpInstance, OptimalStructure, Policy, RawMdp, SuboptimalityGap, ValueBundle,
};
