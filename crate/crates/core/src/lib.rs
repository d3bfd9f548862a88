//! Object-centric manipulation skills learned from demonstration.
//!
//! A skill is encoded as a task-parameterized hidden semi-Markov model
//! (TP-HSMM) over a product manifold of Euclidean and unit-quaternion
//! blocks. The crate covers the full desk-scale pipeline:
//!
//! * [`manifold`]: Exp/Log maps, parallel transport and Gaussian
//!   statistics on `ℝⁿ × S³ × …` product manifolds.
//! * [`tpgmm`]: frame transforms of demonstrations and EM fitting of
//!   task-parameterized mixture models.
//! * [`tphsmm`]: transition/duration estimation, the forward variable
//!   and joint most-likely state decoding from boundary observations.
//! * [`conditions`]: precondition, final-condition and effect models
//!   attached to the initial/final components of a skill.
//! * [`cascade`]: composition of per-skill models into one joint model
//!   for a skill sequence, plus sequence-level planning and execution.
//! * [`lqt`]: linear-quadratic tracking of a decoded state sequence in
//!   the tangent spaces of the pose manifold.
//! * [`workspace`]: synthetic demonstration generators and a kinematic
//!   simulator for closed-loop runs.
//! * [`io`]: JSON schemas for datasets, skill models, plans and
//!   trajectories.
//! * [`pipeline`]: high-level entry points shared by the CLI and the
//!   Python bindings.

pub mod cascade;
pub mod conditions;
pub mod config;
pub mod error;
pub mod io;
pub mod lqt;
pub mod manifold;
pub mod pipeline;
pub mod tpgmm;
pub mod tphsmm;
pub mod workspace;

pub use error::{Error, Result};
