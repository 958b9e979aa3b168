//! Variable-metric splitting methods for nonsmooth nonconvex optimization.
//!
//! The crate has three layers. The bottom layer is numerical machinery:
//! SPD metric operators, proximal maps and projections ([`metric`]), and
//! desingularizing functions with a sampling KL-inequality checker ([`kl`]).
//! The middle layer runs solvers that emit iterate traces: an alternating
//! forward-backward engine over block products ([`afb`]) and a projected
//! Newton-like method with eigenvalue-corrected metrics ([`lm`]). The top
//! layer audits those traces after the fact: descent inequalities,
//! criticality certificates, and convergence-rate prediction and fitting
//! ([`monitor`]).
//!
//! Everything is deterministic: random sampling is seeded, set-valued maps
//! break ties by fixed rules, and traces round-trip through CSV exactly.

pub mod afb;
pub mod block;
pub mod error;
pub mod kl;
pub mod lm;
pub mod metric;
pub mod monitor;
pub mod problems;
pub mod seq;
pub mod trace;

pub use block::BlockVector;
pub use error::{Error, Result};
