//! Constrained mean-field control: cone algebra, Fritz-John/KKT certificates,
//! McKean-Vlasov particle simulation, mean-field adjoint BSDEs, maximum
//! principle checks, the linear-quadratic example and the discrete
//! multiplier bridge.

// `!(x > 0.0)` is used on purpose so that NaN fails validation; index loops
// mirror the matrix formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod acceptance;
pub mod bridge;
pub mod bsde;
pub mod cones;
pub mod constraints;
pub mod error;
pub mod fj;
pub mod linalg;
pub mod lq;
pub mod lp;
pub mod mvsde;
pub mod output;
pub mod scenario;
pub mod smp;
mod par;

pub use error::{Error, Result};
