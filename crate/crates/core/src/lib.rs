//! Imitation learning of nonlinear MPC policies.
//!
//! The crate builds an expert MPC controller (multiple-shooting OCP with
//! slack-softened box constraints, solved by Gauss-Newton SQP on top of a
//! primal-dual interior point QP solver) and three interchangeable imitation
//! losses for a neural policy:
//!
//! * behavior cloning, `(π(x) − π*(x))²`;
//! * the exact Q-loss, the optimal value of the OCP with its first control
//!   pinned to the policy output, whose control gradient is the multiplier of
//!   the pin constraint;
//! * the Gauss-Newton Q-loss, the same construction on the convex QP obtained
//!   by linearizing the OCP around the expert solution.
//!
//! Everything here is pure computation over `alloc`; file formats, timing and
//! the command line live in the `mpcil` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod dynamics;
pub mod error;
pub mod eval;
pub mod imitation;
pub mod linalg;
pub mod ocp;
pub mod policy;
pub mod qloss;
pub mod qp;

pub use error::{Error, Result};
