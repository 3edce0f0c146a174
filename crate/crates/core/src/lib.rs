//! Adaptive mixed finite elements for second-order elliptic problems in the plane.
//!
//! The pipeline is the usual solve, estimate, mark, refine loop. [`mesh`] holds
//! conforming triangulations refined by newest-vertex bisection, [`fem`] the
//! lowest-order Raviart-Thomas discretization, [`estimate`] the a posteriori
//! indicators and [`adapt`] the marking strategy and the driver.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod estimate;
pub mod fem;
pub mod io;
pub mod mesh;
pub mod par;
pub mod problems;
pub mod quadrature;
pub mod sparse;
pub mod verify;
