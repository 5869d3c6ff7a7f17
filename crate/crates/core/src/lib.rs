//! Fully discrete adjoints for DIRK-integrated conservation laws on deforming
//! domains.
//!
//! The pieces, from the bottom up: [`tableau`] defines the time integrators,
//! [`system`] the semi-discrete contract `M du/dt = r(u, mu, t)`, [`primal`]
//! and [`adjoint`] the forward solve and the reverse sweep, [`qoi`] the
//! solver-consistent functionals, and [`store`] the checkpoint file.
//! [`ale`], [`dg1d`] and [`params`] make up the deforming-domain model
//! problem; [`optimize`] drives gradient-based design on top of it.

pub mod adjoint;
pub mod config;
pub mod ale;
pub mod dg1d;
pub mod error;
pub mod optimize;
pub mod params;
pub mod primal;
pub mod qoi;
pub mod store;
pub mod studies;
pub mod system;
pub mod systems;
pub mod tableau;

pub use error::{Error, Result};
