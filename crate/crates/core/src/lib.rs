//! Lyapunov coefficients and bifurcating periodic-orbit branches for Hopf
//! bifurcations in systems whose nonlinear part is built from second-order
//! modulus terms `u_i [u_j]` (Lipschitz, piecewise smooth across coordinate
//! hyperplanes).
//!
//! Every closed-form coefficient has an independent quadrature route, and
//! every branch prediction has a shooting/return-map oracle in [`dynamics`].

pub mod averaging;
pub mod coeffs;
pub mod descriptor;
pub mod dynamics;
pub mod error;
pub mod polar;
pub mod predict;
pub mod quad;
pub mod shimmy;
pub mod system;
pub mod verify;

pub use error::{Error, Result};
pub use system::{
    gen_abs, LinearPart, NonsmoothQuadCoeffs, PlanarSystem, ShimmyParams, SlopePair, SmoothCoeffs,
    System3D, SystemND,
};
