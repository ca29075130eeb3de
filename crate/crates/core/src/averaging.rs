//! The averaged radial normal form
//! `r' = (mu/omega) r + (2 sigma_#/(3 pi omega)) r^2 + C3 r^3 + h.o.t.`,
//! with every coefficient computed both in closed form and by piecewise
//! quadrature of the polar right-hand side.

pub use crate::quad::{piecewise_average, piecewise_integral, piecewise_integral_over};

use crate::coeffs::{s_c, s_q, sigma_2, sigma_tilde};
use crate::error::{Error, Result};
use crate::polar::polar_decompose;
use crate::system::PlanarSystem;
use serde::Serialize;
use std::f64::consts::PI;

/// A coefficient with its two computation routes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Paired {
    pub closed: f64,
    pub quadrature: f64,
}

impl Paired {
    pub fn abs_diff(&self) -> f64 {
        (self.closed - self.quadrature).abs()
    }
}

/// Coefficients of the truncated averaged radial equation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AveragedNormalForm {
    pub mu: f64,
    pub omega: f64,
    pub linear: Paired,
    pub quadratic: Paired,
    pub cubic: Paired,
}

impl AveragedNormalForm {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializes")
    }
}

/// Assemble the averaged normal form of a planar system with normal-form
/// linear part. The quadrature route computes `(1/2pi) int chi2/omega` and
/// `(1/2pi) int (chi3/omega - chi2*Omega1/omega^2)`.
pub fn averaged_form(sys: &PlanarSystem) -> Result<AveragedNormalForm> {
    if !sys.linear.is_normal_form() {
        return Err(Error::NotNormalForm);
    }
    let omega = sys.omega()?;
    let mu = sys.mu();
    let p = polar_decompose(sys)?;
    let kinks = p.switching_angles().to_vec();
    let quad_q = piecewise_average(|phi| p.chi2(phi) / omega, &kinks);
    let cubic_q = piecewise_average(
        |phi| p.chi3(phi) / omega - p.chi2(phi) * p.omega1(phi) / (omega * omega),
        &kinks,
    );
    let quad_cf = 2.0 * sigma_tilde(&sys.quad) / (3.0 * PI * omega);
    let cubic_cf = if sys.quad.all_abs_slopes() {
        s_q(&sys.smooth) / (8.0 * omega * omega) + s_c(&sys.smooth) / (8.0 * omega)
            - sigma_2(&sys.quad)? / (2.0 * PI * omega * omega)
    } else {
        // no printed closed form for the cubic coefficient with general
        // slopes; the quadrature value is the reference
        cubic_q
    };
    Ok(AveragedNormalForm {
        mu,
        omega,
        linear: Paired { closed: mu / omega, quadrature: mu / omega },
        quadratic: Paired { closed: quad_cf, quadrature: quad_q },
        cubic: Paired { closed: cubic_cf, quadrature: cubic_q },
    })
}

/// Nontrivial equilibrium of the truncated averaged equation,
/// `r = -linear/quadratic`, when admissible (`r >= 0`).
///
/// Returns `None` when the equilibrium lies on the inadmissible side, and
/// `Err(SecondOrderDegenerate)` when the quadratic coefficient is below
/// threshold (route to the second-order analysis instead).
pub fn averaged_equilibrium(nf: &AveragedNormalForm) -> Result<Option<f64>> {
    let threshold = 1e-12 * (1.0 + nf.quadratic.closed.abs());
    if nf.quadratic.closed.abs() <= threshold {
        return Err(Error::SecondOrderDegenerate);
    }
    if nf.linear.closed == 0.0 {
        return Ok(Some(0.0));
    }
    let r = -nf.linear.closed / nf.quadratic.closed;
    Ok(if r > 0.0 { Some(r) } else { None })
}
