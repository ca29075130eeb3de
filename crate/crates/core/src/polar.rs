//! Polar form of the systems: the angle-functions M, W, chi_1..chi_3,
//! Omega_0..Omega_2 and Upsilon, with analytically known switching angles.

use crate::error::{Error, Result};
use crate::quad::QUADRANT_KINKS;
use crate::system::{NonsmoothQuadCoeffs, PlanarSystem, SmoothCoeffs, System3D, SystemND};
use std::f64::consts::PI;

#[derive(Debug, Clone)]
enum Mode {
    /// Planar, normal-form linear part: M = mu, W = omega constants.
    PlanarNf { mu: f64, omega: f64, quad: NonsmoothQuadCoeffs, smooth: SmoothCoeffs },
    /// Planar, general linear part, original coordinates: M, W angle-functions.
    PlanarGeneral { m: [[f64; 2]; 2], quad: NonsmoothQuadCoeffs, smooth: SmoothCoeffs },
    /// Planar system seen through a normal-form transformation T (rows
    /// parameterized by C, phi_hat, D, theta_hat); kinks rotate with T.
    Transformed {
        mu: f64,
        omega: f64,
        t: [[f64; 2]; 2],
        t_inv: [[f64; 2]; 2],
        quad: NonsmoothQuadCoeffs,
    },
    ThreeD(Box<System3D>),
    Nd(Box<SystemND>),
}

/// Evaluable polar right-hand-side pieces together with the exact switching
/// angles. Between consecutive switching angles every function is analytic.
#[derive(Debug, Clone)]
pub struct PolarSamples {
    mode: Mode,
    switching: Vec<f64>,
}

/// chi2 for a normal-form planar block (non-smooth part plus the smooth
/// quadratic contribution).
fn chi2_nf(phi: f64, q: &NonsmoothQuadCoeffs, sm: &SmoothCoeffs) -> f64 {
    let (c, s) = (phi.cos(), phi.sin());
    let ac = q.alpha[0].apply(c);
    let as_ = q.alpha[1].apply(s);
    let ac3 = q.alpha[2].apply(c);
    let as4 = q.alpha[3].apply(s);
    let bc = q.beta[0].apply(c);
    let bs = q.beta[1].apply(s);
    let bc3 = q.beta[2].apply(c);
    let bs4 = q.beta[3].apply(s);
    let ns = c * c * (q.a[0][0] * ac + q.a[0][1] * as_)
        + s * s * (q.b[1][0] * bc3 + q.b[1][1] * bs4)
        + s * c * (q.a[1][0] * ac3 + q.a[1][1] * as4 + q.b[0][0] * bc + q.b[0][1] * bs);
    let [a1, a2, a3] = sm.quad_f;
    let [b1, b2, b3] = sm.quad_g;
    ns + a1 * c * c * c + (a2 + b1) * c * c * s + (a3 + b2) * c * s * s + b3 * s * s * s
}

fn omega1_nf(phi: f64, q: &NonsmoothQuadCoeffs, sm: &SmoothCoeffs) -> f64 {
    let (c, s) = (phi.cos(), phi.sin());
    let ac = q.alpha[0].apply(c);
    let as_ = q.alpha[1].apply(s);
    let ac3 = q.alpha[2].apply(c);
    let as4 = q.alpha[3].apply(s);
    let bc = q.beta[0].apply(c);
    let bs = q.beta[1].apply(s);
    let bc3 = q.beta[2].apply(c);
    let bs4 = q.beta[3].apply(s);
    let ns = c * c * (q.b[0][0] * bc + q.b[0][1] * bs)
        - s * s * (q.a[1][0] * ac3 + q.a[1][1] * as4)
        + s * c * (q.b[1][0] * bc3 + q.b[1][1] * bs4 - q.a[0][0] * ac - q.a[0][1] * as_);
    let [a1, a2, a3] = sm.quad_f;
    let [b1, b2, b3] = sm.quad_g;
    ns + b1 * c * c * c + (b2 - a1) * c * c * s + (b3 - a2) * c * s * s - a3 * s * s * s
}

fn chi3_nf(phi: f64, sm: &SmoothCoeffs) -> f64 {
    let (c, s) = (phi.cos(), phi.sin());
    let [ca1, ca2, ca3, ca4] = sm.cubic_f;
    let [cb1, cb2, cb3, cb4] = sm.cubic_g;
    c * (ca1 * c * c * c + ca2 * c * s * s + ca3 * c * c * s + ca4 * s * s * s)
        + s * (cb1 * c * c * c + cb2 * c * s * s + cb3 * c * c * s + cb4 * s * s * s)
}

fn omega2_nf(phi: f64, sm: &SmoothCoeffs) -> f64 {
    let (c, s) = (phi.cos(), phi.sin());
    let [ca1, ca2, ca3, ca4] = sm.cubic_f;
    let [cb1, cb2, cb3, cb4] = sm.cubic_g;
    c * (cb1 * c * c * c + cb2 * c * s * s + cb3 * c * c * s + cb4 * s * s * s)
        - s * (ca1 * c * c * c + ca2 * c * s * s + ca3 * c * c * s + ca4 * s * s * s)
}

impl PolarSamples {
    pub fn switching_angles(&self) -> &[f64] {
        &self.switching
    }

    /// Linear radial coefficient: constant `mu` in normal form, `M(phi)`
    /// for a general linear part.
    pub fn m(&self, phi: f64) -> f64 {
        match &self.mode {
            Mode::PlanarNf { mu, .. } | Mode::Transformed { mu, .. } => *mu,
            Mode::PlanarGeneral { m, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                m[0][0] * c * c + (m[0][1] + m[1][0]) * s * c + m[1][1] * s * s
            }
            Mode::ThreeD(sys) => sys.mu(),
            Mode::Nd(sys) => sys.mu(),
        }
    }

    /// Angular speed at the origin: constant `omega` in normal form,
    /// `W(phi)` for a general linear part.
    pub fn w(&self, phi: f64) -> f64 {
        match &self.mode {
            Mode::PlanarNf { omega, .. } | Mode::Transformed { omega, .. } => *omega,
            Mode::PlanarGeneral { m, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                m[1][0] * c * c + (m[1][1] - m[0][0]) * s * c - m[0][1] * s * s
            }
            Mode::ThreeD(sys) => sys.planar.omega().unwrap_or(f64::NAN),
            Mode::Nd(sys) => sys.planar.omega().unwrap_or(f64::NAN),
        }
    }

    /// Quadratic radial coefficient.
    pub fn chi2(&self, phi: f64) -> f64 {
        match &self.mode {
            Mode::PlanarNf { quad, smooth, .. } => chi2_nf(phi, quad, smooth),
            Mode::ThreeD(sys) => chi2_nf(phi, &sys.planar.quad, &sys.planar.smooth),
            Mode::Nd(sys) => chi2_nf(phi, &sys.planar.quad, &sys.planar.smooth),
            Mode::PlanarGeneral { quad, smooth, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                let f = quad.eval_f(c, s) + smooth.eval_fq(c, s);
                let g = quad.eval_g(c, s) + smooth.eval_gq(c, s);
                c * f + s * g
            }
            Mode::Transformed { t, t_inv, quad, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                let u1 = t[0][0] * c + t[0][1] * s;
                let u2 = t[1][0] * c + t[1][1] * s;
                let f = quad.eval_f(u1, u2);
                let g = quad.eval_g(u1, u2);
                let g1 = t_inv[0][0] * f + t_inv[0][1] * g;
                let g2 = t_inv[1][0] * f + t_inv[1][1] * g;
                c * g1 + s * g2
            }
        }
    }

    /// Linear angular coefficient.
    pub fn omega1(&self, phi: f64) -> f64 {
        match &self.mode {
            Mode::PlanarNf { quad, smooth, .. } => omega1_nf(phi, quad, smooth),
            Mode::ThreeD(sys) => omega1_nf(phi, &sys.planar.quad, &sys.planar.smooth),
            Mode::Nd(sys) => omega1_nf(phi, &sys.planar.quad, &sys.planar.smooth),
            Mode::PlanarGeneral { quad, smooth, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                let f = quad.eval_f(c, s) + smooth.eval_fq(c, s);
                let g = quad.eval_g(c, s) + smooth.eval_gq(c, s);
                c * g - s * f
            }
            Mode::Transformed { t, t_inv, quad, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                let u1 = t[0][0] * c + t[0][1] * s;
                let u2 = t[1][0] * c + t[1][1] * s;
                let f = quad.eval_f(u1, u2);
                let g = quad.eval_g(u1, u2);
                let g1 = t_inv[0][0] * f + t_inv[0][1] * g;
                let g2 = t_inv[1][0] * f + t_inv[1][1] * g;
                c * g2 - s * g1
            }
        }
    }

    /// Cubic radial coefficient (smooth cubic terms only).
    pub fn chi3(&self, phi: f64) -> f64 {
        match &self.mode {
            Mode::PlanarNf { smooth, .. } => chi3_nf(phi, smooth),
            Mode::ThreeD(sys) => chi3_nf(phi, &sys.planar.smooth),
            Mode::Nd(sys) => chi3_nf(phi, &sys.planar.smooth),
            Mode::PlanarGeneral { smooth, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                c * smooth.eval_fc(c, s) + s * smooth.eval_gc(c, s)
            }
            Mode::Transformed { .. } => 0.0,
        }
    }

    /// Quadratic angular coefficient (smooth cubic terms only).
    pub fn omega2(&self, phi: f64) -> f64 {
        match &self.mode {
            Mode::PlanarNf { smooth, .. } => omega2_nf(phi, smooth),
            Mode::ThreeD(sys) => omega2_nf(phi, &sys.planar.smooth),
            Mode::Nd(sys) => omega2_nf(phi, &sys.planar.smooth),
            Mode::PlanarGeneral { smooth, .. } => {
                let (c, s) = (phi.cos(), phi.sin());
                c * smooth.eval_gc(c, s) - s * smooth.eval_fc(c, s)
            }
            Mode::Transformed { .. } => 0.0,
        }
    }

    /// 3D: coefficient of `u` in the radial equation,
    /// `chi1 = c6 c^2 + (c7 + c8) cs + c9 s^2`.
    pub fn chi1(&self, phi: f64) -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        match &self.mode {
            Mode::ThreeD(sys) => {
                let [_, _, _, _, _, c6, c7, c8, c9] = sys.c;
                c6 * c * c + (c7 + c8) * c * s + c9 * s * s
            }
            _ => 0.0,
        }
    }

    /// 3D: coefficient of `u` in the angular equation,
    /// `Omega0 = c8 c^2 + (c9 - c6) cs - c7 s^2`.
    pub fn omega0(&self, phi: f64) -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        match &self.mode {
            Mode::ThreeD(sys) => {
                let [_, _, _, _, _, c6, c7, c8, c9] = sys.c;
                c8 * c * c + (c9 - c6) * c * s - c7 * s * s
            }
            _ => 0.0,
        }
    }

    /// 3D: coefficient of `r^2` in the transverse equation,
    /// `Upsilon = c5 cs + h11 c[c] + h12 c[s] + h21 s[c] + h22 s[s]`.
    pub fn upsilon(&self, phi: f64) -> f64 {
        let (c, s) = (phi.cos(), phi.sin());
        match &self.mode {
            Mode::ThreeD(sys) => {
                sys.c[4] * c * s
                    + sys.h[0][0] * c * sys.h_slopes[0].apply(c)
                    + sys.h[0][1] * c * sys.h_slopes[1].apply(s)
                    + sys.h[1][0] * s * sys.h_slopes[2].apply(c)
                    + sys.h[1][1] * s * sys.h_slopes[3].apply(s)
            }
            _ => 0.0,
        }
    }

    pub(crate) fn three_d(&self) -> Option<&System3D> {
        match &self.mode {
            Mode::ThreeD(sys) => Some(sys),
            _ => None,
        }
    }

    pub(crate) fn nd(&self) -> Option<&SystemND> {
        match &self.mode {
            Mode::Nd(sys) => Some(sys),
            _ => None,
        }
    }
}

fn check_w_nonvanishing(m: [[f64; 2]; 2]) -> Result<()> {
    // W(phi) = m3 c^2 + (m4 - m1) sc - m2 s^2 has a zero on [0, 2pi) iff the
    // quadratic form is indefinite or degenerate: (m4 - m1)^2 + 4 m2 m3 >= 0.
    let disc = (m[1][1] - m[0][0]).powi(2) + 4.0 * m[0][1] * m[1][0];
    if disc >= 0.0 {
        Err(Error::AngularSpeedVanished)
    } else {
        Ok(())
    }
}

/// Polar decomposition of a planar system.
pub fn polar_decompose(sys: &PlanarSystem) -> Result<PolarSamples> {
    match sys.linear {
        crate::system::LinearPart::NormalForm { mu, omega } => {
            if omega == 0.0 {
                return Err(Error::ZeroOmega);
            }
            Ok(PolarSamples {
                mode: Mode::PlanarNf { mu, omega, quad: sys.quad, smooth: sys.smooth },
                switching: QUADRANT_KINKS.to_vec(),
            })
        }
        crate::system::LinearPart::General { .. } => {
            let m = sys.linear.matrix();
            check_w_nonvanishing(m)?;
            Ok(PolarSamples {
                mode: Mode::PlanarGeneral { m, quad: sys.quad, smooth: sys.smooth },
                switching: QUADRANT_KINKS.to_vec(),
            })
        }
    }
}

/// Polar decomposition of the 3D system (normal-form planar block).
pub fn polar_decompose_3d(sys: &System3D) -> Result<PolarSamples> {
    sys.omega()?;
    Ok(PolarSamples {
        mode: Mode::ThreeD(Box::new(*sys)),
        switching: QUADRANT_KINKS.to_vec(),
    })
}

/// Polar decomposition of the nD system (normal-form planar block).
pub fn polar_decompose_nd(sys: &SystemND) -> Result<PolarSamples> {
    sys.validate()?;
    sys.omega()?;
    Ok(PolarSamples {
        mode: Mode::Nd(Box::new(sys.clone())),
        switching: QUADRANT_KINKS.to_vec(),
    })
}

/// Polar samples of a planar quadratic nonlinearity seen through the
/// normal-form transformation `T` (new coordinates `v = T^{-1} u`); the
/// switching lines rotate to `cos(phi - phi_hat) = 0`, `cos(phi - theta_hat) = 0`.
pub fn polar_transformed(
    mu: f64,
    omega: f64,
    t: [[f64; 2]; 2],
    quad: NonsmoothQuadCoeffs,
) -> Result<PolarSamples> {
    let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
    if det.abs() < 1e-14 {
        return Err(Error::DegenerateTransformation(det));
    }
    let t_inv = [[t[1][1] / det, -t[0][1] / det], [-t[1][0] / det, t[0][0] / det]];
    let phi_hat = t[0][1].atan2(t[0][0]);
    let theta_hat = t[1][1].atan2(t[1][0]);
    let mut switching: Vec<f64> = QUADRANT_KINKS.to_vec();
    for z in [phi_hat, theta_hat] {
        switching.push((z + PI / 2.0).rem_euclid(2.0 * PI));
        switching.push((z + 3.0 * PI / 2.0).rem_euclid(2.0 * PI));
    }
    switching.sort_by(|a, b| a.partial_cmp(b).unwrap());
    switching.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    Ok(PolarSamples { mode: Mode::Transformed { mu, omega, t, t_inv, quad }, switching })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::piecewise_integral;
    use crate::system::{LinearPart, SlopePair};

    fn fig2a_quad() -> NonsmoothQuadCoeffs {
        let mut b = [[1.0; 2]; 2];
        b[1][0] = -1.0;
        NonsmoothQuadCoeffs::with_abs_slopes([[1.0; 2]; 2], b)
    }

    #[test]
    fn normal_form_constants() {
        let sys = PlanarSystem::normal_form(0.25, 1.5, NonsmoothQuadCoeffs::zero());
        let p = polar_decompose(&sys).unwrap();
        assert_eq!(p.m(0.7), 0.25);
        assert_eq!(p.w(2.9), 1.5);
    }

    #[test]
    fn chi2_spec_values() {
        // a11 = 1 only: chi2(0) = 1 and chi2(pi) = 1
        let mut q = NonsmoothQuadCoeffs::zero();
        q.a[0][0] = 1.0;
        let sys = PlanarSystem::normal_form(0.0, 1.0, q);
        let p = polar_decompose(&sys).unwrap();
        assert!((p.chi2(0.0) - 1.0).abs() < 1e-15);
        assert!((p.chi2(PI) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rotation_matrix_has_unit_angular_speed() {
        let sys = PlanarSystem::general([[0.0, -1.0], [1.0, 0.0]], 0.0, NonsmoothQuadCoeffs::zero());
        let p = polar_decompose(&sys).unwrap();
        for k in 0..8 {
            let phi = k as f64 * PI / 4.0;
            assert!((p.w(phi) - 1.0).abs() < 1e-15);
            assert!(p.m(phi).abs() < 1e-15);
        }
    }

    #[test]
    fn w_zero_rejected() {
        let sys = PlanarSystem::general([[1.0, 2.0], [3.0, -1.0]], 0.0, NonsmoothQuadCoeffs::zero());
        assert!(matches!(polar_decompose(&sys), Err(Error::AngularSpeedVanished)));
    }

    #[test]
    fn polar_matches_cartesian_projection() {
        // r * (mu + r*chi2(phi)) + r^3 chi3 equals the radial projection of the
        // Cartesian RHS; same for the angular part. Random spot checks.
        let mut q = fig2a_quad();
        q.alpha[1] = SlopePair::new(-0.3, 1.7);
        q.beta[2] = SlopePair::new(-2.0, 0.4);
        let sm = SmoothCoeffs {
            quad_f: [0.2, -0.5, 0.9],
            quad_g: [-1.1, 0.3, 0.7],
            cubic_f: [0.4, -0.2, 0.1, 0.8],
            cubic_g: [-0.6, 0.5, -0.3, 0.2],
        };
        let sys = PlanarSystem::normal_form(0.013, 1.3, q).with_smooth(sm);
        let p = polar_decompose(&sys).unwrap();
        for k in 0..40 {
            let phi = 0.1571 * k as f64;
            let r = 1e-3 * (1.0 + k as f64);
            let (v, w) = (r * phi.cos(), r * phi.sin());
            let (dv, dw) = sys.eval_rhs(v, w);
            let radial = (v * dv + w * dw) / r;
            let angular = (v * dw - w * dv) / (r * r);
            let radial_polar = sys.mu() * r + p.chi2(phi) * r * r + p.chi3(phi) * r * r * r;
            let angular_polar = 1.3 + p.omega1(phi) * r + p.omega2(phi) * r * r;
            assert!((radial - radial_polar).abs() < 1e-12 * (1.0 + radial.abs()), "radial at {phi}");
            assert!((angular - angular_polar).abs() < 1e-12, "angular at {phi}");
        }
    }

    #[test]
    fn general_linear_polar_matches_projection() {
        let m = [[0.3, -1.2], [2.0, -0.3]];
        let sys = PlanarSystem { linear: LinearPart::General { m, mu: 0.01 }, quad: fig2a_quad(), smooth: SmoothCoeffs::zero() };
        let p = polar_decompose(&sys).unwrap();
        for k in 0..25 {
            let phi = 0.2513 * k as f64;
            let r = 2e-4 * (1.0 + k as f64);
            let (v, w) = (r * phi.cos(), r * phi.sin());
            let (dv, dw) = sys.eval_rhs(v, w);
            let radial = (v * dv + w * dw) / r;
            let angular = (v * dw - w * dv) / (r * r);
            assert!((radial - (p.m(phi) * r + p.chi2(phi) * r * r)).abs() < 1e-13);
            assert!((angular - (p.w(phi) + p.omega1(phi) * r)).abs() < 1e-13);
        }
    }

    #[test]
    fn functions_are_2pi_periodic() {
        let sys = PlanarSystem::normal_form(0.0, 1.0, fig2a_quad());
        let p = polar_decompose(&sys).unwrap();
        assert!((p.chi2(0.0) - p.chi2(2.0 * PI)).abs() < 1e-12);
        assert!((p.omega1(0.0) - p.omega1(2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn w_constant_for_normal_form_integral() {
        // int chi2 over a period picks up 4/3 sigma_hash for Fig. 2(a): sigma# = 4
        let sys = PlanarSystem::normal_form(0.0, 1.0, fig2a_quad());
        let p = polar_decompose(&sys).unwrap();
        let i = piecewise_integral(|phi| p.chi2(phi), p.switching_angles());
        assert!((i - 16.0 / 3.0).abs() < 1e-12);
    }
}
