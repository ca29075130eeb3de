//! Switching-aware integration of the angle-parametrized equations, Poincare
//! return maps, periodic-orbit location, branch continuation and stability.
//! This module is the independent oracle for every closed-form prediction.

use crate::coeffs::{gamma_hash, sigma_tilde};
use crate::error::{Error, Result};
use crate::polar::{polar_decompose, polar_decompose_3d, polar_decompose_nd, PolarSamples};
use crate::system::{PlanarSystem, System3D, SystemND};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::f64::consts::PI;

/// Integrator settings. Local error per step is `atol + rtol * |y|`
/// component-wise.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub r_max: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, r_max: 0.5, max_steps: 400_000 }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Stats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// Integration output: samples of `(angle, state)` plus integrator counters.
/// Switching crossings are always mesh points.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<(f64, Vec<f64>)>,
    pub stats: Stats,
}

impl Trajectory {
    pub fn last_state(&self) -> &[f64] {
        &self.samples.last().expect("nonempty").1
    }
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

struct Dopri {
    k: [Vec<f64>; 7],
    y_tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl Dopri {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            y_tmp: vec![0.0; n],
            y_new: vec![0.0; n],
        }
    }

    /// One trial step of size `h`; the candidate state lands in `self.y_new`
    /// and the scaled error norm is returned.
    fn step(
        &mut self,
        rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]),
        x: f64,
        y: &[f64],
        h: f64,
        cfg: &IntegratorConfig,
        stats: &mut Stats,
    ) -> f64 {
        let n = y.len();
        rhs(x, y, &mut self.k[0]);
        for i in 0..n {
            self.y_tmp[i] = y[i] + h * A21 * self.k[0][i];
        }
        rhs(x + C2 * h, &self.y_tmp, &mut self.k[1]);
        for i in 0..n {
            self.y_tmp[i] = y[i] + h * (A31 * self.k[0][i] + A32 * self.k[1][i]);
        }
        rhs(x + C3 * h, &self.y_tmp, &mut self.k[2]);
        for i in 0..n {
            self.y_tmp[i] =
                y[i] + h * (A41 * self.k[0][i] + A42 * self.k[1][i] + A43 * self.k[2][i]);
        }
        rhs(x + C4 * h, &self.y_tmp, &mut self.k[3]);
        for i in 0..n {
            self.y_tmp[i] = y[i]
                + h * (A51 * self.k[0][i]
                    + A52 * self.k[1][i]
                    + A53 * self.k[2][i]
                    + A54 * self.k[3][i]);
        }
        rhs(x + C5 * h, &self.y_tmp, &mut self.k[4]);
        for i in 0..n {
            self.y_tmp[i] = y[i]
                + h * (A61 * self.k[0][i]
                    + A62 * self.k[1][i]
                    + A63 * self.k[2][i]
                    + A64 * self.k[3][i]
                    + A65 * self.k[4][i]);
        }
        rhs(x + h, &self.y_tmp, &mut self.k[5]);
        for i in 0..n {
            self.y_new[i] = y[i]
                + h * (B1 * self.k[0][i]
                    + B3 * self.k[2][i]
                    + B4 * self.k[3][i]
                    + B5 * self.k[4][i]
                    + B6 * self.k[5][i]);
        }
        rhs(x + h, &self.y_new, &mut self.k[6]);
        stats.rhs_evals += 7;
        let mut err = 0.0f64;
        for i in 0..n {
            let e = h
                * (E1 * self.k[0][i]
                    + E3 * self.k[2][i]
                    + E4 * self.k[3][i]
                    + E5 * self.k[4][i]
                    + E6 * self.k[5][i]
                    + E7 * self.k[6][i]);
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(self.y_new[i].abs());
            err += (e / sc) * (e / sc);
        }
        (err / n as f64).sqrt()
    }
}

/// Integrate one smooth panel `[x0, x1]` adaptively.
fn integrate_panel(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    check: &mut dyn FnMut(f64, &[f64]) -> Result<()>,
    y: &mut Vec<f64>,
    x0: f64,
    x1: f64,
    cfg: &IntegratorConfig,
    stats: &mut Stats,
) -> Result<()> {
    let mut ws = Dopri::new(y.len());
    let span = x1 - x0;
    let mut x = x0;
    let mut h = span / 8.0;
    while x < x1 - 1e-14 * span.abs() {
        if stats.steps + stats.rejected > cfg.max_steps {
            return Err(Error::Integration(format!(
                "step limit {} exceeded at angle {x}",
                cfg.max_steps
            )));
        }
        h = h.min(x1 - x);
        let err = ws.step(rhs, x, y, h, cfg, stats);
        if err <= 1.0 {
            x += h;
            y.copy_from_slice(&ws.y_new);
            check(x, y)?;
            stats.steps += 1;
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
        } else {
            stats.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(())
}

/// Panel boundaries for `[0, phi_end]`: the switching angles tiled over the
/// span so every kink is a mesh point.
fn panel_points(switching: &[f64], phi_end: f64) -> Vec<f64> {
    let tau = 2.0 * PI;
    let mut pts = vec![0.0];
    let turns = (phi_end / tau).ceil() as i64 + 1;
    for turn in 0..turns {
        for &k in switching {
            let x = k.rem_euclid(tau) + tau * turn as f64;
            if x > 1e-14 && x < phi_end - 1e-14 {
                pts.push(x);
            }
        }
    }
    pts.push(phi_end);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    pts
}

/// Angle-parametrized right-hand side; state layout: transverse components
/// first, then the radius, then accumulated time.
fn phase_rhs<'a>(
    p: &'a PolarSamples,
    dim_u: usize,
) -> impl FnMut(f64, &[f64], &mut [f64]) + 'a {
    let nd = p.nd().cloned();
    move |phi: f64, y: &[f64], dy: &mut [f64]| {
        let r = y[dim_u];
        let w = p.w(phi);
        let m = p.m(phi);
        let (c, s) = (phi.cos(), phi.sin());
        let mut den = w + p.omega1(phi) * r + p.omega2(phi) * r * r;
        if let Some(sys3) = p.three_d() {
            let u = y[0];
            den += p.omega0(phi) * u;
            let [c1, c2, c3, c4, ..] = sys3.c;
            dy[0] =
                (c1 * u + c2 * u * u + (c3 * c + c4 * s) * u * r + p.upsilon(phi) * r * r) / den;
            dy[1] = ((m + p.chi1(phi) * u) * r + p.chi2(phi) * r * r + p.chi3(phi) * r * r * r)
                / den;
        } else if let Some(sys) = &nd {
            let k = dim_u;
            let u = &y[..k];
            let mut chi1_u = 0.0;
            for i in 0..k {
                let chi1_i =
                    sys.c6[i] * c * c + (sys.c7[i] + sys.c8[i]) * c * s + sys.c9[i] * s * s;
                let om0_i =
                    sys.c8[i] * c * c + (sys.c9[i] - sys.c6[i]) * c * s - sys.c7[i] * s * s;
                den += om0_i * u[i];
                chi1_u += chi1_i * u[i];
            }
            for i in 0..k {
                let mut du = 0.0;
                for j in 0..k {
                    du += sys.a_tilde[i][j] * u[j];
                }
                if let Some(comp) = sys.u_quad.get(i) {
                    if !comp.uu.is_empty() {
                        for pq in 0..k {
                            for q in 0..k {
                                du += comp.uu[pq][q] * u[pq] * u[q];
                            }
                        }
                    }
                    for pq in 0..k {
                        du += (comp.uv[pq] * c + comp.uw[pq] * s) * u[pq] * r;
                    }
                    let ups = comp.vw * c * s
                        + comp.h[0][0] * c * comp.h_slopes[0].apply(c)
                        + comp.h[0][1] * c * comp.h_slopes[1].apply(s)
                        + comp.h[1][0] * s * comp.h_slopes[2].apply(c)
                        + comp.h[1][1] * s * comp.h_slopes[3].apply(s);
                    du += ups * r * r;
                }
                dy[i] = du / den;
            }
            dy[k] = ((m + chi1_u) * r + p.chi2(phi) * r * r + p.chi3(phi) * r * r * r) / den;
        } else {
            dy[0] = (m * r + p.chi2(phi) * r * r + p.chi3(phi) * r * r * r) / den;
        }
        dy[dim_u + 1] = 1.0 / den;
    }
}

fn integrate_phase(
    p: &PolarSamples,
    dim_u: usize,
    y0: Vec<f64>,
    phi_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let pts = panel_points(p.switching_angles(), phi_end);
    let mut stats = Stats::default();
    let mut y = y0;
    let mut samples = vec![(0.0, y.clone())];
    let w_ref = p.w(0.0);
    let mut rhs = phase_rhs(p, dim_u);
    for win in pts.windows(2) {
        {
            let mut check = |phi: f64, y: &[f64]| -> Result<()> {
                let r = y[dim_u];
                if r.abs() > cfg.r_max {
                    return Err(Error::RadiusEscaped(cfg.r_max));
                }
                let w = p.w(phi);
                let mut den = w + p.omega1(phi) * r + p.omega2(phi) * r * r;
                if dim_u >= 1 {
                    den += p.omega0(phi) * y[0];
                }
                if den * w_ref <= 0.0 || den.abs() < 0.05 * w.abs() {
                    return Err(Error::AngularSpeedVanished);
                }
                Ok(())
            };
            integrate_panel(&mut rhs, &mut check, &mut y, win[0], win[1], cfg, &mut stats)?;
        }
        samples.push((win[1], y.clone()));
    }
    Ok(Trajectory { samples, stats })
}

/// Integrate the angle-parametrized radial equation of a planar system from
/// `r(0) = r0` up to `phi_end`; state samples are `[r, t]`.
pub fn integrate_phi(
    sys: &PlanarSystem,
    r0: f64,
    phi_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let p = polar_decompose(sys)?;
    integrate_phase(&p, 0, vec![r0, 0.0], phi_end, cfg)
}

/// 3D variant; state samples are `[u, r, t]`.
pub fn integrate_phi_3d(
    sys: &System3D,
    u0: f64,
    r0: f64,
    phi_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let p = polar_decompose_3d(sys)?;
    integrate_phase(&p, 1, vec![u0, r0, 0.0], phi_end, cfg)
}

/// nD variant; state samples are `[u_1..u_k, r, t]`.
pub fn integrate_phi_nd(
    sys: &SystemND,
    u0: &[f64],
    r0: f64,
    phi_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let p = polar_decompose_nd(sys)?;
    let mut y0 = u0.to_vec();
    y0.push(r0);
    y0.push(0.0);
    integrate_phase(&p, u0.len(), y0, phi_end, cfg)
}

/// Fixed-step kink-aligned RK4 over `[0, phi_end]` (reference integrator for
/// order tests and oracle runs); returns the final radius.
pub fn integrate_phi_fixed(
    sys: &PlanarSystem,
    r0: f64,
    phi_end: f64,
    steps_per_panel: usize,
) -> Result<f64> {
    let p = polar_decompose(sys)?;
    let pts = panel_points(p.switching_angles(), phi_end);
    let mut rhs = phase_rhs(&p, 0);
    let mut y = [r0, 0.0];
    let mut dy = [0.0; 2];
    let mut k = [[0.0; 2]; 4];
    for win in pts.windows(2) {
        let h = (win[1] - win[0]) / steps_per_panel as f64;
        let mut x = win[0];
        for _ in 0..steps_per_panel {
            rhs(x, &y, &mut dy);
            k[0] = dy;
            let y1 = [y[0] + h / 2.0 * k[0][0], y[1] + h / 2.0 * k[0][1]];
            rhs(x + h / 2.0, &y1, &mut dy);
            k[1] = dy;
            let y2 = [y[0] + h / 2.0 * k[1][0], y[1] + h / 2.0 * k[1][1]];
            rhs(x + h / 2.0, &y2, &mut dy);
            k[2] = dy;
            let y3 = [y[0] + h * k[2][0], y[1] + h * k[2][1]];
            rhs(x + h, &y3, &mut dy);
            k[3] = dy;
            for i in 0..2 {
                y[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
            x += h;
        }
    }
    Ok(y[0])
}

/// Radius after one full turn.
pub fn poincare(sys: &PlanarSystem, r0: f64, cfg: &IntegratorConfig) -> Result<f64> {
    if r0 == 0.0 {
        return Ok(0.0);
    }
    Ok(integrate_phi(sys, r0, 2.0 * PI, cfg)?.last_state()[0])
}

/// `(u, r)` after one full turn of the 3D system.
pub fn poincare3(sys: &System3D, u0: f64, r0: f64, cfg: &IntegratorConfig) -> Result<(f64, f64)> {
    let t = integrate_phi_3d(sys, u0, r0, 2.0 * PI, cfg)?;
    let y = t.last_state();
    Ok((y[0], y[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
    Neutral,
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stability::Stable => write!(f, "stable"),
            Stability::Unstable => write!(f, "unstable"),
            Stability::Neutral => write!(f, "neutral"),
        }
    }
}

/// A located periodic orbit, sampled at the section `phi = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct Orbit {
    pub mu: f64,
    pub r0: f64,
    pub period: f64,
    pub stability: Stability,
    /// Poincare-map slope estimate (largest return-map multiplier).
    pub floquet: f64,
    /// Transverse section values (empty for planar systems).
    pub u0: Vec<f64>,
    /// Sup of |u| along the orbit (None for planar systems).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_amplitude: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchKind {
    Supercritical,
    Subcritical,
    Vertical,
    TwoBranch3d,
    None,
}

/// A periodic-orbit family sampled over a mu grid.
#[derive(Debug, Clone, Serialize)]
pub struct Branch {
    pub points: Vec<Orbit>,
    pub kind: BranchKind,
    /// Regression slope of r0 against mu through the origin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted_slope: Option<f64>,
    /// Per-grid-point failures (mu, message).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failures: Vec<(f64, String)>,
}

impl Branch {
    /// Full-precision CSV: `mu, r0, period, floquet, stability, u0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu,r0,period,floquet,stability,u0\n");
        for o in &self.points {
            let u0 = if o.u0.is_empty() {
                String::new()
            } else {
                o.u0.iter().map(|u| format!("{u:.16e}")).collect::<Vec<_>>().join(";")
            };
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
                o.mu, o.r0, o.period, o.floquet, o.stability, u0
            ));
        }
        out
    }
}

/// Outcome of a bracketed orbit search.
#[derive(Debug, Clone)]
pub enum OrbitSearch {
    Found(Orbit),
    /// No sign change of the displacement in the bracket.
    NoneFound,
    /// Displacement below tolerance across the whole bracket: a vertical
    /// (non-isolated) family.
    NonIsolated,
}

/// Bracketed root refinement (Brent); requires a sign change.
fn brent(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    xtol: f64,
) -> Result<f64> {
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa * fb > 0.0 {
        return Err(Error::RootFinding("no sign change in bracket".into()));
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut mflag = true;
    let mut d = a;
    for _ in 0..200 {
        if (b - a).abs() < xtol || fb == 0.0 {
            return Ok(b);
        }
        let mut s = if fa != fc && fb != fc {
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let in_range = (lo.min(b) < s) && (s < lo.max(b));
        let ok = in_range
            && !(mflag && (s - b).abs() >= (b - c).abs() / 2.0)
            && !(!mflag && (s - b).abs() >= (c - d).abs() / 2.0)
            && !(mflag && (b - c).abs() < xtol)
            && !(!mflag && (c - d).abs() < xtol);
        if !ok {
            s = (a + b) / 2.0;
            mflag = true;
        } else {
            mflag = false;
        }
        let fs = f(s)?;
        d = c;
        c = b;
        fc = fb;
        if fa * fs < 0.0 {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    Ok(b)
}

/// Default bracket from the first-order carrier, per the prediction
/// `r0 = -3 pi mu / (2 sigma)`; geometric sweep up to `r_max` when the
/// carrier vanishes.
fn default_bracket(sys: &PlanarSystem, cfg: &IntegratorConfig) -> (f64, f64) {
    let st = sigma_tilde(&sys.quad);
    let threshold = 1e-9 * (1.0 + sys.coeff_scale());
    if st.abs() > threshold {
        let pred = (3.0 * PI * sys.mu() / (2.0 * st)).abs();
        (1e-6, (10.0 * pred).clamp(1e-5, cfg.r_max))
    } else {
        (1e-6, cfg.r_max)
    }
}

/// Locate a periodic orbit of a planar system as a root of the relative
/// displacement `D(r) = (P(r) - r)/r` inside `bracket` (default bracket from
/// the first-order carrier when not given). `mu` is taken from the system.
pub fn find_orbit(
    sys: &PlanarSystem,
    bracket: Option<(f64, f64)>,
    cfg: &IntegratorConfig,
) -> Result<OrbitSearch> {
    let (lo, hi) = bracket.unwrap_or_else(|| default_bracket(sys, cfg));
    if !(0.0 < lo && lo < hi && hi <= cfg.r_max) {
        return Err(Error::RootFinding(format!("invalid bracket ({lo}, {hi})")));
    }
    let mut disp = |r: f64| -> Result<f64> { Ok((poincare(sys, r, cfg)? - r) / r) };
    let n = 24;
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    let mut grid = Vec::with_capacity(n);
    let mut max_abs: f64 = 0.0;
    let mut r = lo;
    for _ in 0..n {
        let d = match disp(r) {
            Ok(d) => d,
            // orbits beyond r_max are out of scope; stop the scan here
            Err(Error::RadiusEscaped(_)) => break,
            Err(e) => return Err(e),
        };
        max_abs = max_abs.max(d.abs());
        grid.push((r, d));
        r *= ratio;
    }
    if grid.len() >= 2 && max_abs < 1e3 * cfg.atol {
        return Ok(OrbitSearch::NonIsolated);
    }
    let mut root = None;
    for w in grid.windows(2) {
        let ((a, fa), (b, fb)) = (w[0], w[1]);
        if fa == 0.0 {
            root = Some(a);
            break;
        }
        if fa * fb < 0.0 {
            let xtol = 1e-13 * (1.0 + b.abs());
            root = Some(brent(&mut disp, a, b, fa, fb, xtol)?);
            break;
        }
    }
    let Some(r0) = root else {
        return Ok(OrbitSearch::NoneFound);
    };
    Ok(OrbitSearch::Found(orbit_at(sys, r0, cfg)?))
}

fn orbit_at(sys: &PlanarSystem, r0: f64, cfg: &IntegratorConfig) -> Result<Orbit> {
    let traj = integrate_phi(sys, r0, 2.0 * PI, cfg)?;
    let period = traj.last_state()[1].abs();
    // centered finite-difference slope of the Poincare map
    let h = (1e-3 * r0).max(1e-6);
    let rm = (r0 - h).max(1e-12);
    let fp = poincare(sys, r0 + h, cfg)?;
    let fm = poincare(sys, rm, cfg)?;
    let floquet = (fp - fm) / (r0 + h - rm);
    Ok(Orbit {
        mu: sys.mu(),
        r0,
        period,
        stability: classify_multiplier(floquet),
        floquet,
        u0: vec![],
        u_amplitude: None,
    })
}

fn classify_multiplier(fl: f64) -> Stability {
    let tol = 1e-9;
    if fl.abs() < 1.0 - tol {
        Stability::Stable
    } else if fl.abs() > 1.0 + tol {
        Stability::Unstable
    } else {
        Stability::Neutral
    }
}

/// Continue the planar branch over a mu grid (the grid must exclude 0). Each
/// point warm-starts from the previously found radius; the kind is classified
/// by which sign of mu carries orbits, with a vertical probe at mu = 0 when
/// nothing is found anywhere.
pub fn continue_branch(
    sys: &PlanarSystem,
    mu_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Branch> {
    if mu_grid.iter().any(|&m| m == 0.0) {
        return Err(Error::Schema("mu grid must exclude 0".into()));
    }
    let mut points = Vec::new();
    let mut failures = Vec::new();
    let mut order: Vec<usize> = (0..mu_grid.len()).collect();
    order.sort_by(|&i, &j| mu_grid[i].abs().partial_cmp(&mu_grid[j].abs()).unwrap());
    let mut warm: Option<f64> = None;
    for &idx in &order {
        let mu = mu_grid[idx];
        let s = sys.with_mu(mu);
        let bracket = warm.map(|r| (0.25 * r, (4.0 * r).min(cfg.r_max)));
        match find_orbit(&s, bracket, cfg) {
            Ok(OrbitSearch::Found(o)) => {
                warm = Some(o.r0);
                points.push(o);
            }
            Ok(OrbitSearch::NoneFound) => {
                // a warm bracket may have missed it; retry with the default
                if bracket.is_some() {
                    if let Ok(OrbitSearch::Found(o)) = find_orbit(&s, None, cfg) {
                        warm = Some(o.r0);
                        points.push(o);
                    }
                }
            }
            Ok(OrbitSearch::NonIsolated) => {
                failures.push((mu, "non-isolated orbits".into()));
            }
            Err(e) => failures.push((mu, e.to_string())),
        }
    }
    points.sort_by(|a, b| a.mu.partial_cmp(&b.mu).unwrap());
    let kind = if points.is_empty() {
        match find_orbit(&sys.with_mu(0.0), None, cfg) {
            Ok(OrbitSearch::NonIsolated) => BranchKind::Vertical,
            _ => BranchKind::None,
        }
    } else {
        let neg = points.iter().filter(|o| o.mu < 0.0).count();
        let pos = points.len() - neg;
        if neg >= pos {
            BranchKind::Subcritical
        } else {
            BranchKind::Supercritical
        }
    };
    let fitted_slope = if points.len() >= 2 {
        let sxx: f64 = points.iter().map(|o| o.mu * o.mu).sum();
        let sxy: f64 = points.iter().map(|o| o.mu * o.r0).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(Branch { points, kind, fitted_slope, failures })
}

/// Solve the transverse fixed-point condition `u(2pi; u0, r0) = u0` at fixed
/// `r0` (hyperbolic case; Newton with the analytic leading slope).
fn transverse_fixed_point(sys: &System3D, r0: f64, cfg: &IntegratorConfig) -> Result<f64> {
    let omega = sys.omega()?;
    let g10 = (2.0 * PI * sys.c1() / omega).exp_m1();
    let mut u = 0.0;
    for _ in 0..80 {
        let (uf, _) = poincare3(sys, u, r0, cfg)?;
        let un = u - (uf - u) / g10;
        if (un - u).abs() <= 1e-14 * (1.0 + u.abs()) {
            return Ok(un);
        }
        u = un;
    }
    Ok(u)
}

fn orbit_3d_at(
    sys: &System3D,
    u0: f64,
    r0: f64,
    floquet: f64,
    cfg: &IntegratorConfig,
) -> Result<Orbit> {
    let traj = integrate_phi_3d(sys, u0, r0, 2.0 * PI, cfg)?;
    let period = traj.last_state()[2].abs();
    let u_amp = traj.samples.iter().map(|(_, y)| y[0].abs()).fold(0.0f64, f64::max);
    Ok(Orbit {
        mu: sys.mu(),
        r0,
        period,
        stability: classify_multiplier(floquet),
        floquet,
        u0: vec![u0],
        u_amplitude: Some(u_amp),
    })
}

/// Locate periodic orbits of the 3D system at its current `mu`.
///
/// Hyperbolic transverse direction (`c1 != 0`): the transverse variable is
/// eliminated through its fixed-point condition and the radius reduces to
/// the planar bracketed search (0 or 1 orbit). Degenerate case (`c1 = 0`): a
/// damped 2-variable Newton on the full return map, seeded at the closed-form
/// two-branch predictions, returning 0 or 2 orbits.
pub fn solve_3d_bvp(sys: &System3D, cfg: &IntegratorConfig) -> Result<Vec<Orbit>> {
    let omega = sys.omega()?;
    let mu = sys.mu();
    let c1 = sys.c1();
    if c1.abs() > 1e-10 {
        let mut disp = |r: f64| -> Result<f64> {
            let u = transverse_fixed_point(sys, r, cfg)?;
            let (_, rf) = poincare3(sys, u, r, cfg)?;
            Ok((rf - r) / r)
        };
        let (lo, hi) = default_bracket(&sys.planar, cfg);
        let n = 24;
        let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
        let mut grid = Vec::new();
        let mut r = lo;
        for _ in 0..n {
            match disp(r) {
                Ok(d) => grid.push((r, d)),
                Err(Error::RadiusEscaped(_)) => break,
                Err(e) => return Err(e),
            }
            r *= ratio;
        }
        for w in grid.windows(2) {
            let ((a, fa), (b, fb)) = (w[0], w[1]);
            if fa * fb < 0.0 {
                let r0 = brent(&mut disp, a, b, fa, fb, 1e-13 * (1.0 + b))?;
                let u0 = transverse_fixed_point(sys, r0, cfg)?;
                let h = (1e-3 * r0).max(1e-6);
                let up = transverse_fixed_point(sys, r0 + h, cfg)?;
                let um = transverse_fixed_point(sys, r0 - h, cfg)?;
                let (_, rp) = poincare3(sys, up, r0 + h, cfg)?;
                let (_, rm) = poincare3(sys, um, r0 - h, cfg)?;
                let radial = (rp - rm) / (2.0 * h);
                let transverse_mult = (2.0 * PI * c1 / omega).exp();
                let fl = if radial.abs() > transverse_mult.abs() {
                    radial
                } else {
                    transverse_mult
                };
                return Ok(vec![orbit_3d_at(sys, u0, r0, fl, cfg)?]);
            }
        }
        return Ok(vec![]);
    }

    // degenerate transverse direction: two-branch search
    let st = sigma_tilde(&sys.planar.quad);
    if st.abs() < 1e-9 * (1.0 + sys.planar.coeff_scale()) {
        return Err(Error::Degenerate("sigma-tilde"));
    }
    let r_seed = -3.0 * PI * mu / (2.0 * st);
    if r_seed <= 0.0 {
        return Ok(vec![]);
    }
    let c2 = sys.c[1];
    // Closed-form pre-screen via gamma_# when available, sharpened by the
    // gamma03 r0^3 correction (same order as gamma02 mu r0^2 on this branch
    // scaling); the Newton runs below always confirm numerically.
    let g03 = crate::coeffs::gamma_03_degenerate(sys).unwrap_or(0.0);
    let mut seeds = Vec::new();
    if let Ok(gh) = gamma_hash(sys) {
        let disc = (omega / (2.0 * PI * c2))
            * (PI * gh * mu / (omega * omega) - g03 * r_seed);
        if disc > 0.0 {
            let amp = r_seed * disc.sqrt();
            seeds.push((amp, r_seed));
            seeds.push((-amp, r_seed));
        }
    }
    if seeds.is_empty() {
        let amp = r_seed * (mu.abs() / (2.0 * omega.abs())).sqrt().max(1e-4);
        for s in [-1.0, 1.0] {
            seeds.push((s * amp, r_seed));
        }
    }
    let mut orbits: Vec<Orbit> = Vec::new();
    for (u_seed, r_seed) in seeds {
        if let Some((u0, r0)) = newton_2d(sys, u_seed, r_seed, cfg)? {
            if r0 > 0.0
                && !orbits
                    .iter()
                    .any(|o| (o.u0[0] - u0).abs() < 1e-9 * (1.0 + u0.abs()))
            {
                let fl = return_map_multiplier(sys, u0, r0, cfg)?;
                orbits.push(orbit_3d_at(sys, u0, r0, fl, cfg)?);
            }
        }
    }
    orbits.sort_by(|a, b| a.u0[0].partial_cmp(&b.u0[0]).unwrap());
    Ok(orbits)
}

/// Damped Newton on `G(u0, r0) = (u(2pi) - u0, r(2pi) - r0)`.
fn newton_2d(
    sys: &System3D,
    mut u: f64,
    mut r: f64,
    cfg: &IntegratorConfig,
) -> Result<Option<(f64, f64)>> {
    let scale = r.abs().max(1e-6);
    let gtol = 1e-11 * (1.0 + scale);
    let eval = |u: f64, r: f64| -> Result<[f64; 2]> {
        let (uf, rf) = poincare3(sys, u, r, cfg)?;
        Ok([uf - u, rf - r])
    };
    let mut g = eval(u, r)?;
    for _ in 0..60 {
        let gnorm = g[0].hypot(g[1]);
        if gnorm < gtol {
            return Ok(Some((u, r)));
        }
        let hu = 1e-7 * (1.0 + u.abs());
        let hr = 1e-7 * (1.0 + r.abs());
        let gu = eval(u + hu, r)?;
        let gr = eval(u, r + hr)?;
        let j = [
            [(gu[0] - g[0]) / hu, (gr[0] - g[0]) / hr],
            [(gu[1] - g[1]) / hu, (gr[1] - g[1]) / hr],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-16 {
            return Ok(None);
        }
        let du = (-g[0] * j[1][1] + g[1] * j[0][1]) / det;
        let dr = (-j[0][0] * g[1] + j[1][0] * g[0]) / det;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let (ut, rt) = (u + lambda * du, r + lambda * dr);
            if rt > 0.0 && rt < cfg.r_max {
                if let Ok(gt) = eval(ut, rt) {
                    if gt[0].hypot(gt[1]) < gnorm * (1.0 - 0.25 * lambda) + 1e-15 {
                        u = ut;
                        r = rt;
                        g = gt;
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Ok(None);
        }
    }
    Ok(None)
}

/// Largest-modulus eigenvalue of the finite-difference return-map Jacobian.
fn return_map_multiplier(
    sys: &System3D,
    u0: f64,
    r0: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let h = (1e-4 * r0).max(1e-7);
    let (fu, fr) = poincare3(sys, u0 + h, r0, cfg)?;
    let (gu, gr) = poincare3(sys, u0 - h, r0, cfg)?;
    let (pu, pr) = poincare3(sys, u0, r0 + h, cfg)?;
    let (qu, qr) = poincare3(sys, u0, r0 - h, cfg)?;
    let j = [
        [(fu - gu) / (2.0 * h), (pu - qu) / (2.0 * h)],
        [(fr - gr) / (2.0 * h), (pr - qr) / (2.0 * h)],
    ];
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let disc = tr * tr / 4.0 - det;
    Ok(if disc >= 0.0 {
        let s = disc.sqrt();
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        det.abs().sqrt()
    })
}

/// Matrix exponential by scaling and squaring with a Taylor series (small
/// dense matrices only).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.iter().fold(0.0f64, |m, &x| m.max(x.abs())) * n as f64;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    let mut result = sum;
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Finite-difference linearization of the nD transverse return map around
/// `(u0, r0)`, together with the full BVP residual `(u(2pi)-u0, r(2pi)-r0)`.
pub fn monodromy_nd(
    sys: &SystemND,
    u0: &[f64],
    r0: f64,
    cfg: &IntegratorConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = sys.dim_u();
    let base = integrate_phi_nd(sys, u0, r0, 2.0 * PI, cfg)?;
    let yb = base.last_state().to_vec();
    let mut m = DMatrix::zeros(k, k);
    for j in 0..k {
        let h = 1e-7 * (1.0 + u0[j].abs());
        let mut up = u0.to_vec();
        up[j] += h;
        let t = integrate_phi_nd(sys, &up, r0, 2.0 * PI, cfg)?;
        let yp = t.last_state();
        for i in 0..k {
            m[(i, j)] = (yp[i] - yb[i]) / h;
        }
    }
    let mut resid = DVector::zeros(k + 1);
    for i in 0..k {
        resid[i] = yb[i] - u0[i];
    }
    resid[k] = yb[k] - r0;
    Ok((m, resid))
}

/// Kernel analysis of `e^{2 pi A~/omega} - Id` for the nD reduction: `None`
/// when invertible, the kernel vector for a 1-dimensional kernel.
pub fn nd_kernel(sys: &SystemND) -> Result<Option<DVector<f64>>> {
    let k = sys.dim_u();
    let omega = sys.omega()?;
    let a = DMatrix::from_fn(k, k, |i, j| sys.a_tilde[i][j]) * (2.0 * PI / omega);
    let g10 = expm(&a) - DMatrix::identity(k, k);
    let svd = g10.svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &x| m.max(x));
    let tol = 1e-8 * (1.0 + smax);
    let tiny: Vec<usize> = (0..k).filter(|&i| svd.singular_values[i] < tol).collect();
    match tiny.len() {
        0 => Ok(None),
        1 => {
            let vt = svd.v_t.as_ref().expect("svd with v_t");
            Ok(Some(vt.row(tiny[0]).transpose()))
        }
        _ => Err(Error::KernelDimension),
    }
}

/// Locate periodic orbits of the nD system at its current `mu` by Newton on
/// the `(n-1)`-dimensional boundary value problem.
///
/// Invertible transverse block: the transverse components are eliminated by
/// Newton with the monodromy and the radius reduces to a bracketed scalar
/// search. One-dimensional kernel: the kernel coefficient joins the radius in
/// a 2-variable Newton, mirroring the degenerate 3D case.
pub fn solve_nd_bvp(sys: &SystemND, cfg: &IntegratorConfig) -> Result<Vec<Orbit>> {
    sys.validate()?;
    let k = sys.dim_u();
    let kernel = nd_kernel(sys)?;
    let mu = sys.mu();
    let st = sigma_tilde(&sys.planar.quad);
    let threshold = 1e-9 * (1.0 + sys.planar.coeff_scale());

    let solve_u = |r0: f64, u_init: &[f64]| -> Result<Vec<f64>> {
        let mut u = u_init.to_vec();
        for _ in 0..40 {
            let (m, resid) = monodromy_nd(sys, &u, r0, cfg)?;
            let g = resid.rows(0, k).into_owned();
            if g.norm() < 1e-12 * (1.0 + r0) {
                break;
            }
            let j = m - DMatrix::identity(k, k);
            let du = j
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::RootFinding("singular transverse Jacobian".into()))?;
            for i in 0..k {
                u[i] -= du[i];
            }
        }
        Ok(u)
    };

    if kernel.is_none() {
        if st.abs() < threshold {
            return Err(Error::Degenerate("sigma-tilde"));
        }
        let mut disp = |r: f64| -> Result<f64> {
            let u = solve_u(r, &vec![0.0; k])?;
            let t = integrate_phi_nd(sys, &u, r, 2.0 * PI, cfg)?;
            Ok((t.last_state()[k] - r) / r)
        };
        let (lo, hi) = default_bracket(&sys.planar, cfg);
        let n = 20;
        let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
        let mut grid = Vec::new();
        let mut r = lo;
        for _ in 0..n {
            match disp(r) {
                Ok(d) => grid.push((r, d)),
                Err(Error::RadiusEscaped(_)) => break,
                Err(e) => return Err(e),
            }
            r *= ratio;
        }
        for w in grid.windows(2) {
            let ((a, fa), (b, fb)) = (w[0], w[1]);
            if fa * fb < 0.0 {
                let r0 = brent(&mut disp, a, b, fa, fb, 1e-12 * (1.0 + b))?;
                let u0 = solve_u(r0, &vec![0.0; k])?;
                let traj = integrate_phi_nd(sys, &u0, r0, 2.0 * PI, cfg)?;
                let period = traj.last_state()[k + 1].abs();
                let u_amp = traj
                    .samples
                    .iter()
                    .map(|(_, y)| y[..k].iter().map(|x| x * x).sum::<f64>().sqrt())
                    .fold(0.0f64, f64::max);
                let h = (1e-3 * r0).max(1e-6);
                let dp = disp(r0 + h)?;
                let dm = disp(r0 - h)?;
                let radial = 1.0 + r0 * (dp - dm) / (2.0 * h);
                return Ok(vec![Orbit {
                    mu,
                    r0,
                    period,
                    stability: classify_multiplier(radial),
                    floquet: radial,
                    u0,
                    u_amplitude: Some(u_amp),
                }]);
            }
        }
        return Ok(vec![]);
    }

    // 1-dimensional kernel: two-branch logic in (kernel coefficient, r0)
    let kvec = kernel.expect("checked above");
    if st.abs() < threshold {
        return Err(Error::Degenerate("sigma-tilde"));
    }
    let r_seed = -3.0 * PI * mu / (2.0 * st);
    if r_seed <= 0.0 {
        return Ok(vec![]);
    }
    let omega = sys.omega()?;
    let amp = r_seed * (mu.abs() / (2.0 * omega.abs())).sqrt().max(1e-4);
    let mut orbits: Vec<Orbit> = Vec::new();
    for dir in [-1.0, 1.0] {
        let mut y = amp * dir;
        let mut r = r_seed;
        for _ in 0..60 {
            let eval = |yv: f64, rv: f64| -> Result<(f64, f64, Vec<f64>, Trajectory)> {
                let u_start: Vec<f64> = (0..k).map(|i| yv * kvec[i]).collect();
                let u = solve_in_complement(sys, &u_start, &kvec, rv, cfg)?;
                let t = integrate_phi_nd(sys, &u, rv, 2.0 * PI, cfg)?;
                let yk = t.last_state().to_vec();
                let gu: f64 = (0..k).map(|i| (yk[i] - u[i]) * kvec[i]).sum();
                Ok((gu, yk[k] - rv, u, t))
            };
            let (g0u, g0r, u, traj) = eval(y, r)?;
            if g0u.hypot(g0r) < 1e-11 * (1.0 + r) {
                if r > 0.0
                    && !orbits.iter().any(|o| {
                        o.u0
                            .iter()
                            .zip(&u)
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0f64, f64::max)
                            < 1e-8 * (1.0 + amp)
                    })
                {
                    let period = traj.last_state()[k + 1].abs();
                    let u_amp = traj
                        .samples
                        .iter()
                        .map(|(_, yy)| yy[..k].iter().map(|x| x * x).sum::<f64>().sqrt())
                        .fold(0.0f64, f64::max);
                    let fl = return_map_multiplier_nd(sys, &u, r, cfg)?;
                    orbits.push(Orbit {
                        mu,
                        r0: r,
                        period,
                        stability: classify_multiplier(fl),
                        floquet: fl,
                        u0: u,
                        u_amplitude: Some(u_amp),
                    });
                }
                break;
            }
            let hy = 1e-7 * (1.0 + y.abs());
            let hr = 1e-7 * (1.0 + r.abs());
            let (g1u, g1r, _, _) = eval(y + hy, r)?;
            let (g2u, g2r, _, _) = eval(y, r + hr)?;
            let j = [
                [(g1u - g0u) / hy, (g2u - g0u) / hr],
                [(g1r - g0r) / hy, (g2r - g0r) / hr],
            ];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-18 {
                break;
            }
            y += (-g0u * j[1][1] + g0r * j[0][1]) / det;
            r += (-j[0][0] * g0r + j[1][0] * g0u) / det;
            if !(r > 0.0 && r < cfg.r_max) {
                break;
            }
        }
    }
    orbits.sort_by(|a, b| {
        a.u0.first().partial_cmp(&b.u0.first()).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(orbits)
}

/// Newton-correct the components of `u` orthogonal to the kernel direction so
/// the complement part of the return residual vanishes.
fn solve_in_complement(
    sys: &SystemND,
    u_init: &[f64],
    kvec: &DVector<f64>,
    r0: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let k = sys.dim_u();
    if k == 1 {
        return Ok(u_init.to_vec());
    }
    let mut u = u_init.to_vec();
    for _ in 0..30 {
        let (m, resid) = monodromy_nd(sys, &u, r0, cfg)?;
        let g = resid.rows(0, k).into_owned();
        let proj = &g - kvec * kvec.dot(&g);
        if proj.norm() < 1e-12 * (1.0 + r0) {
            break;
        }
        let j = m - DMatrix::identity(k, k);
        let du = j
            .lu()
            .solve(&proj)
            .ok_or_else(|| Error::RootFinding("singular complement Jacobian".into()))?;
        let du_c = &du - kvec * kvec.dot(&du);
        for i in 0..k {
            u[i] -= du_c[i];
        }
    }
    Ok(u)
}

fn return_map_multiplier_nd(
    sys: &SystemND,
    u0: &[f64],
    r0: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let k = sys.dim_u();
    let (m, _) = monodromy_nd(sys, u0, r0, cfg)?;
    let h = (1e-4 * r0).max(1e-7);
    let tp = integrate_phi_nd(sys, u0, r0 + h, 2.0 * PI, cfg)?;
    let tm = integrate_phi_nd(sys, u0, r0 - h, 2.0 * PI, cfg)?;
    let base = integrate_phi_nd(sys, u0, r0, 2.0 * PI, cfg)?;
    let mut full = DMatrix::zeros(k + 1, k + 1);
    full.view_mut((0, 0), (k, k)).copy_from(&m);
    for i in 0..k {
        full[(i, k)] = (tp.last_state()[i] - tm.last_state()[i]) / (2.0 * h);
    }
    for j in 0..k {
        let hj = 1e-7 * (1.0 + u0[j].abs());
        let mut up = u0.to_vec();
        up[j] += hj;
        let t = integrate_phi_nd(sys, &up, r0, 2.0 * PI, cfg)?;
        full[(k, j)] = (t.last_state()[k] - base.last_state()[k]) / hj;
    }
    full[(k, k)] = (tp.last_state()[k] - tm.last_state()[k]) / (2.0 * h);
    let eig = full.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Return radius of the planar system after one full revolution, computed in
/// Cartesian time-domain coordinates with event detection at the switching
/// lines `v = 0` and `w = 0` (cross-check of the angle-parametrized path).
pub fn planar_return_time_domain(
    sys: &PlanarSystem,
    r0: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let omega = sys.omega()?;
    let mut rhs_fn = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let (dv, dw) = sys.eval_rhs(y[0], y[1]);
        dy[0] = dv;
        dy[1] = dw;
    };
    let mut y = vec![r0, 0.0];
    let mut t = 0.0;
    let mut theta = 0.0f64;
    let mut prev_angle = 0.0f64;
    let t_end = 8.0 * PI / omega.abs();
    let h_cap = 0.02 / omega.abs();
    let mut ws = Dopri::new(2);
    let mut stats = Stats::default();
    let mut h: f64 = h_cap / 4.0;
    let events: [fn(&[f64]) -> f64; 2] = [|y| y[0], |y| y[1]];
    while t < t_end {
        h = h.min(h_cap);
        let err = ws.step(&mut rhs_fn, t, &y, h, cfg, &mut stats);
        if err > 1.0 {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            stats.rejected += 1;
            continue;
        }
        let mut h_used = h;
        let mut y_acc = ws.y_new.clone();
        for ev in &events {
            let g0 = ev(&y);
            let g1 = ev(&y_acc);
            if g0 != 0.0 && g0 * g1 < 0.0 {
                let (hh, yy) = bisect_event(&mut rhs_fn, t, &y, h_used, *ev);
                if hh < h_used {
                    h_used = hh;
                    y_acc = yy;
                }
            }
        }
        let ang = y_acc[1].atan2(y_acc[0]);
        let mut d = ang - prev_angle;
        while d > PI {
            d -= 2.0 * PI;
        }
        while d < -PI {
            d += 2.0 * PI;
        }
        if (theta + d).abs() >= 2.0 * PI {
            let target = 2.0 * PI * (theta + d).signum();
            let need = target - theta;
            let base_angle = prev_angle;
            let frac_ev = move |yy: &[f64]| -> f64 {
                let a = yy[1].atan2(yy[0]);
                let mut dd = a - base_angle;
                while dd > PI {
                    dd -= 2.0 * PI;
                }
                while dd < -PI {
                    dd += 2.0 * PI;
                }
                dd - need
            };
            let (_, yf) = bisect_event(&mut rhs_fn, t, &y, h_used, frac_ev);
            return Ok(yf[0].hypot(yf[1]));
        }
        theta += d;
        prev_angle = ang;
        t += h_used;
        y = y_acc;
        stats.steps += 1;
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= fac;
        if stats.steps > cfg.max_steps {
            return Err(Error::Integration("time-domain step limit".into()));
        }
    }
    Err(Error::Integration("revolution did not complete".into()))
}

/// Bisect an event zero inside one step, re-evaluating with fixed-substep RK4
/// from the step start. Returns (partial step size, state there).
pub(crate) fn bisect_event(
    rhs: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    t: f64,
    y: &[f64],
    h: f64,
    g: impl Fn(&[f64]) -> f64,
) -> (f64, Vec<f64>) {
    let n = y.len();
    let mut eval_at = |frac: f64| -> Vec<f64> {
        let mut yy = y.to_vec();
        let sub = 8;
        let hh = h * frac / sub as f64;
        let mut tt = t;
        let mut dy = vec![0.0; n];
        let mut k = vec![vec![0.0; n]; 4];
        for _ in 0..sub {
            rhs(tt, &yy, &mut dy);
            k[0].copy_from_slice(&dy);
            let y1: Vec<f64> = (0..n).map(|i| yy[i] + hh / 2.0 * k[0][i]).collect();
            rhs(tt + hh / 2.0, &y1, &mut dy);
            k[1].copy_from_slice(&dy);
            let y2: Vec<f64> = (0..n).map(|i| yy[i] + hh / 2.0 * k[1][i]).collect();
            rhs(tt + hh / 2.0, &y2, &mut dy);
            k[2].copy_from_slice(&dy);
            let y3: Vec<f64> = (0..n).map(|i| yy[i] + hh * k[2][i]).collect();
            rhs(tt + hh, &y3, &mut dy);
            k[3].copy_from_slice(&dy);
            for i in 0..n {
                yy[i] += hh / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
            tt += hh;
        }
        yy
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let g0 = g(y);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let ym = eval_at(mid);
        if g0 * g(&ym) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let frac = 0.5 * (lo + hi);
    (h * frac, eval_at(frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{NdUComponent, NonsmoothQuadCoeffs};

    fn fig2a(mu: f64) -> PlanarSystem {
        let mut b = [[1.0; 2]; 2];
        b[1][0] = -1.0;
        PlanarSystem::normal_form(mu, 1.0, NonsmoothQuadCoeffs::with_abs_slopes([[1.0; 2]; 2], b))
    }

    fn fig2b(mu: f64) -> PlanarSystem {
        let mut b = [[1.0; 2]; 2];
        b[1][0] = -1.0;
        b[1][1] = -3.0;
        PlanarSystem::normal_form(mu, 1.0, NonsmoothQuadCoeffs::with_abs_slopes([[1.0; 2]; 2], b))
    }

    #[test]
    fn pure_rotation_returns_radius() {
        let sys = PlanarSystem::normal_form(0.0, 1.0, NonsmoothQuadCoeffs::zero());
        let cfg = IntegratorConfig::default();
        let r = poincare(&sys, 0.1, &cfg).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
        let t = integrate_phi(&sys, 0.1, 2.0 * PI, &cfg).unwrap();
        assert!((t.last_state()[1] - 2.0 * PI).abs() < 1e-10);
    }

    #[test]
    fn adaptive_matches_reference() {
        let sys = fig2a(-0.005);
        let cfg = IntegratorConfig::default();
        let r_adaptive = poincare(&sys, 0.01, &cfg).unwrap();
        let r_ref = integrate_phi_fixed(&sys, 0.01, 2.0 * PI, 6000).unwrap();
        assert!((r_adaptive - r_ref).abs() < 1e-9, "{r_adaptive} vs {r_ref}");
    }

    #[test]
    fn order_restoration_with_kink_alignment() {
        // fixed-step RK4 keeps its classical order because panel boundaries
        // sit exactly on the switching angles
        let sys = fig2a(-0.004);
        let r_ref = integrate_phi_fixed(&sys, 0.02, 2.0 * PI, 8192).unwrap();
        let mut errs = Vec::new();
        for n in [16usize, 32, 64, 128] {
            let r = integrate_phi_fixed(&sys, 0.02, 2.0 * PI, n).unwrap();
            errs.push((r - r_ref).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio >= 12.0, "halving gained only {ratio:.1}x ({errs:?})");
        }
    }

    #[test]
    fn poincare_identity_at_bifurcation() {
        let sys = PlanarSystem::normal_form(0.0, 1.3, NonsmoothQuadCoeffs::zero());
        let cfg = IntegratorConfig::default();
        for r0 in [0.0, 1e-4, 0.02, 0.3] {
            let r = poincare(&sys, r0, &cfg).unwrap();
            assert!((r - r0).abs() < 1e-11);
        }
    }

    #[test]
    fn fig2a_orbit_location_and_stability() {
        let cfg = IntegratorConfig::default();
        let sys = fig2a(-0.01);
        let found = find_orbit(&sys, None, &cfg).unwrap();
        let OrbitSearch::Found(orbit) = found else { panic!("expected orbit") };
        let predicted = 3.0 * PI / 800.0;
        assert!(
            (orbit.r0 - predicted).abs() < 0.05 * predicted,
            "r0 {} vs {}",
            orbit.r0,
            predicted
        );
        // subcritical: the orbit on mu < 0 coexists with the stable
        // equilibrium and is unstable
        assert_eq!(orbit.stability, Stability::Unstable);
        let none = find_orbit(&fig2a(0.01), None, &cfg).unwrap();
        assert!(matches!(none, OrbitSearch::NoneFound));
    }

    #[test]
    fn second_order_orbit() {
        // sigma_# = 0, sigma_2 = pi/2 - 2/3: r0 = sqrt(2 pi mu / sigma2)
        let mut q = NonsmoothQuadCoeffs::zero();
        q.a[0][0] = 1.0;
        q.b[0][0] = 1.0;
        q.a[0][1] = -2.0;
        let sys = PlanarSystem::normal_form(1e-4, 1.0, q);
        let cfg = IntegratorConfig::default();
        let OrbitSearch::Found(orbit) = find_orbit(&sys, None, &cfg).unwrap() else {
            panic!("expected orbit")
        };
        let s2 = PI / 2.0 - 2.0 / 3.0;
        let predicted = (2.0 * PI * 1e-4 / s2).sqrt();
        assert!(
            (orbit.r0 - predicted).abs() < 0.1 * predicted,
            "r0 {} vs {}",
            orbit.r0,
            predicted
        );
    }

    #[test]
    fn linear_only_is_nonisolated_at_zero() {
        let sys = PlanarSystem::normal_form(0.0, 1.0, NonsmoothQuadCoeffs::zero());
        let cfg = IntegratorConfig::default();
        assert!(matches!(find_orbit(&sys, None, &cfg).unwrap(), OrbitSearch::NonIsolated));
    }

    #[test]
    fn branch_kinds_and_slopes() {
        let cfg = IntegratorConfig::default();
        let grid: Vec<f64> = (1..=5).map(|k| -1e-3 * (2 * k) as f64).collect();
        let br = continue_branch(&fig2a(0.0), &grid, &cfg).unwrap();
        assert_eq!(br.kind, BranchKind::Subcritical);
        let slope = br.fitted_slope.unwrap();
        assert!(
            (slope.abs() - 3.0 * PI / 8.0).abs() < 0.05 * (3.0 * PI / 8.0),
            "slope {slope}"
        );
        let grid_pos: Vec<f64> = (1..=5).map(|k| 1e-3 * (2 * k) as f64).collect();
        let br2 = continue_branch(&fig2b(0.0), &grid_pos, &cfg).unwrap();
        assert_eq!(br2.kind, BranchKind::Supercritical);
        // supercritical orbits coexist with the unstable equilibrium and are
        // stable (exchange of stability)
        assert!(br2.points.iter().all(|o| o.stability == Stability::Stable));
        let z = PlanarSystem::normal_form(0.0, 1.0, NonsmoothQuadCoeffs::zero());
        let both: Vec<f64> = vec![-2e-3, -1e-3, 1e-3, 2e-3];
        let brz = continue_branch(&z, &both, &cfg).unwrap();
        assert_eq!(brz.kind, BranchKind::Vertical);
    }

    #[test]
    fn poincare_monotone_near_orbit() {
        let cfg = IntegratorConfig::default();
        let sys = fig2a(-0.01);
        let OrbitSearch::Found(o) = find_orbit(&sys, None, &cfg).unwrap() else { panic!() };
        let mut prev = f64::NEG_INFINITY;
        for k in -3..=3 {
            let r = o.r0 * (1.0 + 0.2 * k as f64);
            let p = poincare(&sys, r, &cfg).unwrap();
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn time_domain_agrees_with_angle_domain() {
        let cfg = IntegratorConfig::default();
        for sys in [fig2a(-0.004), fig2b(0.004)] {
            let r0 = 0.012;
            let ra = poincare(&sys, r0, &cfg).unwrap();
            let rt = planar_return_time_domain(&sys, r0, &cfg).unwrap();
            assert!((ra - rt).abs() < 1e-8, "angle {ra} vs time {rt}");
        }
    }

    #[test]
    fn hyperbolic_3d_orbit() {
        let cfg = IntegratorConfig::default();
        let mut c = [0.0; 9];
        c[0] = -1.0;
        c[4] = 0.4;
        c[5] = 0.3;
        let sys = System3D::new(c, [[0.0; 2]; 2], fig2a(-0.005)).unwrap();
        let orbits = solve_3d_bvp(&sys, &cfg).unwrap();
        assert_eq!(orbits.len(), 1);
        let o = &orbits[0];
        let predicted = 3.0 * PI * 0.005 / 8.0;
        assert!((o.r0 - predicted).abs() < 0.05 * predicted, "{} vs {predicted}", o.r0);
        // transverse amplitude is O(r0^2), well below r0
        assert!(o.u_amplitude.unwrap() < 0.3 * o.r0);
        let sys_pos = sys.with_mu(0.005);
        assert!(solve_3d_bvp(&sys_pos, &cfg).unwrap().is_empty());
    }

    #[test]
    fn degenerate_3d_two_branches() {
        // c1 = 0, c2 = 1, gamma_# = 2 via h21 = 1, sigma_# = -4, omega = 1,
        // mu = 0.01: two orbits with u0 ~ +-(3 pi/8) 1e-3, r0 ~ 0.011781
        let cfg = IntegratorConfig::default();
        let mut c = [0.0; 9];
        c[1] = 1.0;
        let mut h = [[0.0; 2]; 2];
        h[1][0] = 1.0;
        let sys = System3D::new(c, h, fig2b(0.01)).unwrap();
        let orbits = solve_3d_bvp(&sys, &cfg).unwrap();
        assert_eq!(orbits.len(), 2, "expected two branches, got {orbits:?}");
        let u_pred = 3.0 * PI / 8.0 * 1e-3;
        let r_pred = 3.0 * PI / 800.0;
        for o in &orbits {
            assert!((o.u0[0].abs() - u_pred).abs() < 0.1 * u_pred, "u0 {}", o.u0[0]);
            assert!((o.r0 - r_pred).abs() < 0.1 * r_pred, "r0 {}", o.r0);
        }
        assert!(orbits[0].u0[0] < 0.0 && orbits[1].u0[0] > 0.0);
        // flipped sign condition: no orbits
        let mut h2 = h;
        h2[1][0] = -1.0;
        let sys2 = System3D::new(c, h2, fig2b(0.01)).unwrap();
        assert!(solve_3d_bvp(&sys2, &cfg).unwrap().is_empty());
    }

    #[test]
    fn monodromy_linear_flow_is_exponential() {
        // U = 0, A~ = diag(-1, -2): monodromy = exp(2 pi A~/omega)
        let cfg = IntegratorConfig::default();
        let sys = SystemND {
            a_tilde: vec![vec![-1.0, 0.0], vec![0.0, -2.0]],
            c6: vec![0.0; 2],
            c7: vec![0.0; 2],
            c8: vec![0.0; 2],
            c9: vec![0.0; 2],
            u_quad: vec![],
            planar: fig2a(-0.004),
        };
        let (m, _) = monodromy_nd(&sys, &[1e-3, -2e-3], 0.01, &cfg).unwrap();
        let expect =
            expm(&(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]) * (2.0 * PI)));
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (m[(i, j)] - expect[(i, j)]).abs() < 1e-8,
                    "({i},{j}): {} vs {}",
                    m[(i, j)],
                    expect[(i, j)]
                );
            }
        }
    }

    #[test]
    fn nd_orbit_matches_planar_prediction() {
        let cfg = IntegratorConfig::default();
        let sys = SystemND {
            a_tilde: vec![vec![-1.0, 0.2], vec![0.0, -2.0]],
            c6: vec![0.1, -0.2],
            c7: vec![0.0, 0.3],
            c8: vec![0.2, 0.0],
            c9: vec![-0.1, 0.1],
            u_quad: vec![
                NdUComponent {
                    uv: vec![0.1, 0.0],
                    vw: 0.3,
                    ..NdUComponent::default_sized(2)
                },
                NdUComponent {
                    uw: vec![0.0, 0.2],
                    vw: -0.2,
                    ..NdUComponent::default_sized(2)
                },
            ],
            planar: fig2a(-0.005),
        };
        let orbits = solve_nd_bvp(&sys, &cfg).unwrap();
        assert_eq!(orbits.len(), 1);
        let predicted = 3.0 * PI * 0.005 / 8.0;
        assert!(
            (orbits[0].r0 - predicted).abs() < 0.05 * predicted,
            "{} vs {predicted}",
            orbits[0].r0
        );
        assert!(orbits[0].u_amplitude.unwrap() < 0.3 * orbits[0].r0);
    }

    #[test]
    fn nd_kernel_routes_to_two_branch() {
        // A~ with one zero eigenvalue embedding the degenerate 3D case: the
        // nD solver must reproduce solve_3d_bvp
        let cfg = IntegratorConfig::default();
        let mut c3 = [0.0; 9];
        c3[1] = 1.0;
        let mut h = [[0.0; 2]; 2];
        h[1][0] = 1.0;
        let sys3 = System3D::new(c3, h, fig2b(0.01)).unwrap();
        let expected = solve_3d_bvp(&sys3, &cfg).unwrap();
        assert_eq!(expected.len(), 2);

        let sysn = SystemND {
            a_tilde: vec![vec![0.0, 0.0], vec![0.0, -1.5]],
            c6: vec![0.0; 2],
            c7: vec![0.0; 2],
            c8: vec![0.0; 2],
            c9: vec![0.0; 2],
            u_quad: vec![
                NdUComponent {
                    uu: vec![vec![1.0, 0.0], vec![0.0, 0.0]], // c2-analogue on u1^2
                    h,
                    ..NdUComponent::default_sized(2)
                },
                NdUComponent::default_sized(2),
            ],
            planar: fig2b(0.01),
        };
        let got = solve_nd_bvp(&sysn, &cfg).unwrap();
        assert_eq!(got.len(), 2, "{got:?}");
        for (o3, on) in expected.iter().zip(&got) {
            assert!((o3.r0 - on.r0).abs() < 1e-6 * (1.0 + o3.r0), "{} vs {}", o3.r0, on.r0);
            assert!(
                (o3.u0[0] - on.u0[0]).abs() < 1e-6 * (1.0 + o3.u0[0].abs()),
                "{} vs {}",
                o3.u0[0],
                on.u0[0]
            );
        }
    }
}
