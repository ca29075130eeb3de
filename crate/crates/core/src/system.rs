//! Domain types: the generalized absolute value, planar/3D/nD systems with
//! second-order-modulus nonlinearities, and exact Cartesian right-hand sides.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Left/right slope pair `(p_minus, p_plus)` of the generalized absolute value:
/// `[u] = p_plus * u` for `u >= 0` and `p_minus * u` for `u < 0`.
///
/// The pair `(-1, +1)` reproduces `|u|` exactly. Equal slopes are the smooth
/// limit and are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopePair {
    pub minus: f64,
    pub plus: f64,
}

impl SlopePair {
    pub const ABS: SlopePair = SlopePair { minus: -1.0, plus: 1.0 };

    pub fn new(minus: f64, plus: f64) -> Self {
        Self { minus, plus }
    }

    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        if u >= 0.0 {
            self.plus * u
        } else {
            self.minus * u
        }
    }

    /// Slope jump `p_plus - p_minus`; zero in the smooth limit.
    #[inline]
    pub fn jump(self) -> f64 {
        self.plus - self.minus
    }

    pub fn is_abs(self) -> bool {
        self.minus == -1.0 && self.plus == 1.0
    }
}

impl Default for SlopePair {
    fn default() -> Self {
        Self::ABS
    }
}

/// Generalized absolute value `[u]` with slopes `s`.
#[inline]
pub fn gen_abs(u: f64, s: SlopePair) -> f64 {
    s.apply(u)
}

/// Coefficients of the non-smooth quadratic part
///
/// ```text
/// f(v, w) = a11 v[v] + a12 v[w] + a21 w[v] + a22 w[w]
/// g(v, w) = b11 v[v] + b12 v[w] + b21 w[v] + b22 w[w]
/// ```
///
/// with one slope pair per term: `alpha[k]` for the `a`-terms (row-major
/// a11, a12, a21, a22) and `beta[k]` for the `b`-terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonsmoothQuadCoeffs {
    pub a: [[f64; 2]; 2],
    pub b: [[f64; 2]; 2],
    pub alpha: [SlopePair; 4],
    pub beta: [SlopePair; 4],
}

impl NonsmoothQuadCoeffs {
    pub fn zero() -> Self {
        Self::with_abs_slopes([[0.0; 2]; 2], [[0.0; 2]; 2])
    }

    /// All slope pairs set to `(-1, +1)`.
    pub fn with_abs_slopes(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> Self {
        Self { a, b, alpha: [SlopePair::ABS; 4], beta: [SlopePair::ABS; 4] }
    }

    pub fn all_abs_slopes(&self) -> bool {
        self.alpha.iter().all(|s| s.is_abs()) && self.beta.iter().all(|s| s.is_abs())
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().flatten().all(|&x| x == 0.0) && self.b.iter().flatten().all(|&x| x == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.a
            .iter()
            .flatten()
            .chain(self.b.iter().flatten())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// First component of the non-smooth quadratic part.
    #[inline]
    pub fn eval_f(&self, v: f64, w: f64) -> f64 {
        self.a[0][0] * v * self.alpha[0].apply(v)
            + self.a[0][1] * v * self.alpha[1].apply(w)
            + self.a[1][0] * w * self.alpha[2].apply(v)
            + self.a[1][1] * w * self.alpha[3].apply(w)
    }

    /// Second component of the non-smooth quadratic part.
    #[inline]
    pub fn eval_g(&self, v: f64, w: f64) -> f64 {
        self.b[0][0] * v * self.beta[0].apply(v)
            + self.b[0][1] * v * self.beta[1].apply(w)
            + self.b[1][0] * w * self.beta[2].apply(v)
            + self.b[1][1] * w * self.beta[3].apply(w)
    }

    /// Multiply all eight coefficients by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = *self;
        for i in 0..2 {
            for j in 0..2 {
                out.a[i][j] *= lambda;
                out.b[i][j] *= lambda;
            }
        }
        out
    }
}

impl Default for NonsmoothQuadCoeffs {
    fn default() -> Self {
        Self::zero()
    }
}

/// Smooth quadratic and cubic terms
///
/// ```text
/// f_q = a1 v^2 + a2 vw + a3 w^2          g_q = b1 v^2 + b2 vw + b3 w^2
/// f_c = ca1 v^3 + ca2 vw^2 + ca3 v^2 w + ca4 w^3
/// g_c = cb1 v^3 + cb2 vw^2 + cb3 v^2 w + cb4 w^3
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothCoeffs {
    pub quad_f: [f64; 3],
    pub quad_g: [f64; 3],
    pub cubic_f: [f64; 4],
    pub cubic_g: [f64; 4],
}

impl SmoothCoeffs {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.quad_f.iter().all(|&x| x == 0.0)
            && self.quad_g.iter().all(|&x| x == 0.0)
            && self.cubic_f.iter().all(|&x| x == 0.0)
            && self.cubic_g.iter().all(|&x| x == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.quad_f
            .iter()
            .chain(self.quad_g.iter())
            .chain(self.cubic_f.iter())
            .chain(self.cubic_g.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    #[inline]
    pub fn eval_fq(&self, v: f64, w: f64) -> f64 {
        self.quad_f[0] * v * v + self.quad_f[1] * v * w + self.quad_f[2] * w * w
    }

    #[inline]
    pub fn eval_gq(&self, v: f64, w: f64) -> f64 {
        self.quad_g[0] * v * v + self.quad_g[1] * v * w + self.quad_g[2] * w * w
    }

    #[inline]
    pub fn eval_fc(&self, v: f64, w: f64) -> f64 {
        self.cubic_f[0] * v * v * v
            + self.cubic_f[1] * v * w * w
            + self.cubic_f[2] * v * v * w
            + self.cubic_f[3] * w * w * w
    }

    #[inline]
    pub fn eval_gc(&self, v: f64, w: f64) -> f64 {
        self.cubic_g[0] * v * v * v
            + self.cubic_g[1] * v * w * w
            + self.cubic_g[2] * v * v * w
            + self.cubic_g[3] * w * w * w
    }
}

/// Linear part of a planar system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinearPart {
    /// `(mu, -omega; omega, mu)`.
    NormalForm { mu: f64, omega: f64 },
    /// Effective matrix `m + mu * I`; `m` is the matrix at the bifurcation
    /// point (trace zero there) and `mu` shifts both eigenvalue real parts.
    General { m: [[f64; 2]; 2], mu: f64 },
}

impl LinearPart {
    pub fn mu(&self) -> f64 {
        match *self {
            LinearPart::NormalForm { mu, .. } => mu,
            LinearPart::General { m, mu } => (m[0][0] + m[1][1]) / 2.0 + mu,
        }
    }

    /// Imaginary part of the eigenvalue pair (positive root).
    pub fn omega(&self) -> Result<f64> {
        match *self {
            LinearPart::NormalForm { omega, .. } => {
                if omega == 0.0 {
                    Err(Error::ZeroOmega)
                } else {
                    Ok(omega)
                }
            }
            LinearPart::General { .. } => {
                let m = self.matrix();
                let rad = -4.0 * m[0][1] * m[1][0] - (m[0][0] - m[1][1]).powi(2);
                if rad <= 0.0 {
                    Err(Error::NotHopfCompatible(rad))
                } else {
                    Ok(rad.sqrt() / 2.0)
                }
            }
        }
    }

    /// The effective 2x2 matrix.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        match *self {
            LinearPart::NormalForm { mu, omega } => [[mu, -omega], [omega, mu]],
            LinearPart::General { m, mu } => {
                [[m[0][0] + mu, m[0][1]], [m[1][0], m[1][1] + mu]]
            }
        }
    }

    pub fn is_normal_form(&self) -> bool {
        matches!(self, LinearPart::NormalForm { .. })
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        match *self {
            LinearPart::NormalForm { omega, .. } => LinearPart::NormalForm { mu, omega },
            LinearPart::General { m, .. } => LinearPart::General { m, mu },
        }
    }
}

/// A planar system: linear part plus non-smooth quadratic and smooth
/// quadratic/cubic terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarSystem {
    pub linear: LinearPart,
    pub quad: NonsmoothQuadCoeffs,
    pub smooth: SmoothCoeffs,
}

impl PlanarSystem {
    pub fn normal_form(mu: f64, omega: f64, quad: NonsmoothQuadCoeffs) -> Self {
        Self { linear: LinearPart::NormalForm { mu, omega }, quad, smooth: SmoothCoeffs::zero() }
    }

    pub fn general(m: [[f64; 2]; 2], mu: f64, quad: NonsmoothQuadCoeffs) -> Self {
        Self { linear: LinearPart::General { m, mu }, quad, smooth: SmoothCoeffs::zero() }
    }

    pub fn with_smooth(mut self, smooth: SmoothCoeffs) -> Self {
        self.smooth = smooth;
        self
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { linear: self.linear.with_mu(mu), ..*self }
    }

    pub fn mu(&self) -> f64 {
        self.linear.mu()
    }

    pub fn omega(&self) -> Result<f64> {
        self.linear.omega()
    }

    pub fn coeff_scale(&self) -> f64 {
        self.quad.max_abs().max(self.smooth.max_abs())
    }

    /// Full Cartesian right-hand side at `(v, w)`.
    pub fn eval_rhs(&self, v: f64, w: f64) -> (f64, f64) {
        let m = self.linear.matrix();
        let dv = m[0][0] * v
            + m[0][1] * w
            + self.quad.eval_f(v, w)
            + self.smooth.eval_fq(v, w)
            + self.smooth.eval_fc(v, w);
        let dw = m[1][0] * v
            + m[1][1] * w
            + self.quad.eval_g(v, w)
            + self.smooth.eval_gq(v, w)
            + self.smooth.eval_gc(v, w);
        (dv, dw)
    }
}

/// The 3D extension: transverse variable `u` with eigenvalue `c1`, coupling
/// coefficients `c2..c9`, a non-smooth block `h(v,w)` in the `u`-equation and
/// an embedded planar `(v, w)` block (normal-form linear part required).
///
/// ```text
/// u' = c1 u + c2 u^2 + c3 uv + c4 uw + c5 vw + h(v, w)
/// v' = mu v - omega w + c6 uv + c7 uw + f(v, w) + smooth terms
/// w' = omega v + mu w + c8 uv + c9 uw + g(v, w) + smooth terms
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct System3D {
    /// `c[0]` is `c1`, ..., `c[8]` is `c9`.
    pub c: [f64; 9],
    /// `h[i][j]`: h11, h12; h21, h22.
    pub h: [[f64; 2]; 2],
    pub h_slopes: [SlopePair; 4],
    pub planar: PlanarSystem,
}

impl System3D {
    pub fn new(c: [f64; 9], h: [[f64; 2]; 2], planar: PlanarSystem) -> Result<Self> {
        if !planar.linear.is_normal_form() {
            return Err(Error::NotNormalForm);
        }
        Ok(Self { c, h, h_slopes: [SlopePair::ABS; 4], planar })
    }

    pub fn c1(&self) -> f64 {
        self.c[0]
    }

    pub fn mu(&self) -> f64 {
        self.planar.mu()
    }

    pub fn omega(&self) -> Result<f64> {
        self.planar.omega()
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { planar: self.planar.with_mu(mu), ..*self }
    }

    pub fn h_all_abs(&self) -> bool {
        self.h_slopes.iter().all(|s| s.is_abs())
    }

    #[inline]
    pub fn eval_h(&self, v: f64, w: f64) -> f64 {
        self.h[0][0] * v * self.h_slopes[0].apply(v)
            + self.h[0][1] * v * self.h_slopes[1].apply(w)
            + self.h[1][0] * w * self.h_slopes[2].apply(v)
            + self.h[1][1] * w * self.h_slopes[3].apply(w)
    }

    pub fn eval_rhs(&self, u: f64, v: f64, w: f64) -> (f64, f64, f64) {
        let [c1, c2, c3, c4, c5, c6, c7, c8, c9] = self.c;
        let (pv, pw) = self.planar.eval_rhs(v, w);
        let du = c1 * u + c2 * u * u + c3 * u * v + c4 * u * w + c5 * v * w + self.eval_h(v, w);
        let dv = pv + c6 * u * v + c7 * u * w;
        let dw = pw + c8 * u * v + c9 * u * w;
        (du, dv, dw)
    }
}

/// Quadratic terms of one component of the `u`-equation in the nD extension.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NdUComponent {
    /// Coefficients of `u_i u_j` (upper-triangular usage; full matrix accepted).
    pub uu: Vec<Vec<f64>>,
    /// Coefficients of `u_i v`.
    pub uv: Vec<f64>,
    /// Coefficients of `u_i w`.
    pub uw: Vec<f64>,
    /// Coefficient of `v w`.
    pub vw: f64,
    /// Non-smooth `h(v, w)` block.
    pub h: [[f64; 2]; 2],
    #[serde(default = "default_abs4")]
    pub h_slopes: [SlopePair; 4],
}

fn default_abs4() -> [SlopePair; 4] {
    [SlopePair::ABS; 4]
}

impl NdUComponent {
    /// All-zero component for `k` transverse directions.
    pub fn default_sized(k: usize) -> Self {
        Self {
            uu: vec![vec![0.0; k]; k],
            uv: vec![0.0; k],
            uw: vec![0.0; k],
            vw: 0.0,
            h: [[0.0; 2]; 2],
            h_slopes: default_abs4(),
        }
    }
}

/// The nD extension: `u` in R^(n-2) with linear block `a_tilde`, couplings
/// `c6..c9` per component, quadratic `u`-nonlinearities and an embedded
/// planar block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemND {
    pub a_tilde: Vec<Vec<f64>>,
    pub c6: Vec<f64>,
    pub c7: Vec<f64>,
    pub c8: Vec<f64>,
    pub c9: Vec<f64>,
    pub u_quad: Vec<NdUComponent>,
    pub planar: PlanarSystem,
}

impl SystemND {
    /// Number of transverse directions `n - 2`.
    pub fn dim_u(&self) -> usize {
        self.a_tilde.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim_u();
        if !self.planar.linear.is_normal_form() {
            return Err(Error::NotNormalForm);
        }
        if self.a_tilde.iter().any(|r| r.len() != k)
            || self.c6.len() != k
            || self.c7.len() != k
            || self.c8.len() != k
            || self.c9.len() != k
        {
            return Err(Error::Schema("inconsistent nD dimensions".into()));
        }
        if !self.u_quad.is_empty() {
            if self.u_quad.len() != k {
                return Err(Error::Schema("u_quad must have one entry per transverse component".into()));
            }
            for comp in &self.u_quad {
                if comp.uu.iter().any(|r| r.len() != k)
                    || (!comp.uu.is_empty() && comp.uu.len() != k)
                    || comp.uv.len() != k
                    || comp.uw.len() != k
                {
                    return Err(Error::Schema("inconsistent u_quad dimensions".into()));
                }
            }
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.planar.mu()
    }

    pub fn omega(&self) -> Result<f64> {
        self.planar.omega()
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { planar: self.planar.with_mu(mu), ..self.clone() }
    }

    /// Right-hand side; `u` has length `n - 2`, output is `(du, dv, dw)`.
    pub fn eval_rhs(&self, u: &[f64], v: f64, w: f64) -> (Vec<f64>, f64, f64) {
        let k = self.dim_u();
        let mut du = vec![0.0; k];
        for i in 0..k {
            let mut s = 0.0;
            for j in 0..k {
                s += self.a_tilde[i][j] * u[j];
            }
            if let Some(comp) = self.u_quad.get(i) {
                if !comp.uu.is_empty() {
                    for p in 0..k {
                        for q in 0..k {
                            s += comp.uu[p][q] * u[p] * u[q];
                        }
                    }
                }
                for p in 0..k {
                    s += comp.uv[p] * u[p] * v + comp.uw[p] * u[p] * w;
                }
                s += comp.vw * v * w;
                s += comp.h[0][0] * v * comp.h_slopes[0].apply(v)
                    + comp.h[0][1] * v * comp.h_slopes[1].apply(w)
                    + comp.h[1][0] * w * comp.h_slopes[2].apply(v)
                    + comp.h[1][1] * w * comp.h_slopes[3].apply(w);
            }
            du[i] = s;
        }
        let (pv, pw) = self.planar.eval_rhs(v, w);
        let mut dv = pv;
        let mut dw = pw;
        for i in 0..k {
            dv += self.c6[i] * u[i] * v + self.c7[i] * u[i] * w;
            dw += self.c8[i] * u[i] * v + self.c9[i] * u[i] * w;
        }
        (du, dv, dw)
    }
}

/// Shimmying-wheel model parameters: Jacobian entries `c1, c2, c3` (first
/// row), `c5, c6, c7` (third row; second row is fixed `(1, 0, 0)`) and the
/// non-smooth coefficient `c4` of `q|q|` in the first equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShimmyParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
}

impl ShimmyParams {
    pub fn jacobian(&self) -> [[f64; 3]; 3] {
        [[self.c1, self.c2, self.c3], [1.0, 0.0, 0.0], [self.c5, self.c6, self.c7]]
    }

    pub fn max_abs(&self) -> f64 {
        [self.c1, self.c2, self.c3, self.c4, self.c5, self.c6, self.c7]
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Right-hand side in the original `(Omega, psi, q)` variables.
    pub fn eval_rhs(&self, y: &[f64; 3]) -> [f64; 3] {
        let j = self.jacobian();
        let q = y[2];
        [
            j[0][0] * y[0] + j[0][1] * y[1] + j[0][2] * y[2] + self.c4 * q * q.abs(),
            y[0],
            j[2][0] * y[0] + j[2][1] * y[1] + j[2][2] * y[2],
        ]
    }

    pub fn with_c1(&self, c1: f64) -> Self {
        Self { c1, ..*self }
    }
}
