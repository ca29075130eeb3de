//! Piecewise Gauss-Legendre quadrature for 2pi-periodic integrands that are
//! analytic between known kink angles.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights on [-1, 1].
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Compute the n-point rule by Newton iteration on the Legendre polynomial.
    pub fn new(n: usize) -> Self {
        assert!(n >= 2);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for k in 0..m {
            // Tricomi-style initial guess
            let mut x = (PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // evaluate P_n and P_n' by recurrence
                let mut p0 = 1.0;
                let mut p1 = x;
                for j in 2..=n {
                    let jf = j as f64;
                    let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[k] = -x;
            nodes[n - 1 - k] = x;
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            weights[k] = w;
            weights[n - 1 - k] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, f: &mut dyn FnMut(f64) -> f64) -> f64 {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

fn gl20() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(20))
}

/// Integrate one smooth panel with order-20 Gauss-Legendre, refining by
/// bisection until the two-panel Richardson estimate is below `tol`.
fn panel(a: f64, b: f64, f: &mut dyn FnMut(f64) -> f64, tol: f64, depth: u32) -> f64 {
    let rule = gl20();
    let coarse = rule.integrate(a, b, f);
    let mid = 0.5 * (a + b);
    let fine = rule.integrate(a, mid, f) + rule.integrate(mid, b, f);
    if (fine - coarse).abs() <= tol || depth >= 12 {
        fine
    } else {
        panel(a, mid, f, 0.5 * tol, depth + 1) + panel(mid, b, f, 0.5 * tol, depth + 1)
    }
}

/// Sorted kink list restricted to `(a, b)`, angles taken mod 2pi.
fn split_points(kinks: &[f64], a: f64, b: f64) -> Vec<f64> {
    let tau = 2.0 * PI;
    let mut pts: Vec<f64> = Vec::with_capacity(kinks.len() * 2 + 2);
    pts.push(a);
    // tile kinks over as many periods as the span covers
    let lo_turn = (a / tau).floor() as i64 - 1;
    let hi_turn = (b / tau).ceil() as i64 + 1;
    for turn in lo_turn..=hi_turn {
        for &k in kinks {
            let x = k.rem_euclid(tau) + tau * turn as f64;
            if x > a + 1e-14 && x < b - 1e-14 {
                pts.push(x);
            }
        }
    }
    pts.push(b);
    pts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    pts.dedup_by(|p, q| (*p - *q).abs() < 1e-14);
    pts
}

/// Integral of `f` over `[a, b]` with panels split at the given kink angles
/// (interpreted mod 2pi and tiled across the span). Absolute error target
/// `1e-12 * (1 + span)` distributed over the panels.
pub fn piecewise_integral_over(mut f: impl FnMut(f64) -> f64, kinks: &[f64], a: f64, b: f64) -> f64 {
    if (b - a).abs() < 1e-300 {
        return 0.0;
    }
    let pts = split_points(kinks, a, b);
    let tol = 1e-13 * (1.0 + (b - a).abs()) / pts.len() as f64;
    let mut acc = 0.0;
    for win in pts.windows(2) {
        acc += panel(win[0], win[1], &mut f, tol, 0);
    }
    acc
}

/// Integral of `f` over one period `[0, 2pi]`.
pub fn piecewise_integral(f: impl FnMut(f64) -> f64, kinks: &[f64]) -> f64 {
    piecewise_integral_over(f, kinks, 0.0, 2.0 * PI)
}

/// `(1/2pi) * integral over [0, 2pi]`.
pub fn piecewise_average(f: impl FnMut(f64) -> f64, kinks: &[f64]) -> f64 {
    piecewise_integral(f, kinks) / (2.0 * PI)
}

/// Nested double integral `int_0^2pi A(s) * (int_0^s B(t) dt) ds`.
///
/// The outer mesh follows the kink list; the inner integral reuses prefix
/// sums at panel boundaries and re-splits its own kinks inside each panel.
pub fn piecewise_nested(
    mut outer: impl FnMut(f64) -> f64,
    mut inner: impl FnMut(f64) -> f64,
    kinks: &[f64],
) -> f64 {
    let pts = split_points(kinks, 0.0, 2.0 * PI);
    // prefix integrals of B at panel boundaries
    let mut prefix = vec![0.0; pts.len()];
    for i in 1..pts.len() {
        prefix[i] = prefix[i - 1] + panel(pts[i - 1], pts[i], &mut inner, 1e-14, 0);
    }
    let rule = gl20();
    let mut acc = 0.0;
    for i in 0..pts.len() - 1 {
        let (a, b) = (pts[i], pts[i + 1]);
        let base = prefix[i];
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut panel_sum = 0.0;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let s = mid + half * x;
            let inner_to_s = base + panel(a, s, &mut inner, 1e-14, 0);
            panel_sum += w * outer(s) * inner_to_s;
        }
        acc += half * panel_sum;
    }
    acc
}

pub const QUADRANT_KINKS: [f64; 4] = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
