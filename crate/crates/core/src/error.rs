use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("angular speed vanishes: W(phi) has a zero on [0, 2pi)")]
    AngularSpeedVanished,
    #[error("radius escaped beyond r_max = {0}")]
    RadiusEscaped(f64),
    #[error("not Hopf-compatible: -4 m2 m3 - (m1 - m4)^2 = {0} <= 0")]
    NotHopfCompatible(f64),
    #[error("degenerate transformation: det T = {0}")]
    DegenerateTransformation(f64),
    #[error("degenerate transverse direction (c1 = 0)")]
    DegenerateTransverse,
    #[error("operation requires all slopes (-1, +1); use the generalized-slope variant")]
    NonAbsSlopes,
    #[error("operation requires the linear part in normal form")]
    NotNormalForm,
    #[error("{0} is degenerate (carrier below threshold)")]
    Degenerate(&'static str),
    #[error("second-order degenerate: quadratic coefficient below threshold")]
    SecondOrderDegenerate,
    #[error("non-isolated orbits: displacement within atol across the whole bracket")]
    NonIsolatedOrbits,
    #[error("no complex eigenvalue pair: all roots real")]
    NoComplexPair,
    #[error("resonant: |omega| = {0} below threshold")]
    Resonant(f64),
    #[error("singular eigenvector matrix T (det = {0})")]
    SingularT(f64),
    #[error("kernel dimension > 1 unsupported")]
    KernelDimension,
    #[error("omega must be nonzero")]
    ZeroOmega,
    #[error("kink list empty for a non-smooth integrand")]
    EmptyKinks,
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("root finding failed: {0}")]
    RootFinding(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("inconclusive: first- and second-order carriers below threshold without a vertical certificate")]
    Inconclusive,
}

pub type Result<T> = std::result::Result<T, Error>;
