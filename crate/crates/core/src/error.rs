use thiserror::Error;

/// Failures raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("step size underflow at x = {x} (h = {h:e}); the system is too stiff for the explicit integrator")]
    StepUnderflow { x: f64, h: f64 },

    #[error("coefficient field returned a non-finite value at x = {x}")]
    NonFiniteCoefficient { x: f64 },

    #[error("integration exceeded {max_steps} steps between x = {from} and x = {to}")]
    TooManySteps { from: f64, to: f64, max_steps: usize },

    #[error("x = {x} lies outside the field domain [{lo}, {hi}]")]
    OutsideDomain { x: f64, lo: f64, hi: f64 },

    #[error("subspace rank collapse at x = {x} (column ratio {ratio:e})")]
    RankCollapse { x: f64, ratio: f64 },

    #[error("eigenvalue computation failed: {0}")]
    EigenFailure(String),

    #[error("odd number ({count}) of unit-modulus multipliers; tighten the integrator or modulus tolerance")]
    OddCenterCount { count: usize },

    #[error("multiplier {re}{im:+}i sits on the negative real axis; the principal logarithm does not exist (consider doubling the period)")]
    LogarithmBranch { re: f64, im: f64 },

    #[error("eigenvector matrix is ill conditioned (cond = {cond:e}); defective monodromy is not supported")]
    DefectiveMonodromy { cond: f64 },

    #[error("exponent with real part {re:e} lies in the spectral-gap guard band")]
    GapViolation { re: f64 },

    #[error("zero Floquet multiplier; upstream monodromy is singular")]
    ZeroMultiplier,

    #[error("no hyperbolic directions at infinity: all {dim} Floquet multipliers lie on the unit circle")]
    NoHyperbolicDirections { dim: usize },

    #[error("mismatch has no interior local minimum in [{lo}, {hi}]")]
    NoLocalMinimum { lo: f64, hi: f64 },

    #[error("eigenfunction residual {residual:e} exceeds bound {bound:e}")]
    ResidualTooLarge { residual: f64, bound: f64 },

    #[error("candidate at lambda = {lambda} is not flagged as an eigenvalue (mismatch {mismatch:e})")]
    NotAnEigenvalue { lambda: f64, mismatch: f64 },

    #[error("quadrature did not converge on [{a}, {b}] (error estimate {estimate:e})")]
    QuadratureDiverged { a: f64, b: f64, estimate: f64 },

    #[error("sample grids do not match: {0}")]
    GridMismatch(String),

    #[error("lambda = {lambda} is at a band edge; Bloch solutions degenerate")]
    BandEdge { lambda: f64 },

    #[error("decay fit rejected: {0}")]
    DecayFitRejected(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("profile does not decay fast enough for beta = {beta}: norm moved from {inner} to {outer} when the window doubled")]
    InsufficientDecay { beta: f64, inner: f64, outer: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
