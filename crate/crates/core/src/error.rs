use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("truncation too small: λ = {lambda} is not below τ_M = {tau_max}")]
    TruncationTooSmall { lambda: f64, tau_max: f64 },

    #[error("truncation too small for schedule tail: {0}")]
    ScheduleTail(String),

    #[error("degenerate observation: smallest eigenvalue of J_{n} is {value:e}, at or below the numerical floor")]
    DegenerateObservation { n: usize, value: f64 },

    #[error("insufficient fit points: {0} usable point(s)")]
    InsufficientFitPoints(usize),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("C2 = {c2} too small for λ = {lambda}: r = {r} exceeds 1/2")]
    C2TooSmall { c2: f64, lambda: f64, r: f64 },

    #[error("horizon not admissible: {0}")]
    HorizonNotAdmissible(String),

    #[error("step rejected at t = {t}: error estimate {estimate:e} exceeds tolerance {tolerance:e}")]
    StepRejected { t: f64, estimate: f64, tolerance: f64 },

    #[error("no N_T within scan bound {0}")]
    NoNtWithinBound(u64),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures caused by the numbers rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::InvalidInput(_) | Error::HorizonNotAdmissible(_))
    }
}
