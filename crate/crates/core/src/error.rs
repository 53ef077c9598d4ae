use thiserror::Error;

/// Every failure the simulator can report.
///
/// Variants map one-to-one onto the failure modes of the individual
/// operations so the harness can tag trial records with a stable name.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("value {0} is outside the domain of the operation")]
    Domain(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scenario infeasible after {0} attempts")]
    ScenarioInfeasible(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("a single transmit antenna has no null space")]
    NoNullSpace,
    #[error("{reflections} reflections cannot be nulled with {antennas} transmit antennas")]
    ReflectionRankTooHigh { reflections: usize, antennas: usize },
    #[error("compensation ill-conditioned: normalized |v_d^H n_r| = {0:.4}")]
    IllConditionedCompensation(f64),
    #[error("direct-path null basis is rank deficient")]
    SingularBasis,
    #[error("no reflections available to hide the direct path")]
    NoReflections,
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("precoder condition number {0:.3e} exceeds bound")]
    IllConditionedPrecoder(f64),
    #[error("profile unsupported: {0}")]
    ProfileUnsupported(String),
    #[error("no paths found")]
    NoPathsFound,
    #[error("bearings are parallel or nearly so")]
    DegenerateBearings,
    #[error("statistics over an empty sample")]
    EmptyStats,
    #[error("effective channel has zero power")]
    InfiniteDrop,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    /// Short stable tag used in the `error` column of trial records.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Domain(_) => "DomainError",
            Error::Config(_) => "ConfigError",
            Error::ScenarioInfeasible(_) => "ScenarioInfeasible",
            Error::DegenerateGeometry(_) => "DegenerateGeometry",
            Error::NoNullSpace => "NoNullSpace",
            Error::ReflectionRankTooHigh { .. } => "ReflectionRankTooHigh",
            Error::IllConditionedCompensation(_) => "IllConditionedCompensation",
            Error::SingularBasis => "SingularBasis",
            Error::NoReflections => "NoReflections",
            Error::Dims(_) => "DimsError",
            Error::IllConditionedPrecoder(_) => "IllConditionedPrecoder",
            Error::ProfileUnsupported(_) => "ProfileUnsupported",
            Error::NoPathsFound => "NoPathsFound",
            Error::DegenerateBearings => "DegenerateBearings",
            Error::EmptyStats => "EmptyStats",
            Error::InfiniteDrop => "InfiniteDrop",
            Error::Io { .. } => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
