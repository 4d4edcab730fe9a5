use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped by the exit code the command-line tool maps them to:
/// configuration problems, data problems and numerical failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("observation {0} has leverage 1; HC3 is undefined")]
    LeverageOne(usize),
    #[error("model dimension {p} leaves no degrees of freedom with n = {n}")]
    DegreesOfFreedom { n: usize, p: usize },
    #[error("penalty level must be finite and nonnegative, got {0}")]
    NonFinitePenalty(f64),
    #[error("coordinate descent did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("fold {fold} has only {size} rows")]
    FoldTooSmall { fold: usize, size: usize },
    #[error("fold count {k} is invalid for n = {n}")]
    BadFoldCount { n: usize, k: usize },
    #[error("residualized treatment has (near) zero variation")]
    WeakResidualVariation,
    #[error("score Jacobian is (near) singular")]
    SingularJacobian,
    #[error("treatment arm {0} has no observations")]
    OneArmEmpty(u8),
    #[error("group indicator selects no observations")]
    EmptyGroup,
    #[error("no treated units")]
    NoTreatedUnits,
    #[error("instrument and treatment residuals have exactly zero covariance")]
    ExactlyZeroCovariance,
    #[error("instrument is weak (first-stage t = {0:.3})")]
    WeakInstrument(f64),
    #[error("instrument moves no one into treatment (compliance share is zero)")]
    NoCompliance,
    #[error("cell (d = {d}, t = {t}) is empty")]
    EmptyCell { d: u8, t: u8 },
    #[error("no usable observations on the {0} side of the cutoff")]
    OneSideEmpty(&'static str),
    #[error("moment variance is degenerate")]
    DegenerateVariance,
    #[error("partial R^2 must lie in [0, 1), got {0}")]
    BadR2(f64),
    #[error("proxy matrix for d = {0} is singular or ill conditioned")]
    SingularProxyMatrix(usize),
    #[error("input is not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("models are indistinguishable on this sample")]
    IndistinguishableModels,
    #[error("model predictions are constant")]
    ConstantModel,
    #[error("bin {0} is empty")]
    EmptyBin(usize),
    #[error("top group is empty at grid point {0}")]
    EmptyTopGroup(usize),
    #[error("R-learner weights are all (near) zero")]
    WeightOverflow,
    #[error("nuisance fit failed: {0}")]
    NuisanceFit(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown simulation design `{0}`")]
    UnknownDgp(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("treatment column `{column}` has non-binary value {value} at row {row}")]
    NonBinaryTreatment {
        column: String,
        row: usize,
        value: f64,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownDgp(_) => 2,
            Error::Parse { .. }
            | Error::NonBinaryTreatment { .. }
            | Error::Data(_)
            | Error::Io(_)
            | Error::DimensionMismatch(_)
            | Error::InvalidInput(_)
            | Error::OneArmEmpty(_)
            | Error::EmptyGroup
            | Error::NoTreatedUnits
            | Error::EmptyCell { .. }
            | Error::OneSideEmpty(_)
            | Error::BadFoldCount { .. }
            | Error::FoldTooSmall { .. }
            | Error::NotADistribution(_)
            | Error::BadR2(_) => 3,
            _ => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{name} has length {got}, expected {want}"
        )));
    }
    Ok(())
}
