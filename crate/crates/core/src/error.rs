use std::path::PathBuf;

use crate::elliptic::SolveReport;
use crate::grid::ScalarField;

/// Errors raised anywhere in the simulation and reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("field length {got} does not match grid size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value in field `{0}`")]
    NonFinite(String),
    #[error("metric is singular or indefinite at node {node} (det = {det:e})")]
    SingularMetric { node: usize, det: f64 },
    #[error("density is not strictly positive (min = {min:e} at node {node})")]
    NonpositiveDensity { node: usize, min: f64 },
    #[error("source violates the compatibility condition: |int f1 dV_g| = {defect:e} > {tol:e}")]
    CompatibilityViolated { defect: f64, tol: f64 },
    #[error("conjugate gradient hit {} iterations (relative residual {:e})", .report.iterations, .report.relative_residual)]
    MaxIterationsExceeded {
        best: Box<ScalarField>,
        report: SolveReport,
    },
    #[error("dipole poles are degenerate: {0}")]
    DegenerateDipole(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no admissible probe tuple on patch {patch}: {reason}")]
    NoAdmissibleTuple { patch: usize, reason: String },
    #[error("probe `{id}`: {source}")]
    Probe {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("no patch admits a probe tuple ({} failures)", .failures.len())]
    NoAdmissiblePatch { failures: Vec<(usize, String)> },
    #[error("admissibility violated: {0}")]
    AdmissibilityViolated(String),
    #[error("span orthocomplement is not positive definite at {count} nodes")]
    IndefiniteCandidate { count: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("covered region splits into {components} disconnected components")]
    DisconnectedMask { components: usize },
    #[error("{count} nodes are not covered by any admissible patch")]
    UncoveredNodes { count: usize, mask: Vec<bool> },
    #[error("sinkhorn did not converge: marginal defect {defect:e} after {iterations} iterations")]
    NotConverged { defect: f64, iterations: usize },
    /// `line` is zero for settings that do not come from a file line.
    #[error("config error{}, key `{key}`: {message}", at_line(*.line))]
    Config {
        line: usize,
        key: String,
        message: String,
    },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn at_line(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" at line {line}")
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// Process exit code for the command-line driver: 2 for configuration
    /// problems, 4 for admissibility failures, 3 for other numerical failures
    /// and 1 for I/O and file-format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidConfig(_) | Error::InvalidGrid(_) => 2,
            Error::NoAdmissibleTuple { .. }
            | Error::NoAdmissiblePatch { .. }
            | Error::AdmissibilityViolated(_)
            | Error::IndefiniteCandidate { .. }
            | Error::UncoveredNodes { .. } => 4,
            Error::Probe { source, .. } => source.exit_code(),
            Error::Io { .. } | Error::Format { .. } => 1,
            _ => 3,
        }
    }

    /// Variant name, for machine-readable error blocks.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::GridMismatch(_) => "GridMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::SingularMetric { .. } => "SingularMetric",
            Error::NonpositiveDensity { .. } => "NonpositiveDensity",
            Error::CompatibilityViolated { .. } => "CompatibilityViolated",
            Error::MaxIterationsExceeded { .. } => "MaxIterationsExceeded",
            Error::DegenerateDipole(_) => "DegenerateDipole",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NoAdmissibleTuple { .. } => "NoAdmissibleTuple",
            Error::Probe { source, .. } => source.kind(),
            Error::NoAdmissiblePatch { .. } => "NoAdmissiblePatch",
            Error::AdmissibilityViolated(_) => "AdmissibilityViolated",
            Error::IndefiniteCandidate { .. } => "IndefiniteCandidate",
            Error::Precondition(_) => "Precondition",
            Error::DisconnectedMask { .. } => "DisconnectedMask",
            Error::UncoveredNodes { .. } => "UncoveredNodes",
            Error::NotConverged { .. } => "NotConverged",
            Error::Config { .. } => "ConfigError",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
        }
    }
}
