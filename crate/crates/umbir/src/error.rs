use thiserror::Error;

/// Errors produced by the forward model, solver, and file layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration. May carry several field-level messages.
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// A Snell recursion hit a super-critical angle.
    #[error("total internal reflection entering layer {layer} (|sin| = {sin_magnitude:.6})")]
    TotalInternalReflection { layer: usize, sin_magnitude: f64 },

    /// The requested vertical offset exceeds the maximum pre-critical reach.
    #[error("vertical target {target_m:.6} m beyond maximum reach {max_reach_m:.6} m")]
    UnreachableTarget { target_m: f64, max_reach_m: f64 },

    /// Incompatible array or matrix dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or inconsistent data file.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite inputs or a numerically degenerate problem.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) | Error::Data(_) | Error::Io(_) => 3,
            Error::TotalInternalReflection { .. }
            | Error::UnreachableTarget { .. }
            | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
