use thiserror::Error;

use crate::alexandrov::SolverState;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),

    #[error("index {index} out of range for dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("derivative order {0} exceeds the supported maximum of 4")]
    OrderTooHigh(usize),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("u = {u} lies outside the band ({lo}, {hi})")]
    OutOfBand { u: f64, lo: f64, hi: f64 },

    #[error("no convergence after {iterations} iterations (best residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("D_vG vanishes at the evaluation point")]
    ZeroGv,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("segment broken at theta = {theta}: {reason}")]
    SegmentBroken { theta: f64, reason: String },

    #[error("piece {piece} leaves the band at x = {x:?}: value {value} outside ({lo}, {hi})")]
    PieceOutOfBand { piece: usize, x: Vec<f64>, value: f64, lo: f64, hi: f64 },

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{0} missing")]
    MissingConstant(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no admissible window: {0}")]
    NoWindow(String),

    #[error("degenerate body: {0}")]
    Degenerate(String),

    #[error("solver stopped after {} iterations with residual {:e}", .0.iterations, .0.residual)]
    SolverNonConvergence(Box<SolverState>),

    #[error("json: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
