//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("gain matrix not finite at {0}")]
    NonFiniteGain(String),

    #[error("gain matrix ill-conditioned at {point} (condition estimate {cond:.3e})")]
    IllConditioned { point: String, cond: f64 },

    #[error("frequency grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("no admissible gain in ({lo:e}, {hi:e}] for channel {channel}: {reason}")]
    NoAdmissibleGain {
        channel: usize,
        lo: f64,
        hi: f64,
        reason: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("time grids misaligned: {0}")]
    MisalignedGrids(String),

    #[error("sampling too coarse for derivative order {order}: {detail}")]
    InsufficientSampling { order: usize, detail: String },
}
