use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A plan breaks one of the allocation constraints beyond tolerance.
    #[error("infeasible plan: {constraint} violated at {location} by {excess:.3e}")]
    InfeasiblePlan {
        constraint: &'static str,
        location: String,
        excess: f64,
    },

    #[error("invalid network: {}", .0.join("; "))]
    InvalidNetwork(Vec<String>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown facility id `{0}`")]
    UnknownFacility(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("exhaustive search refused: {m} facilities exceeds the cap of {cap}")]
    TooManyFacilities { m: usize, cap: usize },

    #[error("instance file: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
