use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown server `{0}`")]
    UnknownServer(String),

    #[error("unknown job `{0}`")]
    UnknownJob(String),

    #[error("cannot reclaim {requested} servers: only {available} are on loan")]
    Infeasible { requested: usize, available: usize },

    #[error("server `{server}` has {free} free GPUs but the worker needs {needed}")]
    Overcommit {
        server: String,
        free: u32,
        needed: u32,
    },

    #[error("server `{0}` already hosts workers of the other role")]
    GroupConflict(String),

    #[error("job `{job}` may not run on server `{server}`")]
    Ineligible { job: String, server: String },

    #[error("{what} is too large for exhaustive search ({size} > {limit})")]
    Guard {
        what: &'static str,
        size: u128,
        limit: u128,
    },

    #[error("instance outside the two-job regime: {0}")]
    Regime(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
