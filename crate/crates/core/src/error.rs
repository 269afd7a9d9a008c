//! Error type shared across the crate.

/// Errors produced by model construction, solvers and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension mismatch between an MDP, policy, table or feature map.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A constructed object violates one of its invariants.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The target policy takes an action the behavior policy never takes.
    #[error("coverage violated at state {state}, action {action}: pi={pi}, mu={mu}")]
    Coverage {
        state: usize,
        action: usize,
        pi: f64,
        mu: f64,
    },

    /// The stationary-distribution solve did not converge within budget.
    #[error("stationary distribution did not converge within {0} iterations")]
    Ergodicity(usize),

    /// A dense solve failed (singular system outside the guaranteed regime).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Exhaustive trajectory enumeration would exceed the budget.
    #[error("enumeration budget exceeded: {requested} trajectories (limit {limit})")]
    EnumerationBudget { requested: usize, limit: usize },

    /// Experiment configuration failed validation; lists offending fields.
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
