use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("proposition hypothesis fails: C1*C3 = {product:e} is not below e^(-1/2)")]
    PropositionGate { product: f64 },

    #[error(
        "window-size condition unsatisfiable for lambda = {lambda:e}: \
         delta-independent limit {limit:e} >= lambda"
    )]
    DeltaInfeasible { lambda: f64, limit: f64 },

    #[error("regression design is rank-deficient (condition estimate {cond:.3e})")]
    SingularDesign { cond: f64 },

    #[error("requested ensemble needs {bytes} bytes, over the {budget} byte budget")]
    MemoryBudget { bytes: u64, budget: u64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("tree node {node} at level {level} did not converge after {iters} iterations")]
    TreeNode {
        level: usize,
        node: usize,
        iters: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
