use thiserror::Error;

/// Source position, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl std::fmt::Display for Pos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{pos}: syntax error: {msg}")]
    Syntax { pos: Pos, msg: String },

    #[error("{pos}: unbounded loop: {msg}")]
    UnboundedLoop { pos: Pos, msg: String },

    #[error("{pos}: unsupported construct ({rule}): {msg}")]
    Unsupported {
        pos: Pos,
        rule: &'static str,
        msg: String,
    },

    #[error("{pos}: semantic error: {msg}")]
    Semantic { pos: Pos, msg: String },

    #[error("resource limit exceeded while unrolling loop at {pos}: {msg}")]
    Resource { pos: Pos, msg: String },

    #[error("step limit exceeded: {0}")]
    StepLimit(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("model violation: {0}")]
    ModelViolation(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("internal assertion failed: {0}")]
    Internal(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("attack parse failure at profile offset {offset}: {msg}")]
    AttackParse { offset: usize, msg: String },

    #[error("program not balanced: {0}")]
    NotBalanced(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
