use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid law: {0}")]
    InvalidLaw(String),

    #[error("law parse error: {0}")]
    LawParse(String),

    #[error("no root bracket for psi(t) = 1 on (1, {t_max}]")]
    NoRootBracket { t_max: f64 },

    #[error("psi(t) < 1 on the probe grid but still increasing at t_max = {t_max}; kappa lies beyond it")]
    KappaBeyondRange { t_max: f64 },

    #[error("node budget of {max_nodes} exceeded")]
    NodeBudgetExceeded { max_nodes: usize },

    #[error("step cap of {max_steps} reached")]
    StepCap { max_steps: u64 },

    #[error("urn draw cap of {cap} exceeded for type {entry_type}")]
    DrawCap { cap: u64, entry_type: u64 },

    #[error("truncation depth t = {t} is not below |u*| = {depth}")]
    TExceedsDepth { t: u32, depth: u32 },

    #[error("walk trace is not at an excursion boundary")]
    NotAtBoundary,

    #[error("i + j = {sum} exceeds the log-space guard {guard}")]
    OverflowGuard { sum: u64, guard: u64 },

    #[error("row {row} truncation tail {tail:e} exceeds tolerance {tol:e}")]
    TailMass { row: u64, tail: f64, tol: f64 },

    #[error("state {state} lies outside the p_ij table (i_max = {i_max})")]
    StateOutsideTable { state: u64, i_max: u64 },

    #[error("spine too short to resolve the hitting times")]
    SpineTooShort,

    #[error("tilted law not normalized: |psi({exponent}) - 1| = {residual:e}")]
    NotNormalized { exponent: f64, residual: f64 },

    #[error("ladder epoch cap of {cap} reached")]
    EpochCap { cap: u64 },

    #[error("too few samples: need {needed}, have {have}")]
    TooFewSamples { needed: usize, have: usize },

    #[error("too few distinct order statistics in the top {k}")]
    TooFewDistinct { k: usize },

    #[error("fit range is empty: {0}")]
    RangeEmpty(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
