use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("hankel depth {depth} exceeds sequence length {len}")]
    DepthExceedsLength { depth: usize, len: usize },
    #[error("window [{a}, {b}] out of range for sequence of length {len}")]
    WindowOutOfRange { a: usize, b: usize, len: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular inertia matrix (|det M| = {det:e})")]
    SingularInertia { det: f64 },
    #[error("output {output} shows no response within {horizon} steps")]
    NoResponse { output: usize, horizon: usize },
    #[error("output {output} has degenerate relative degree 0")]
    DegenerateRelativeDegree { output: usize },
    #[error("insufficient samples for channel {channel}: need {needed}, got {got}")]
    InsufficientSamples { channel: usize, needed: usize, got: usize },
    #[error("trajectory left the operating box at step {step}")]
    BoxViolation { step: usize },
    #[error("non-finite basis value: function {function} at step {step}")]
    NonFiniteBasis { function: usize, step: usize },
    #[error("gram matrix is singular (sigma_min = {sigma_min:e})")]
    SingularGram { sigma_min: f64 },
    #[error("coefficient matrix is rank deficient (sigma_min = {sigma_min:e})")]
    RankDeficientG { sigma_min: f64 },
    #[error("smallest singular value is zero")]
    ZeroSigmaMin,
    #[error("initial condition is infeasible (residual {residual:e})")]
    InfeasibleInitialCondition { residual: f64 },
    #[error("solver did not converge (gradient norm {gradient_norm:e})")]
    NonConvergence { gradient_norm: f64 },
    #[error("dictionary does not contain the input as explicit entries")]
    DictionaryLacksInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing certificate constants: {0}")]
    MissingCertificate(String),
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("callback failure: {0}")]
    Callback(String),
    #[error("plant failure at step {step}: {source}")]
    PlantFailure { step: usize, source: alloc::boxed::Box<Error> },
}
