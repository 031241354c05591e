use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("malformed weight file: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("token id {id} out of range (vocab size {vocab_size})")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("token sequence must start with <bos>")]
    MissingBos,

    #[error("empty token sequence")]
    EmptySequence,

    #[error("unknown character {ch:?} at offset {offset}")]
    UnknownCharacter { ch: char, offset: usize },

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("position {position} outside sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("donor length {donor} does not match sequence length {len}")]
    DonorLengthMismatch { donor: usize, len: usize },

    #[error("degenerate pair: |F(M,x_cont) - F(M,x_base)| = {0:e} is below 1e-6")]
    DegeneratePair(f64),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("input {input:?} outside domain: {reason}")]
    OutsideDomain { input: String, reason: String },

    #[error("constraint unsatisfiable after {attempts} attempts: {reason}")]
    ConstraintUnsatisfiable { attempts: usize, reason: String },

    #[error("mcqa row {row}: {reason}")]
    McqaRow { row: usize, reason: String },

    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
