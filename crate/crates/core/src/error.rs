//! Error surfaces for the codec.
//!
//! `TensorError` covers shape and contract violations inside the autodiff
//! engine, `CodecError` covers everything that can go wrong while parsing or
//! producing a bitstream, and `PipelineError` is the umbrella the training
//! harness and CLI report through.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} do not broadcast")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul: inner dimensions disagree ({lhs:?} x {rhs:?})")]
    InnerDim { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank-{expected} input, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("conv2d: kernel size {k} must be odd")]
    EvenKernel { k: usize },
    #[error("{op}: spatial extent {extent} too small for kernel {k} with padding {pad}")]
    KernelTooLarge {
        op: &'static str,
        extent: usize,
        k: usize,
        pad: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("reshape: cannot view {from:?} ({from_len} elements) as {to:?} ({to_len} elements)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
    #[error("gather: row {row} out of range for table with {rows} rows")]
    GatherOutOfRange { row: usize, rows: usize },
    #[error("concat: shapes {lhs:?} and {rhs:?} disagree outside axis {axis}")]
    ConcatMismatch {
        axis: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {what}")]
    Invalid { op: &'static str, what: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("bad magic: expected \"MDIC\", got {got:?}")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported bitstream version {got} (this build reads version {supported})")]
    UnsupportedVersion { got: u8, supported: u8 },
    #[error("truncated bitstream: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unknown lambda tag {0}")]
    UnknownLambdaTag(u8),
    #[error("symbol {symbol} out of range for alphabet of {alphabet}")]
    SymbolOutOfRange { symbol: usize, alphabet: usize },
    #[error("pmf must have between 1 and 65535 entries, got {0}")]
    BadAlphabet(usize),
    #[error("bitstream declares codebook size {stream} but the model uses {model}")]
    CodebookMismatch { stream: usize, model: usize },
    #[error("bitstream declares {stream_h}x{stream_w} but the model expects {model_h}x{model_w}")]
    GridMismatch {
        stream_h: usize,
        stream_w: usize,
        model_h: usize,
        model_w: usize,
    },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("loss became non-finite in the {component} term at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("token id {id} outside vocabulary of {size} entries")]
    OutOfVocabulary { id: usize, size: usize },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type TensorResult<T> = Result<T, TensorError>;
pub type PipelineResult<T> = Result<T, PipelineError>;
