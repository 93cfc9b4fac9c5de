use thiserror::Error;

use crate::data::Gender;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("input is not valid UTF-8: {0}")]
    Utf8(String),
    #[error("header does not match the 11 GAP columns: {0:?}")]
    BadHeader(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {id}: {field} {expected:?} not found at character offset {offset}")]
    OffsetMismatch { id: String, field: &'static str, offset: usize, expected: String },
    #[error("record {0}: A-coref and B-coref are both true")]
    BothCorefTrue(String),
    #[error("record {id}: unknown pronoun {pronoun:?}")]
    UnknownPronoun { id: String, pronoun: String },
    #[error("fold count must be at least 2 for stratified splitting, got {0}")]
    InvalidFoldCount(usize),
    #[error("record {id} assigned to fold {fold} but k = {k}")]
    FoldOutOfRange { id: String, fold: usize, k: usize },
    #[error("only {have} {gender} records for {k} folds")]
    TooFewRecords { gender: Gender, have: usize, k: usize },
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary is not valid UTF-8")]
    Utf8,
    #[error("duplicate vocabulary token {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("vocabulary is missing special token {0}")]
    MissingSpecialToken(&'static str),
    #[error("character span [{start}, {end}) overlaps no token")]
    NoOverlap { start: usize, end: usize },
    #[error("first segment has {len} tokens but only {budget} fit")]
    FirstSegmentTooLong { len: usize, budget: usize },
    #[error("first segment is empty")]
    EmptyFirstSegment,
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds {max} positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("layer range {start}..={end} invalid for {layers} layers")]
    BadRange { start: usize, end: usize, layers: usize },
    #[error("corrupt embedding file header: {0}")]
    CorruptHeader(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no stored states for example {0:?}")]
    MissingExample(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("record {0}: pronoun not found at its offset")]
    PronounNotFound(String),
    #[error("record {0}: gold answer lies beyond the truncation boundary")]
    AnswerTruncated(String),
    #[error("empty or out-of-range span {start}..={end} for sequence of length {len}")]
    EmptySpan { start: usize, end: usize, len: usize },
    #[error("logistic regression needs at least two distinct labels")]
    DegenerateLabels,
    #[error("features and labels differ in length: {features} vs {labels}")]
    LengthMismatch { features: usize, labels: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and gold id sets differ: {0}")]
    CoverageMismatch(String),
    #[error("no {0} examples to score")]
    EmptyGenderSubset(Gender),
    #[error("probabilities for {id} are not on the simplex: {values:?}")]
    NotSimplex { id: String, values: [f64; 3] },
    #[error("prediction CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("no prediction sets to combine")]
    NoSystems,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch for tensor {name}: {expected:?} vs {found:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("fold {0} has no usable training examples")]
    EmptyFold(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: non-finite loss at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}
