//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, model plumbing, file formats, and training.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation produced a NaN or infinity; names the producing node.
    NonFinite { op: &'static str, node: usize },
    /// A constructor or operation received an invalid shape or argument.
    Invalid { op: &'static str, detail: String },
    /// Token sequence exceeds the configured maximum.
    SequenceTooLong { len: usize, max: usize },
    /// A token id is outside the vocabulary.
    TokenOutOfRange { id: usize, vocab: usize },
    /// A file starts with the wrong magic bytes.
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    /// A file ended before the announced payload was complete.
    Truncated { what: &'static str },
    /// A value read from a file is NaN or infinite.
    NonFiniteInFile { what: String },
    /// A loaded map does not sum to 1; names the offending word.
    Unnormalized { word: String, sum: f64 },
    /// Scene or dataset construction failed.
    BadScene(String),
    /// Vocabulary does not cover the words the generator needs.
    VocabTooSmall { needed: usize, have: usize },
    /// Attention record is empty or inconsistent.
    EmptyRecord,
    /// A layer index is not in the configured subset.
    LayerNotSelected { layer: usize },
    /// Text/patch index sets overlap or fall out of bounds.
    BadIndexMap(String),
    /// Adapter rank exceeds the smaller weight dimension.
    RankTooLarge { rank: usize, max: usize },
    /// Training aborted on a non-finite loss; carries step context.
    NonFiniteLoss { step: usize, l_vlm: f64, l_att: f64 },
    /// Config file or key=value entry could not be parsed.
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { op, node } => {
                write!(f, "{op}: non-finite output at node {node}")
            }
            Error::Invalid { op, detail } => write!(f, "{op}: {detail}"),
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of size {vocab}")
            }
            Error::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            Error::Truncated { what } => write!(f, "truncated file while reading {what}"),
            Error::NonFiniteInFile { what } => write!(f, "non-finite value in file: {what}"),
            Error::Unnormalized { word, sum } => {
                write!(f, "map for word {word:?} sums to {sum}, expected 1")
            }
            Error::BadScene(msg) => write!(f, "bad scene: {msg}"),
            Error::VocabTooSmall { needed, have } => {
                write!(f, "vocabulary too small: need {needed} words, have {have}")
            }
            Error::EmptyRecord => write!(f, "attention record is empty"),
            Error::LayerNotSelected { layer } => {
                write!(f, "layer {layer} is not in the selected subset")
            }
            Error::BadIndexMap(msg) => write!(f, "bad token index map: {msg}"),
            Error::RankTooLarge { rank, max } => {
                write!(f, "adapter rank {rank} exceeds smaller weight dimension {max}")
            }
            Error::NonFiniteLoss { step, l_vlm, l_att } => write!(
                f,
                "non-finite loss at step {step} (l_vlm={l_vlm}, l_att={l_att})"
            ),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
