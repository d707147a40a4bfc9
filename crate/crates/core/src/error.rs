use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Maximum number of differing entries kept in an incompatibility report.
pub const MAX_REPORTED_MISMATCHES: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor `{name}`: shape {shape:?} holds {expected} elements but the buffer has {actual}")]
    ElementCount {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{name}` has rank {rank}; only rank 1 and 2 are supported")]
    UnsupportedRank { name: String, rank: usize },
    #[error("tensor `{name}` has a zero-length dimension in shape {shape:?}")]
    EmptyDimension { name: String, shape: Vec<usize> },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("layer {missing} has no tensors but layer {max} does")]
    LayerGap { missing: usize, max: usize },
    #[error("{}", IncompatibleDisplay(.mismatches, *.total))]
    Incompatible {
        mismatches: Vec<Mismatch>,
        total: usize,
    },
    #[error("non-finite value in `{name}` at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("layer {layer} is out of range for a model with {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("empty subset")]
    EmptySubset,
    #[error("prototype pool is empty")]
    EmptyPool,
    #[error("PCA aggregation needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("degenerate covariance: all centered members are zero")]
    DegenerateCovariance,
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("no candidate prototypes")]
    NoCandidates,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("SVD did not converge for `{name}` ({rows}x{cols}, Frobenius norm {frobenius:e})")]
    SvdFailure {
        name: String,
        rows: usize,
        cols: usize,
        frobenius: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("backdoor planting reached ASR {best:.3} < {target:.2} after {attempts} attempts")]
    PlantingFailed {
        best: f64,
        target: f64,
        attempts: usize,
    },
}

/// One entry of an architecture comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub name: String,
    pub kind: MismatchKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MismatchKind {
    /// Present in the right-hand operand only.
    MissingLeft,
    /// Present in the left-hand operand only.
    MissingRight,
    Shape { left: Vec<usize>, right: Vec<usize> },
    Dtype { left: String, right: String },
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            MismatchKind::MissingLeft => write!(f, "`{}` only in second operand", self.name),
            MismatchKind::MissingRight => write!(f, "`{}` only in first operand", self.name),
            MismatchKind::Shape { left, right } => {
                write!(f, "`{}` shape {:?} vs {:?}", self.name, left, right)
            }
            MismatchKind::Dtype { left, right } => {
                write!(f, "`{}` dtype {} vs {}", self.name, left, right)
            }
        }
    }
}

struct IncompatibleDisplay<'a>(&'a [Mismatch], usize);

impl fmt::Display for IncompatibleDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "architectures differ in {} entries", self.1)?;
        for (i, m) in self.0.iter().enumerate() {
            let sep = if i == 0 { ": " } else { "; " };
            write!(f, "{sep}{m}")?;
        }
        if self.1 > self.0.len() {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}
