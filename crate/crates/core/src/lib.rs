//! Weight-space backdoor purification.
//!
//! The crate works on checkpoints as named tensor maps and implements the
//! full purification pipeline without touching the filesystem:
//!
//! 1. [`vecspace`]: task vectors and backdoor vectors as structured deltas
//!    between checkpoints, with a fixed flattening order and cosine similarity.
//! 2. [`prototype`]: a pool of backdoor vectors, aggregated into candidate
//!    prototypes (arithmetic mean or norm-calibrated first principal
//!    component) and matched against a suspect delta.
//! 3. [`boundary`]: layer-wise alignment between suspect and prototype, and
//!    detection of the layer where that alignment jumps.
//! 4. [`purifier`]: per-matrix SVD of the suspect delta, scoring of each
//!    rank-1 component against the prototype, adaptive selection and
//!    attenuation of the aligned components.
//! 5. [`simlab`]: synthetic clean/backdoored checkpoint pairs with a planted,
//!    known backdoor and a toy forward pass for ASR/CDA measurement.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the regex
//! address table and the CLI live in the `wspurify` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod address;
pub mod boundary;
pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod numeric;
pub mod prototype;
pub mod purifier;
pub mod simlab;
pub mod tensor;
pub mod vecspace;

pub use address::{AddressResolver, Block, Role, RoleSet, SchemeResolver, TensorAddress};
pub use boundary::{alignment_profile, detect_boundary, AlignmentProfile, BoundaryConfig};
pub use checkpoint::{check_compatible, ArchFingerprint, Checkpoint};
pub use error::{Error, Mismatch, MismatchKind, Result};
pub use linalg::Matrix;
pub use prototype::{
    aggregate_am, aggregate_pca, build_candidates, match_prototype, AggregationMethod,
    CandidateSet, GroupBy, MatchResult, PcaOptions, PoolEntry, PoolFilter, Prototype,
    PrototypePool,
};
pub use purifier::{
    backdoor_signal, decompose, purify_checkpoint, purify_matrix, select_components,
    signal_report, MatrixDecomposition, MatrixReport, PurificationConfig, PurificationReport,
    SignalTable,
};
pub use tensor::{Dtype, TensorRecord};
pub use vecspace::{cosine, delta, flatten, layer_slice, unflatten, DeltaMap, FlatView, SourceKind};
