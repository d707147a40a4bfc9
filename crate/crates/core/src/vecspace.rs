//! Structured parameter deltas (task vectors, backdoor vectors, prototypes)
//! and the vector operations the pipeline runs on them.
//!
//! Flattening order is fixed: tensors in lexicographic name order, each
//! tensor row-major. The same order is used for pool construction, matching
//! and layer slicing, so cosine similarities are comparable everywhere.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::address::{AddressResolver, RoleSet, TensorAddress};
use crate::checkpoint::{check_compatible, compare_entries, layer_count, ArchFingerprint, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::numeric;
use crate::tensor::validate_shape;

/// Norms below this are treated as zero by [`cosine`].
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    TaskVector,
    BackdoorVector,
    SuspectDelta,
    Prototype,
}

impl SourceKind {
    pub const fn as_str(self) -> &'static str {
        match self {
            SourceKind::TaskVector => "task_vector",
            SourceKind::BackdoorVector => "backdoor_vector",
            SourceKind::SuspectDelta => "suspect_delta",
            SourceKind::Prototype => "prototype",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::TaskVector, Self::BackdoorVector, Self::SuspectDelta, Self::Prototype]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DeltaEntry {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn to_matrix(&self) -> Matrix {
        match self.shape.as_slice() {
            [n] => Matrix::from_row_major(1, *n, self.values.clone()),
            [r, c] => Matrix::from_row_major(*r, *c, self.values.clone()),
            _ => unreachable!("rank validated at construction"),
        }
    }
}

/// A finite-valued parameter difference mirroring a reference architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMap {
    entries: BTreeMap<String, DeltaEntry>,
    addresses: BTreeMap<String, TensorAddress>,
    num_layers: usize,
    kind: SourceKind,
}

impl DeltaMap {
    pub fn new(
        entries: Vec<(String, Vec<usize>, Vec<f64>)>,
        resolver: &dyn AddressResolver,
        kind: SourceKind,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut addresses = BTreeMap::new();
        for (name, shape, values) in entries {
            validate_shape(&name, &shape, values.len())?;
            check_finite(&name, &values)?;
            addresses.insert(name.clone(), resolver.resolve(&name));
            if map.insert(name.clone(), DeltaEntry { shape, values }).is_some() {
                return Err(Error::DuplicateName(name));
            }
        }
        let num_layers = layer_count(addresses.values())?;
        Ok(Self { entries: map, addresses, num_layers, kind })
    }

    /// Rebuilds a map with the same architecture and new per-tensor values.
    fn with_values(&self, kind: SourceKind, mut f: impl FnMut(&str, &DeltaEntry) -> Vec<f64>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, e) in &self.entries {
            let values = f(name, e);
            debug_assert_eq!(values.len(), e.values.len());
            check_finite(name, &values)?;
            entries.insert(name.clone(), DeltaEntry { shape: e.shape.clone(), values });
        }
        Ok(Self { entries, addresses: self.addresses.clone(), num_layers: self.num_layers, kind })
    }

    pub fn zeros_like(&self, kind: SourceKind) -> Self {
        self.with_values(kind, |_, e| alloc::vec![0.0; e.values.len()]).expect("zeros are finite")
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: SourceKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn get(&self, name: &str) -> Option<&DeltaEntry> {
        self.entries.get(name)
    }

    pub fn matrix(&self, name: &str) -> Option<Matrix> {
        self.entries.get(name).map(DeltaEntry::to_matrix)
    }

    pub fn address(&self, name: &str) -> Option<TensorAddress> {
        self.addresses.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DeltaEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.values.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        numeric::norm(&flatten(self))
    }

    pub fn fingerprint(&self) -> ArchFingerprint {
        ArchFingerprint::of(self.entries.iter().map(|(n, e)| (n.as_str(), e.shape.as_slice())))
    }

    /// Names and shapes must match exactly.
    pub fn check_same_arch(&self, other: &DeltaMap) -> Result<()> {
        compare_entries(self.shape_entries(), other.shape_entries())
    }

    /// Names and shapes must match the checkpoint (dtype is not compared).
    pub fn check_matches(&self, ck: &Checkpoint) -> Result<()> {
        compare_entries(self.shape_entries(), ck.records().map(|r| (r.name(), r.shape(), None)))
    }

    fn shape_entries(&self) -> impl Iterator<Item = (&str, &[usize], Option<&'static str>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e.shape.as_slice(), None))
    }

    pub fn add(&self, other: &DeltaMap) -> Result<DeltaMap> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DeltaMap) -> Result<DeltaMap> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &DeltaMap, op: impl Fn(f64, f64) -> f64) -> Result<DeltaMap> {
        self.check_same_arch(other)?;
        self.with_values(self.kind, |name, e| {
            let o = &other.entries[name].values;
            e.values.iter().zip(o).map(|(a, b)| op(*a, *b)).collect()
        })
    }

    pub fn scale(&self, s: f64) -> Result<DeltaMap> {
        self.with_values(self.kind, |_, e| e.values.iter().map(|v| v * s).collect())
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { name: name.to_string(), index }),
        None => Ok(()),
    }
}

/// Entry-wise `a − b` over two architecture-compatible checkpoints.
pub fn delta(a: &Checkpoint, b: &Checkpoint, kind: SourceKind) -> Result<DeltaMap> {
    check_compatible(a, b)?;
    let mut entries = BTreeMap::new();
    for ra in a.records() {
        let rb = b.get(ra.name()).expect("compatible checkpoints share names");
        let values: Vec<f64> = ra.data().iter().zip(rb.data()).map(|(x, y)| x - y).collect();
        check_finite(ra.name(), &values)?;
        entries.insert(ra.name().to_string(), DeltaEntry { shape: ra.shape().to_vec(), values });
    }
    Ok(DeltaMap {
        entries,
        addresses: a.addresses().clone(),
        num_layers: a.num_layers(),
        kind,
    })
}

/// A flattened delta.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatView {
    values: Vec<f64>,
}

impl FlatView {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

impl AsRef<[f64]> for FlatView {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

impl Deref for FlatView {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

pub fn flatten(d: &DeltaMap) -> FlatView {
    flatten_roles(d, RoleSet::ALL)
}

/// Flattens only the tensors whose role is in `roles`.
pub fn flatten_roles(d: &DeltaMap, roles: RoleSet) -> FlatView {
    let mut values = Vec::new();
    for (name, e) in &d.entries {
        if roles.contains(d.addresses[name].role) {
            values.extend_from_slice(&e.values);
        }
    }
    FlatView { values }
}

/// Inverse of [`flatten`] for the architecture of `template`.
pub fn unflatten(flat: &[f64], template: &DeltaMap, kind: SourceKind) -> Result<DeltaMap> {
    let total = template.num_elements();
    if flat.len() != total {
        return Err(Error::LengthMismatch { left: flat.len(), right: total });
    }
    let mut offset = 0;
    template.with_values(kind, |_, e| {
        let n = e.values.len();
        let v = flat[offset..offset + n].to_vec();
        offset += n;
        v
    })
}

/// Cosine similarity in `[-1, 1]`; 0 when either norm is below [`ZERO_NORM`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch { left: u.len(), right: v.len() });
    }
    let nu = numeric::norm(u);
    let nv = numeric::norm(v);
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((numeric::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Concatenation of all tensors at `layer` whose role is in `roles`.
///
/// An empty result is not an error; it is logged and callers treat the
/// slice as carrying no signal.
pub fn layer_slice(d: &DeltaMap, layer: usize, roles: RoleSet) -> Result<FlatView> {
    if layer >= d.num_layers {
        return Err(Error::LayerOutOfRange { layer, num_layers: d.num_layers });
    }
    let mut values = Vec::new();
    for (name, e) in &d.entries {
        let addr = d.addresses[name];
        if addr.layer == Some(layer) && roles.contains(addr.role) {
            values.extend_from_slice(&e.values);
        }
    }
    if values.is_empty() {
        log::warn!("layer {layer}: no tensors match roles {roles:?}");
    }
    Ok(FlatView { values })
}
