use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::address::{AddressResolver, TensorAddress};
use crate::error::{Error, Mismatch, MismatchKind, Result, MAX_REPORTED_MISMATCHES};
use crate::numeric::fnv1a;
use crate::tensor::TensorRecord;

/// An immutable set of named tensors with their addresses.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    records: BTreeMap<String, TensorRecord>,
    addresses: BTreeMap<String, TensorAddress>,
    num_layers: usize,
}

impl Checkpoint {
    /// Builds a checkpoint, resolving every tensor's address with `resolver`.
    pub fn new(records: Vec<TensorRecord>, resolver: &dyn AddressResolver) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut addresses = BTreeMap::new();
        for rec in records {
            let name = rec.name().to_string();
            addresses.insert(name.clone(), resolver.resolve(&name));
            if map.insert(name.clone(), rec).is_some() {
                return Err(Error::DuplicateName(name));
            }
        }
        let num_layers = layer_count(addresses.values())?;
        Ok(Self { records: map, addresses, num_layers })
    }

    pub fn empty() -> Self {
        Self { records: BTreeMap::new(), addresses: BTreeMap::new(), num_layers: 0 }
    }

    /// Returns a copy with the named tensors replaced. Addresses are kept.
    pub fn with_replaced(&self, replacements: Vec<TensorRecord>) -> Result<Self> {
        let mut out = self.clone();
        for rec in replacements {
            let old = out
                .records
                .get(rec.name())
                .ok_or_else(|| Error::MissingTensor(rec.name().to_string()))?;
            let kind = if old.shape() != rec.shape() {
                Some(MismatchKind::Shape { left: old.shape().to_vec(), right: rec.shape().to_vec() })
            } else if old.dtype() != rec.dtype() {
                Some(MismatchKind::Dtype {
                    left: old.dtype().as_str().to_string(),
                    right: rec.dtype().as_str().to_string(),
                })
            } else {
                None
            };
            if let Some(kind) = kind {
                return Err(Error::Incompatible {
                    mismatches: alloc::vec![Mismatch { name: rec.name().to_string(), kind }],
                    total: 1,
                });
            }
            out.records.insert(rec.name().to_string(), rec);
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.get(name)
    }

    pub fn address(&self, name: &str) -> Option<TensorAddress> {
        self.addresses.get(name).copied()
    }

    pub fn addresses(&self) -> &BTreeMap<String, TensorAddress> {
        &self.addresses
    }

    /// Tensors in lexicographic name order.
    pub fn records(&self) -> impl Iterator<Item = &TensorRecord> {
        self.records.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One more than the highest layer index present (0 if no tensor has a layer).
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_elements(&self) -> usize {
        self.records.values().map(TensorRecord::numel).sum()
    }

    pub fn fingerprint(&self) -> ArchFingerprint {
        ArchFingerprint::of(self.records.values().map(|r| (r.name(), r.shape())))
    }
}

/// Checks the layer-contiguity invariant and returns `L`.
pub(crate) fn layer_count<'a>(addresses: impl Iterator<Item = &'a TensorAddress>) -> Result<usize> {
    let mut seen = BTreeMap::new();
    for a in addresses {
        if let Some(l) = a.layer {
            seen.insert(l, ());
        }
    }
    let Some((&max, _)) = seen.last_key_value() else {
        return Ok(0);
    };
    if let Some(missing) = (0..max).find(|l| !seen.contains_key(l)) {
        return Err(Error::LayerGap { missing, max });
    }
    Ok(max + 1)
}

/// Succeeds iff both checkpoints have the same tensor names, shapes and dtypes.
pub fn check_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    compare_entries(
        a.records.values().map(|r| (r.name(), r.shape(), Some(r.dtype().as_str()))),
        b.records.values().map(|r| (r.name(), r.shape(), Some(r.dtype().as_str()))),
    )
}

/// Merge-walks two name-sorted entry lists and collects the differences.
/// A `None` dtype on either side skips the dtype comparison.
pub(crate) fn compare_entries<'a>(
    left: impl Iterator<Item = (&'a str, &'a [usize], Option<&'static str>)>,
    right: impl Iterator<Item = (&'a str, &'a [usize], Option<&'static str>)>,
) -> Result<()> {
    let mut mismatches = Vec::new();
    let mut total = 0usize;
    let mut push = |m: Mismatch| {
        total += 1;
        if mismatches.len() < MAX_REPORTED_MISMATCHES {
            mismatches.push(m);
        }
    };
    let mut l = left.peekable();
    let mut r = right.peekable();
    loop {
        match (l.peek(), r.peek()) {
            (None, None) => break,
            (Some(&(name, ..)), None) => {
                push(Mismatch { name: name.to_string(), kind: MismatchKind::MissingRight });
                l.next();
            }
            (None, Some(&(name, ..))) => {
                push(Mismatch { name: name.to_string(), kind: MismatchKind::MissingLeft });
                r.next();
            }
            (Some(&(ln, ls, ld)), Some(&(rn, rs, rd))) => {
                if ln < rn {
                    push(Mismatch { name: ln.to_string(), kind: MismatchKind::MissingRight });
                    l.next();
                } else if rn < ln {
                    push(Mismatch { name: rn.to_string(), kind: MismatchKind::MissingLeft });
                    r.next();
                } else {
                    if ls != rs {
                        push(Mismatch {
                            name: ln.to_string(),
                            kind: MismatchKind::Shape { left: ls.to_vec(), right: rs.to_vec() },
                        });
                    } else if let (Some(ld), Some(rd)) = (ld, rd) {
                        if ld != rd {
                            push(Mismatch {
                                name: ln.to_string(),
                                kind: MismatchKind::Dtype { left: ld.to_string(), right: rd.to_string() },
                            });
                        }
                    }
                    l.next();
                    r.next();
                }
            }
        }
    }
    if total == 0 {
        Ok(())
    } else {
        Err(Error::Incompatible { mismatches, total })
    }
}

/// FNV-1a hash of the sorted `name:shape` list of an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchFingerprint(pub u64);

impl ArchFingerprint {
    pub fn of<'a>(entries: impl Iterator<Item = (&'a str, &'a [usize])>) -> Self {
        let mut buf = String::new();
        for (name, shape) in entries {
            buf.push_str(name);
            buf.push(':');
            for (i, d) in shape.iter().enumerate() {
                if i > 0 {
                    buf.push('x');
                }
                buf.push_str(&d.to_string());
            }
            buf.push(';');
        }
        ArchFingerprint(fnv1a(buf.as_bytes()))
    }
}

impl fmt::Display for ArchFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}
