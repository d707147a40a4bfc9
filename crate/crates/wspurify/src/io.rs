//! Files and directories: checkpoints, deltas, prototypes, pools and JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use wspurify_core::prototype::{AggregationMethod, PoolEntry, PrototypePool, Prototype};
use wspurify_core::{AddressResolver, Checkpoint, DeltaMap, Dtype, SourceKind, TensorRecord};

use crate::container::{self, Container, RawTensor};
use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    container::decode(&read_bytes(path)?).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::json(path, e))
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    let tensors: Vec<RawTensor> = ck
        .records()
        .map(|r| RawTensor { name: r.name().to_string(), dtype: r.dtype(), shape: r.shape().to_vec(), values: r.data().to_vec() })
        .collect();
    container::encode(&tensors, &BTreeMap::new())
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ck))
}

pub fn load_checkpoint(path: &Path, resolver: &dyn AddressResolver) -> Result<Checkpoint> {
    let c = read_container(path)?;
    let records = c
        .tensors
        .into_iter()
        .map(|t| TensorRecord::new(t.name, t.shape, t.dtype, t.values))
        .collect::<wspurify_core::Result<Vec<_>>>()?;
    Ok(Checkpoint::new(records, resolver)?)
}

fn delta_tensors(d: &DeltaMap) -> Vec<RawTensor> {
    d.iter()
        .map(|(n, e)| RawTensor { name: n.to_string(), dtype: Dtype::F64, shape: e.shape().to_vec(), values: e.values().to_vec() })
        .collect()
}

fn delta_from(path: &Path, c: Container, resolver: &dyn AddressResolver) -> Result<(DeltaMap, BTreeMap<String, String>)> {
    let kind = c.metadata.get("kind").map(String::as_str).unwrap_or("task_vector");
    let kind = SourceKind::parse(kind)
        .ok_or_else(|| Error::Invalid { path: path.to_path_buf(), what: format!("unknown delta kind `{kind}`") })?;
    let entries = c.tensors.into_iter().map(|t| (t.name, t.shape, t.values)).collect();
    Ok((DeltaMap::new(entries, resolver, kind)?, c.metadata))
}

/// Deltas are stored in `F64` with their kind in the container metadata.
pub fn save_delta(d: &DeltaMap, path: &Path) -> Result<()> {
    let meta = BTreeMap::from([("kind".to_string(), d.kind().as_str().to_string())]);
    write_atomic(path, &container::encode(&delta_tensors(d), &meta))
}

pub fn load_delta(path: &Path, resolver: &dyn AddressResolver) -> Result<DeltaMap> {
    Ok(delta_from(path, read_container(path)?, resolver)?.0)
}

pub fn save_prototype(p: &Prototype, path: &Path) -> Result<()> {
    let ids: Vec<String> = p.member_ids.iter().map(usize::to_string).collect();
    let meta = BTreeMap::from([
        ("kind".to_string(), SourceKind::Prototype.as_str().to_string()),
        ("method".to_string(), p.method.as_str().to_string()),
        ("subset_key".to_string(), p.subset_key.clone()),
        ("member_ids".to_string(), ids.join(",")),
    ]);
    write_atomic(path, &container::encode(&delta_tensors(&p.vector), &meta))
}

pub fn load_prototype(path: &Path, resolver: &dyn AddressResolver) -> Result<Prototype> {
    let (vector, meta) = delta_from(path, read_container(path)?, resolver)?;
    let invalid = |what: String| Error::Invalid { path: path.to_path_buf(), what };
    let method = meta.get("method").map(String::as_str).unwrap_or("am");
    let method = AggregationMethod::parse(method).ok_or_else(|| invalid(format!("unknown method `{method}`")))?;
    let member_ids = match meta.get("member_ids").map(String::as_str) {
        None | Some("") => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|x| x.parse().map_err(|_| invalid(format!("bad member id `{x}`"))))
            .collect::<Result<_>>()?,
    };
    let subset_key = meta.get("subset_key").cloned().unwrap_or_default();
    Ok(Prototype { vector: vector.with_kind(SourceKind::Prototype), method, member_ids, subset_key })
}

pub const POOL_INDEX: &str = "pool.json";

/// One row of `pool.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: usize,
    /// Relative to the pool directory.
    pub file: PathBuf,
    pub dataset_id: String,
    pub attack_id: String,
    pub trigger_type: String,
    pub norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backdoored: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolIndex {
    pub version: u32,
    /// Architecture fingerprint shared by all vectors.
    pub arch: String,
    pub entries: Vec<PoolRecord>,
}

/// Where a pool vector came from, recorded in the index.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub backdoored: Option<PathBuf>,
    pub clean: Option<PathBuf>,
}

/// Writes a pool directory. The directory is assembled next to `dir` and
/// swapped in with renames, so an existing pool is replaced whole.
pub fn save_pool(pool: &PrototypePool, provenance: &[Provenance], dir: &Path) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new().prefix(".pool-").tempdir_in(&parent).map_err(|e| Error::io(&parent, e))?;
    let mut entries = Vec::with_capacity(pool.len());
    for (id, e) in pool.entries().iter().enumerate() {
        let file = PathBuf::from("vectors").join(format!("{id:04}.ckpt"));
        save_delta(&e.vector, &staging.path().join(&file))?;
        let prov = provenance.get(id).cloned().unwrap_or_default();
        entries.push(PoolRecord {
            id,
            file,
            dataset_id: e.dataset_id.clone(),
            attack_id: e.attack_id.clone(),
            trigger_type: e.trigger_type.clone(),
            norm: e.vector.norm(),
            backdoored: prov.backdoored,
            clean: prov.clean,
        });
    }
    let index = PoolIndex { version: 1, arch: pool.reference_arch().to_string(), entries };
    write_json(&staging.path().join(POOL_INDEX), &index)?;

    let staged = staging.keep();
    let old = if dir.exists() {
        let old = parent.join(format!(".pool-old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        Some(old)
    } else {
        None
    };
    fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))?;
    if let Some(old) = old {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn load_pool(dir: &Path, resolver: &dyn AddressResolver) -> Result<PrototypePool> {
    let index: PoolIndex = read_json(&dir.join(POOL_INDEX))?;
    let entries = index
        .entries
        .iter()
        .map(|r| {
            let v = load_delta(&dir.join(&r.file), resolver)?;
            Ok(PoolEntry::new(v, r.dataset_id.clone(), r.attack_id.clone(), r.trigger_type.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypePool::new(entries)?)
}
