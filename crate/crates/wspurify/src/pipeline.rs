//! The full purification run and its report.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use wspurify_core::prototype::{build_candidates, match_prototype, CandidateSet, MatchResult, PoolEntry, PrototypePool};
use wspurify_core::purifier::{assemble, check_inputs, plan, purify_tensor};
use wspurify_core::{
    alignment_profile, check_compatible, delta, AddressResolver, AlignmentProfile, Checkpoint, PurificationConfig,
    PurificationReport, SourceKind,
};

use crate::config::ResolvedConfig;
use crate::error::{Error, Result};
use crate::io::{self, Provenance};

pub const REPORT_VERSION: u32 = 1;

/// A backdoored/clean checkpoint pair with its scenario tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub backdoored: PathBuf,
    pub clean: PathBuf,
    pub dataset_id: String,
    pub attack_id: String,
    pub trigger_type: String,
}

/// Loads every pair and forms `v = M_b − M_c`. All failing pairs are
/// reported together.
pub fn build_pool(pairs: &[PairSpec], resolver: &dyn AddressResolver) -> Result<(PrototypePool, Vec<Provenance>)> {
    if pairs.is_empty() {
        return Err(wspurify_core::Error::EmptyPool.into());
    }
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for p in pairs {
        let vector = (|| -> Result<_> {
            let b = io::load_checkpoint(&p.backdoored, resolver)?;
            let c = io::load_checkpoint(&p.clean, resolver)?;
            Ok(delta(&b, &c, SourceKind::BackdoorVector)?)
        })();
        match vector {
            Ok(v) => entries.push(PoolEntry::new(v, &p.dataset_id, &p.attack_id, &p.trigger_type)),
            Err(e) => failures.push(format!("{} vs {}: {e}", p.backdoored.display(), p.clean.display())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Pairs(failures));
    }
    // Pairs must also agree with each other.
    let pool = PrototypePool::new(entries).map_err(|e| Error::Pairs(vec![format!("pool: {e}")]))?;
    let prov = pairs.iter().map(|p| Provenance { backdoored: Some(p.backdoored.clone()), clean: Some(p.clean.clone()) }).collect();
    Ok((pool, prov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub subset_key: String,
    pub method: String,
    pub member_ids: Vec<usize>,
    pub norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub index: usize,
    pub subset_key: String,
    pub score: f64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    /// 0-indexed first purified layer.
    pub layer: usize,
    pub layer_one_indexed: usize,
    /// `detected` or `override`.
    pub source: String,
    /// What detection found, whether or not it was used.
    pub detected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub suspect: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub num_layers: usize,
    pub tensors: usize,
}

/// Everything a `purify` run decided, written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: u32,
    pub config: ResolvedConfig,
    pub inputs: Inputs,
    pub candidates: Vec<CandidateSummary>,
    pub aggregation_failures: Vec<(String, String)>,
    #[serde(rename = "match")]
    pub matched: MatchSummary,
    pub profile: AlignmentProfile,
    pub boundary: BoundarySummary,
    pub purification: PurificationReport,
}

/// Prototype candidates for `cfg`, with their match scores when a suspect
/// delta is supplied.
pub fn candidates(pool: &PrototypePool, cfg: &ResolvedConfig) -> Result<CandidateSet> {
    let v = &cfg.values;
    let set = build_candidates(pool, v.group_by, v.method, &v.pca(), &v.filter)?;
    if set.prototypes.is_empty() {
        if let Some((_, e)) = set.failures.first() {
            return Err(e.clone().into());
        }
        return Err(wspurify_core::Error::NoCandidates.into());
    }
    Ok(set)
}

pub fn summarize(set: &CandidateSet, m: Option<&MatchResult>) -> Vec<CandidateSummary> {
    set.prototypes
        .iter()
        .enumerate()
        .map(|(i, p)| CandidateSummary {
            subset_key: p.subset_key.clone(),
            method: p.method.as_str().to_string(),
            member_ids: p.member_ids.clone(),
            norm: p.vector.norm(),
            score: m.map(|m| m.scores[i]),
        })
        .collect()
}

/// Purifies every in-scope matrix in parallel. Output is identical to
/// [`wspurify_core::purify_checkpoint`].
pub fn purify_parallel(
    suspect: &Checkpoint,
    base: &Checkpoint,
    prototype: &wspurify_core::DeltaMap,
    cfg: &PurificationConfig,
) -> Result<(Checkpoint, PurificationReport)> {
    check_inputs(suspect, base, prototype, cfg)?;
    let results = plan(suspect, cfg)
        .par_iter()
        .map(|name| purify_tensor(suspect, base, prototype, name, cfg))
        .collect::<wspurify_core::Result<Vec<_>>>()?;
    Ok(assemble(suspect, cfg, results)?)
}

pub struct Outcome {
    pub checkpoint: Checkpoint,
    pub report: PipelineReport,
}

/// Aggregate, match, profile, detect and purify.
pub fn run(
    suspect: &Checkpoint,
    base: &Checkpoint,
    pool: &PrototypePool,
    cfg: &ResolvedConfig,
    inputs: Inputs,
) -> Result<Outcome> {
    let v = &cfg.values;
    check_compatible(suspect, base)?;
    let w = delta(suspect, base, SourceKind::SuspectDelta)?;
    let set = candidates(pool, cfg)?;
    let m = match_prototype(&set.prototypes, &w, v.match_roles)?;
    let proto = &set.prototypes[m.index];
    let profile = alignment_profile(&w, &proto.vector, &v.boundary())?;
    let detected = profile.boundary;
    let (layer, source) = match (v.boundary_override, detected) {
        (Some(l), _) => (l, "override"),
        (None, Some(l)) => (l, "detected"),
        (None, None) => return Err(Error::NoBoundary { scores: profile.scores.clone() }),
    };
    let (checkpoint, purification) = purify_parallel(suspect, base, &proto.vector, &v.purification(layer))?;
    let report = PipelineReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        inputs,
        candidates: summarize(&set, Some(&m)),
        aggregation_failures: set.failures.iter().map(|(k, e)| (k.clone(), e.to_string())).collect(),
        matched: MatchSummary {
            index: m.index,
            subset_key: proto.subset_key.clone(),
            score: m.score,
            low_confidence: m.low_confidence,
        },
        profile,
        boundary: BoundarySummary { layer, layer_one_indexed: layer + 1, source: source.to_string(), detected },
        purification,
    };
    Ok(Outcome { checkpoint, report })
}
