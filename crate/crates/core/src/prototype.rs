//! Backdoor-vector pool, prototype aggregation and prototype matching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::address::RoleSet;
use crate::checkpoint::ArchFingerprint;
use crate::error::{Error, Result};
use crate::numeric;
use crate::vecspace::{cosine, flatten, flatten_roles, unflatten, DeltaMap, SourceKind, ZERO_NORM};

/// Match scores below this raise a low-confidence warning.
pub const LOW_CONFIDENCE_SCORE: f64 = 0.05;

/// Seed for the power-iteration starting vector.
const PCA_INIT_SEED: u64 = 0x5eed_0f_9ca;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub vector: DeltaMap,
    pub dataset_id: String,
    pub attack_id: String,
    pub trigger_type: String,
}

impl PoolEntry {
    pub fn new(
        vector: DeltaMap,
        dataset_id: impl Into<String>,
        attack_id: impl Into<String>,
        trigger_type: impl Into<String>,
    ) -> Self {
        Self {
            vector: vector.with_kind(SourceKind::BackdoorVector),
            dataset_id: dataset_id.into(),
            attack_id: attack_id.into(),
            trigger_type: trigger_type.into(),
        }
    }

    fn key(&self, group_by: GroupBy) -> &str {
        match group_by {
            GroupBy::DatasetId => &self.dataset_id,
            GroupBy::AttackId => &self.attack_id,
            GroupBy::TriggerType => &self.trigger_type,
            GroupBy::All => "all",
        }
    }
}

/// A frozen, non-empty pool of backdoor vectors sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePool {
    entries: Vec<PoolEntry>,
    reference_arch: ArchFingerprint,
}

impl PrototypePool {
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyPool)?;
        for e in &entries[1..] {
            first.vector.check_same_arch(&e.vector)?;
        }
        let reference_arch = first.vector.fingerprint();
        Ok(Self { entries, reference_arch })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reference_arch(&self) -> ArchFingerprint {
        self.reference_arch
    }

    /// Indices of entries passing `filter`, in pool order.
    pub fn select(&self, filter: &PoolFilter) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| filter.accepts(&self.entries[i])).collect()
    }

    /// Aggregates the entries at `ids` into a prototype.
    pub fn aggregate(
        &self,
        ids: &[usize],
        subset_key: &str,
        method: AggregationMethod,
        pca: &PcaOptions,
    ) -> Result<Prototype> {
        let members: Vec<&DeltaMap> = ids.iter().map(|&i| &self.entries[i].vector).collect();
        let vector = match method {
            AggregationMethod::Am => aggregate_am(&members)?,
            AggregationMethod::Pca => aggregate_pca(&members, pca)?.prototype,
        };
        Ok(Prototype { vector, method, member_ids: ids.to_vec(), subset_key: subset_key.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMethod {
    #[default]
    Am,
    Pca,
}

impl AggregationMethod {
    pub const fn as_str(self) -> &'static str {
        match self {
            AggregationMethod::Am => "am",
            AggregationMethod::Pca => "pca",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "am" => Some(Self::Am),
            "pca" => Some(Self::Pca),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    DatasetId,
    AttackId,
    TriggerType,
    All,
}

impl GroupBy {
    pub const fn as_str(self) -> &'static str {
        match self {
            GroupBy::DatasetId => "dataset_id",
            GroupBy::AttackId => "attack_id",
            GroupBy::TriggerType => "trigger_type",
            GroupBy::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::DatasetId, Self::AttackId, Self::TriggerType, Self::All]
            .into_iter()
            .find(|g| g.as_str() == s)
    }
}

/// Restricts a pool to entries with known scenario tags (attack-aware or
/// task-aware subsetting). `None` accepts everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_ids: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_ids: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_types: Option<BTreeSet<String>>,
}

impl PoolFilter {
    pub fn accepts(&self, e: &PoolEntry) -> bool {
        let ok = |set: &Option<BTreeSet<String>>, v: &str| set.as_ref().is_none_or(|s| s.contains(v));
        ok(&self.dataset_ids, &e.dataset_id)
            && ok(&self.attack_ids, &e.attack_id)
            && ok(&self.trigger_types, &e.trigger_type)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: DeltaMap,
    pub method: AggregationMethod,
    pub member_ids: Vec<usize>,
    pub subset_key: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaOptions {
    /// Stop when `‖u_{t+1} − u_t‖ < tol`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaOutcome {
    pub prototype: DeltaMap,
    /// Unit first principal component, flattened.
    pub direction: Vec<f64>,
    /// Top eigenvalue of the covariance operator.
    pub eigenvalue: f64,
    pub mean_norm: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Entry-wise arithmetic mean.
///
/// Each coordinate's member values are sorted before the pairwise sum, so the
/// result is bit-for-bit independent of member order.
pub fn aggregate_am(subset: &[&DeltaMap]) -> Result<DeltaMap> {
    let first = *subset.first().ok_or(Error::EmptySubset)?;
    for m in &subset[1..] {
        first.check_same_arch(m)?;
    }
    let flats: Vec<_> = subset.iter().map(|m| flatten(m)).collect();
    let mean = elementwise_mean(&flats);
    unflatten(&mean, first, SourceKind::Prototype)
}

fn elementwise_mean<T: AsRef<[f64]>>(flats: &[T]) -> Vec<f64> {
    let dim = flats[0].as_ref().len();
    let mut column = vec![0.0; flats.len()];
    (0..dim)
        .map(|j| {
            for (c, f) in column.iter_mut().zip(flats) {
                *c = f.as_ref()[j];
            }
            numeric::order_free_mean(&mut column)
        })
        .collect()
}

/// First principal component of the centered members, found by power
/// iteration on the covariance operator `Σu = mean(v̄ (v̄·u))` without
/// forming `Σ`, then scaled to the mean ℓ2-norm of the uncentered members.
///
/// Sign: the component is oriented to have a non-negative dot product with
/// the members' arithmetic mean; when that mean is (numerically) orthogonal
/// or zero, the first nonzero coordinate is made positive.
pub fn aggregate_pca(subset: &[&DeltaMap], opts: &PcaOptions) -> Result<PcaOutcome> {
    if subset.len() < 2 {
        return Err(if subset.is_empty() { Error::EmptySubset } else { Error::TooFewMembers(subset.len()) });
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig("PCA tolerance must be positive".to_string()));
    }
    let first = subset[0];
    for m in &subset[1..] {
        first.check_same_arch(m)?;
    }
    let flats: Vec<Vec<f64>> = subset.iter().map(|m| flatten(m).into_vec()).collect();
    let n = flats.len() as f64;
    let am = elementwise_mean(&flats);
    let centered: Vec<Vec<f64>> =
        flats.iter().map(|f| f.iter().zip(&am).map(|(v, m)| v - m).collect()).collect();

    let norms: Vec<f64> = flats.iter().map(|f| numeric::norm(f)).collect();
    let mean_norm = numeric::pairwise_sum(&norms) / n;
    let centered_sq: Vec<f64> = centered.iter().map(|c| numeric::dot(c, c)).collect();
    let centered_total = libm::sqrt(numeric::pairwise_sum(&centered_sq));
    let member_total = libm::sqrt(norms.iter().map(|x| x * x).sum::<f64>());
    if centered_total == 0.0 || centered_total <= ZERO_NORM * member_total {
        return Err(Error::DegenerateCovariance);
    }

    let apply = |u: &[f64]| -> Vec<f64> {
        let coef: Vec<f64> = centered.iter().map(|c| numeric::dot(c, u) / n).collect();
        combine(&centered, &coef)
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(PCA_INIT_SEED);
    let weights: Vec<f64> = (0..centered.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut u = combine(&centered, &weights);
    let mut nu = numeric::norm(&u);
    if nu < ZERO_NORM * centered_total {
        let (k, _) = centered_sq
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        u = centered[k].clone();
        nu = numeric::norm(&u);
    }
    u.iter_mut().for_each(|x| *x /= nu);

    let mut residual = f64::INFINITY;
    let mut eigenvalue = 0.0;
    let mut converged_at = None;
    for it in 1..=opts.max_iters {
        let y = apply(&u);
        let ny = numeric::norm(&y);
        if ny == 0.0 {
            return Err(Error::DegenerateCovariance);
        }
        let next: Vec<f64> = y.iter().map(|v| v / ny).collect();
        let diff: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
        residual = numeric::norm(&diff);
        eigenvalue = ny;
        u = next;
        if residual < opts.tol {
            converged_at = Some(it);
            break;
        }
    }
    let iterations = converged_at.ok_or(Error::NoConvergence { iterations: opts.max_iters, residual })?;

    orient(&mut u, &am);
    let scaled: Vec<f64> = u.iter().map(|v| v * mean_norm).collect();
    let prototype = unflatten(&scaled, first, SourceKind::Prototype)?;
    Ok(PcaOutcome { prototype, direction: u, eigenvalue, mean_norm, iterations, residual })
}

/// `Σ_i coef_i · rows_i`, pairwise-summed per coordinate.
fn combine(rows: &[Vec<f64>], coef: &[f64]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut terms = vec![0.0; rows.len()];
    (0..dim)
        .map(|j| {
            for ((t, r), c) in terms.iter_mut().zip(rows).zip(coef) {
                *t = c * r[j];
            }
            numeric::pairwise_sum(&terms)
        })
        .collect()
}

fn orient(u: &mut [f64], am: &[f64]) {
    let c = cosine(u, am).unwrap_or(0.0);
    let flip = if c.abs() > ZERO_NORM {
        c < 0.0
    } else {
        u.iter().find(|v| v.abs() > 0.0).is_some_and(|v| *v < 0.0)
    };
    if flip {
        u.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Prototypes built per group, plus the groups whose aggregation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub prototypes: Vec<Prototype>,
    pub failures: Vec<(String, Error)>,
}

/// One prototype per non-empty group of the (filtered) pool, in
/// lexicographic key order. A failing group is recorded and skipped.
pub fn build_candidates(
    pool: &PrototypePool,
    group_by: GroupBy,
    method: AggregationMethod,
    pca: &PcaOptions,
    filter: &PoolFilter,
) -> Result<CandidateSet> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in pool.select(filter) {
        groups.entry(pool.entries[i].key(group_by)).or_default().push(i);
    }
    let mut set = CandidateSet { prototypes: Vec::new(), failures: Vec::new() };
    for (key, ids) in groups {
        match pool.aggregate(&ids, key, method, pca) {
            Ok(p) => set.prototypes.push(p),
            Err(e) => {
                log::warn!("group `{key}`: aggregation failed: {e}");
                set.failures.push((key.to_string(), e));
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub index: usize,
    pub score: f64,
    pub scores: Vec<f64>,
    pub low_confidence: bool,
}

/// Picks the candidate with the highest cosine similarity to the suspect
/// delta over the tensors whose role is in `roles`. Ties go to the lowest
/// index.
pub fn match_prototype(candidates: &[Prototype], suspect: &DeltaMap, roles: RoleSet) -> Result<MatchResult> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let w = flatten_roles(suspect, roles);
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        suspect.check_same_arch(&c.vector)?;
        scores.push(cosine(&w, &flatten_roles(&c.vector, roles))?);
    }
    let mut index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[index] {
            index = i;
        }
    }
    let score = scores[index];
    let low_confidence = score < LOW_CONFIDENCE_SCORE;
    if low_confidence {
        log::warn!("best prototype match score {score:.4} is below {LOW_CONFIDENCE_SCORE}");
    }
    Ok(MatchResult { index, score, scores, low_confidence })
}
