//! Synthetic clean/backdoored checkpoint pairs with a known, planted
//! backdoor, plus a toy forward pass to measure attack success rate (ASR)
//! and clean accuracy (CDA).
//!
//! A clean model is `base + benign_scale · T_dataset + noise_scale · N`,
//! where `T_dataset` is a unit-Frobenius direction per tensor shared by every
//! scenario on the same dataset and `N` is unit-Frobenius noise per scenario.
//! The backdoored model adds `β · o tᵀ` to every MLP matrix of the backdoor
//! layers, where `t` is the direction the trigger moves the hidden state at
//! that layer and `o` is the target class's head row. Both are measured on the
//! clean model, so the difference between the pair is the backdoor alone.

mod model;
mod task;

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::address::{Role, RoleSet, SchemeResolver};
use crate::checkpoint::{check_compatible, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::numeric;
use crate::purifier::decompose;
use crate::tensor::{Dtype, TensorRecord};

pub use model::{argmax, tensor_name, ToyModel, LAYER_ROLES};
pub use task::{evaluate, Metrics, TaskShape, ToyTask};

/// ASR a planted backdoor must reach.
pub const TARGET_ASR: f64 = 0.95;
pub const MAX_PLANT_ATTEMPTS: usize = 5;
/// Backdoor scale multiplier between planting attempts.
const SCALE_GROWTH: f64 = 1.5;
/// Weight of the extra components when `backdoor_rank > 1`.
const EXTRA_RANK_WEIGHT: f64 = 0.5;
const BASE_JITTER: f64 = 0.02;

/// Seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    numeric::fnv1a(format!("{seed}/{tag}").as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthArch {
    pub num_layers: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
}

impl SynthArch {
    /// 8 layers, hidden size 16, 3 classes.
    pub fn standard(seed: u64) -> Self {
        Self { num_layers: 8, hidden: 16, classes: 3, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.classes < 2 || self.classes > self.hidden {
            return Err(Error::InvalidConfig(format!(
                "synthetic architecture needs L ≥ 1 and 2 ≤ c ≤ d (got L={}, d={}, c={})",
                self.num_layers, self.hidden, self.classes
            )));
        }
        Ok(())
    }

    pub fn num_tensors(&self) -> usize {
        self.num_layers * LAYER_ROLES.len() + 1
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = numeric::norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Near-identity layer matrices and a head reading the first `c`
/// coordinates, each with small seeded Gaussian jitter.
pub fn gen_base(arch: &SynthArch) -> Result<Checkpoint> {
    arch.validate()?;
    let d = arch.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(arch.seed, "base"));
    let mut records = Vec::with_capacity(arch.num_tensors());
    for l in 0..arch.num_layers {
        for role in LAYER_ROLES {
            let jitter = gaussian(&mut rng, d * d);
            let w = Matrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) + BASE_JITTER * jitter[i * d + j]);
            records.push(TensorRecord::matrix(tensor_name(l, role), &w, Dtype::F64)?);
        }
    }
    let jitter = gaussian(&mut rng, arch.classes * d);
    let head = Matrix::from_fn(arch.classes, d, |i, j| f64::from(u8::from(i == j)) + BASE_JITTER * jitter[i * d + j]);
    records.push(TensorRecord::matrix("head", &head, Dtype::F64)?);
    Checkpoint::new(records, &SchemeResolver)
}

/// Five trigger-placement families. Each owns a distinct 2-D coordinate
/// plane of the input space, disjoint from the class coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerFamily {
    RandomSingle,
    RandomDouble,
    InputInstruction,
    Prefix,
    Suffix,
}

impl TriggerFamily {
    pub const ALL: [TriggerFamily; 5] = [
        TriggerFamily::RandomSingle,
        TriggerFamily::RandomDouble,
        TriggerFamily::InputInstruction,
        TriggerFamily::Prefix,
        TriggerFamily::Suffix,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            TriggerFamily::RandomSingle => "random-single",
            TriggerFamily::RandomDouble => "random-double",
            TriggerFamily::InputInstruction => "input-instruction",
            TriggerFamily::Prefix => "prefix",
            TriggerFamily::Suffix => "suffix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Coordinates `(c + 2f, c + 2f + 1)` spanned by this family's triggers.
    pub fn plane(self, classes: usize) -> (usize, usize) {
        let i = classes + 2 * self.index();
        (i, i + 1)
    }

    /// A unit trigger in this family's plane at angle `0.6 ± 0.35` rad,
    /// the offset drawn from `seed`.
    pub fn direction(self, arch: &SynthArch, seed: u64) -> Result<Vec<f64>> {
        let (i, j) = self.plane(arch.classes);
        if j >= arch.hidden {
            return Err(Error::InvalidConfig(format!(
                "trigger family `{}` needs hidden size ≥ {}",
                self.as_str(),
                j + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "trigger"));
        let angle = 0.6 + rng.random_range(-0.35..0.35);
        let mut t = vec![0.0; arch.hidden];
        t[i] = libm::cos(angle);
        t[j] = libm::sin(angle);
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dataset_id: String,
    pub attack_id: String,
    pub trigger_type: String,
    pub backdoor_layers: Vec<usize>,
    pub backdoor_rank: usize,
    /// Initial `β`; grown by 1.5× per failed planting attempt.
    pub backdoor_scale: f64,
    pub benign_scale: f64,
    pub noise_scale: f64,
    pub target_class: usize,
    pub trigger_direction: Vec<f64>,
    pub noise_seed: u64,
}

impl ScenarioSpec {
    /// Dataset `ds{dataset}` with target class `dataset mod c`, a rank-1
    /// backdoor in the top three layers and a trigger from `family`.
    pub fn standard(arch: &SynthArch, dataset: usize, family: TriggerFamily, noise_seed: u64) -> Result<Self> {
        let top = arch.num_layers.saturating_sub(3);
        Ok(Self {
            dataset_id: format!("ds{dataset}"),
            attack_id: "planted-mlp".to_string(),
            trigger_type: family.as_str().to_string(),
            backdoor_layers: (top..arch.num_layers).collect(),
            backdoor_rank: 1,
            backdoor_scale: 1.5,
            benign_scale: 0.3,
            noise_scale: 0.05,
            target_class: dataset % arch.classes,
            trigger_direction: family.direction(arch, noise_seed)?,
            noise_seed,
        })
    }

    pub fn validate(&self, arch: &SynthArch) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.backdoor_layers.iter().any(|l| *l >= arch.num_layers) {
            return bad(format!("backdoor layers {:?} outside 0..{}", self.backdoor_layers, arch.num_layers));
        }
        if self.backdoor_rank == 0 || self.backdoor_rank > arch.hidden {
            return bad(format!("backdoor rank {} must be in 1..={}", self.backdoor_rank, arch.hidden));
        }
        for (n, v) in [("backdoor_scale", self.backdoor_scale), ("benign_scale", self.benign_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{n} must be positive"));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be non-negative".to_string());
        }
        if self.target_class >= arch.classes {
            return bad(format!("target class {} ≥ {}", self.target_class, arch.classes));
        }
        if self.trigger_direction.len() != arch.hidden || numeric::norm(&self.trigger_direction) == 0.0 {
            return bad("trigger direction must be a nonzero vector of the hidden size".to_string());
        }
        Ok(())
    }

    /// The evaluation task of this scenario.
    pub fn task(&self, arch: &SynthArch) -> Result<ToyTask> {
        ToyTask::generate(
            arch.classes,
            arch.hidden,
            self.target_class,
            &unit(self.trigger_direction.clone()),
            &TaskShape::default(),
            derive_seed(self.noise_seed, "task"),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPair {
    pub clean: Checkpoint,
    pub backdoored: Checkpoint,
    pub task: ToyTask,
    /// Final `β` after any retries.
    pub backdoor_scale: f64,
    pub attempts: usize,
    pub metrics: Metrics,
}

/// Unit-Frobenius benign direction of one tensor for one dataset.
fn benign_direction(arch_seed: u64, dataset_id: &str, name: &str, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(arch_seed, &format!("benign/{dataset_id}/{name}")));
    unit(gaussian(&mut rng, n))
}

pub fn gen_clean(base: &Checkpoint, arch: &SynthArch, spec: &ScenarioSpec) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.noise_seed, "noise"));
    let records = base
        .records()
        .map(|r| {
            let t = benign_direction(arch.seed, &spec.dataset_id, r.name(), r.numel());
            let noise = unit(gaussian(&mut rng, r.numel()));
            let data = (0..r.numel())
                .map(|i| r.data()[i] + spec.benign_scale * t[i] + spec.noise_scale * noise[i])
                .collect();
            r.with_data(data)
        })
        .collect::<Result<Vec<_>>>()?;
    base.with_replaced(records)
}

/// Removes from `v` its components along `basis` (assumed orthonormal).
fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let p = numeric::dot(&v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    unit(v)
}

/// Per backdoor layer, the rank-`r` pairs `(weight, o, t)` whose outer
/// products (times `β`) form the planted term.
fn backdoor_terms(
    clean: &ToyModel,
    task: &ToyTask,
    spec: &ScenarioSpec,
) -> Vec<(usize, Vec<(f64, Vec<f64>, Vec<f64>)>)> {
    let d = task.hidden;
    let head_row = clean_head_row(clean, task.target_class);
    spec.backdoor_layers
        .iter()
        .map(|&l| {
            let hc: Vec<Vec<f64>> = task.non_target_inputs().map(|x| clean.forward_to(x, l)).collect();
            let ht: Vec<Vec<f64>> = task.triggered.iter().map(|x| clean.forward_to(x, l)).collect();
            let mc = task::mean_vector(hc.iter().map(Vec::as_slice), d);
            let mt = task::mean_vector(ht.iter().map(Vec::as_slice), d);
            let t = unit(mt.iter().zip(&mc).map(|(a, b)| a - b).collect());
            let mut outs = vec![head_row.clone()];
            let mut ins = vec![t];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.noise_seed, &format!("rank/{l}")));
            for _ in 1..spec.backdoor_rank {
                let o = orthogonalize(gaussian(&mut rng, d), &outs);
                let i = orthogonalize(gaussian(&mut rng, d), &ins);
                outs.push(o);
                ins.push(i);
            }
            let terms = outs
                .into_iter()
                .zip(ins)
                .enumerate()
                .map(|(k, (o, t))| (if k == 0 { 1.0 } else { EXTRA_RANK_WEIGHT }, o, t))
                .collect();
            (l, terms)
        })
        .collect()
}

fn clean_head_row(model: &ToyModel, class: usize) -> Vec<f64> {
    unit(model.head_row(class).to_vec())
}

/// Plants the scenario's backdoor on top of its clean model, growing `β`
/// until the toy ASR reaches [`TARGET_ASR`].
pub fn gen_pair(base: &Checkpoint, arch: &SynthArch, spec: &ScenarioSpec) -> Result<ScenarioPair> {
    arch.validate()?;
    spec.validate(arch)?;
    let clean = gen_clean(base, arch, spec)?;
    let task = spec.task(arch)?;
    let clean_model = ToyModel::from_checkpoint(&clean)?;
    let terms = backdoor_terms(&clean_model, &task, spec);

    let mut beta = spec.backdoor_scale;
    let mut best = 0.0f64;
    for attempt in 1..=MAX_PLANT_ATTEMPTS {
        let mut records = Vec::new();
        for (l, layer_terms) in &terms {
            for role in [Role::MlpUp, Role::MlpGate, Role::MlpDown] {
                let rec = clean.get(&tensor_name(*l, role)).ok_or_else(|| Error::MissingTensor(tensor_name(*l, role)))?;
                let mut w = rec.to_matrix();
                for (weight, o, t) in layer_terms {
                    w.add_scaled_outer(beta * weight, o, t);
                }
                records.push(rec.with_data(w.into_vec())?);
            }
        }
        let backdoored = clean.with_replaced(records)?;
        let metrics = task::evaluate_model(&ToyModel::from_checkpoint(&backdoored)?, &task)?;
        if metrics.asr >= TARGET_ASR {
            return Ok(ScenarioPair { clean, backdoored, task, backdoor_scale: beta, attempts: attempt, metrics });
        }
        log::debug!("planting attempt {attempt}: ASR {:.3} at scale {beta}", metrics.asr);
        best = best.max(metrics.asr);
        beta *= SCALE_GROWTH;
    }
    Err(Error::PlantingFailed { best, target: TARGET_ASR, attempts: MAX_PLANT_ATTEMPTS })
}

/// Tensors touched by [`adaptive_amplify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifyScope {
    pub roles: RoleSet,
    pub min_layer: usize,
}

impl Default for AmplifyScope {
    fn default() -> Self {
        Self { roles: RoleSet::MATRIX, min_layer: 0 }
    }
}

/// Scales every singular value of each in-scope delta `M_b − M_c` by
/// `factor` and rebuilds onto `M_c`. Other tensors are copied from `M_b`.
pub fn adaptive_amplify(backdoored: &Checkpoint, clean: &Checkpoint, factor: f64, scope: AmplifyScope) -> Result<Checkpoint> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidConfig("amplification factor must be positive".to_string()));
    }
    check_compatible(backdoored, clean)?;
    let mut records = Vec::new();
    for r in backdoored.records() {
        let addr = backdoored.address(r.name()).unwrap_or(crate::address::TensorAddress::UNKNOWN);
        let in_scope =
            r.is_matrix() && scope.roles.contains(addr.role) && addr.layer.is_none_or(|l| l >= scope.min_layer);
        if !in_scope {
            continue;
        }
        let wc = clean.get(r.name()).ok_or_else(|| Error::MissingTensor(r.name().to_string()))?.to_matrix();
        let dec = decompose(&r.to_matrix().sub(&wc), 0.0).map_err(|e| match e {
            Error::SvdFailure { rows, cols, frobenius, .. } => {
                Error::SvdFailure { name: r.name().to_string(), rows, cols, frobenius }
            }
            e => e,
        })?;
        let scaled: Vec<f64> = dec.singular_values.iter().map(|l| l * factor).collect();
        records.push(r.with_data(wc.add(&dec.reconstruct_with(&scaled)).into_vec())?);
    }
    backdoored.with_replaced(records)
}
