//! SVD-based suppression of prototype-aligned components in weight deltas.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::address::{Role, RoleSet, TensorAddress};
use crate::checkpoint::{check_compatible, Checkpoint};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::numeric;
use crate::tensor::TensorRecord;
use crate::vecspace::{DeltaMap, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurificationConfig {
    /// Fraction removed from each selected singular value.
    pub alpha: f64,
    /// Threshold sensitivity: `τ = μ + ησ`.
    pub eta: f64,
    /// First layer in scope (0-indexed).
    pub boundary: usize,
    pub roles: RoleSet,
    /// Singular values at or below `svd_tol · λ_max` are dropped.
    pub svd_tol: f64,
    /// Permit `α > 1` (sign-flipping the selected components).
    #[serde(default)]
    pub allow_overdrive: bool,
}

impl Default for PurificationConfig {
    fn default() -> Self {
        Self { alpha: 0.95, eta: 1.0, boundary: 0, roles: RoleSet::MATRIX, svd_tol: 1e-12, allow_overdrive: false }
    }
}

impl PurificationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("alpha must be finite and non-negative".to_string()));
        }
        if self.alpha > 1.0 && !self.allow_overdrive {
            return Err(Error::InvalidConfig(alloc::format!(
                "alpha = {} exceeds 1; pass allow_overdrive to permit it",
                self.alpha
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig("eta must be finite and non-negative".to_string()));
        }
        if !(self.svd_tol >= 0.0 && self.svd_tol < 1.0) {
            return Err(Error::InvalidConfig("svd_tol must be in [0, 1)".to_string()));
        }
        Ok(())
    }

    /// Whether a tensor at `addr` with the given rank is purified.
    pub fn in_scope(&self, addr: TensorAddress, rank: usize) -> bool {
        rank == 2 && self.roles.contains(addr.role) && addr.layer.is_none_or(|l| l >= self.boundary)
    }
}

/// Thin SVD `ΔW = Σ λ_i a_i b_iᵀ`, truncated to the effective rank.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixDecomposition {
    pub rows: usize,
    pub cols: usize,
    /// Left singular vectors `a_i` (length `rows`).
    pub left: Vec<Vec<f64>>,
    /// Right singular vectors `b_i` (length `cols`).
    pub right: Vec<Vec<f64>>,
    /// Non-increasing singular values.
    pub singular_values: Vec<f64>,
}

impl MatrixDecomposition {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `Σ w_i a_i b_iᵀ` for the given per-component weights.
    pub fn reconstruct_with(&self, weights: &[f64]) -> Matrix {
        let k = weights.len().min(self.rank());
        let a = faer::Mat::<f64>::from_fn(self.rows, k, |r, i| weights[i] * self.left[i][r]);
        let b = faer::Mat::<f64>::from_fn(self.cols, k, |c, i| self.right[i][c]);
        Matrix::from_faer((a * b.transpose()).as_ref())
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.singular_values)
    }
}

pub fn decompose(delta_w: &Matrix, svd_tol: f64) -> Result<MatrixDecomposition> {
    decompose_named("", delta_w, svd_tol)
}

fn decompose_named(name: &str, delta_w: &Matrix, svd_tol: f64) -> Result<MatrixDecomposition> {
    if let Some(index) = delta_w.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: name.to_string(), index });
    }
    let (rows, cols) = delta_w.shape();
    let empty = MatrixDecomposition { rows, cols, left: Vec::new(), right: Vec::new(), singular_values: Vec::new() };
    if delta_w.as_slice().iter().all(|v| *v == 0.0) {
        return Ok(empty);
    }
    let (u, sv, v) = thin_svd(delta_w).ok_or_else(|| Error::SvdFailure {
        name: name.to_string(),
        rows,
        cols,
        frobenius: delta_w.frobenius_norm(),
    })?;
    let (u, v, sv) = (u.as_ref(), v.as_ref(), sv.column_vector());
    let mut order: Vec<usize> = (0..sv.nrows()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
    let cutoff = svd_tol * sv[order[0]];
    let mut d = empty;
    for i in order {
        let s = sv[i];
        if !(s > cutoff) || s == 0.0 {
            break;
        }
        d.singular_values.push(s);
        d.left.push(u.col(i).iter().copied().collect());
        d.right.push(v.col(i).iter().copied().collect());
    }
    Ok(d)
}

/// Below this many columns faer defaults to bidiagonal QR iteration, about
/// 2.5x slower than divide and conquer on 64x64 inputs.
const SVD_FAST_THRESHOLD: usize = 8;
const SVD_DEFAULT_THRESHOLD: usize = 128;
/// Divide and conquer occasionally returns wrong factors for rank-deficient
/// inputs, so its output is checked and recomputed the slow way on failure.
const SVD_CHECK_TOL: f64 = 1e-12;

type Factors = (faer::Mat<f64>, faer::diag::Diag<f64>, faer::Mat<f64>);

fn thin_svd(m: &Matrix) -> Option<Factors> {
    let a = m.to_faer();
    if let Some(f) = svd_with(&a, SVD_FAST_THRESHOLD) {
        if factors_hold(&a, &f) {
            return Some(f);
        }
    }
    svd_with(&a, SVD_DEFAULT_THRESHOLD)
}

fn svd_with(a: &faer::Mat<f64>, recursion_threshold: usize) -> Option<Factors> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::svd::{svd, svd_scratch, ComputeSvdVectors, SvdParams};
    use faer::{Auto, Par, Spec};

    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    let params = Spec::new(SvdParams { recursion_threshold, ..Auto::<f64>::auto() });
    let thin = ComputeSvdVectors::Thin;
    let mut mem = MemBuffer::new(svd_scratch::<f64>(rows, cols, thin, thin, Par::Seq, params));
    let mut s = faer::diag::Diag::<f64>::zeros(k);
    let mut u = faer::Mat::<f64>::zeros(rows, k);
    let mut v = faer::Mat::<f64>::zeros(cols, k);
    svd(a.as_ref(), s.as_mut(), Some(u.as_mut()), Some(v.as_mut()), Par::Seq, MemStack::new(&mut mem), params).ok()?;
    Some((u, s, v))
}

/// `UΣVᵀ` reproduces `a` and both factors have orthonormal columns.
fn factors_hold(a: &faer::Mat<f64>, (u, s, v): &Factors) -> bool {
    let k = s.dim();
    let back = u * s.as_ref() * v.transpose();
    let scale = a.norm_l2().max(f64::MIN_POSITIVE);
    if !((&back - a).norm_l2() <= SVD_CHECK_TOL * scale) {
        return false;
    }
    let eye = faer::Mat::<f64>::identity(k, k);
    (u.transpose() * u - &eye).norm_max() <= SVD_CHECK_TOL && (v.transpose() * v - &eye).norm_max() <= SVD_CHECK_TOL
}

/// `c_i = |a_iᵀ ΔP b_i|` for each component.
pub fn backdoor_signal(delta_p: &Matrix, decomp: &MatrixDecomposition) -> Result<Vec<f64>> {
    if delta_p.shape() != (decomp.rows, decomp.cols) {
        return Err(Error::ShapeMismatch { left: delta_p.shape(), right: (decomp.rows, decomp.cols) });
    }
    Ok(decomp
        .left
        .iter()
        .zip(&decomp.right)
        .map(|(a, b)| numeric::dot(a, &delta_p.matvec(b)).abs())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub mu: f64,
    pub sigma: f64,
    /// `None` when there are no signals.
    pub tau: Option<f64>,
    pub selected: Vec<usize>,
}

/// Adaptive threshold `τ = μ + ησ` over population statistics, selecting
/// every `c_i ≥ τ`. A flat signal (`σ < 1e-12`) selects nothing.
pub fn select_components(signals: &[f64], eta: f64) -> Selection {
    let Some((mu, sigma)) = numeric::mean_std(signals) else {
        return Selection { mu: 0.0, sigma: 0.0, tau: None, selected: Vec::new() };
    };
    let tau = mu + eta * sigma;
    let selected = if sigma < ZERO_NORM {
        Vec::new()
    } else {
        (0..signals.len()).filter(|&i| signals[i] >= tau).collect()
    };
    Selection { mu, sigma, tau: Some(tau), selected }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub name: String,
    pub role: Role,
    pub layer: Option<usize>,
    pub shape: (usize, usize),
    /// Effective rank `r`.
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub signals: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub tau: Option<f64>,
    pub selected: Vec<usize>,
    /// `Σ_{i selected} λ_i² / Σ λ_i²` (0 for a zero delta).
    pub suppressed_energy: f64,
}

impl MatrixReport {
    /// Mean backdoor signal of this matrix; `None` for a zero delta.
    pub fn mean_signal(&self) -> Option<f64> {
        numeric::mean(&self.signals)
    }
}

/// `W* = W_base + Σ λ*_i a_i b_iᵀ` with `λ*_i = λ_i(1 − α)` on the selected
/// components of `ΔW = W' − W_base`.
pub fn purify_matrix(
    w_prime: &Matrix,
    w_base: &Matrix,
    delta_p: &Matrix,
    cfg: &PurificationConfig,
) -> Result<(Matrix, MatrixReport)> {
    cfg.validate()?;
    purify_named("", TensorAddress::UNKNOWN, w_prime, w_base, delta_p, cfg)
}

fn purify_named(
    name: &str,
    addr: TensorAddress,
    w_prime: &Matrix,
    w_base: &Matrix,
    delta_p: &Matrix,
    cfg: &PurificationConfig,
) -> Result<(Matrix, MatrixReport)> {
    if w_prime.shape() != w_base.shape() {
        return Err(Error::ShapeMismatch { left: w_prime.shape(), right: w_base.shape() });
    }
    let decomp = decompose_named(name, &w_prime.sub(w_base), cfg.svd_tol)?;
    let signals = backdoor_signal(delta_p, &decomp)?;
    let sel = select_components(&signals, cfg.eta);

    let mut weights = decomp.singular_values.clone();
    for &i in &sel.selected {
        weights[i] *= 1.0 - cfg.alpha;
    }
    let w_star = w_base.add(&decomp.reconstruct_with(&weights));

    let energy: Vec<f64> = decomp.singular_values.iter().map(|l| l * l).collect();
    let total = numeric::pairwise_sum(&energy);
    let removed: Vec<f64> = sel.selected.iter().map(|&i| energy[i]).collect();
    let suppressed_energy = if total > 0.0 { numeric::pairwise_sum(&removed) / total } else { 0.0 };

    let report = MatrixReport {
        name: name.to_string(),
        role: addr.role,
        layer: addr.layer,
        shape: w_prime.shape(),
        rank: decomp.rank(),
        singular_values: decomp.singular_values,
        signals,
        mu: sel.mu,
        sigma: sel.sigma,
        tau: sel.tau,
        selected: sel.selected,
        suppressed_energy,
    };
    Ok((w_star, report))
}

/// Mean ± population std of a group of per-matrix mean signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Signal statistics at three granularities: all matrices, attention vs
/// MLP block, and per projection role.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignalTable {
    pub all: Option<GroupStat>,
    pub blocks: Vec<GroupStat>,
    pub roles: Vec<GroupStat>,
}

impl SignalTable {
    pub fn block(&self, label: &str) -> Option<&GroupStat> {
        self.blocks.iter().find(|g| g.group == label)
    }

    pub fn role(&self, role: Role) -> Option<&GroupStat> {
        self.roles.iter().find(|g| g.group == role.as_str())
    }
}

fn group_stat(group: &str, values: &[f64]) -> Option<GroupStat> {
    let (mean, std) = numeric::mean_std(values)?;
    Some(GroupStat { group: group.to_string(), count: values.len(), mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurificationSummary {
    pub matrices: usize,
    pub total_components: usize,
    pub selected_components: usize,
    /// Suppressed energy over all purified matrices, pooled by `λ²`.
    pub suppressed_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurificationReport {
    pub boundary: usize,
    pub config: PurificationConfig,
    pub matrices: Vec<MatrixReport>,
    pub groups: SignalTable,
    pub summary: PurificationSummary,
}

impl PurificationReport {
    /// Builds the report and its aggregates from per-matrix reports.
    pub fn from_matrices(cfg: &PurificationConfig, mut matrices: Vec<MatrixReport>) -> Self {
        matrices.sort_by(|a, b| a.name.cmp(&b.name));
        let mut total_energy = Vec::new();
        let mut removed_energy = Vec::new();
        for m in &matrices {
            for (i, l) in m.singular_values.iter().enumerate() {
                total_energy.push(l * l);
                if m.selected.contains(&i) {
                    removed_energy.push(l * l);
                }
            }
        }
        let total = numeric::pairwise_sum(&total_energy);
        let summary = PurificationSummary {
            matrices: matrices.len(),
            total_components: matrices.iter().map(|m| m.rank).sum(),
            selected_components: matrices.iter().map(|m| m.selected.len()).sum(),
            suppressed_energy: if total > 0.0 { numeric::pairwise_sum(&removed_energy) / total } else { 0.0 },
        };
        let mut report = Self { boundary: cfg.boundary, config: *cfg, matrices, groups: SignalTable::default(), summary };
        report.groups = signal_report(&report);
        report
    }
}

/// Groups per-matrix mean signals by all / block / role. Matrices with a
/// zero delta carry no signal and are left out.
pub fn signal_report(report: &PurificationReport) -> SignalTable {
    let mut all = Vec::new();
    let mut blocks: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    let mut roles: BTreeMap<Role, Vec<f64>> = BTreeMap::new();
    for m in &report.matrices {
        let Some(s) = m.mean_signal() else { continue };
        all.push(s);
        if let Some(b) = m.role.block() {
            blocks.entry(b).or_default().push(s);
        }
        roles.entry(m.role).or_default().push(s);
    }
    SignalTable {
        all: group_stat("All", &all),
        blocks: blocks.iter().filter_map(|(b, v)| group_stat(b.label(), v)).collect(),
        roles: roles.iter().filter_map(|(r, v)| group_stat(r.as_str(), v)).collect(),
    }
}

/// Names of the tensors `purify_checkpoint` will rewrite, in name order.
pub fn plan(suspect: &Checkpoint, cfg: &PurificationConfig) -> Vec<String> {
    suspect
        .records()
        .filter(|r| cfg.in_scope(suspect.address(r.name()).unwrap_or(TensorAddress::UNKNOWN), r.rank()))
        .map(|r| r.name().to_string())
        .collect()
}

/// Checks everything `purify_checkpoint` requires before any matrix work.
pub fn check_inputs(suspect: &Checkpoint, base: &Checkpoint, prototype: &DeltaMap, cfg: &PurificationConfig) -> Result<()> {
    cfg.validate()?;
    check_compatible(suspect, base)?;
    prototype.check_matches(suspect)?;
    if cfg.boundary > suspect.num_layers() {
        return Err(Error::LayerOutOfRange { layer: cfg.boundary, num_layers: suspect.num_layers() });
    }
    Ok(())
}

/// Purifies one named matrix. Inputs must have passed [`check_inputs`].
pub fn purify_tensor(
    suspect: &Checkpoint,
    base: &Checkpoint,
    prototype: &DeltaMap,
    name: &str,
    cfg: &PurificationConfig,
) -> Result<(TensorRecord, MatrixReport)> {
    let missing = || Error::MissingTensor(name.to_string());
    let rec = suspect.get(name).ok_or_else(missing)?;
    let w_base = base.get(name).ok_or_else(missing)?.to_matrix();
    let delta_p = prototype.matrix(name).ok_or_else(missing)?;
    let addr = suspect.address(name).unwrap_or(TensorAddress::UNKNOWN);
    let (w_star, report) = purify_named(name, addr, &rec.to_matrix(), &w_base, &delta_p, cfg)?;
    Ok((rec.with_data(w_star.into_vec())?, report))
}

/// Combines per-matrix results into the output checkpoint and report.
pub fn assemble(
    suspect: &Checkpoint,
    cfg: &PurificationConfig,
    results: Vec<(TensorRecord, MatrixReport)>,
) -> Result<(Checkpoint, PurificationReport)> {
    let (records, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let out = suspect.with_replaced(records)?;
    Ok((out, PurificationReport::from_matrices(cfg, reports)))
}

/// Purifies every in-scope matrix of `suspect`; all other tensors are copied
/// unchanged. The first failing matrix aborts the whole run.
pub fn purify_checkpoint(
    suspect: &Checkpoint,
    base: &Checkpoint,
    prototype: &DeltaMap,
    cfg: &PurificationConfig,
) -> Result<(Checkpoint, PurificationReport)> {
    check_inputs(suspect, base, prototype, cfg)?;
    let results = plan(suspect, cfg)
        .iter()
        .map(|name| purify_tensor(suspect, base, prototype, name, cfg))
        .collect::<Result<Vec<_>>>()?;
    assemble(suspect, cfg, results)
}
