//! Layer-wise prototype alignment and boundary-layer detection.
//!
//! Layers are 0-indexed throughout. The first layer has no increment and can
//! never be the boundary.

use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::address::RoleSet;
use crate::error::{Error, Result};
use crate::numeric;
use crate::vecspace::{cosine, layer_slice, DeltaMap, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    /// Baseline layer count; `None` means `max(4, ⌊L/4⌋)` clamped to `L`.
    #[serde(default)]
    pub m: Option<usize>,
    pub kappa: f64,
    pub epsilon: f64,
    /// Used instead of `κσ` when the baseline is flat.
    pub fallback_magnitude: f64,
    /// Used instead of `εσ` when the baseline is flat.
    pub fallback_jump: f64,
    pub roles: RoleSet,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            m: None,
            kappa: 2.0,
            epsilon: 2.0,
            fallback_magnitude: 0.1,
            fallback_jump: 0.2,
            roles: RoleSet::MATRIX,
        }
    }
}

impl BoundaryConfig {
    pub fn default_m(num_layers: usize) -> usize {
        core::cmp::max(4, num_layers / 4).min(num_layers)
    }

    /// The baseline size actually used for `num_layers` layers.
    pub fn resolve_m(&self, num_layers: usize) -> usize {
        self.m.unwrap_or_else(|| Self::default_m(num_layers))
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if num_layers < 2 {
            return bad("boundary detection needs at least 2 layers");
        }
        let m = self.resolve_m(num_layers);
        if m == 0 || m > num_layers {
            return Err(Error::InvalidConfig(alloc::format!("m = {m} must be in 1..={num_layers}")));
        }
        for (name, v) in [
            ("kappa", self.kappa),
            ("epsilon", self.epsilon),
            ("fallback_magnitude", self.fallback_magnitude),
            ("fallback_jump", self.fallback_jump),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(alloc::format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Per-layer outcome of the two boundary criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCriteria {
    pub magnitude: bool,
    pub increment: bool,
}

impl LayerCriteria {
    pub fn both(self) -> bool {
        self.magnitude && self.increment
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProfile {
    /// `|cos(w_l, p_l)|` per layer.
    pub scores: Vec<f64>,
    /// `increments[i] = scores[i + 1] − scores[i]`.
    pub increments: Vec<f64>,
    pub m: usize,
    pub mu_m: f64,
    pub sigma_m: f64,
    /// True when `σ_m` was too small and the absolute thresholds applied.
    pub fallback: bool,
    /// Layers whose slice held no tensors (score 0).
    pub empty_layers: Vec<usize>,
    /// Criteria per layer; entry 0 is always false.
    pub criteria: Vec<LayerCriteria>,
    pub boundary: Option<usize>,
}

impl AlignmentProfile {
    /// Builds the profile statistics from precomputed scores.
    pub fn from_scores(scores: Vec<f64>, cfg: &BoundaryConfig) -> Result<Self> {
        let l = scores.len();
        cfg.validate(l)?;
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { name: "alignment scores".to_string(), index: i });
        }
        let m = cfg.resolve_m(l);
        let increments = scores.windows(2).map(|w| w[1] - w[0]).collect();
        let (mu_m, sigma_m) = numeric::mean_std(&scores[..m]).unwrap_or((0.0, 0.0));
        let mut p = Self {
            scores,
            increments,
            m,
            mu_m,
            sigma_m,
            fallback: false,
            empty_layers: Vec::new(),
            criteria: Vec::new(),
            boundary: None,
        };
        p.apply(cfg);
        Ok(p)
    }

    fn apply(&mut self, cfg: &BoundaryConfig) {
        let (mag, jump, fallback) = thresholds(self.mu_m, self.sigma_m, cfg);
        self.fallback = fallback;
        self.criteria = (0..self.scores.len())
            .map(|l| {
                if l == 0 {
                    return LayerCriteria { magnitude: false, increment: false };
                }
                LayerCriteria { magnitude: self.scores[l] >= mag, increment: self.increments[l - 1] >= jump }
            })
            .collect();
        self.boundary = self.criteria.iter().position(|c| c.both());
    }

    /// 1-indexed boundary, as layers are usually numbered in reports.
    pub fn boundary_one_indexed(&self) -> Option<usize> {
        self.boundary.map(|l| l + 1)
    }
}

/// `(magnitude threshold, jump threshold, fallback used)`.
fn thresholds(mu: f64, sigma: f64, cfg: &BoundaryConfig) -> (f64, f64, bool) {
    if sigma < ZERO_NORM {
        (mu + cfg.fallback_magnitude, cfg.fallback_jump, true)
    } else {
        (mu + cfg.kappa * sigma, cfg.epsilon * sigma, false)
    }
}

/// Alignment of the suspect delta with a prototype, layer by layer, over the
/// roles in `cfg.roles`. The boundary is filled in with `cfg`.
pub fn alignment_profile(suspect: &DeltaMap, prototype: &DeltaMap, cfg: &BoundaryConfig) -> Result<AlignmentProfile> {
    suspect.check_same_arch(prototype)?;
    let l = suspect.num_layers();
    cfg.validate(l)?;
    let mut scores = Vec::with_capacity(l);
    let mut empty = Vec::new();
    for layer in 0..l {
        let w = layer_slice(suspect, layer, cfg.roles)?;
        if w.is_empty() {
            empty.push(layer);
            scores.push(0.0);
            continue;
        }
        let p = layer_slice(prototype, layer, cfg.roles)?;
        scores.push(cosine(&w, &p)?.abs());
    }
    let mut profile = AlignmentProfile::from_scores(scores, cfg)?;
    profile.empty_layers = empty;
    Ok(profile)
}

/// Smallest layer `l ≥ 1` with `s_l ≥ μ_m + κσ_m` and `Δs_l ≥ εσ_m`
/// (absolute thresholds when `σ_m` is flat). `m` and the statistics are
/// taken from the profile; only the thresholds come from `cfg`.
pub fn detect_boundary(profile: &AlignmentProfile, cfg: &BoundaryConfig) -> Option<usize> {
    let (mag, jump, _) = thresholds(profile.mu_m, profile.sigma_m, cfg);
    (1..profile.scores.len()).find(|&l| profile.scores[l] >= mag && profile.increments[l - 1] >= jump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::SchemeResolver;
    use crate::vecspace::SourceKind;
    use alloc::vec;
    use alloc::{format, string::String};

    fn cfg4() -> BoundaryConfig {
        BoundaryConfig { m: Some(4), ..Default::default() }
    }

    fn layered(per_layer: &[Vec<f64>]) -> DeltaMap {
        let entries = per_layer
            .iter()
            .enumerate()
            .map(|(l, v)| (format!("layer.{l}.mlp_up"), vec![v.len()], v.clone()))
            .collect::<Vec<(String, Vec<usize>, Vec<f64>)>>();
        DeltaMap::new(entries, &SchemeResolver, SourceKind::TaskVector).unwrap()
    }

    #[test]
    fn self_similarity_gives_unit_scores() {
        let d = layered(&(0..6).map(|l| vec![l as f64 + 1.0, -2.0, 0.5]).collect::<Vec<_>>());
        let p = alignment_profile(&d, &d, &cfg4()).unwrap();
        for s in &p.scores {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_gives_zero_scores() {
        let w = layered(&vec![vec![1.0, 0.0]; 5]);
        let p = layered(&vec![vec![0.0, 3.0]; 5]);
        let prof = alignment_profile(&w, &p, &cfg4()).unwrap();
        assert!(prof.scores.iter().all(|s| *s == 0.0));
        assert_eq!((prof.mu_m, prof.sigma_m), (0.0, 0.0));
        assert_eq!(prof.boundary, None);
    }

    #[test]
    fn planted_cosines_are_recovered() {
        let target = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.8, 0.9];
        // Slice l of the suspect is (c, sqrt(1 − c²)) against prototype e0.
        let w = layered(&target.iter().map(|c| vec![*c, libm::sqrt(1.0 - c * c)]).collect::<Vec<_>>());
        let p = layered(&vec![vec![2.0, 0.0]; 8]);
        let prof = alignment_profile(&w, &p, &cfg4()).unwrap();
        for (s, t) in prof.scores.iter().zip(target) {
            assert!((s - t).abs() < 1e-9);
        }
        assert!(prof.fallback);
        assert_eq!(prof.boundary, Some(6));
        assert_eq!(prof.boundary_one_indexed(), Some(7));
    }

    #[test]
    fn flat_profile_has_no_boundary() {
        let prof = AlignmentProfile::from_scores(vec![0.1; 8], &cfg4()).unwrap();
        assert_eq!(prof.boundary, None);
        assert!(prof.fallback);
    }

    #[test]
    fn hand_checked_noisy_baseline() {
        // Baseline [.1,.2,.1,.2]: μ = .15, σ = .05; thresholds s ≥ .25, Δ ≥ .1.
        let s = vec![0.1, 0.2, 0.1, 0.2, 0.24, 0.3, 0.35, 0.6];
        let prof = AlignmentProfile::from_scores(s, &cfg4()).unwrap();
        assert!((prof.sigma_m - 0.05).abs() < 1e-15);
        assert!(!prof.fallback);
        // Layer 5: .3 ≥ .25 but Δ = .06. Layer 7: .6, Δ = .25.
        assert_eq!(prof.boundary, Some(7));
        assert_eq!(detect_boundary(&prof, &cfg4()), Some(7));
    }

    #[test]
    fn raising_thresholds_moves_boundary_later() {
        let s = vec![0.1, 0.2, 0.1, 0.2, 0.45, 0.5, 0.9, 0.95];
        let prof = AlignmentProfile::from_scores(s, &cfg4()).unwrap();
        assert_eq!(prof.boundary, Some(4));
        let strict = BoundaryConfig { kappa: 10.0, ..cfg4() };
        assert_eq!(detect_boundary(&prof, &strict), Some(6));
        let stricter = BoundaryConfig { epsilon: 20.0, ..strict };
        assert_eq!(detect_boundary(&prof, &stricter), None);
    }

    #[test]
    fn default_m_rule() {
        assert_eq!(BoundaryConfig::default_m(8), 4);
        assert_eq!(BoundaryConfig::default_m(32), 8);
        assert_eq!(BoundaryConfig::default_m(3), 3);
    }

    #[test]
    fn config_validation() {
        assert!(AlignmentProfile::from_scores(vec![0.1], &cfg4()).is_err());
        assert!(AlignmentProfile::from_scores(vec![0.1; 3], &BoundaryConfig { m: Some(4), ..Default::default() }).is_err());
        assert!(AlignmentProfile::from_scores(vec![0.1; 6], &BoundaryConfig { kappa: -1.0, ..cfg4() }).is_err());
        assert!(AlignmentProfile::from_scores(vec![0.1, f64::NAN, 0.2, 0.3], &cfg4()).is_err());
    }

    #[test]
    fn empty_slices_score_zero() {
        let entries = vec![
            ("layer.0.mlp_up".into(), vec![2], vec![1.0, 0.0]),
            ("layer.1.norm".into(), vec![2], vec![1.0, 0.0]),
            ("layer.2.mlp_up".into(), vec![2], vec![1.0, 0.0]),
        ];
        let d = DeltaMap::new(entries, &SchemeResolver, SourceKind::TaskVector).unwrap();
        let prof = alignment_profile(&d, &d, &BoundaryConfig { m: Some(2), ..Default::default() }).unwrap();
        assert_eq!(prof.scores, [1.0, 0.0, 1.0]);
        assert_eq!(prof.empty_layers, [1]);
    }
}
