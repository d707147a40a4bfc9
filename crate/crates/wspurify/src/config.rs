//! Pipeline configuration: built-in defaults, overridden by a JSON config
//! file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use wspurify_core::prototype::{AggregationMethod, GroupBy, PcaOptions, PoolFilter};
use wspurify_core::{BoundaryConfig, PurificationConfig, RoleSet};

use crate::error::{Error, Result};
use crate::io::read_json;
use crate::resolver::{AddressRule, RegexResolver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: AggregationMethod,
    pub group_by: GroupBy,
    pub alpha: f64,
    pub eta: f64,
    pub kappa: f64,
    pub epsilon: f64,
    /// Baseline layer count for boundary statistics; `None` picks
    /// `max(4, ⌊L/4⌋)` clamped to `L`.
    pub m: Option<usize>,
    /// Roles purified.
    pub roles: RoleSet,
    /// Roles compared when matching a suspect to the prototypes.
    pub match_roles: RoleSet,
    /// Roles scored per layer for boundary detection.
    pub boundary_roles: RoleSet,
    /// First purified layer (0-indexed); skips detection when set.
    pub boundary_override: Option<usize>,
    pub allow_overdrive: bool,
    pub svd_tol: f64,
    pub pca_tol: f64,
    pub pca_max_iters: usize,
    pub fallback_magnitude: f64,
    pub fallback_jump: f64,
    pub filter: PoolFilter,
    pub address_rules: Vec<AddressRule>,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PurificationConfig::default();
        let b = BoundaryConfig::default();
        let pca = PcaOptions::default();
        Self {
            method: AggregationMethod::Am,
            group_by: GroupBy::DatasetId,
            alpha: p.alpha,
            eta: p.eta,
            kappa: b.kappa,
            epsilon: b.epsilon,
            m: b.m,
            roles: p.roles,
            match_roles: RoleSet::ALL,
            boundary_roles: b.roles,
            boundary_override: None,
            allow_overdrive: p.allow_overdrive,
            svd_tol: p.svd_tol,
            pca_tol: pca.tol,
            pca_max_iters: pca.max_iters,
            fallback_magnitude: b.fallback_magnitude,
            fallback_jump: b.fallback_jump,
            filter: PoolFilter::default(),
            address_rules: Vec::new(),
            out: None,
        }
    }
}

/// Where each setting's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    Config,
    Cli,
}

/// A validated configuration plus the origin of every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub values: PipelineConfig,
    pub sources: BTreeMap<String, Source>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_file: Option<PathBuf>,
}

impl PipelineConfig {
    /// Layers `defaults < file < cli`. `cli` holds only the flags actually
    /// given, keyed by field name.
    pub fn resolve(file: Option<&Path>, cli: Map<String, Value>) -> Result<ResolvedConfig> {
        let Value::Object(mut merged) = serde_json::to_value(PipelineConfig::default()).expect("serializable") else {
            unreachable!("config serializes to an object")
        };
        let mut sources: BTreeMap<String, Source> = merged.keys().map(|k| (k.clone(), Source::Default)).collect();
        let mut layer = |obj: Map<String, Value>, src: Source, origin: &str| -> Result<()> {
            for (k, v) in obj {
                if !sources.contains_key(&k) {
                    return Err(Error::Config(format!("unknown setting `{k}` in {origin}")));
                }
                sources.insert(k.clone(), src);
                merged.insert(k, v);
            }
            Ok(())
        };
        if let Some(path) = file {
            match read_json::<Value>(path)? {
                Value::Object(obj) => layer(obj, Source::Config, &path.display().to_string())?,
                _ => return Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
            }
        }
        layer(cli, Source::Cli, "command-line flags")?;
        let values: PipelineConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
        values.validate()?;
        Ok(ResolvedConfig { values, sources, config_file: file.map(Path::to_path_buf) })
    }

    /// Checks every setting that does not depend on the model.
    pub fn validate(&self) -> Result<()> {
        self.purification(0).validate()?;
        let b = self.boundary();
        for (name, v) in [
            ("kappa", b.kappa),
            ("epsilon", b.epsilon),
            ("fallback_magnitude", b.fallback_magnitude),
            ("fallback_jump", b.fallback_jump),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.m == Some(0) {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.pca_tol > 0.0 && self.pca_tol.is_finite()) || self.pca_max_iters == 0 {
            return Err(Error::Config("pca_tol must be positive and pca_max_iters nonzero".into()));
        }
        for (name, r) in [("roles", self.roles), ("match_roles", self.match_roles), ("boundary_roles", self.boundary_roles)] {
            if r.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
        }
        self.resolver()?;
        Ok(())
    }

    pub fn purification(&self, boundary: usize) -> PurificationConfig {
        PurificationConfig {
            alpha: self.alpha,
            eta: self.eta,
            boundary,
            roles: self.roles,
            svd_tol: self.svd_tol,
            allow_overdrive: self.allow_overdrive,
        }
    }

    pub fn boundary(&self) -> BoundaryConfig {
        BoundaryConfig {
            m: self.m,
            kappa: self.kappa,
            epsilon: self.epsilon,
            fallback_magnitude: self.fallback_magnitude,
            fallback_jump: self.fallback_jump,
            roles: self.boundary_roles,
        }
    }

    pub fn pca(&self) -> PcaOptions {
        PcaOptions { tol: self.pca_tol, max_iters: self.pca_max_iters }
    }

    pub fn resolver(&self) -> Result<RegexResolver> {
        Ok(RegexResolver::with_rules(&self.address_rules)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn precedence_cli_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"alpha": 0.5, "eta": 2.0, "roles": ["mlp"]}"#).unwrap();
        let r = PipelineConfig::resolve(Some(&f), obj(json!({"alpha": 0.7}))).unwrap();
        assert_eq!(r.values.alpha, 0.7);
        assert_eq!(r.values.eta, 2.0);
        assert_eq!(r.values.roles, RoleSet::MLP);
        assert_eq!(r.values.kappa, 2.0);
        assert_eq!(r.sources["alpha"], Source::Cli);
        assert_eq!(r.sources["eta"], Source::Config);
        assert_eq!(r.sources["kappa"], Source::Default);
    }

    #[test]
    fn rejects_invalid_settings() {
        for bad in [
            json!({"alpha": 1.5}),
            json!({"eta": -1.0}),
            json!({"m": 0}),
            json!({"kappa": -0.1}),
            json!({"roles": []}),
            json!({"roles": ["nope"]}),
            json!({"method": "median"}),
            json!({"bogus": 1}),
            json!({"address_rules": [{"pattern": "("}]}),
        ] {
            assert!(PipelineConfig::resolve(None, obj(bad.clone())).is_err(), "{bad}");
        }
        let ok = PipelineConfig::resolve(None, obj(json!({"alpha": 1.5, "allow_overdrive": true}))).unwrap();
        assert_eq!(ok.values.alpha, 1.5);
    }
}
