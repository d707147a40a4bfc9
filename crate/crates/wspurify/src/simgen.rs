//! Synthetic scenario directories on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use wspurify_core::simlab::{self, AmplifyScope, Metrics, ScenarioSpec, SynthArch, TriggerFamily};

use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::PairSpec;

pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub seed: u64,
    pub num_layers: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dataset: usize,
    pub family: TriggerFamily,
    /// Defaults to `1000·seed + 10·dataset + family index`.
    pub noise_seed: Option<u64>,
    /// Pre-amplify the backdoor delta by this factor.
    pub amplify: Option<f64>,
}

impl GenOptions {
    pub fn standard(seed: u64, dataset: usize, family: TriggerFamily) -> Self {
        let a = SynthArch::standard(seed);
        Self {
            seed,
            num_layers: a.num_layers,
            hidden: a.hidden,
            classes: a.classes,
            dataset,
            family,
            noise_seed: None,
            amplify: None,
        }
    }

    pub fn arch(&self) -> SynthArch {
        SynthArch { num_layers: self.num_layers, hidden: self.hidden, classes: self.classes, seed: self.seed }
    }

    pub fn resolved_noise_seed(&self) -> u64 {
        self.noise_seed
            .unwrap_or_else(|| self.seed.wrapping_mul(1000).wrapping_add(10 * self.dataset as u64 + self.family.index() as u64))
    }
}

/// Contents of `scenario.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub arch: SynthArch,
    pub spec: ScenarioSpec,
    pub family: TriggerFamily,
    pub amplify: Option<f64>,
    /// `β` after any planting retries.
    pub final_backdoor_scale: f64,
    pub attempts: usize,
    pub base_metrics: Metrics,
    pub clean_metrics: Metrics,
    pub backdoored_metrics: Metrics,
}

/// Writes base.ckpt, clean.ckpt, backdoored.ckpt, task.json and
/// scenario.json into `out`.
pub fn generate(opts: &GenOptions, out: &Path) -> Result<ScenarioRecord> {
    let arch = opts.arch();
    let base = simlab::gen_base(&arch)?;
    let spec = ScenarioSpec::standard(&arch, opts.dataset, opts.family, opts.resolved_noise_seed())?;
    let pair = simlab::gen_pair(&base, &arch, &spec)?;
    let backdoored = match opts.amplify {
        Some(f) => simlab::adaptive_amplify(&pair.backdoored, &pair.clean, f, AmplifyScope::default())?,
        None => pair.backdoored.clone(),
    };
    let record = ScenarioRecord {
        arch,
        family: opts.family,
        amplify: opts.amplify,
        final_backdoor_scale: pair.backdoor_scale,
        attempts: pair.attempts,
        base_metrics: simlab::evaluate(&base, &pair.task)?,
        clean_metrics: simlab::evaluate(&pair.clean, &pair.task)?,
        backdoored_metrics: simlab::evaluate(&backdoored, &pair.task)?,
        spec,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::save_checkpoint(&base, &out.join("base.ckpt"))?;
    io::save_checkpoint(&pair.clean, &out.join("clean.ckpt"))?;
    io::save_checkpoint(&backdoored, &out.join("backdoored.ckpt"))?;
    io::write_json(&out.join("task.json"), &pair.task)?;
    io::write_json(&out.join(SCENARIO_FILE), &record)?;
    Ok(record)
}

/// Pool pairs from a scenario directory, or from every scenario directory
/// directly inside `dir` (in name order).
pub fn scenario_pairs(dir: &Path) -> Result<Vec<PairSpec>> {
    let one = |d: &Path| -> Result<PairSpec> {
        let r: ScenarioRecord = io::read_json(&d.join(SCENARIO_FILE))?;
        Ok(PairSpec {
            backdoored: d.join("backdoored.ckpt"),
            clean: d.join("clean.ckpt"),
            dataset_id: r.spec.dataset_id,
            attack_id: r.spec.attack_id,
            trigger_type: r.spec.trigger_type,
        })
    };
    if dir.join(SCENARIO_FILE).is_file() {
        return Ok(vec![one(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SCENARIO_FILE).is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Invalid { path: dir.to_path_buf(), what: "no scenario directories found".into() });
    }
    subdirs.iter().map(|d| one(d)).collect()
}
