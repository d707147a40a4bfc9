//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use wspurify_core::prototype::match_prototype;
use wspurify_core::simlab::{self, TriggerFamily};
use wspurify_core::{alignment_profile, delta, signal_report, PurificationReport, RoleSet, SourceKind};

use crate::config::{PipelineConfig, ResolvedConfig};
use crate::error::{exit, Error, Result};
use crate::io;
use crate::pipeline::{self, Inputs, PairSpec};
use crate::simgen::{self, GenOptions};

#[derive(Debug, Parser)]
#[command(name = "wspurify", version, about = "Weight-space backdoor purification for model checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Hyperparameters shared by the pipeline subcommands.
#[derive(Debug, Args, Default)]
pub struct Tuning {
    /// Purification strength: fraction removed from selected singular values.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Selection threshold τ = μ + η·σ.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Magnitude significance multiplier for boundary detection.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Increment significance multiplier for boundary detection.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Number of baseline layers for boundary statistics.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_parser = ["dataset_id", "attack_id", "trigger_type", "all"])]
    pub group_by: Option<String>,
    #[arg(long, value_parser = ["am", "pca"])]
    pub method: Option<String>,
    /// First purified layer, 0-indexed; skips boundary detection.
    #[arg(long)]
    pub boundary_override: Option<usize>,
    /// Comma-separated roles or groups (all, matrix, attention, mlp).
    #[arg(long)]
    pub roles: Option<String>,
    /// Permit alpha > 1.
    #[arg(long)]
    pub allow_overdrive: bool,
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a pool of backdoor vectors from backdoored/clean pairs.
    BuildPool {
        /// BACKDOORED,CLEAN,DATASET_ID,ATTACK_ID,TRIGGER_TYPE
        #[arg(long = "pair")]
        pairs: Vec<String>,
        /// Scenario directory (or directory of them) from `simlab gen`.
        #[arg(long = "scenario")]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate pool groups into prototype files.
    Aggregate {
        #[arg(long)]
        pool: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a suspect against every prototype.
    Match {
        #[arg(long)]
        suspect: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Print the layer alignment profile and boundary layer.
    DetectBoundary {
        #[arg(long)]
        suspect: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Match against this pool.
        #[arg(long, conflicts_with = "prototype", required_unless_present = "prototype")]
        pool: Option<PathBuf>,
        /// Use this prototype file directly.
        #[arg(long)]
        prototype: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Run the whole pipeline and write purified.ckpt and report.json.
    Purify {
        #[arg(long)]
        suspect: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toy ASR and CDA of a synthetic checkpoint on its task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
    },
    /// Synthetic model utilities.
    Simlab {
        #[command(subcommand)]
        command: SimlabCommand,
    },
    /// Print the signal table of a purification report.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Print the table as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimlabCommand {
    /// Write a scenario directory.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        dataset: usize,
        #[arg(long, default_value = "prefix", value_parser = TriggerFamily::ALL.map(|f| f.as_str()))]
        family: String,
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Pre-amplify the backdoor by this factor.
        #[arg(long)]
        amplify: Option<f64>,
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Tuning {
    fn overrides(&self) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(v) = self.alpha {
            put("alpha", json!(v));
        }
        if let Some(v) = self.eta {
            put("eta", json!(v));
        }
        if let Some(v) = self.kappa {
            put("kappa", json!(v));
        }
        if let Some(v) = self.epsilon {
            put("epsilon", json!(v));
        }
        if let Some(v) = self.m {
            put("m", json!(v));
        }
        if let Some(v) = &self.group_by {
            put("group_by", json!(v));
        }
        if let Some(v) = &self.method {
            put("method", json!(v));
        }
        if let Some(v) = self.boundary_override {
            put("boundary_override", json!(v));
        }
        if let Some(v) = &self.roles {
            let set = RoleSet::parse(v).ok_or_else(|| Error::Config(format!("unknown role in `{v}`")))?;
            put("roles", json!(set));
        }
        if self.allow_overdrive {
            put("allow_overdrive", json!(true));
        }
        Ok(m)
    }

    fn resolve(&self, out: Option<&Path>) -> Result<ResolvedConfig> {
        let mut cli = self.overrides()?;
        if let Some(o) = out {
            cli.insert("out".into(), json!(o));
        }
        PipelineConfig::resolve(self.config.as_deref(), cli)
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<wspurify_core::Error> for Failure {
    fn from(e: wspurify_core::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn out_dir(cfg: &ResolvedConfig) -> std::result::Result<PathBuf, Failure> {
    cfg.values.out.clone().ok_or_else(|| Failure::Usage("--out is required (or `out` in the config file)".into()))
}

fn print_json(w: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::json("<stdout>", e))?;
    writeln!(w, "{s}").map_err(|e| Error::io("<stdout>", e))
}

fn parse_pair(s: &str) -> std::result::Result<PairSpec, Failure> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [b, c, ds, atk, trig] => Ok(PairSpec {
            backdoored: b.into(),
            clean: c.into(),
            dataset_id: ds.to_string(),
            attack_id: atk.to_string(),
            trigger_type: trig.to_string(),
        }),
        _ => Err(Failure::Usage(format!("--pair `{s}`: expected BACKDOORED,CLEAN,DATASET_ID,ATTACK_ID,TRIGGER_TYPE"))),
    }
}

/// File name for a prototype of group `key`.
fn prototype_file(i: usize, key: &str) -> String {
    let safe: String = key.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{i:02}-{safe}.ckpt")
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(stderr, "{text}") } else { write!(stdout, "{text}") };
            return code;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            exit::USAGE
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> std::result::Result<i32, Failure> {
    match cmd {
        Command::BuildPool { pairs, scenarios, tuning, out } => {
            let cfg = tuning.resolve(out.as_deref())?;
            let out = out_dir(&cfg)?;
            let mut specs = pairs.iter().map(|p| parse_pair(p)).collect::<std::result::Result<Vec<_>, _>>()?;
            for dir in &scenarios {
                specs.extend(simgen::scenario_pairs(dir)?);
            }
            if specs.is_empty() {
                return Err(Failure::Usage("give at least one --pair or --scenario".into()));
            }
            let resolver = cfg.values.resolver()?;
            let (pool, prov) = pipeline::build_pool(&specs, &resolver)?;
            io::save_pool(&pool, &prov, &out)?;
            print_json(stdout, &json!({ "pool": out, "entries": pool.len(), "arch": pool.reference_arch().to_string() }))?;
            Ok(exit::OK)
        }
        Command::Aggregate { pool, tuning, out } => {
            let cfg = tuning.resolve(out.as_deref())?;
            let out = out_dir(&cfg)?;
            let resolver = cfg.values.resolver()?;
            let pool_data = io::load_pool(&pool, &resolver)?;
            let set = pipeline::candidates(&pool_data, &cfg)?;
            let mut files = Vec::new();
            for (i, p) in set.prototypes.iter().enumerate() {
                let name = prototype_file(i, &p.subset_key);
                io::save_prototype(p, &out.join(&name))?;
                files.push(name);
            }
            let index = json!({
                "config": cfg,
                "prototypes": pipeline::summarize(&set, None),
                "files": files,
                "failures": set.failures.iter().map(|(k, e)| (k.clone(), e.to_string())).collect::<Vec<_>>(),
            });
            io::write_json(&out.join("prototypes.json"), &index)?;
            print_json(stdout, &index)?;
            Ok(exit::OK)
        }
        Command::Match { suspect, base, pool, tuning } => {
            let cfg = tuning.resolve(None)?;
            let resolver = cfg.values.resolver()?;
            let s = io::load_checkpoint(&suspect, &resolver)?;
            let b = io::load_checkpoint(&base, &resolver)?;
            let set = pipeline::candidates(&io::load_pool(&pool, &resolver)?, &cfg)?;
            let w = delta(&s, &b, SourceKind::SuspectDelta)?;
            let m = match_prototype(&set.prototypes, &w, cfg.values.match_roles)?;
            if m.low_confidence {
                let _ = writeln!(stderr, "warning: best match score {:.4} is low; the suspect may be clean", m.score);
            }
            print_json(
                stdout,
                &json!({
                    "candidates": pipeline::summarize(&set, Some(&m)),
                    "match": { "index": m.index, "subset_key": set.prototypes[m.index].subset_key, "score": m.score, "low_confidence": m.low_confidence },
                }),
            )?;
            Ok(exit::OK)
        }
        Command::DetectBoundary { suspect, base, pool, prototype, tuning } => {
            let cfg = tuning.resolve(None)?;
            let resolver = cfg.values.resolver()?;
            let s = io::load_checkpoint(&suspect, &resolver)?;
            let b = io::load_checkpoint(&base, &resolver)?;
            let w = delta(&s, &b, SourceKind::SuspectDelta)?;
            let (proto, subset_key) = match (pool, prototype) {
                (_, Some(p)) => {
                    let p = io::load_prototype(&p, &resolver)?;
                    (p.vector, p.subset_key)
                }
                (Some(pool), None) => {
                    let set = pipeline::candidates(&io::load_pool(&pool, &resolver)?, &cfg)?;
                    let m = match_prototype(&set.prototypes, &w, cfg.values.match_roles)?;
                    let p = set.prototypes.into_iter().nth(m.index).expect("matched index is in range");
                    (p.vector, p.subset_key)
                }
                (None, None) => return Err(Failure::Usage("give --pool or --prototype".into())),
            };
            let profile = alignment_profile(&w, &proto, &cfg.values.boundary())?;
            print_json(stdout, &json!({ "prototype": subset_key, "profile": profile, "boundary_one_indexed": profile.boundary_one_indexed() }))?;
            Ok(if profile.boundary.is_some() { exit::OK } else { exit::NO_BOUNDARY })
        }
        Command::Purify { suspect, base, pool, tuning, out } => {
            let cfg = tuning.resolve(out.as_deref())?;
            let out = out_dir(&cfg)?;
            let resolver = cfg.values.resolver()?;
            let s = io::load_checkpoint(&suspect, &resolver)?;
            let b = io::load_checkpoint(&base, &resolver)?;
            let p = io::load_pool(&pool, &resolver)?;
            let inputs = Inputs {
                suspect: Some(suspect),
                base: Some(base),
                pool: Some(pool),
                num_layers: s.num_layers(),
                tensors: s.len(),
            };
            let outcome = pipeline::run(&s, &b, &p, &cfg, inputs)?;
            let r = &outcome.report;
            if r.matched.low_confidence {
                let _ = writeln!(stderr, "warning: best match score {:.4} is low; the suspect may be clean", r.matched.score);
            }
            io::save_checkpoint(&outcome.checkpoint, &out.join("purified.ckpt"))?;
            io::write_json(&out.join("report.json"), r)?;
            print_json(
                stdout,
                &json!({
                    "purified": out.join("purified.ckpt"),
                    "report": out.join("report.json"),
                    "match": r.matched,
                    "boundary": r.boundary,
                    "summary": r.purification.summary,
                }),
            )?;
            Ok(exit::OK)
        }
        Command::Eval { checkpoint, task } => {
            let ck = io::load_checkpoint(&checkpoint, &crate::RegexResolver::builtin())?;
            let task: simlab::ToyTask = io::read_json(&task)?;
            print_json(stdout, &simlab::evaluate(&ck, &task)?)?;
            Ok(exit::OK)
        }
        Command::Simlab { command: SimlabCommand::Gen { seed, dataset, family, noise_seed, amplify, layers, hidden, classes, out } } => {
            let family = TriggerFamily::parse(&family).expect("clap restricts the family names");
            let opts = GenOptions { seed, num_layers: layers, hidden, classes, dataset, family, noise_seed, amplify };
            let record = simgen::generate(&opts, &out)?;
            print_json(stdout, &record)?;
            Ok(exit::OK)
        }
        Command::Report { report, json } => {
            let r = load_purification_report(&report)?;
            let table = signal_report(&r);
            if json {
                print_json(stdout, &table)?;
            } else {
                let mut w = |s: String| writeln!(stdout, "{s}").map_err(|e| Error::io("<stdout>", e));
                w(format!("boundary layer (0-indexed): {}", r.boundary))?;
                w(format!(
                    "matrices: {}  components: {}  selected: {}  suppressed energy: {:.4}",
                    r.summary.matrices, r.summary.total_components, r.summary.selected_components, r.summary.suppressed_energy
                ))?;
                w(format!("{:<16} {:>5} {:>10} {:>10}", "group", "n", "mean", "std"))?;
                for g in table.all.iter().chain(&table.blocks).chain(&table.roles) {
                    w(format!("{:<16} {:>5} {:>10.4} {:>10.4}", g.group, g.count, g.mean, g.std))?;
                }
            }
            Ok(exit::OK)
        }
    }
}

/// Accepts a full pipeline report or a bare purification report.
fn load_purification_report(path: &Path) -> Result<PurificationReport> {
    let v: Value = io::read_json(path)?;
    let inner = match v.get("purification") {
        Some(p) => p.clone(),
        None => v,
    };
    serde_json::from_value(inner).map_err(|e| Error::json(path, e))
}
