//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use wspurify::core::linalg::relative_frobenius_error;
use wspurify::core::prototype::{aggregate_pca, PcaOptions, PoolEntry, PrototypePool};
use wspurify::core::simlab::{self, AmplifyScope, Metrics, ScenarioPair, ScenarioSpec, SynthArch, TriggerFamily};
use wspurify::core::{
    backdoor_signal, cosine, decompose, delta, detect_boundary, flatten, select_components, AlignmentProfile,
    BoundaryConfig, Checkpoint, DeltaMap, Dtype, Matrix, PurificationConfig, SourceKind, TensorRecord,
};
use wspurify::io::{checkpoint_bytes, load_checkpoint, read_bytes, save_checkpoint};
use wspurify::pipeline::{self, Inputs};
use wspurify::{PipelineConfig, RegexResolver, ResolvedConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, r)
}

fn gauss(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(r)).collect()
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_row_major(rows, cols, gauss(r, rows * cols))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// Scenarios

/// One seeded world: a base model, a ten-vector pool (2 datasets × 5
/// families) and a held-out suspect pair.
struct World {
    base: Checkpoint,
    pool: PrototypePool,
    suspect: ScenarioPair,
}

fn pair(arch: &SynthArch, base: &Checkpoint, dataset: usize, family: TriggerFamily, noise: u64) -> ScenarioPair {
    let spec = ScenarioSpec::standard(arch, dataset, family, noise).unwrap();
    simlab::gen_pair(base, arch, &spec).unwrap()
}

fn world(seed: u64) -> World {
    let arch = SynthArch::standard(seed);
    let base = simlab::gen_base(&arch).unwrap();
    let mut entries = Vec::new();
    for ds in 0..2 {
        for f in TriggerFamily::ALL {
            let p = pair(&arch, &base, ds, f, seed * 1000 + 10 * ds as u64 + f.index() as u64);
            let v = delta(&p.backdoored, &p.clean, SourceKind::BackdoorVector).unwrap();
            entries.push(PoolEntry::new(v, format!("ds{ds}"), "planted-mlp", f.as_str()));
        }
    }
    let family = TriggerFamily::ALL[(seed % 5) as usize];
    let suspect = pair(&arch, &base, (seed % 2) as usize, family, seed * 1000 + 999);
    World { base, pool: PrototypePool::new(entries).unwrap(), suspect }
}

fn config(settings: Value) -> ResolvedConfig {
    let Value::Object(map) = settings else { unreachable!() };
    PipelineConfig::resolve(None, map).unwrap()
}

fn inputs(ck: &Checkpoint) -> Inputs {
    Inputs { suspect: None, base: None, pool: None, num_layers: ck.num_layers(), tensors: ck.len() }
}

fn purify(w: &World, suspect: &Checkpoint, cfg: &ResolvedConfig) -> wspurify::Result<Checkpoint> {
    pipeline::run(suspect, &w.base, &w.pool, cfg, inputs(suspect)).map(|o| o.checkpoint)
}

fn metrics(ck: &Checkpoint, w: &World) -> Metrics {
    simlab::evaluate(ck, &w.suspect.task).unwrap()
}

// ---------------------------------------------------------------------------
// Criteria

fn end_to_end(worlds: &[World], setup: Duration) -> Outcome {
    let start = Instant::now();
    let cfg = config(json!({"alpha": 0.95}));
    let (mut before, mut after, mut drop) = (Vec::new(), Vec::new(), Vec::new());
    for w in worlds {
        let m0 = metrics(&w.suspect.backdoored, w);
        let purified = match purify(w, &w.suspect.backdoored, &cfg) {
            Ok(ck) => ck,
            Err(e) => return outcome(false, format!("purification failed: {e}")),
        };
        let m1 = metrics(&purified, w);
        before.push(m0.asr);
        after.push(m1.asr);
        drop.push(m0.cda - m1.cda);
    }
    let elapsed = setup + start.elapsed();
    let (b, a, d) = (mean(&before), mean(&after), mean(&drop));
    let pass = b >= 0.95 && a <= 0.10 && d <= 0.05 && elapsed.as_secs_f64() <= 60.0;
    outcome(
        pass,
        format!(
            "{} scenarios, mean ASR {b:.3} -> {a:.3}, mean CDA drop {d:.4}, worst ASR after {:.3}, {:.1} s",
            worlds.len(),
            after.iter().cloned().fold(0.0, f64::max),
            elapsed.as_secs_f64()
        ),
    )
}

fn alpha_zero_identity(worlds: &[World]) -> Outcome {
    let cfg = config(json!({"alpha": 0.0}));
    let mut worst: f64 = 0.0;
    for w in worlds {
        let out = match purify(w, &w.suspect.backdoored, &cfg) {
            Ok(ck) => ck,
            Err(e) => return outcome(false, format!("purification failed: {e}")),
        };
        for rec in w.suspect.backdoored.records().filter(|r| r.is_matrix()) {
            let got = out.get(rec.name()).unwrap().to_matrix();
            worst = worst.max(relative_frobenius_error(&got, &rec.to_matrix()));
        }
    }
    outcome(worst <= 1e-10, format!("{} scenarios, worst relative Frobenius change {worst:.2e}", worlds.len()))
}

fn svd_reconstruction() -> Outcome {
    let mut r = rng(0x5bd);
    let tol = PurificationConfig::default().svd_tol;
    let mut spent = Duration::ZERO;
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    // 10 000 trials in total, split evenly over the two shapes.
    for (rows, cols) in [(64, 64), (64, 32)] {
        for _ in 0..5000 {
            let m = random_matrix(&mut r, rows, cols);
            let t = Instant::now();
            let d = decompose(&m, tol).unwrap();
            let back = d.reconstruct();
            spent += t.elapsed();
            worst = worst.max(relative_frobenius_error(&back, &m));
            trials += 1;
        }
    }
    let pass = worst <= 1e-10 && spent.as_secs_f64() < 10.0;
    outcome(pass, format!("{trials} trials, worst error {worst:.2e}, {:.2} s", spent.as_secs_f64()))
}

fn signal_equivalence() -> Outcome {
    let mut r = rng(0x519);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w = random_matrix(&mut r, 8, 8);
        let p = random_matrix(&mut r, 8, 8);
        let d = decompose(&w, 1e-12).unwrap();
        let c = backdoor_signal(&p, &d).unwrap();
        for (i, ci) in c.iter().enumerate() {
            let (a, b) = (&d.left[i], &d.right[i]);
            let mut sum = 0.0;
            for j in 0..8 {
                for k in 0..8 {
                    sum += p.get(j, k) * a[j] * b[k];
                }
            }
            let prod = p.transpose().matmul(&Matrix::outer(a, b));
            let trace: f64 = (0..8).map(|i| prod.get(i, i)).sum();
            worst = worst.max((ci - sum.abs()).abs()).max((ci - trace.abs()).abs());
        }
    }
    outcome(worst <= 1e-12, format!("1000 instances, worst disagreement {worst:.2e}"))
}

fn dense_top_eigenvector(members: &[Vec<f64>]) -> Vec<f64> {
    let n = members.len() as f64;
    let dim = members[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / n).collect();
    let cov = faer::Mat::<f64>::from_fn(dim, dim, |a, b| {
        members.iter().map(|m| (m[a] - mean[a]) * (m[b] - mean[b])).sum::<f64>() / n
    });
    let eig = cov.self_adjoint_eigen(faer::Side::Lower).unwrap();
    let vals = eig.S().column_vector();
    let top = (0..dim).max_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap();
    eig.U().col(top).iter().copied().collect()
}

fn pca_oracle() -> Outcome {
    let mut r = rng(0x9ca);
    let resolver = wspurify::core::SchemeResolver;
    let (mut worst_cos, mut worst_norm) = (f64::INFINITY, 0.0f64);
    for _ in 0..100 {
        let dim = r.random_range(2..=200);
        let n = r.random_range(2..=50);
        let axis = gauss(&mut r, dim);
        let an = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
        let shift = normal(&mut r);
        let members: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let s = 3.0 * normal(&mut r);
                gauss(&mut r, dim).iter().zip(&axis).map(|(g, a)| 0.3 * g + s * a / an + shift).collect()
            })
            .collect();
        let maps: Vec<DeltaMap> = members
            .iter()
            .map(|m| DeltaMap::new(vec![("w".into(), vec![dim], m.clone())], &resolver, SourceKind::BackdoorVector).unwrap())
            .collect();
        let refs: Vec<&DeltaMap> = maps.iter().collect();
        let out = match aggregate_pca(&refs, &PcaOptions::default()) {
            Ok(o) => o,
            Err(e) => return outcome(false, format!("dim {dim}, {n} members: {e}")),
        };
        worst_cos = worst_cos.min(cosine(&out.direction, &dense_top_eigenvector(&members)).unwrap().abs());
        let mean_norm = mean(&members.iter().map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt()).collect::<Vec<_>>());
        let norm = flatten(&out.prototype).iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_norm = worst_norm.max((norm - mean_norm).abs());
    }
    outcome(
        worst_cos >= 1.0 - 1e-8 && worst_norm <= 1e-9,
        format!("100 pools, worst |cos| {worst_cos:.12}, worst norm error {worst_norm:.2e}"),
    )
}

/// Literal scan of both boundary criteria.
fn brute_force_boundary(s: &[f64], cfg: &BoundaryConfig) -> Option<usize> {
    let m = cfg.m.unwrap_or(4.max(s.len() / 4).min(s.len()));
    let mu = s[..m].iter().sum::<f64>() / m as f64;
    let sigma = (s[..m].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64).sqrt();
    let (mag, jump) = if sigma < 1e-12 {
        (mu + cfg.fallback_magnitude, cfg.fallback_jump)
    } else {
        (mu + cfg.kappa * sigma, cfg.epsilon * sigma)
    };
    (1..s.len()).find(|&l| s[l] >= mag && s[l] - s[l - 1] >= jump)
}

fn boundary_oracle() -> Outcome {
    let mut r = rng(0xb0d);
    let mut mismatches = Vec::new();
    let mut detected = 0;
    let mut fallbacks = 0;
    let check = |s: &[f64], cfg: &BoundaryConfig, expected: Option<Option<usize>>, mismatches: &mut Vec<String>| {
        let p = AlignmentProfile::from_scores(s.to_vec(), cfg).unwrap();
        let oracle = brute_force_boundary(s, cfg);
        let again = detect_boundary(&p, cfg);
        if p.boundary != oracle || again != oracle || expected.is_some_and(|e| e != oracle) {
            mismatches.push(format!("{s:?}: got {:?}/{again:?}, oracle {oracle:?}, expected {expected:?}", p.boundary));
        }
        p
    };
    for i in 0..1000 {
        let l = r.random_range(2..=32);
        let m = if r.random_bool(0.5) { None } else { Some(r.random_range(1..=l)) };
        let cfg = BoundaryConfig { m, kappa: r.random_range(0.0..3.0), epsilon: r.random_range(0.0..3.0), ..Default::default() };
        let s: Vec<f64> = match i % 3 {
            0 => (0..l).map(|_| r.random_range(0.0..1.0)).collect(),
            // Noisy low baseline, then a rise of random steepness.
            1 => {
                let knee = r.random_range(1..l);
                let step = r.random_range(0.0..0.4);
                (0..l)
                    .map(|j| 0.1 + 0.03 * r.random_range(-1.0..1.0) + step * j.saturating_sub(knee) as f64)
                    .collect()
            }
            // Flat baseline, exercising the fallback thresholds.
            _ => {
                let b = r.random_range(0.0..0.5);
                let m = cfg.resolve_m(l);
                (0..l).map(|j| if j < m { b } else { r.random_range(0.0..1.0) }).collect()
            }
        };
        let p = check(&s, &cfg, None, &mut mismatches);
        detected += p.boundary.is_some() as usize;
        fallbacks += p.fallback as usize;
    }
    let d = BoundaryConfig::default();
    let m1 = BoundaryConfig { m: Some(1), ..d };
    let m4 = BoundaryConfig { m: Some(4), ..d };
    let m8 = BoundaryConfig { m: Some(8), ..d };
    let tiny = 1e-12;
    let mut flat_then_jump = vec![0.1; 32];
    for v in &mut flat_then_jump[20..] {
        *v = 0.9;
    }
    let hand: Vec<(Vec<f64>, BoundaryConfig, Option<usize>)> = vec![
        (vec![0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.8, 0.9], d, Some(6)),
        (vec![0.1; 8], d, None),
        (vec![0.1, 0.1, 0.1, 0.1, 0.35, 0.5, 0.6, 0.7], d, Some(4)),
        (vec![0.1, 0.1, 0.1, 0.1, 0.25, 0.3, 0.9, 0.95], d, Some(6)),
        (vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], d, Some(7)),
        (vec![0.5, 0.5, 0.5, 0.5, 0.55, 0.6, 0.65, 0.7], d, None),
        (vec![0.9, 0.9, 0.9, 0.9, 0.2, 0.9, 0.9, 0.9], d, None),
        (vec![0.1, 0.2, 0.1, 0.2, 0.2, 0.32, 0.9, 0.9], d, Some(5)),
        (vec![0.1, 0.2, 0.1, 0.2, 0.24, 0.26, 0.30, 0.34], d, None),
        (vec![0.0, 0.5, 0.5, 0.5], m1, Some(1)),
        (vec![0.0, 0.5], d, None),
        (vec![0.0, 0.5], m1, Some(1)),
        ((0..32).map(|l| l as f64 / 31.0).collect(), m8, None),
        (flat_then_jump, m8, Some(20)),
        (vec![0.1, 0.1, 0.1, 0.1, 0.9, 0.5, 0.9, 0.95], d, Some(4)),
        (vec![0.1, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], d, None),
        (vec![0.1, 0.2, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1], BoundaryConfig { kappa: 0.0, epsilon: 0.0, ..m4 }, Some(1)),
        // Baseline spread just above the flatness cutoff: statistical thresholds.
        (vec![0.1, 0.1, 0.1, 0.1 + 4.0 * tiny, 0.15, 0.15, 0.15, 0.15], d, Some(4)),
        // Just below it: absolute fallback thresholds, 0.15 is not enough.
        (vec![0.1, 0.1, 0.1, 0.1 + tiny, 0.15, 0.15, 0.15, 0.15], d, None),
        (
            vec![0.1, 0.1, 0.1, 0.1, 0.5, 0.65, 0.7, 0.7],
            BoundaryConfig { fallback_magnitude: 0.5, fallback_jump: 0.1, ..d },
            Some(5),
        ),
    ];
    let n_hand = hand.len();
    for (s, cfg, want) in &hand {
        check(s, cfg, Some(*want), &mut mismatches);
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "1000 random ({detected} with a boundary, {fallbacks} flat-baseline) + {n_hand} hand profiles, {} mismatches{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(", first: {m}")).unwrap_or_default()
        ),
    )
}

fn selection_hand_case() -> Outcome {
    let s = select_components(&[0.0, 0.0, 0.0, 10.0], 1.0);
    let tau = s.tau.unwrap_or(f64::NAN);
    let flat = select_components(&[2.0, 2.0, 2.0, 2.0], 1.0);
    let pass = (tau - 6.830).abs() <= 5e-4 && s.selected == [3] && flat.selected.is_empty();
    outcome(pass, format!("tau {tau:.4}, selected {:?}; flat signals select {:?}", s.selected, flat.selected))
}

fn clean_safety(worlds: &[World]) -> Outcome {
    // A clean model has no boundary to detect, so use the widest scope.
    let cfg = config(json!({"alpha": 0.95, "boundary_override": 0}));
    let mut changes = Vec::new();
    for w in worlds {
        let before = metrics(&w.suspect.clean, w).cda;
        match purify(w, &w.suspect.clean, &cfg) {
            Ok(ck) => changes.push((metrics(&ck, w).cda - before).abs()),
            Err(e) => return outcome(false, format!("purification failed: {e}")),
        }
    }
    let worst = changes.iter().cloned().fold(0.0, f64::max);
    outcome(worst <= 0.03, format!("{} clean models, worst |CDA change| {worst:.4}", changes.len()))
}

fn amplified(worlds: &[World]) -> Outcome {
    let cfg = config(json!({"alpha": 0.95}));
    let mut asr = Vec::new();
    for w in worlds {
        let amp = simlab::adaptive_amplify(&w.suspect.backdoored, &w.suspect.clean, 1.2, AmplifyScope::default()).unwrap();
        match purify(w, &amp, &cfg) {
            Ok(ck) => asr.push(metrics(&ck, w).asr),
            Err(e) => return outcome(false, format!("purification failed: {e}")),
        }
    }
    let worst = asr.iter().cloned().fold(0.0, f64::max);
    outcome(worst <= 0.15, format!("{} scenarios at 1.2x, worst ASR after {worst:.3}, mean {:.3}", asr.len(), mean(&asr)))
}

fn backdoor_vs_benign() -> Outcome {
    let seed = 4242;
    let arch = SynthArch::standard(seed);
    let base = simlab::gen_base(&arch).unwrap();
    let mut backdoors = Vec::new();
    let mut benign = Vec::new();
    for i in 0..10u64 {
        let p = pair(&arch, &base, 0, TriggerFamily::Prefix, seed * 1000 + i);
        backdoors.push(flatten(&delta(&p.backdoored, &p.clean, SourceKind::BackdoorVector).unwrap()).into_vec());
        // Independent benign fine-tunes: other datasets, families and noise.
        let q = pair(&arch, &base, i as usize, TriggerFamily::ALL[(i % 5) as usize], seed * 1000 + 500 + i);
        benign.push(flatten(&delta(&q.clean, &base, SourceKind::SuspectDelta).unwrap()).into_vec());
    }
    let mut bb = Vec::new();
    for i in 0..10 {
        for j in i + 1..10 {
            bb.push(cosine(&backdoors[i], &backdoors[j]).unwrap());
        }
    }
    let bc: Vec<f64> = backdoors.iter().flat_map(|b| benign.iter().map(|c| cosine(b, c).unwrap())).collect();
    let gap = mean(&bb) - mean(&bc);
    outcome(gap >= 0.2, format!("mean cos(B,B) {:.3}, mean cos(B,C) {:.3}, gap {gap:.3}", mean(&bb), mean(&bc)))
}

fn random_checkpoint(r: &mut ChaCha8Rng) -> Checkpoint {
    let layers = r.random_range(1..=4);
    let d = r.random_range(1..=12);
    let mut recs = Vec::new();
    let mut push = |r: &mut ChaCha8Rng, name: String, shape: Vec<usize>| {
        let dtype = if r.random_bool(0.5) { Dtype::F32 } else { Dtype::F64 };
        let n = shape.iter().product();
        let scale = 10f64.powi(r.random_range(-3..=3));
        let values = gauss(r, n).into_iter().map(|v| v * scale).collect();
        recs.push(TensorRecord::new(name, shape, dtype, values).unwrap());
    };
    for l in 0..layers {
        for role in simlab::LAYER_ROLES {
            if r.random_bool(0.7) {
                let cols = r.random_range(1..=12);
                push(r, simlab::tensor_name(l, role), vec![d, cols]);
            }
        }
        if r.random_bool(0.5) {
            push(r, format!("layer.{l}.norm"), vec![d]);
        }
    }
    let classes = r.random_range(1..=5);
    push(r, "head".into(), vec![classes, d]);
    Checkpoint::new(recs, &RegexResolver::builtin()).unwrap()
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let resolver = RegexResolver::builtin();
    let mut r = rng(0xf11e);
    let mut failures = 0;
    for i in 0..100 {
        let ck = random_checkpoint(&mut r);
        let (a, b) = (dir.path().join(format!("{i}a.ckpt")), dir.path().join(format!("{i}b.ckpt")));
        save_checkpoint(&ck, &a).unwrap();
        let back = load_checkpoint(&a, &resolver).unwrap();
        save_checkpoint(&back, &b).unwrap();
        let (ba, bb) = (read_bytes(&a).unwrap(), read_bytes(&b).unwrap());
        if ba != bb || ba != checkpoint_bytes(&ck) || back != ck {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("100 checkpoints, {failures} not byte-identical"))
}

fn main() {
    let setup = Instant::now();
    let worlds: Vec<World> = (0..20).map(world).collect();
    let setup = setup.elapsed();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("end-to-end purification", Box::new(|| end_to_end(&worlds, setup))),
        ("alpha = 0 identity", Box::new(|| alpha_zero_identity(&worlds))),
        ("SVD reconstruction", Box::new(svd_reconstruction)),
        ("signal three-way equivalence", Box::new(signal_equivalence)),
        ("PCA oracle", Box::new(pca_oracle)),
        ("boundary oracle", Box::new(boundary_oracle)),
        ("selection hand case", Box::new(selection_hand_case)),
        ("clean-model safety", Box::new(|| clean_safety(&worlds[..10]))),
        ("amplified-backdoor robustness", Box::new(|| amplified(&worlds[..10]))),
        ("backdoor vs benign cosine gap", Box::new(backdoor_vs_benign)),
        ("format round-trip", Box::new(format_round_trip)),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(*name);
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
