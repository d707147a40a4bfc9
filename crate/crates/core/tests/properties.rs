use proptest::prelude::*;

use wspurify_core::boundary::AlignmentProfile;
use wspurify_core::prototype::PrototypePool;
use wspurify_core::purifier::plan;
use wspurify_core::*;

/// `(name, shape)` list for `layers` layers with two matrix roles each, a
/// per-layer norm vector and a head.
fn layout(layers: usize, rows: usize, cols: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for l in 0..layers {
        v.push((format!("layer.{l}.attn_q"), vec![rows, cols]));
        v.push((format!("layer.{l}.mlp_up"), vec![cols, rows]));
        v.push((format!("layer.{l}.norm"), vec![cols]));
    }
    v.push(("head".to_string(), vec![2, cols]));
    v
}

fn numel(layout: &[(String, Vec<usize>)]) -> usize {
    layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

fn fill(layout: &[(String, Vec<usize>)], values: &[f64]) -> DeltaMap {
    let mut off = 0;
    let entries = layout
        .iter()
        .map(|(n, s)| {
            let k: usize = s.iter().product();
            off += k;
            (n.clone(), s.clone(), values[off - k..off].to_vec())
        })
        .collect();
    DeltaMap::new(entries, &SchemeResolver, SourceKind::BackdoorVector).unwrap()
}

fn checkpoint(layout: &[(String, Vec<usize>)], values: &[f64]) -> Checkpoint {
    let mut off = 0;
    let records = layout
        .iter()
        .map(|(n, s)| {
            let k: usize = s.iter().product();
            off += k;
            TensorRecord::new(n.clone(), s.clone(), Dtype::F64, values[off - k..off].to_vec()).unwrap()
        })
        .collect();
    Checkpoint::new(records, &SchemeResolver).unwrap()
}

prop_compose! {
    fn arb_layout()(layers in 1usize..4, rows in 1usize..4, cols in 1usize..4) -> Vec<(String, Vec<usize>)> {
        layout(layers, rows, cols)
    }
}

/// A layout plus `k` value vectors for it.
fn arb_maps(k: usize) -> impl Strategy<Value = (Vec<(String, Vec<usize>)>, Vec<Vec<f64>>)> {
    arb_layout().prop_flat_map(move |l| {
        let n = numel(&l);
        (Just(l), proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, n), k))
    })
}

proptest! {
    #[test]
    fn flatten_unflatten_round_trip((l, vals) in arb_maps(1)) {
        let d = fill(&l, &vals[0]);
        let flat = flatten(&d);
        // Flattening walks tensors in name order, not insertion order.
        let mut off = 0;
        let mut chunks: Vec<(&String, &[f64])> = l.iter().map(|(n, s)| {
            let k: usize = s.iter().product();
            off += k;
            (n, &vals[0][off - k..off])
        }).collect();
        chunks.sort_by_key(|c| c.0);
        let expected: Vec<f64> = chunks.iter().flat_map(|c| c.1.iter().copied()).collect();
        prop_assert_eq!(flat.as_ref(), &expected[..]);
        let back = unflatten(&flat, &d, SourceKind::BackdoorVector).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn delta_is_linear((l, vals) in arb_maps(3)) {
        let (a, b, c) = (checkpoint(&l, &vals[0]), checkpoint(&l, &vals[1]), checkpoint(&l, &vals[2]));
        let ab = delta(&a, &b, SourceKind::TaskVector).unwrap();
        let bc = delta(&b, &c, SourceKind::TaskVector).unwrap();
        let ac = delta(&a, &c, SourceKind::TaskVector).unwrap();
        let sum = ab.add(&bc).unwrap();
        for (x, y) in flatten(&sum).iter().zip(flatten(&ac).iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        let neg = delta(&b, &a, SourceKind::TaskVector).unwrap();
        prop_assert!(flatten(&ab.add(&neg).unwrap()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(
        (u, v) in (1usize..40).prop_flat_map(|n| (
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-5.0f64..5.0, n),
        )),
        s in 0.01f64..100.0,
    ) {
        let c = cosine(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine(&v, &u).unwrap());
        let su: Vec<f64> = u.iter().map(|x| x * s).collect();
        prop_assert!((cosine(&su, &v).unwrap() - c).abs() < 1e-12);
        let nu: Vec<f64> = u.iter().map(|x| -x).collect();
        prop_assert!((cosine(&nu, &v).unwrap() + c).abs() < 1e-12);
    }

    #[test]
    fn am_is_permutation_invariant((l, vals) in arb_maps(5), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let maps: Vec<DeltaMap> = vals.iter().map(|v| fill(&l, v)).collect();
        let refs: Vec<&DeltaMap> = maps.iter().collect();
        let shuffled: Vec<&DeltaMap> = perm.iter().map(|&i| &maps[i]).collect();
        let a = aggregate_am(&refs).unwrap();
        let b = aggregate_am(&shuffled).unwrap();
        prop_assert_eq!(flatten(&a).into_vec(), flatten(&b).into_vec());
    }

    #[test]
    fn match_is_invariant_to_positive_scaling((l, vals) in arb_maps(4), s in 0.01f64..100.0) {
        let cands: Vec<Prototype> = vals[..3]
            .iter()
            .map(|v| Prototype { vector: fill(&l, v), method: AggregationMethod::Am, member_ids: vec![], subset_key: String::new() })
            .collect();
        let suspect = fill(&l, &vals[3]);
        let a = match_prototype(&cands, &suspect, RoleSet::ALL).unwrap();
        let b = match_prototype(&cands, &suspect.scale(s).unwrap(), RoleSet::ALL).unwrap();
        prop_assert_eq!(a.index, b.index);
        prop_assert!((a.score - b.score).abs() < 1e-12);
    }

    #[test]
    fn match_returns_argmax_of_scores((l, vals) in arb_maps(5)) {
        let cands: Vec<Prototype> = vals[..4]
            .iter()
            .map(|v| Prototype { vector: fill(&l, v), method: AggregationMethod::Am, member_ids: vec![], subset_key: String::new() })
            .collect();
        let suspect = fill(&l, &vals[4]);
        let m = match_prototype(&cands, &suspect, RoleSet::ALL).unwrap();
        for (i, c) in cands.iter().enumerate() {
            let s = cosine(&flatten(&suspect), &flatten(&c.vector)).unwrap();
            prop_assert_eq!(s, m.scores[i]);
            prop_assert!(s <= m.score);
            if i < m.index {
                prop_assert!(s < m.score);
            }
        }
    }

    #[test]
    fn boundary_is_monotone_in_thresholds(
        scores in proptest::collection::vec(0.0f64..1.0, 4..16),
        k1 in 0.0f64..4.0, dk in 0.0f64..4.0,
        e1 in 0.0f64..4.0, de in 0.0f64..4.0,
    ) {
        let lo = BoundaryConfig { m: Some(3), kappa: k1, epsilon: e1, ..Default::default() };
        let hi = BoundaryConfig { kappa: k1 + dk, epsilon: e1 + de, ..lo };
        let p = AlignmentProfile::from_scores(scores, &lo).unwrap();
        match (detect_boundary(&p, &lo), detect_boundary(&p, &hi)) {
            (Some(a), Some(b)) => prop_assert!(b >= a),
            (None, Some(_)) => prop_assert!(false, "stricter thresholds found a boundary"),
            _ => {}
        }
    }

    #[test]
    fn profile_scores_lie_in_unit_interval((l, vals) in arb_maps(2)) {
        let (a, b) = (fill(&l, &vals[0]), fill(&l, &vals[1]));
        if a.num_layers() >= 2 {
            let p = alignment_profile(&a, &b, &BoundaryConfig { m: Some(2), ..Default::default() }).unwrap();
            prop_assert!(p.scores.iter().all(|s| (0.0..=1.0).contains(s)));
            prop_assert_eq!(p.clone(), alignment_profile(&a, &b, &BoundaryConfig { m: Some(2), ..Default::default() }).unwrap());
        }
    }

    #[test]
    fn out_of_scope_tensors_are_bit_identical(
        (l, vals) in arb_layout().prop_flat_map(|l| {
            let n = numel(&l);
            (Just(l), proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, n), 3))
        }),
        alpha in 0.0f64..=1.0,
        boundary_frac in 0.0f64..=1.0,
    ) {
        let suspect = checkpoint(&l, &vals[0]);
        let base = checkpoint(&l, &vals[1]);
        let proto = fill(&l, &vals[2]);
        let boundary = (boundary_frac * suspect.num_layers() as f64).floor() as usize;
        let cfg = PurificationConfig { alpha, boundary, roles: RoleSet::MLP, ..Default::default() };
        let (out, report) = purify_checkpoint(&suspect, &base, &proto, &cfg).unwrap();
        let touched = plan(&suspect, &cfg);
        prop_assert_eq!(report.matrices.len(), touched.len());
        for r in suspect.records() {
            if !touched.iter().any(|t| t == r.name()) {
                prop_assert_eq!(out.get(r.name()).unwrap(), r);
            } else {
                let a = suspect.address(r.name()).unwrap();
                prop_assert!(a.role == Role::MlpUp && a.layer.unwrap() >= boundary);
            }
        }
    }

    #[test]
    fn suppression_is_monotone_in_alpha(
        (w, b, p) in (2usize..6, 2usize..6).prop_flat_map(|(r, c)| (
            proptest::collection::vec(-2.0f64..2.0, r * c).prop_map(move |v| Matrix::from_row_major(r, c, v)),
            proptest::collection::vec(-2.0f64..2.0, r * c).prop_map(move |v| Matrix::from_row_major(r, c, v)),
            proptest::collection::vec(-2.0f64..2.0, r * c).prop_map(move |v| Matrix::from_row_major(r, c, v)),
        )),
        a1 in 0.0f64..=1.0, da in 0.0f64..=1.0,
    ) {
        let a2 = (a1 + da).min(1.0);
        let cfg1 = PurificationConfig { alpha: a1, ..Default::default() };
        let cfg2 = PurificationConfig { alpha: a2, ..Default::default() };
        let (w1, r1) = purify_matrix(&w, &b, &p, &cfg1).unwrap();
        let (w2, r2) = purify_matrix(&w, &b, &p, &cfg2).unwrap();
        prop_assert_eq!(&r1.selected, &r2.selected);
        let n1 = w1.sub(&b).frobenius_norm();
        let n2 = w2.sub(&b).frobenius_norm();
        prop_assert!(n2 <= n1 + 1e-12);
    }

    #[test]
    fn tau_is_recomputable_from_signals(signals in proptest::collection::vec(0.0f64..5.0, 1..30), eta in 0.0f64..3.0) {
        let s = select_components(&signals, eta);
        let n = signals.len() as f64;
        let mu = signals.iter().sum::<f64>() / n;
        let sd = (signals.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / n).sqrt();
        prop_assert!((s.tau.unwrap() - (mu + eta * sd)).abs() < 1e-12);
        if sd >= 1e-12 {
            let brute: Vec<usize> = (0..signals.len()).filter(|&i| signals[i] >= s.tau.unwrap()).collect();
            prop_assert_eq!(s.selected, brute);
        }
    }

    #[test]
    fn pool_rejects_nothing_compatible((l, vals) in arb_maps(3)) {
        let entries = vals.iter().enumerate()
            .map(|(i, v)| PoolEntry::new(fill(&l, v), format!("d{}", i % 2), "a", "t"))
            .collect();
        let pool = PrototypePool::new(entries).unwrap();
        let set = build_candidates(&pool, GroupBy::DatasetId, AggregationMethod::Am, &PcaOptions::default(), &PoolFilter::default()).unwrap();
        prop_assert_eq!(set.prototypes.len(), 2);
        let ids: Vec<usize> = set.prototypes.iter().flat_map(|p| p.member_ids.clone()).collect();
        prop_assert_eq!(ids, vec![0, 2, 1]);
    }
}
