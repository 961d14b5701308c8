use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

use driftharness::corpus::{deduplicate, normalize, segment, DateRange, Granularity, Instance, NormalizedKey};
use driftharness::features::FeatureVector;
use driftharness::metrics::macro_f1;
use driftharness::model::{AdapterConfig, AdapterModel, OrthoState};
use driftharness::stats::{cliffs_delta, wilcoxon_signed_rank};

fn code_fragment() -> impl Strategy<Value = String> {
    let atoms = prop::sample::select(vec![
        "int",
        "x",
        "=",
        "y",
        ";",
        "{",
        "}",
        "(",
        ")",
        "return",
        "0",
        "buf[i]",
        " ",
        "\n",
        "\t",
        "// c\n",
        "/* b */",
        "\"s // q\"",
    ]);
    prop::collection::vec(atoms, 0..40).prop_map(|v| v.concat())
}

fn day() -> impl Strategy<Value = NaiveDate> {
    (0i64..730).prop_map(|d| NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + chrono::Duration::days(d))
}

proptest! {
    #[test]
    fn normalize_is_idempotent(code in code_fragment()) {
        let once = normalize(&code);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn key_ignores_layout(code in code_fragment().prop_filter("no string literals", |c| !c.contains('"')), pad in prop::sample::select(vec!["  ", "\n\n", "\t "])) {
        let spread = code.replace(';', &format!(";{pad}"));
        prop_assert_eq!(NormalizedKey::of(&code), NormalizedKey::of(&spread));
    }

    #[test]
    fn dedup_leaves_unique_keys_and_is_idempotent(
        items in prop::collection::vec((code_fragment(), day(), 0u8..2), 1..30)
    ) {
        let instances: Vec<Instance> = items
            .into_iter()
            .enumerate()
            .map(|(i, (c, d, y))| Instance::new(format!("id{i:02}"), c, y, d))
            .collect();
        let kept = deduplicate(&instances);
        let keys: std::collections::HashSet<_> = kept.iter().map(Instance::key).collect();
        prop_assert_eq!(keys.len(), kept.len());
        let all_keys: std::collections::HashSet<_> = instances.iter().map(Instance::key).collect();
        prop_assert_eq!(&keys, &all_keys);
        prop_assert_eq!(deduplicate(&kept), kept);
    }

    #[test]
    fn segment_partitions_the_range(dates in prop::collection::vec(day(), 1..60), months in prop::sample::select(vec![1u32, 2, 3, 6, 12])) {
        let instances: Vec<Instance> = dates
            .iter()
            .enumerate()
            .map(|(i, d)| Instance::new(format!("i{i}"), format!("int f{i};"), (i % 2) as u8, *d))
            .collect();
        let range = DateRange::new(NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(), NaiveDate::from_ymd_opt(2020, 12, 31).unwrap()).unwrap();
        let windows = segment(&instances, &range, Granularity::from_months(months).unwrap()).unwrap();
        let placed: usize = windows.iter().map(|w| w.len()).sum();
        prop_assert_eq!(placed, instances.len());
        for (i, w) in windows.iter().enumerate() {
            prop_assert_eq!(w.index, i + 1);
            if i > 0 {
                prop_assert_eq!(windows[i - 1].end_date.succ_opt().unwrap(), w.start_date);
            }
            for inst in &w.instances {
                prop_assert!(w.start_date <= inst.disclosure_date && inst.disclosure_date <= w.end_date);
            }
        }
    }

    #[test]
    fn fused_logits_match_split_form(seed in 0u64..1000, rank in 1usize..6, alpha in 1.0f64..40.0,
                                     entries in prop::collection::vec(-1.0f64..1.0, 16)) {
        let mut cfg = AdapterConfig::default();
        cfg.features.dim = 16;
        cfg.rank = rank;
        cfg.alpha = alpha;
        cfg.init_seed = seed;
        let mut model = AdapterModel::new(cfg);
        let a = Array2::from_shape_fn((2, rank), |(i, j)| ((seed as f64 + 1.0) * (i * rank + j + 1) as f64).sin());
        let b = Array2::from_shape_fn((rank, 16), |(i, j)| ((i * 16 + j) as f64 + seed as f64).cos() * 0.3);
        model.set_adapter(a.clone(), b.clone()).unwrap();
        let x = FeatureVector::from_dense(&entries);
        let dense = Array1::from(entries.clone());
        let split = model.base().dot(&dense) + cfg.scaling() * a.dot(&b.dot(&dense));
        let fused = model.effective_weights().dot(&dense);
        let logits = model.logits(&x);
        for c in 0..2 {
            prop_assert!((logits[c] - split[c]).abs() < 1e-9);
            prop_assert!((fused[c] - split[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn ortho_basis_stays_orthonormal(dirs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 1..20), cap in 1usize..10) {
        let mut state = OrthoState::new(12, cap);
        state.absorb_directions(dirs.iter().map(Vec::as_slice));
        prop_assert!(state.len() <= cap.min(12));
        prop_assert!(state.orthonormality_error() < 1e-9);
    }

    #[test]
    fn macro_f1_is_class_symmetric(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..80)) {
        let (y, p): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let f = macro_f1(&y, &p).unwrap();
        let flip = |v: &[u8]| v.iter().map(|c| 1 - c).collect::<Vec<_>>();
        prop_assert_eq!(macro_f1(&flip(&y), &flip(&p)).unwrap(), f);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(macro_f1(&y, &y).unwrap() == 1.0, y.contains(&0) && y.contains(&1));
    }

    #[test]
    fn wilcoxon_is_scale_free(diffs in prop::collection::vec(-5i32..=5, 1..25), scale in 0.1f64..100.0) {
        let d: Vec<f64> = diffs.iter().map(|&v| v as f64).collect();
        let scaled: Vec<f64> = d.iter().map(|v| v * scale).collect();
        let w = wilcoxon_signed_rank(&d).unwrap();
        let ws = wilcoxon_signed_rank(&scaled).unwrap();
        prop_assert!((0.0..=1.0).contains(&w.p_value));
        prop_assert_eq!(w.p_value, ws.p_value);
        prop_assert_eq!(w.n_effective, d.iter().filter(|v| **v != 0.0).count());
    }

    #[test]
    fn cliffs_delta_is_bounded(a in prop::collection::vec(0.0f64..1.0, 1..30), b in prop::collection::vec(0.0f64..1.0, 1..30)) {
        let d = cliffs_delta(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&d));
        prop_assert_eq!(cliffs_delta(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let date = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let instances: Vec<Instance> = (0..20)
        .map(|i| {
            Instance::new(
                format!("c{i}"),
                format!("void f{i}(char *p) {{ memcpy(p, src, {i}); }}"),
                (i % 2) as u8,
                date,
            )
        })
        .collect();
    let mut model = AdapterModel::new(AdapterConfig::default());
    let tc = driftharness::synth::train_preset(3);
    model.train(&instances, &[], &tc, None, None).unwrap();
    let path = dir.path().join("ckpt.json");
    model.save(&path, Some(&tc)).unwrap();
    let loaded = AdapterModel::load(&path).unwrap();
    assert_eq!(loaded.predict(&instances), model.predict(&instances));
    assert_eq!(loaded.a(), model.a());
    assert_eq!(loaded.b(), model.b());
}
