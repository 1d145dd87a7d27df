use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctxabstain::cara::{
    decide_scored, heuristic_score, AbstentionConfig, AbstentionMode, Decision, ScoredSample,
};
use ctxabstain::cli::RunConfig;
use ctxabstain::datamodel::{
    generate_dataset, load_dataset, save_dataset, ContextUnit, ContextWindow, DatasetMeta,
    GeneratorConfig, QuestionKind, Sample,
};
use ctxabstain::evalmetrics::{default_theta_grid, detection_metrics, risk_coverage, sweep_scored};
use ctxabstain::numerics::Vector;
use ctxabstain::pseudolabel::{label_one, InferenceRecord, PseudoLabel, PseudoLabelConfig};
use ctxabstain::selector::{combinations, joint_loss, SelectorModel};
use ctxabstain::taskmodel::{InputLayout, TaskModel};

fn decisions() -> impl Strategy<Value = Vec<Decision>> {
    prop::collection::vec((any::<bool>(), any::<bool>(), 0usize..4), 1..80).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (abstained, correct, label))| Decision {
                id: format!("d{i}"),
                c: 0.5,
                v: 0.5,
                h: None,
                abstained,
                label: (!abstained).then_some(label),
                correct: (!abstained).then_some(correct),
            })
            .collect()
    })
}

fn scored() -> impl Strategy<Value = Vec<ScoredSample>> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()), 1..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (c, v, correct))| ScoredSample {
                id: format!("s{i}"),
                c,
                v,
                label: 0,
                correct,
                truth: None,
            })
            .collect()
    })
}

fn meta() -> DatasetMeta {
    DatasetMeta {
        text_dim: 3,
        image_dim: 2,
        context_dim: 2,
        num_choices: 3,
        window_radius: 3,
        seed: 0,
        config_hash: String::new(),
    }
}

fn sample(values: &[f64], window_len: usize, gold: usize) -> Sample {
    let at = |i: usize| values[i % values.len()];
    let units = (0..window_len)
        .map(|k| ContextUnit {
            index: k as i64 - 3,
            text_emb: Vector::new(vec![at(4 * k), at(4 * k + 1)]),
            image_emb: Vector::new(vec![at(4 * k + 2), at(4 * k + 3)]),
            tag: format!("clip_{k}"),
        })
        .collect();
    Sample {
        id: "p".into(),
        text_emb: Vector::new(vec![at(1), at(3), at(5)]),
        image_emb: Vector::new(vec![at(7), at(9)]),
        num_choices: 3,
        gold,
        window: ContextWindow::new(units, 3).unwrap(),
        question_kind: QuestionKind::Neutral,
        sufficiency_truth: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn risk_coverage_accounting(d in decisions(), cost in 0.0f64..5.0) {
        let r = risk_coverage(&d).unwrap();
        prop_assert_eq!(r.answered + r.abstained, r.total);
        prop_assert_eq!(r.correct + r.wrong, r.answered);
        prop_assert!((0.0..=1.0).contains(&r.coverage));
        prop_assert_eq!(r.risk_undefined, r.answered == 0);
        let phi = (r.correct as f64 - cost * r.wrong as f64) / r.total as f64;
        prop_assert!((r.phi(cost) - phi).abs() < 1e-12);
    }

    #[test]
    fn cara_only_coverage_grows_with_theta(s in scored()) {
        let rows = sweep_scored(&s, &default_theta_grid(), &[0.5], AbstentionMode::CaraOnly).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].report.coverage >= w[0].report.coverage);
        }
    }

    #[test]
    fn decisions_follow_their_rule(c in 0.0f64..=1.0, v in 0.0f64..=1.0, theta in 0.0f64..=1.0, w in 0.01f64..=1.0) {
        let x = ScoredSample { id: "x".into(), c, v, label: 1, correct: true, truth: None };
        let cara = decide_scored(&x, &AbstentionConfig { theta, w, mode: AbstentionMode::CaraOnly }).unwrap();
        prop_assert_eq!(cara.abstained, c > theta);
        let h = heuristic_score(c, v, w).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        let fused = decide_scored(&x, &AbstentionConfig { theta, w, mode: AbstentionMode::Fused }).unwrap();
        prop_assert_eq!(fused.abstained, h < theta);
        prop_assert_eq!(fused.label.is_some(), !fused.abstained);
    }

    #[test]
    fn confusion_matrix_covers_every_sample(pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..100), theta in 0.0f64..=1.0) {
        let r = detection_metrics(&pairs, theta).unwrap();
        prop_assert_eq!(r.true_positive + r.false_positive + r.true_negative + r.false_negative, pairs.len());
        for m in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn pseudo_labels_partition_and_respect_thresholds(
        cc in any::<bool>(), cconf in 0.0f64..=1.0, vc in any::<bool>(), vconf in 0.0f64..=1.0,
        gamma in 0.01f64..0.99, mu in 0.01f64..0.99,
    ) {
        let rec = InferenceRecord { id: "r".into(), cvlm_correct: cc, cvlm_conf: cconf, vlm_correct: vc, vlm_conf: vconf };
        let cfg = PseudoLabelConfig { gamma, mu };
        match label_one(&rec, &cfg) {
            PseudoLabel::Positive => prop_assert!(cc && cconf > gamma && !vc && vconf < mu),
            PseudoLabel::Negative => prop_assert!(cc && cconf > gamma && vc && vconf > gamma),
            PseudoLabel::Excluded => prop_assert!(!(cc && cconf > gamma) || (vc && vconf <= gamma) || (!vc && vconf >= mu)),
        }
    }

    #[test]
    fn combinations_are_sorted_distinct_and_complete(n in 0usize..9, r in 0usize..9) {
        let sets = combinations(n, r);
        let binom = |n: usize, r: usize| -> usize {
            if r > n { 0 } else { (0..r).fold(1usize, |acc, i| acc * (n - i) / (i + 1)) }
        };
        prop_assert_eq!(sets.len(), binom(n, r));
        for s in &sets {
            prop_assert_eq!(s.len(), r);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&i| i < n));
        }
        let mut dedup = sets.clone();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), sets.len());
    }

    #[test]
    fn joint_contributions_sum_to_the_loss(
        values in prop::collection::vec(-2.0f64..2.0, 12),
        window_len in 0usize..7, slots in 1usize..4, gold in 0usize..3, seed in any::<u64>(), normalize in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = TaskModel::new(InputLayout::for_meta(&meta(), slots), &[4], &mut rng).unwrap();
        let sel = SelectorModel::new(&meta(), &[3], &mut rng).unwrap();
        let jl = joint_loss(&m, &sel, &sample(&values, window_len, gold), normalize).unwrap();
        let sum: f64 = jl.terms.iter().map(|t| t.contribution).sum();
        prop_assert_eq!(sum, jl.loss);
        if normalize {
            let w: f64 = jl.terms.iter().map(|t| t.weight).sum();
            prop_assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_hash_survives_a_json_roundtrip(seed in any::<u64>(), w in 0.01f64..=1.0) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.abstention.w = w;
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn datasets_roundtrip_through_jsonl(seed in any::<u64>(), n in 1usize..20) {
        let ds = generate_dataset(&GeneratorConfig { num_samples: n, seed, ..GeneratorConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&ds, &path).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}
