use proptest::prelude::*;

use track4d_core::geometry::WorldPoint;
use track4d_core::metrics::{
    accuracy_metrics, aggregate_report, bleu4, cider, cider_scores, geometric_errors, tokenize, BleuSmoothing,
    GeometricEntry, GeometricKind, LanguagePair, QuestionType, ReportConfig, Thresholds, TurnErrors, TurnResult,
};

fn p(x: f64, y: f64, z: f64) -> WorldPoint {
    WorldPoint::new(x, y, z)
}

fn traj(step_errors: &[f64]) -> GeometricEntry {
    GeometricEntry {
        kind: GeometricKind::Trajectory,
        prediction: Some(step_errors.iter().map(|e| p(*e, 0.0, 0.0)).collect()),
        target: vec![p(0.0, 0.0, 0.0); step_errors.len()],
        valid: vec![true; step_errors.len()],
    }
}

#[test]
fn three_four_five() {
    let e = geometric_errors(&[GeometricEntry {
        kind: GeometricKind::Point,
        prediction: Some(vec![p(1.3, 2.4, -1.0)]),
        target: vec![p(1.0, 2.0, -1.0)],
        valid: vec![true],
    }])
    .unwrap();
    assert!((e.point_errors[0] - 0.5).abs() < 1e-12);
}

#[test]
fn masked_steps_leave_the_divisor() {
    let e = geometric_errors(&[GeometricEntry {
        kind: GeometricKind::Trajectory,
        prediction: Some(vec![p(0.2, 0.0, 0.0), p(9.0, 0.0, 0.0), p(0.0, 0.6, 0.0), p(0.0, 0.0, 7.0)]),
        target: vec![p(0.0, 0.0, 0.0); 4],
        valid: vec![true, false, true, false],
    }])
    .unwrap();
    assert_eq!(e.step_errors.len(), 1);
    assert_eq!(e.step_errors[0].len(), 2);
    assert!((e.step_errors[0][0] - 0.2).abs() < 1e-12);
    assert!((e.step_errors[0][1] - 0.6).abs() < 1e-12);
    assert!((e.trajectory_means[0] - 0.4).abs() < 1e-12);
}

#[test]
fn point_accuracy_enumeration() {
    let errs = TurnErrors {
        point_errors: vec![0.3, 0.7],
        ..TurnErrors::default()
    };
    assert_eq!(accuracy_metrics(&errs, Thresholds::default()).sacc, Some(0.5));
}

#[test]
fn micro_and_macro_diverge() {
    let e = geometric_errors(&[traj(&[0.4]), traj(&[0.6, 0.6, 0.6])]).unwrap();
    for (m, want) in e.trajectory_means.iter().zip([0.4, 0.6]) {
        assert!((m - want).abs() < 1e-12);
    }
    let acc = accuracy_metrics(&e, Thresholds::default());
    assert_eq!(acc.traj_acc, Some(1.0));
    assert_eq!(acc.tacc, Some(0.25));
    assert_eq!(acc.sacc, None);
}

#[test]
fn threshold_is_strict() {
    let errs = TurnErrors {
        point_errors: vec![0.5],
        step_errors: vec![vec![0.5]],
        trajectory_means: vec![1.0],
    };
    let acc = accuracy_metrics(&errs, Thresholds::default());
    assert_eq!((acc.sacc, acc.traj_acc, acc.tacc), (Some(0.0), Some(0.0), Some(0.0)));
}

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

#[test]
fn bleu_hand_counts() {
    let h = vec![toks("the cat sat on the mat")];
    let r = vec![vec![toks("the cat is on the mat")]];
    assert_eq!(bleu4(&h, &r, BleuSmoothing::None).unwrap(), 0.0);
    let expected = ((5.0f64 / 6.0).ln() + (3.0f64 / 5.0).ln() + (1.0f64 / 4.0).ln() + (0.1f64 / 3.0).ln()) / 4.0;
    let got = bleu4(&h, &r, BleuSmoothing::Epsilon).unwrap();
    assert!((got - expected.exp()).abs() < 1e-12);
    assert_eq!(bleu4(&[toks("a b c d e")], &[vec![toks("a b c d e")]], BleuSmoothing::None).unwrap(), 1.0);
    assert_eq!(bleu4(&[toks("x y z")], &[vec![toks("a b c d")]], BleuSmoothing::None).unwrap(), 0.0);
}

#[test]
fn cider_hand_tfidf_two_documents() {
    let refs = vec![vec![toks("a man rides a horse")], vec![toks("the dog sleeps now")]];
    let same = cider_scores(&[toks("a man rides a horse"), toks("the dog sleeps now")], &refs).unwrap();
    assert!((same[0] - 10.0).abs() < 1e-12 && (same[1] - 10.0).abs() < 1e-12);

    let scores = cider_scores(&[toks("a man rides a bike"), toks("the dog sleeps now")], &refs).unwrap();
    let expected = 10.0 * (6.0 / 7.0 + 3.0 / 4.0 + 2.0 / 3.0 + 1.0 / 2.0) / 4.0;
    assert!((scores[0] - expected).abs() < 1e-12);

    // n-grams shared by every document carry no weight
    let shared = vec![vec![toks("a man rides a horse")], vec![toks("a dog rides a bike")]];
    let s = cider_scores(&[toks("a man rides a horse"), toks("a dog rides a bike")], &shared).unwrap();
    assert!((s[0] - 10.0).abs() < 1e-12);
}

#[test]
fn cider_zero_overlap_and_length_penalty() {
    let refs = vec![vec![toks("a b c d")], vec![toks("e f g h")]];
    assert_eq!(cider_scores(&[toks("w x y z"), toks("e f g h")], &refs).unwrap()[0], 0.0);
    // same n-grams, longer hypothesis: cosine 1, Gaussian length penalty
    let long = cider_scores(&[toks("a b c d a b c d"), toks("e f g h")], &refs).unwrap()[0];
    let per_n = 0.5 + 3.0 / 39.0f64.sqrt() + 2.0 / 20.0f64.sqrt() + 1.0 / 7.0f64.sqrt();
    let expected = 10.0 * (-16.0f64 / 72.0).exp() * per_n / 4.0;
    assert!((long - expected).abs() < 1e-12);
}

#[test]
fn cider_duplicated_corpus_is_unchanged() {
    // every hypothesis n-gram occurs in some reference, so all document
    // frequencies double together with the corpus size
    let hyps = vec![toks("a man rides"), toks("the dog sleeps now"), toks("red ball")];
    let refs = vec![
        vec![toks("a man rides a horse"), toks("one man rides")],
        vec![toks("the dog sleeps now")],
        vec![toks("the red ball moves")],
    ];
    let once = cider(&hyps, &refs).unwrap();
    let hyps2: Vec<_> = hyps.iter().chain(&hyps).cloned().collect();
    let refs2: Vec<_> = refs.iter().chain(&refs).cloned().collect();
    assert!((cider(&hyps2, &refs2).unwrap() - once).abs() < 1e-9);
}

#[test]
fn empty_language_corpus_is_a_protocol_error() {
    assert!(bleu4(&[], &[], BleuSmoothing::None).is_err());
    assert!(cider(&[], &[]).is_err());
}

fn language_turn(ty: QuestionType, hyp: &str, reference: &str) -> TurnResult {
    TurnResult {
        question_type: ty,
        geometric: vec![],
        language: Some(LanguagePair {
            hypothesis: toks(hyp),
            references: vec![toks(reference)],
        }),
        missing: false,
    }
}

fn geometric_turn(ty: QuestionType, entries: Vec<GeometricEntry>) -> TurnResult {
    TurnResult {
        question_type: ty,
        geometric: entries,
        language: None,
        missing: false,
    }
}

#[test]
fn single_type_breakdown_equals_corpus() {
    let turns = vec![
        geometric_turn(QuestionType::Trajectory, vec![traj(&[0.1, 0.7, 0.2, 0.3])]),
        geometric_turn(QuestionType::Trajectory, vec![traj(&[1.1, 0.7])]),
    ];
    let r = aggregate_report(&turns, &ReportConfig::default()).unwrap();
    assert_eq!(r.by_type.len(), 1);
    assert_eq!(r.by_type["trajectory"], r.overall);
    assert!(!r.by_type.contains_key("identity"));
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["by_type"].get("relation").is_none());
    assert!(json["overall"]["SAcc@0.5"].is_null());
    assert!(json["overall"]["METEOR"].is_null());
}

#[test]
fn scene_level_turns_report_language_only() {
    let turns = vec![
        geometric_turn(QuestionType::SceneLevel, vec![traj(&[0.1])]),
        language_turn(QuestionType::SceneLevel, "three targets move around", "three targets move around"),
    ];
    let r = aggregate_report(&turns, &ReportConfig::default()).unwrap();
    let row = &r.by_type["scene-level"];
    assert_eq!(row.tacc, None);
    assert_eq!(row.counts.trajectory_turns, 0);
    assert_eq!(row.counts.language_turns, 1);
    assert_eq!(row.bleu4, Some(1.0));
}

fn arb_entry() -> impl Strategy<Value = GeometricEntry> {
    (prop::collection::vec(0.0f64..1.5, 4), prop::collection::vec(any::<bool>(), 4), any::<bool>()).prop_map(
        |(errs, mut valid, missing)| {
            valid[0] = true;
            GeometricEntry {
                kind: GeometricKind::Trajectory,
                prediction: (!missing).then(|| errs.iter().map(|e| p(0.0, *e, 0.0)).collect()),
                target: vec![p(0.0, 0.0, 0.0); 4],
                valid,
            }
        },
    )
}

fn arb_turn() -> impl Strategy<Value = TurnResult> {
    let words = prop::sample::select(vec!["red", "ball", "moves", "left", "the", "it", "stops", "green"]);
    let sentence = prop::collection::vec(words, 1..7).prop_map(|w| w.join(" "));
    (0usize..5, arb_entry(), sentence.clone(), sentence).prop_map(|(t, entry, h, r)| {
        let ty = QuestionType::ALL[t];
        match ty.geometric_kind() {
            Some(kind) => geometric_turn(ty, vec![GeometricEntry { kind, ..entry }]),
            None => language_turn(ty, &h, &r),
        }
    })
}

proptest! {
    #[test]
    fn per_type_rows_match_filtered_recomputation(turns in prop::collection::vec(arb_turn(), 1..25)) {
        let cfg = ReportConfig::default();
        let r = aggregate_report(&turns, &cfg).unwrap();
        for ty in QuestionType::ALL {
            let subset: Vec<_> = turns.iter().filter(|t| t.question_type == ty).cloned().collect();
            match r.by_type.get(ty.label()) {
                None => prop_assert!(subset.is_empty()),
                Some(row) => prop_assert_eq!(row, &aggregate_report(&subset, &cfg).unwrap().overall),
            }
        }
    }

    #[test]
    fn shuffling_turns_changes_nothing(turns in prop::collection::vec(arb_turn(), 1..20), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = turns.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let cfg = ReportConfig::default();
        let a = aggregate_report(&turns, &cfg).unwrap();
        let b = aggregate_report(&shuffled, &cfg).unwrap();
        prop_assert_eq!(a.overall.counts, b.overall.counts);
        prop_assert_eq!((a.overall.sacc, a.overall.traj_acc, a.overall.tacc), (b.overall.sacc, b.overall.traj_acc, b.overall.tacc));
        for (x, y) in [(a.overall.bleu4, b.overall.bleu4), (a.overall.cider, b.overall.cider)] {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn accuracies_never_increase_with_error(
        points in prop::collection::vec(0.0f64..1.2, 1..8),
        steps in prop::collection::vec(prop::collection::vec(0.0f64..1.2, 1..5), 1..6),
        which in any::<prop::sample::Index>(),
        bump in 0.0f64..1.0,
    ) {
        let errs = TurnErrors {
            point_errors: points.clone(),
            trajectory_means: steps.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect(),
            step_errors: steps.clone(),
        };
        let base = accuracy_metrics(&errs, Thresholds::default());
        let mut worse = errs.clone();
        let i = which.index(points.len());
        worse.point_errors[i] += bump;
        let j = which.index(steps.len());
        worse.step_errors[j][0] += bump;
        worse.trajectory_means[j] = worse.step_errors[j].iter().sum::<f64>() / worse.step_errors[j].len() as f64;
        let after = accuracy_metrics(&worse, Thresholds::default());
        prop_assert!(after.sacc.unwrap() <= base.sacc.unwrap());
        prop_assert!(after.traj_acc.unwrap() <= base.traj_acc.unwrap());
        prop_assert!(after.tacc.unwrap() <= base.tacc.unwrap());
    }

    #[test]
    fn single_step_trajectories_make_tacc_equal_sacc(errs in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let e = TurnErrors {
            point_errors: errs.clone(),
            step_errors: errs.iter().map(|e| vec![*e]).collect(),
            trajectory_means: errs.clone(),
        };
        let acc = accuracy_metrics(&e, Thresholds::default());
        prop_assert_eq!(acc.tacc, acc.sacc);
    }

    #[test]
    fn language_scores_ignore_whitespace_layout(words in prop::collection::vec("[a-z]{1,5}", 1..8), gaps in prop::collection::vec(1usize..4, 8)) {
        let plain = words.join(" ");
        let spaced: String = words.iter().zip(&gaps).map(|(w, g)| format!("{w}{}", " \t".repeat(*g))).collect();
        let refs = vec![vec![toks("the red ball moves left")], vec![toks(&plain)]];
        let a = (bleu4(&[toks(&plain)], &refs[1..], BleuSmoothing::Epsilon).unwrap(), cider(&[toks(&plain), toks("red")], &refs).unwrap());
        let b = (bleu4(&[toks(&spaced)], &refs[1..], BleuSmoothing::Epsilon).unwrap(), cider(&[toks(&spaced), toks("red")], &refs).unwrap());
        prop_assert_eq!(a, b);
    }
}
