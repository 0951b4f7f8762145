use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use track4d_core::decoder::DecoderConfig;
use track4d_core::encoding::{FourierTimeConfig, VisualToken};
use track4d_core::geometry::{make_plucker, WorldPoint};
use track4d_core::learn::{grad_check, GradCheckConfig, LossOptions, LossWeights};
use track4d_core::model::{DialogueSample, DialogueTurnSpec, Model, ModelDims, TurnTarget};
use track4d_core::state::QueryEmbedding;

fn vec3(rng: &mut ChaCha8Rng, s: f64) -> WorldPoint {
    WorldPoint::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn dims(d: usize) -> ModelDims {
    ModelDims {
        token_dim: d,
        num_frequencies: 3,
        score_hidden: 5,
        residual_hidden: 4,
        horizon: 4,
    }
}

fn random_model(rng: &mut ChaCha8Rng, d: usize, zero_residual: bool) -> Model {
    let fourier = FourierTimeConfig::geometric(3, 2.0).unwrap();
    let mut m = Model::init(dims(d), fourier, rng.random()).unwrap();
    for (name, values) in m.blocks_mut() {
        let zero = zero_residual && name.starts_with("residual.");
        for v in values.iter_mut() {
            *v = if zero { 0.0 } else { rng.random_range(-0.6..0.6) };
        }
    }
    m
}

/// Tokens scattered around a few target positions so the ray bundles are
/// well conditioned.
fn random_dialogue(rng: &mut ChaCha8Rng, d: usize, tokens: usize, turns: usize) -> DialogueSample {
    let times = [0.0, 0.5, 1.0, 1.5];
    let toks = (0..tokens)
        .map(|i| {
            let origin = vec3(rng, 5.0);
            let aim = vec3(rng, 1.0);
            VisualToken {
                feature: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ray: make_plucker(origin, aim - origin).unwrap(),
                timestamp: times[i % times.len()],
                view_id: format!("v{}", i % 3),
                patch_id: i as u32,
            }
        })
        .collect();
    let ids = ["a", "b"];
    let turns = (0..turns)
        .map(|k| {
            let query = QueryEmbedding {
                vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let target = (k % 3 != 2).then(|| TurnTarget {
                target_id: ids[rng.random_range(0..2)].to_string(),
                points: (0..4).map(|_| vec3(rng, 1.5)).collect(),
                valid: (0..4).map(|h| h == 0 || rng.random_bool(0.7)).collect(),
                times: None,
            });
            DialogueTurnSpec { query, target }
        })
        .collect();
    DialogueSample { tokens: toks, turns }
}

fn options(detach: bool, top_r: Option<usize>) -> GradCheckConfig {
    GradCheckConfig {
        loss: LossOptions {
            weights: LossWeights::new(1.0, 0.1, 0.1).unwrap(),
            identity_margin: 0.5,
            decoder: DecoderConfig {
                top_r,
                detach_anchor: detach,
            },
            ..LossOptions::default()
        },
        ..GradCheckConfig::default()
    }
}

#[test]
fn seeded_configurations_pass_in_both_anchor_modes() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(3..=8);
        let r = rng.random_range(3..=6);
        let model = random_model(&mut rng, d, seed % 4 == 0);
        let batch: Vec<_> = (0..2).map(|_| random_dialogue(&mut rng, d, r, 4)).collect();
        for detach in [false, true] {
            let report = grad_check(&model, &batch, &options(detach, None)).unwrap();
            assert!(
                report.pass,
                "seed {seed} detach {detach}: {:?}",
                report
                    .blocks
                    .iter()
                    .filter(|b| !b.pass)
                    .map(|b| (&b.name, b.max_relative_error))
                    .collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn top_r_truncation_is_differentiated_consistently() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let model = random_model(&mut rng, 6, false);
    let batch = vec![random_dialogue(&mut rng, 6, 6, 3)];
    let report = grad_check(&model, &batch, &options(false, Some(4))).unwrap();
    assert!(report.pass, "{:?}", report.failing_blocks());
}

#[test]
fn corrupted_block_is_named() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_model(&mut rng, 5, false);
    let batch = vec![random_dialogue(&mut rng, 5, 5, 3)];
    let clean = grad_check(&model, &batch, &options(false, None)).unwrap();
    assert!(clean.pass);
    let target = clean
        .blocks
        .iter()
        .max_by(|a, b| a.max_abs_gradient.total_cmp(&b.max_abs_gradient))
        .unwrap()
        .name
        .clone();
    let mut cfg = options(false, None);
    cfg.corrupt_block = Some((target.clone(), 1.1));
    let report = grad_check(&model, &batch, &cfg).unwrap();
    assert!(!report.pass);
    assert_eq!(report.failing_blocks(), vec![target.as_str()]);
}

#[test]
fn detached_anchor_silences_the_attention_path_without_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = random_model(&mut rng, 6, true);
    let batch = vec![random_dialogue(&mut rng, 6, 6, 4)];
    let attached = grad_check(&model, &batch, &options(false, None)).unwrap();
    let detached = grad_check(&model, &batch, &options(true, None)).unwrap();
    assert!(attached.pass && detached.pass);
    let anchor_path = ["rtge.ray_projection", "query.w_sem", "query.w_kin", "score.1.w1", "score.2.w2"];
    for name in anchor_path {
        assert!(detached.zero_gradient_blocks.iter().any(|b| b == name), "{name} should be zero");
        assert!(!attached.zero_gradient_blocks.iter().any(|b| b == name), "{name} should be live");
    }
}

fn loss_opts(weights: LossWeights) -> LossOptions {
    LossOptions {
        weights,
        ..LossOptions::default()
    }
}

#[test]
fn total_loss_combines_the_three_oracles() {
    use track4d_core::learn::{smoothness_loss, total_loss, trajectory_loss};
    use track4d_core::model::{run_dialogue, HistoryMode};
    use track4d_core::state::{identity_consistency_loss, SlotState};

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = random_model(&mut rng, 6, false);
    let batch: Vec<_> = (0..3).map(|_| random_dialogue(&mut rng, 6, 6, 5)).collect();

    let mut traj = Vec::new();
    let mut smooth = Vec::new();
    let mut same: Vec<(SlotState, SlotState)> = Vec::new();
    let mut diff: Vec<(SlotState, SlotState)> = Vec::new();
    for sample in &batch {
        let out = run_dialogue(&model, sample, HistoryMode::SelfHistory, &DecoderConfig::default()).unwrap();
        let mut seen: Vec<(String, SlotState)> = Vec::new();
        for (turn, o) in sample.turns.iter().zip(&out) {
            let Some(t) = &turn.target else { continue };
            let pred = o.prediction.as_ref().unwrap();
            traj.push(trajectory_loss(&pred.points, &t.points, &t.valid));
            smooth.push(smoothness_loss(&pred.points));
            for (id, s) in &seen {
                let pair = (s.clone(), o.slot.clone());
                if *id == t.target_id { same.push(pair) } else { diff.push(pair) }
            }
            seen.push((t.target_id.clone(), o.slot.clone()));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (lt, ls, li) = (mean(&traj), mean(&smooth), identity_consistency_loss(&same, &diff, 0.5));

    let zero = total_loss(&model, &batch, &loss_opts(LossWeights::new(0.0, 0.0, 0.0).unwrap())).unwrap();
    assert_eq!(zero.total, 0.0);
    let only = total_loss(&model, &batch, &loss_opts(LossWeights::new(1.0, 0.0, 0.0).unwrap())).unwrap();
    assert_eq!(only.total, only.trajectory);
    assert!((only.total - lt).abs() < 1e-12);
    let full = total_loss(&model, &batch, &loss_opts(LossWeights::default())).unwrap();
    assert!((full.total - (lt + 0.1 * ls + 0.1 * li)).abs() < 1e-12);
    assert!((full.smoothness - ls).abs() < 1e-12 && (full.identity - li).abs() < 1e-12);
}

#[test]
fn previous_turn_receives_no_gradient() {
    use track4d_core::learn::{loss_and_gradients, total_loss};

    // turn 1 asks nothing geometric, so with the stop-gradient only turn 2's
    // own update may move the slot parameters; the full derivative also
    // flows back through turn 1's slot.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = random_model(&mut rng, 4, false);
    let mut sample = random_dialogue(&mut rng, 4, 5, 2);
    sample.turns[0].target = None;
    let target = sample.turns[1].target.get_or_insert_with(|| unreachable!());
    target.valid = vec![true; 4];
    let batch = vec![sample];
    let opts = loss_opts(LossWeights::new(1.0, 0.0, 0.0).unwrap());

    let report = grad_check(&model, &batch, &GradCheckConfig { loss: opts, ..GradCheckConfig::default() }).unwrap();
    assert!(report.pass, "{:?}", report.failing_blocks());

    let (_, grads) = loss_and_gradients(&model, &batch, &opts).unwrap();
    let analytic = &grads.slot.candidate.data;
    let h = 1e-5;
    let mut gap: f64 = 0.0;
    for j in 0..analytic.len() {
        let mut plus = model.clone();
        plus.slot.candidate.data[j] += h;
        let mut minus = model.clone();
        minus.slot.candidate.data[j] -= h;
        let fd = (total_loss(&plus, &batch, &opts).unwrap().total - total_loss(&minus, &batch, &opts).unwrap().total)
            / (2.0 * h);
        gap = gap.max((fd - analytic[j]).abs());
    }
    assert!(gap > 1e-4, "cross-turn path should be visible to unfrozen differences (gap {gap})");

    // with a single turn the two notions coincide
    let mut single = batch.clone();
    single[0].turns.remove(0);
    let (_, g1) = loss_and_gradients(&model, &single, &opts).unwrap();
    for j in 0..g1.slot.candidate.data.len() {
        let mut plus = model.clone();
        plus.slot.candidate.data[j] += h;
        let mut minus = model.clone();
        minus.slot.candidate.data[j] -= h;
        let fd = (total_loss(&plus, &single, &opts).unwrap().total - total_loss(&minus, &single, &opts).unwrap().total)
            / (2.0 * h);
        assert!((fd - g1.slot.candidate.data[j]).abs() < 1e-6);
    }
}
