use super::*;
use crate::data::{build_blob_bundle, generate_blobs, SplitFractions};
use crate::influence::{ghost_influence, ip_influence, lai_influence, lli_influence, pair_similarities};
use crate::network::tests::identity_net;
use crate::network::{Activation, LayerSpec, SampleTaps};
use crate::oracle::UtilityFn;
use approx::assert_relative_eq;
use proptest::prelude::*;

fn sample(id: u64, features: Vec<f64>, label: usize) -> Sample {
    Sample {
        id,
        features,
        label,
        noisy: false,
    }
}

fn cfg_for(e: Estimator) -> TrainerConfig {
    TrainerConfig {
        estimator: Some(e),
        ..TrainerConfig::default()
    }
}

fn precond(net: &Mlp) -> Preconditioner {
    Preconditioner::identity(net.num_classes(), 0.9, 1e-8).unwrap()
}

fn deep_net(seed: u64) -> Mlp {
    Mlp::new(
        &[
            LayerSpec::new(4, 6, Activation::Tanh),
            LayerSpec::new(6, 5, Activation::Relu),
            LayerSpec::new(5, 3, Activation::Linear),
        ],
        seed,
    )
    .unwrap()
}

fn pool(n_per_class: usize, seed: u64) -> Vec<Sample> {
    generate_blobs(3, n_per_class, 4, 0.7, seed).unwrap()
}

#[test]
fn cache_holds_augmented_input_and_output_grad() {
    let net = identity_net(2);
    let v = sample(7, vec![0.5, -1.0], 1);
    let cache = build_validation_cache(&net, &[v.clone()], Estimator::Lai, 0).unwrap();
    let out = crate::network::loss_and_output_grad(&[0.5, -1.0], 1).unwrap();
    assert_eq!(cache.entries[0].activations, vec![0.5, -1.0, 1.0]);
    assert_eq!(cache.entries[0].output_grad, out.grad);
    assert!(cache.entries[0].layer_grads.is_empty());
    assert_eq!(cache.block_widths, vec![3]);
    let again = build_validation_cache(&net, &[v], Estimator::Lai, 0).unwrap();
    assert_eq!(cache, again);
}

#[test]
fn empty_validation_subset_errors() {
    let net = identity_net(2);
    assert!(matches!(
        build_validation_cache(&net, &[], Estimator::Lai, 0),
        Err(TrainError::Empty(_))
    ));
}

#[test]
fn concatenated_dot_equals_layerwise_alpha_sum() {
    let net = deep_net(3);
    let data = pool(4, 1);
    for a in &data {
        for b in &data[..3] {
            let ta = ScoringTaps::build(&net, a, Estimator::Lai).unwrap();
            let tb = ScoringTaps::build(&net, b, Estimator::Lai).unwrap();
            let sims = pair_similarities(
                &net.sample_taps(&a.features, a.label).unwrap(),
                &net.sample_taps(&b.features, b.label).unwrap(),
            )
            .unwrap();
            let concat = dot(&ta.activations, &tb.activations);
            assert!((concat - sims.alpha_sum()).abs() <= 1e-12 * sims.alpha_sum().abs().max(1.0));
        }
    }
}

#[test]
fn cache_scoring_matches_fresh_taps() {
    let net = deep_net(5);
    let data = pool(5, 2);
    let (val, train) = data.split_at(6);
    let pc = precond(&net);
    for e in [Estimator::Ip, Estimator::Ghost, Estimator::Lai, Estimator::Lli] {
        let cache = build_validation_cache(&net, val, e, 0).unwrap();
        let mut ledger = CostLedger::default();
        let d = curate_batch(&net, train, &cache, &cfg_for(e), 0, &pc, &mut ledger).unwrap();
        for (k, s) in train.iter().enumerate() {
            let tj = net.sample_taps(&s.features, s.label).unwrap();
            let pairs: Vec<InfluenceScore> = val
                .iter()
                .map(|v| {
                    let tz = net.sample_taps(&v.features, v.label).unwrap();
                    let sims = pair_similarities(&tz, &tj).unwrap();
                    match e {
                        Estimator::Ip => ip_influence(&param_grads(&tz).unwrap(), &param_grads(&tj).unwrap()).unwrap(),
                        Estimator::Ghost => ghost_influence(&sims),
                        Estimator::Lai => lai_influence(&sims),
                        _ => lli_influence(&sims),
                    }
                })
                .collect();
            let fresh = aggregate_over_validation(&pairs).unwrap().benefit();
            let got = d.benefit_scores[k];
            assert!((got - fresh).abs() <= 1e-12 * fresh.abs().max(1.0), "{e}: {got} vs {fresh}");
        }
    }
}

#[test]
fn aligned_batch_is_fully_kept() {
    let net = identity_net(2);
    let v = sample(0, vec![1.0, 0.0], 0);
    let batch = vec![sample(1, vec![1.0, 0.0], 0), sample(2, vec![2.0, 0.5], 0)];
    let cache = build_validation_cache(&net, &[v], Estimator::Lai, 0).unwrap();
    let mut ledger = CostLedger::default();
    let d = curate_batch(&net, &batch, &cache, &cfg_for(Estimator::Lai), 0, &precond(&net), &mut ledger).unwrap();
    assert!(d.benefit_scores.iter().all(|&b| b > 0.0));
    assert_eq!(d.kept_mask, vec![true, true]);
}

#[test]
fn zero_gradient_member_scores_zero_and_is_kept() {
    let net = identity_net(2);
    // Saturated logits give an exactly zero output gradient.
    let dead = sample(1, vec![1000.0, -1000.0], 0);
    let v = sample(0, vec![0.3, 0.1], 1);
    let cache = build_validation_cache(&net, &[v], Estimator::Lai, 0).unwrap();
    let mut ledger = CostLedger::default();
    let d = curate_batch(&net, &[dead], &cache, &cfg_for(Estimator::Lai), 0, &precond(&net), &mut ledger).unwrap();
    assert_eq!(d.benefit_scores[0], 0.0);
    assert_eq!(d.kept_mask, vec![true]);
}

#[test]
fn flipped_label_is_dropped_and_utility_agrees() {
    let data = build_blob_bundle(2, 60, 2, 0.3, 0.0, SplitFractions::default(), 11).unwrap();
    let net0 = Mlp::new(
        &[LayerSpec::new(2, 8, Activation::Relu), LayerSpec::new(8, 2, Activation::Linear)],
        4,
    )
    .unwrap();
    let warm = TrainerConfig {
        epochs: 3,
        warmup_epochs: 3,
        learning_rate: 0.1,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let net = train(&warm, &net0, &data).unwrap().net;
    let mut flipped = data.train[0].clone();
    flipped.label = 1 - flipped.label;
    let cache = build_validation_cache(&net, &data.validation, Estimator::Lai, 0).unwrap();
    let mut ledger = CostLedger::default();
    let d = curate_batch(&net, &[flipped.clone()], &cache, &cfg_for(Estimator::Lai), 0, &precond(&net), &mut ledger)
        .unwrap();
    assert!(d.benefit_scores[0] < 0.0);
    assert_eq!(d.kept_mask, vec![false]);
    let u = UtilityFn::new(&net, &data.validation, 0.1);
    assert!(u.subset_utility(&[flipped], &[0]).unwrap() < 0.0);
}

#[test]
fn refresh_contract_and_misconfiguration() {
    let net = identity_net(2);
    let v = [sample(0, vec![1.0, 0.0], 0)];
    let batch = [sample(1, vec![0.0, 1.0], 1)];
    let cache = build_validation_cache(&net, &v, Estimator::Lai, 4).unwrap();
    let pc = precond(&net);
    let mut ledger = CostLedger::default();
    let cfg = cfg_for(Estimator::Lai);
    assert!(curate_batch(&net, &batch, &cache, &cfg, 4, &pc, &mut ledger).is_ok());
    assert!(matches!(
        curate_batch(&net, &batch, &cache, &cfg, 5, &pc, &mut ledger),
        Err(TrainError::StaleCache { .. })
    ));
    let relaxed = TrainerConfig {
        cache_refresh_steps: 3,
        ..cfg.clone()
    };
    assert!(curate_batch(&net, &batch, &cache, &relaxed, 6, &pc, &mut ledger).is_ok());
    let none = TrainerConfig {
        estimator: None,
        ..cfg.clone()
    };
    assert!(matches!(
        curate_batch(&net, &batch, &cache, &none, 4, &pc, &mut ledger),
        Err(TrainError::NoEstimator)
    ));
    assert!(matches!(
        curate_batch(&net, &batch, &cache, &cfg_for(Estimator::Ghost), 4, &pc, &mut ledger),
        Err(TrainError::CacheMismatch { .. })
    ));
}

#[test]
fn self_influence_unanimous_batch() {
    let net = deep_net(2);
    let s = pool(1, 3)[0].clone();
    let batch: Vec<Sample> = (0..4).map(|k| Sample { id: k, ..s.clone() }).collect();
    let mut ledger = CostLedger::default();
    let d = self_influence_curate(&net, &batch, &cfg_for(Estimator::Lai), 0, &precond(&net), &mut ledger).unwrap();
    assert!(d.benefit_scores.iter().all(|&b| b > 0.0 && b == d.benefit_scores[0]));
    assert!(d.kept_mask.iter().all(|&k| k));
}

#[test]
fn self_influence_antipodal_pair() {
    // Same input, opposite labels: output gradients are exact negatives.
    let net = identity_net(2);
    let a = sample(0, vec![0.0, 0.0], 0);
    let b = sample(1, vec![0.0, 0.0], 1);
    let ta = net.sample_taps(&a.features, 0).unwrap();
    let tb = net.sample_taps(&b.features, 1).unwrap();
    assert_eq!(ta.output_grad, tb.output_grad.iter().map(|v| -v).collect::<Vec<_>>());
    // A third member sharing a's direction breaks the tie symmetrically.
    let c = sample(2, vec![0.0, 0.0], 0);
    let pc = precond(&net);
    let cfg = cfg_for(Estimator::Lai);
    let widths = block_widths(&net, Estimator::Lai);
    let scorer = PairScorer {
        estimator: Estimator::Lai,
        block_widths: &widths,
        calibrate: false,
        precond: &pc,
    };
    let st = |s: &Sample| ScoringTaps::build(&net, s, Estimator::Lai).unwrap();
    let from_c_a = scorer.score(&st(&c), &st(&a)).unwrap().benefit();
    let from_c_b = scorer.score(&st(&c), &st(&b)).unwrap().benefit();
    assert_eq!(from_c_a, -from_c_b);
    let mut ledger = CostLedger::default();
    let d = self_influence_curate(&net, &[a, b, c], &cfg, 0, &pc, &mut ledger).unwrap();
    assert_eq!(d.benefit_scores[0], 0.0);
    assert!(d.benefit_scores[1] < 0.0);
    assert_eq!(d.kept_mask, vec![true, false, true]);
}

#[test]
fn self_influence_flags_the_mislabeled_member() {
    // Briefly warmed net: class structure is learned but members still
    // carry sizable gradients, so the relabeled one opposes the majority.
    let net0 = Mlp::new(
        &[LayerSpec::new(4, 8, Activation::Relu), LayerSpec::new(8, 3, Activation::Linear)],
        1,
    )
    .unwrap();
    let data = build_blob_bundle(3, 40, 4, 0.3, 0.0, SplitFractions::default(), 5).unwrap();
    let warm = TrainerConfig {
        epochs: 1,
        warmup_epochs: 1,
        learning_rate: 0.05,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let net = train(&warm, &net0, &data).unwrap().net;
    let mut batch: Vec<Sample> = data.train[..16].to_vec();
    let logits = net.logits(&batch[9].features).unwrap();
    batch[9].label = (0..3).min_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
    let mut ledger = CostLedger::default();
    let d = self_influence_curate(&net, &batch, &cfg_for(Estimator::Lai), 0, &precond(&net), &mut ledger).unwrap();
    // Exhaustive pairwise recomputation from raw taps.
    let taps: Vec<SampleTaps> = batch.iter().map(|s| net.sample_taps(&s.features, s.label).unwrap()).collect();
    let mut benefit = vec![0.0; 16];
    for i in 0..16 {
        for k in 0..16 {
            if i != k {
                benefit[i] -= lai_influence(&pair_similarities(&taps[k], &taps[i]).unwrap()).value;
            }
        }
    }
    let argmin = |v: &[f64]| (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    assert_eq!(argmin(&benefit), 9);
    assert_eq!(argmin(&d.benefit_scores), 9);
    for i in 0..16 {
        assert!((benefit[i] - d.benefit_scores[i]).abs() <= 1e-12 * benefit[i].abs().max(1.0));
    }
}

#[test]
fn self_influence_single_member_is_degenerate() {
    let net = identity_net(2);
    let mut ledger = CostLedger::default();
    let d = self_influence_curate(
        &net,
        &[sample(0, vec![1.0, 2.0], 0)],
        &cfg_for(Estimator::Lai),
        0,
        &precond(&net),
        &mut ledger,
    )
    .unwrap();
    assert!(d.degenerate);
    assert_eq!(d.kept_mask, vec![true]);
}

#[test]
fn sgd_plain_step_is_exact() {
    let mut net = deep_net(8);
    let s = pool(1, 4)[1].clone();
    let g = param_grads(&net.sample_taps(&s.features, s.label).unwrap()).unwrap().flatten();
    let before = net.flat_params();
    let cfg = TrainerConfig {
        momentum: 0.0,
        learning_rate: 0.3,
        ..TrainerConfig::default()
    };
    let mut state = MomentumState::zeros(&net);
    sgd_step(&mut net, &[s], &cfg, &mut state, 0).unwrap();
    let after = net.flat_params();
    for k in 0..before.len() {
        assert_eq!(after[k], before[k] - 0.3 * g[k]);
    }
}

#[test]
fn sgd_zero_gradient_leaves_params() {
    let mut net = identity_net(2);
    let before = net.flat_params();
    let mut state = MomentumState::zeros(&net);
    sgd_step(&mut net, &[sample(0, vec![1000.0, -1000.0], 0)], &TrainerConfig::default(), &mut state, 0).unwrap();
    assert_eq!(net.flat_params(), before);
}

#[test]
fn sgd_momentum_recursion() {
    let mut net = deep_net(9);
    let batch = pool(2, 6);
    let lr = 0.2;
    let mu = 0.9;
    let cfg = TrainerConfig {
        momentum: mu,
        learning_rate: lr,
        ..TrainerConfig::default()
    };
    let mean_grad = |net: &Mlp| {
        let mut m = vec![0.0; net.num_params()];
        for s in &batch {
            let g = param_grads(&net.sample_taps(&s.features, s.label).unwrap()).unwrap().flatten();
            for (a, b) in m.iter_mut().zip(g) {
                *a += b / batch.len() as f64;
            }
        }
        m
    };
    let theta0 = net.flat_params();
    let g1 = mean_grad(&net);
    let mut state = MomentumState::zeros(&net);
    sgd_step(&mut net, &batch, &cfg, &mut state, 0).unwrap();
    let theta1: Vec<f64> = theta0.iter().zip(&g1).map(|(t, g)| t - lr * g).collect();
    let g2 = mean_grad(&net);
    sgd_step(&mut net, &batch, &cfg, &mut state, 1).unwrap();
    for k in 0..theta0.len() {
        let v2 = mu * g1[k] + g2[k];
        let expected = theta1[k] - lr * v2;
        assert_relative_eq!(net.flat_params()[k], expected, max_relative = 1e-12, epsilon = 1e-14);
    }
}

#[test]
fn sgd_rejects_empty_and_non_finite() {
    let mut net = identity_net(2);
    let mut state = MomentumState::zeros(&net);
    assert!(sgd_step(&mut net, &[], &TrainerConfig::default(), &mut state, 0).is_err());
}

fn small_bundle(flip: f64, seed: u64) -> DatasetBundle {
    build_blob_bundle(3, 30, 4, 0.6, flip, SplitFractions::default(), seed).unwrap()
}

fn small_net(seed: u64) -> Mlp {
    Mlp::new(
        &[LayerSpec::new(4, 8, Activation::Relu), LayerSpec::new(8, 3, Activation::Linear)],
        seed,
    )
    .unwrap()
}

#[test]
fn mode_off_keeps_everything() {
    let data = small_bundle(0.2, 1);
    let cfg = TrainerConfig {
        mode: CurationMode::Off,
        epochs: 3,
        batch_size: 10,
        ..TrainerConfig::default()
    };
    let run = train(&cfg, &small_net(0), &data).unwrap();
    for (e, row) in run.report.epochs.iter().zip(&run.report.inclusion) {
        assert_eq!(e.kept, data.train.len());
        assert!(row.iter().all(|&k| k));
        assert_eq!(e.scored, 0);
    }
    assert!(run.report.scores.is_empty());
}

#[test]
fn full_warmup_equals_vanilla_bitwise() {
    let data = small_bundle(0.2, 2);
    let base = TrainerConfig {
        epochs: 3,
        batch_size: 10,
        seed: 7,
        ..TrainerConfig::default()
    };
    let vanilla = train(
        &TrainerConfig {
            mode: CurationMode::Off,
            ..base.clone()
        },
        &small_net(1),
        &data,
    )
    .unwrap();
    let warm = train(
        &TrainerConfig {
            warmup_epochs: 3,
            ..base.clone()
        },
        &small_net(1),
        &data,
    )
    .unwrap();
    assert_eq!(vanilla.net, warm.net);
    assert_eq!(vanilla.report.epochs, warm.report.epochs);
}

#[test]
fn curated_run_accounting() {
    let data = small_bundle(0.3, 3);
    let cfg = TrainerConfig {
        epochs: 4,
        warmup_epochs: 2,
        batch_size: 8,
        seed: 1,
        trace_ids: vec![data.train[0].id, data.train[5].id],
        ..TrainerConfig::default()
    };
    let run = train(&cfg, &small_net(2), &data).unwrap();
    let r = &run.report;
    let steps_per_epoch = data.train.len().div_ceil(8) as u64;
    assert_eq!(r.total_steps, 4 * steps_per_epoch);
    for (e, row) in r.epochs.iter().zip(&r.inclusion) {
        assert_eq!(e.kept, row.iter().filter(|&&k| k).count());
        assert!(e.kept <= data.train.len());
        assert_eq!(e.benefit_histogram.mass(), e.scored as u64);
        assert_eq!(e.curated, e.epoch >= 2);
        assert_eq!(e.noisy_total, data.train.iter().filter(|s| s.noisy).count());
    }
    assert_eq!(r.scores.len(), 2 * data.train.len());
    for trace in r.traces.values() {
        assert_eq!(trace.len(), 2);
        assert!(trace.iter().all(|p| p.epoch >= 2));
    }
    // Dropped at threshold 0 only when the estimator's own score is negative.
    for s in &r.scores {
        let pos = r.sample_ids.iter().position(|&id| id == s.sample_id).unwrap();
        let epoch = (s.step / steps_per_epoch) as usize;
        if !r.inclusion[epoch][pos] {
            assert!(s.benefit < 0.0);
        }
    }
    assert!(r.ledger.entries.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn keep_top1_never_skips() {
    let data = small_bundle(0.4, 4);
    let cfg = TrainerConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 4,
        threshold: 1e9,
        empty_batch_policy: EmptyBatchPolicy::KeepTop1,
        ..TrainerConfig::default()
    };
    let run = train(&cfg, &small_net(3), &data).unwrap();
    for e in &run.report.epochs[1..] {
        assert_eq!(e.skipped_steps, 0);
        assert_eq!(e.kept, data.train.len().div_ceil(4));
    }
    let skip = train(
        &TrainerConfig {
            empty_batch_policy: EmptyBatchPolicy::SkipStep,
            ..cfg
        },
        &small_net(3),
        &data,
    )
    .unwrap();
    assert_eq!(skip.report.epochs[2].kept, 0);
}

#[test]
fn self_influence_and_precond_runs_complete() {
    let data = small_bundle(0.2, 5);
    for (mode, e) in [
        (CurationMode::SelfInfluence, Estimator::Lai),
        (CurationMode::ValidationInfluence, Estimator::PrecondLai),
        (CurationMode::ValidationInfluence, Estimator::Ghost),
    ] {
        let cfg = TrainerConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 8,
            mode,
            estimator: Some(e),
            ..TrainerConfig::default()
        };
        let run = train(&cfg, &small_net(4), &data).unwrap();
        assert_eq!(run.report.epochs[1].scored, data.train.len());
    }
}

#[test]
fn config_and_data_validation() {
    let data = small_bundle(0.0, 6);
    let bad = [
        TrainerConfig {
            learning_rate: 0.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            momentum: 1.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            warmup_epochs: 11,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            threshold: f64::NAN,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            val_fraction_per_batch: 0.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            estimator: None,
            ..TrainerConfig::default()
        },
    ];
    for cfg in &bad {
        assert!(matches!(train(cfg, &small_net(0), &data), Err(TrainError::InvalidConfig(_))));
    }
    let wrong = Mlp::new(&[LayerSpec::new(3, 3, Activation::Linear)], 0).unwrap();
    assert!(matches!(
        train(&TrainerConfig::default(), &wrong, &data),
        Err(TrainError::DataMismatch(_))
    ));
}

#[test]
fn ledger_depth_one_costs_match() {
    let net = identity_net(3);
    let batch = pool(2, 1).into_iter().map(|s| sample(s.id, s.features[..3].to_vec(), s.label)).collect::<Vec<_>>();
    let ledger = measure_scoring_cost(&net, &batch[..4], &batch[4..], &[Estimator::Ghost, Estimator::Lai, Estimator::Lli], &TrainerConfig::default()).unwrap();
    let cmp = ledger_compare(&ledger, &[Estimator::Ghost, Estimator::Lai, Estimator::Lli]).unwrap();
    assert_eq!(cmp.depth, 1);
    assert_eq!(cmp.rows[0].scoring_macs, cmp.rows[1].scoring_macs);
    assert_eq!(cmp.rows[0].cache_bytes, cmp.rows[1].cache_bytes);
    assert!(cmp.ordering_holds);
}

#[test]
fn ledger_hand_count_for_8_16_16_4() {
    let net = Mlp::new(
        &[
            LayerSpec::new(8, 16, Activation::Relu),
            LayerSpec::new(16, 16, Activation::Relu),
            LayerSpec::new(16, 4, Activation::Linear),
        ],
        0,
    )
    .unwrap();
    // LAI: α over 9+17+17 augmented reals, β^(L) over 4, one product.
    assert_eq!(scoring_macs(&net, Estimator::Lai, false), (0, 43 + 4 + 1));
    // Ghost: the same α reals, β over 16+16+4, three products, plus two
    // backward hops (16·16+16 and 4·16+16) per training sample.
    assert_eq!(scoring_macs(&net, Estimator::Ghost, false), (272 + 80, 43 + 36 + 3));
    // Closed-form per-sample cache sizes.
    assert_eq!(cache_reals_per_sample(&net, Estimator::Lai), 43 + 4);
    assert_eq!(cache_reals_per_sample(&net, Estimator::Ghost), 43 + 36);
    let pts = generate_blobs(4, 3, 8, 0.5, 2).unwrap();
    let (batch, val) = pts.split_at(5);
    let ledger = measure_scoring_cost(
        &net,
        batch,
        val,
        &[Estimator::Ghost, Estimator::Lai, Estimator::Lli],
        &TrainerConfig::default(),
    )
    .unwrap();
    let cmp = ledger_compare(&ledger, &[Estimator::Ghost, Estimator::Lai, Estimator::Lli]).unwrap();
    let row = |e| cmp.rows.iter().find(|r| r.estimator == e).unwrap().clone();
    assert_eq!(row(Estimator::Lai).scoring_macs, 5 * 7 * 48);
    assert_eq!(row(Estimator::Ghost).scoring_macs, 5 * (352 + 7 * 82));
    assert_eq!(row(Estimator::Lai).cache_bytes, 7 * 47 * 8);
    assert_eq!(row(Estimator::Ghost).cache_bytes, 7 * 79 * 8);
    assert!(cmp.ordering_holds);
}

#[test]
fn ledger_rejects_mismatched_configs() {
    let net = deep_net(0);
    let pts = pool(3, 0);
    let cfg = TrainerConfig::default();
    let mut ledger = measure_scoring_cost(&net, &pts[..3], &pts[3..], &[Estimator::Lai], &cfg).unwrap();
    let other = measure_scoring_cost(&net, &pts[..4], &pts[4..], &[Estimator::Ghost], &cfg).unwrap();
    ledger.record(other.entries[0].clone());
    assert!(matches!(
        ledger_compare(&ledger, &[Estimator::Ghost, Estimator::Lai]),
        Err(TrainError::MismatchedLedger(_))
    ));
    assert!(ledger_compare(&CostLedger::default(), &[Estimator::Lai]).is_err());
}

#[test]
fn scoring_is_mode_independent() {
    let net = deep_net(4);
    let pts = pool(6, 9);
    let cache = build_validation_cache(&net, &pts[..5], Estimator::Ghost, 0).unwrap();
    let cfg = cfg_for(Estimator::Ghost);
    let pc = precond(&net);
    let mut l1 = CostLedger::default();
    let mut l2 = CostLedger::default();
    let a = curate_batch_with(&net, &pts[5..], &cache, &cfg, 0, &pc, &mut l1, Exec::Parallel).unwrap();
    let b = curate_batch_with(&net, &pts[5..], &cache, &cfg, 0, &pc, &mut l2, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(l1, l2);
}

#[test]
fn histogram_mass() {
    let h = Histogram::from_values(&[0.0, 1.0, 0.5, 0.5, -2.0], 4);
    assert_eq!(h.mass(), 5);
    assert_eq!(h.counts, vec![1, 0, 1, 3]);
    assert_eq!(Histogram::from_values(&[1.0; 3], 2).counts, vec![3, 0]);
}

proptest! {
    #[test]
    fn kept_sets_nest_as_threshold_rises(
        scores in prop::collection::vec(-1.0f64..1.0, 1..40),
        ts in prop::collection::vec(-1.0f64..1.0, 2..6),
    ) {
        let mut ts = ts;
        ts.sort_by(f64::total_cmp);
        let n = scores.len();
        let d = CurationDecision::new(0, Estimator::Lai, 0.0, (0..n as u64).collect(), scores);
        for w in ts.windows(2) {
            let lo = d.with_threshold(w[0]);
            let hi = d.with_threshold(w[1]);
            for k in 0..n {
                prop_assert!(!hi.kept_mask[k] || lo.kept_mask[k]);
                prop_assert_eq!(lo.kept_mask[k], lo.benefit_scores[k] >= w[0]);
            }
        }
    }
}
