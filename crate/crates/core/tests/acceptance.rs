//! Acceptance suite: one test per release criterion. Each test prints a
//! `criterion N: PASS` line on success; tolerances are fixed in the
//! assertions below.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use opnet::commands::{bench_cache, evaluate_dataset, EvalOptions};
use opnet::datasets::{generate, DatasetKind, DatasetSpec};
use opnet::metrics::{paired_permutation_test, permutation_count, PermutationConfig};
use opnet::network::{DropoutMask, LayerSpec, LossKind, SplitNetwork};
use opnet::rng;
use opnet::tensor::Tensor;
use opnet::training::{loss_value, train, TrainConfig};
use opnet::uncertainty::{
    apply_behavior, confidence_interval, model_precision, normal_quantile, predictive_stats,
    sample_predictions, BehaviorMode, ConfidenceConfig, PrecisionParams,
};

/// Serializes the heavy/timing-sensitive criteria so wall-clock measurements
/// are not distorted by sibling tests.
static HEAVY: Mutex<()> = Mutex::new(());

// ---------------------------------------------------------------------------
// shared builders

const TEST_MASK_DOMAIN: u64 = 2; // rng::DOMAIN_TEST_MASK

fn random_vec(seed: u64, tag: u64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| rng::uniform(seed, &[900 + tag, i as u64]) * 2.0 - 1.0)
        .collect()
}

/// Network templates that jointly cover every layer kind, with a pluggable
/// final activation.
fn template(idx: usize, seed: u64, final_layer: LayerSpec) -> (SplitNetwork, Tensor) {
    match idx % 4 {
        0 => {
            let net = SplitNetwork::new(
                vec![6],
                vec![
                    LayerSpec::Dense {
                        inputs: 6,
                        outputs: 8,
                    },
                    LayerSpec::Relu,
                ],
                vec![
                    LayerSpec::Dropout,
                    LayerSpec::Dense {
                        inputs: 8,
                        outputs: 8,
                    },
                    LayerSpec::Maxout { group_size: 2 },
                    LayerSpec::Dense {
                        inputs: 4,
                        outputs: 3,
                    },
                    final_layer,
                ],
                seed,
            )
            .unwrap();
            let x = Tensor::from_vec(random_vec(seed, 0, 6));
            (net, x)
        }
        1 => {
            let net = SplitNetwork::new(
                vec![1, 6, 6],
                vec![
                    LayerSpec::Conv {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2x2,
                ],
                vec![
                    LayerSpec::Dropout,
                    LayerSpec::Dense {
                        inputs: 8,
                        outputs: 3,
                    },
                    final_layer,
                ],
                seed,
            )
            .unwrap();
            let x = Tensor::new(vec![1, 6, 6], random_vec(seed, 1, 36)).unwrap();
            (net, x)
        }
        2 => {
            let net = SplitNetwork::new(
                vec![1, 8, 8],
                vec![
                    LayerSpec::Conv {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                    },
                    LayerSpec::Relu,
                ],
                vec![
                    LayerSpec::Dropout,
                    LayerSpec::Conv {
                        in_channels: 2,
                        out_channels: 3,
                        kernel: 3,
                    },
                    LayerSpec::GlobalMaxPool,
                    final_layer,
                ],
                seed,
            )
            .unwrap();
            let x = Tensor::new(vec![1, 8, 8], random_vec(seed, 2, 64)).unwrap();
            (net, x)
        }
        _ => {
            // Sigmoid and softmax as inner layers.
            let net = SplitNetwork::new(
                vec![5],
                vec![],
                vec![
                    LayerSpec::Dense {
                        inputs: 5,
                        outputs: 6,
                    },
                    LayerSpec::Sigmoid,
                    LayerSpec::Dropout,
                    LayerSpec::Dense {
                        inputs: 6,
                        outputs: 6,
                    },
                    LayerSpec::Softmax,
                    LayerSpec::Dense {
                        inputs: 6,
                        outputs: 3,
                    },
                    final_layer,
                ],
                seed,
            )
            .unwrap();
            let x = Tensor::from_vec(random_vec(seed, 3, 5));
            (net, x)
        }
    }
}

fn binary_label(seed: u64, classes: usize, one_hot: bool) -> Tensor {
    let mut y = vec![0.0; classes];
    if one_hot {
        y[rng::uniform_index(seed, &[71], classes)] = 1.0;
    } else {
        let mut any = false;
        for (i, v) in y.iter_mut().enumerate() {
            if rng::uniform(seed, &[72, i as u64]) < 0.5 {
                *v = 1.0;
                any = true;
            }
        }
        if !any {
            y[0] = 1.0;
        }
    }
    Tensor::from_vec(y)
}

fn masked_loss(
    net: &SplitNetwork,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    mask: &DropoutMask,
) -> f64 {
    let features = net.compute_features(x).unwrap();
    let out = net.forward_head(&features, mask).unwrap();
    loss_value(loss, y, &out).unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let started = Instant::now();
    const H: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;

    // (loss, final layer, one-hot labels)
    let pairings: [(LossKind, LayerSpec, bool, &str); 3] = [
        (
            LossKind::CrossEntropy,
            LayerSpec::Sigmoid,
            false,
            "ce+sigmoid",
        ),
        (
            LossKind::CrossEntropy,
            LayerSpec::Softmax,
            true,
            "ce+softmax",
        ),
        (LossKind::Euclidean, LayerSpec::Sigmoid, false, "euclidean"),
    ];
    let mut checked_params = 0usize;
    for (pi, &(loss, final_layer, one_hot, name)) in pairings.iter().enumerate() {
        for case in 0..20usize {
            let seed = (pi * 100 + case) as u64;
            // The euclidean pairing alternates sigmoid and softmax finals.
            let final_layer = if loss == LossKind::Euclidean && case % 2 == 1 {
                LayerSpec::Softmax
            } else {
                final_layer
            };
            let (net, x) = template(case, seed, final_layer);
            let classes = net.output_len().unwrap();
            let y = binary_label(seed, classes, one_hot);
            let mask = DropoutMask::generate(&net, 0.7, TEST_MASK_DOMAIN, seed, 0).unwrap();

            let grads = net.backward(&x, &y, loss, Some(&mask)).unwrap();
            for (li, layer_grads) in grads.layers.iter().enumerate() {
                for (param, grad) in [
                    ("weight", layer_grads.weight.as_ref()),
                    ("bias", layer_grads.bias.as_ref()),
                ] {
                    let Some(grad) = grad else { continue };
                    let base = match param {
                        "weight" => net.layers()[li].weight().unwrap().clone(),
                        _ => net.layers()[li].bias().unwrap().clone(),
                    };
                    for e in 0..base.len() {
                        let mut plus = net.clone();
                        let mut minus = net.clone();
                        let mut data_p = base.data().to_vec();
                        let mut data_m = base.data().to_vec();
                        data_p[e] += H;
                        data_m[e] -= H;
                        let tp = Tensor::new(base.shape().to_vec(), data_p).unwrap();
                        let tm = Tensor::new(base.shape().to_vec(), data_m).unwrap();
                        if param == "weight" {
                            plus.set_weight(li, tp).unwrap();
                            minus.set_weight(li, tm).unwrap();
                        } else {
                            plus.set_bias(li, tp).unwrap();
                            minus.set_bias(li, tm).unwrap();
                        }
                        let numeric = (masked_loss(&plus, &x, &y, loss, &mask)
                            - masked_loss(&minus, &x, &y, loss, &mask))
                            / (2.0 * H);
                        let analytic = grad.data()[e];
                        let rel = (analytic - numeric).abs()
                            / analytic.abs().max(numeric.abs()).max(1e-6);
                        assert!(
                            rel < REL_TOL,
                            "{name} case {case} layer {li} {param}[{e}]: analytic {analytic} vs fd {numeric} (rel {rel})"
                        );
                        checked_params += 1;
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 30.0,
        "gradient suite took {elapsed:?}, budget is 30 s"
    );
    println!(
        "criterion 1 (gradient suite, {checked_params} parameters, rel err < 1e-4, {:.1?}): PASS",
        elapsed
    );
}

// ---------------------------------------------------------------------------
// criterion 2

#[test]
fn criterion_02_sampler_equals_naive_recomputation() {
    let p_drops = [0.0, 0.1, 0.5];
    for case in 0..50usize {
        let seed = case as u64;
        let (net, x) = template(case % 3, 1000 + seed, LayerSpec::Softmax);
        let t = 1 + rng::uniform_index(seed, &[31], 32);
        let p_drop = p_drops[case % 3];
        let fast = sample_predictions(&net, &x, t, p_drop, seed).unwrap();
        assert_eq!(fast.len(), t);
        // Naive oracle: the feature part is recomputed for every pass.
        for (pass, out) in fast.iter().enumerate() {
            let features = net.compute_features(&x).unwrap();
            let mask =
                DropoutMask::generate(&net, 1.0 - p_drop, TEST_MASK_DOMAIN, seed, pass as u64)
                    .unwrap();
            let naive = net.forward_head(&features, &mask).unwrap();
            assert_eq!(out.shape(), naive.shape());
            assert!(
                out.data()
                    .iter()
                    .zip(naive.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "case {case}: pass {pass} differs from naive recomputation"
            );
        }
    }
    println!("criterion 2 (sampler bit-identical to naive recomputation, 50 cases): PASS");
}

// ---------------------------------------------------------------------------
// criterion 3

#[test]
fn criterion_03_statistics_oracle_and_tau_offset() {
    for case in 0..100u64 {
        let width = 1 + rng::uniform_index(case, &[1], 6);
        let t = 1 + rng::uniform_index(case, &[2], 40);
        let samples: Vec<Tensor> = (0..t)
            .map(|ti| {
                Tensor::from_vec(
                    (0..width)
                        .map(|i| rng::uniform(case, &[3, ti as u64, i as u64]))
                        .collect(),
                )
            })
            .collect();
        let stats = predictive_stats(&samples, None).unwrap();
        // Two-pass textbook recomputation.
        for i in 0..width {
            let mean: f64 = samples.iter().map(|s| s.data()[i]).sum::<f64>() / t as f64;
            let var: f64 = samples
                .iter()
                .map(|s| (s.data()[i] - mean) * (s.data()[i] - mean))
                .sum::<f64>()
                / t as f64;
            assert!((stats.mean.data()[i] - mean).abs() < 1e-12);
            assert!((stats.variance.data()[i] - var).abs() < 1e-12);
        }
        // Precision mode adds exactly 1/tau to every variance entry.
        let tau = 1.0416666666666666e-5;
        let with_tau = predictive_stats(&samples, Some(tau)).unwrap();
        assert_eq!(with_tau.tau_inverse_offset, 1.0 / tau);
        for i in 0..width {
            let expected = stats.variance.data()[i] + 1.0 / tau;
            assert_eq!(with_tau.variance.data()[i].to_bits(), expected.to_bits());
        }
    }
    // The section-3.2 parameter set reproduces the printed tau.
    let tau = model_precision(&PrecisionParams {
        keep_prob: 0.5,
        length_scale_sq: 0.005,
        sample_count: 1_200_000.0,
        weight_decay: 0.0001,
    })
    .unwrap();
    assert!((tau - 0.0000104).abs() < 2e-8, "tau = {tau}");
    println!("criterion 3 (statistics oracle within 1e-12; tau offset exact): PASS");
}

// ---------------------------------------------------------------------------
// criterion 4

#[test]
fn criterion_04_behavior_ordering_and_ci_coincidence() {
    let alphas = [0.01, 0.05, 0.5];
    let mut stats_checked = 0usize;
    for case in 0..10_000u64 {
        let width = 1 + rng::uniform_index(case, &[11], 4);
        let t = 1 + rng::uniform_index(case, &[12], 25);
        // Every tenth case has zero spread to exercise the equality branch.
        let constant = case % 10 == 0;
        let samples: Vec<Tensor> = (0..t)
            .map(|ti| {
                Tensor::from_vec(
                    (0..width)
                        .map(|i| {
                            if constant {
                                rng::uniform(case, &[13, i as u64])
                            } else {
                                rng::uniform(case, &[14, ti as u64, i as u64])
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        let stats = predictive_stats(&samples, None).unwrap();
        for &alpha in &alphas {
            let conf = ConfidenceConfig::new(alpha).unwrap();
            let mean = apply_behavior(Some(&stats), &conf, BehaviorMode::Mean, None).unwrap();
            let opt = apply_behavior(Some(&stats), &conf, BehaviorMode::Optimistic, None).unwrap();
            let pess =
                apply_behavior(Some(&stats), &conf, BehaviorMode::Pessimistic, None).unwrap();
            let (lo, hi) = confidence_interval(&stats, &conf).unwrap();
            for i in 0..width {
                if stats.std.data()[i] == 0.0 {
                    assert_eq!(opt.data()[i], mean.data()[i]);
                    assert_eq!(pess.data()[i], mean.data()[i]);
                } else {
                    assert!(opt.data()[i] > mean.data()[i]);
                    assert!(mean.data()[i] > pess.data()[i]);
                }
                assert_eq!(opt.data()[i].to_bits(), hi.data()[i].to_bits());
                assert_eq!(pess.data()[i].to_bits(), lo.data()[i].to_bits());
            }
        }
        stats_checked += 1;
    }
    assert!(stats_checked >= 10_000);
    println!(
        "criterion 4 (behavior ordering on 10000 stats x 3 alphas; CI coincidence bit-exact): PASS"
    );
}

// ---------------------------------------------------------------------------
// criterion 5

#[test]
fn criterion_05_quantile_accuracy() {
    let table = [
        (0.9, 1.281552),
        (0.95, 1.644854),
        (0.975, 1.959964),
        (0.99, 2.326348),
        (0.995, 2.575829),
    ];
    for (q, expected) in table {
        let z = normal_quantile(q).unwrap();
        assert!((z - expected).abs() < 1e-5, "q={q}: {z} vs {expected}");
    }
    println!("criterion 5 (normal quantile within 1e-5 of tabulated values): PASS");
}

// ---------------------------------------------------------------------------
// criterion 6

/// Exact enumeration over all 2^m sign-swap patterns.
fn exact_p_value(correct_a: &[bool], correct_b: &[bool]) -> f64 {
    let deltas: Vec<i64> = correct_a
        .iter()
        .zip(correct_b)
        .map(|(&a, &b)| i64::from(!a) - i64::from(!b))
        .collect();
    let observed: i64 = deltas.iter().sum::<i64>().abs();
    let m = deltas.len();
    let mut hits = 0usize;
    for pattern in 0..(1u32 << m) {
        let sum: i64 = deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| if pattern & (1 << i) != 0 { -d } else { d })
            .sum();
        if sum.abs() >= observed {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << m) as f64
}

#[test]
fn criterion_06_permutation_test() {
    // (a) Monte-Carlo at n = 100 000 tracks exact enumeration within 0.01 on
    // instances of up to 12 samples.
    let sigma_for_100k = (0.25f64 / 100_000.0).sqrt();
    for case in 0..8u64 {
        let m = 5 + rng::uniform_index(case, &[20], 8); // 5..=12
        let a: Vec<bool> = (0..m)
            .map(|i| rng::uniform(case, &[21, i as u64]) < 0.75)
            .collect();
        let b: Vec<bool> = (0..m)
            .map(|i| rng::uniform(case, &[22, i as u64]) < 0.45)
            .collect();
        let cfg = PermutationConfig::new(sigma_for_100k, 0.5, 400 + case).unwrap();
        assert_eq!(permutation_count(&cfg), 100_000);
        let mc = paired_permutation_test(&a, &b, &cfg).unwrap();
        let exact = exact_p_value(&a, &b);
        assert!(
            (mc.p_value - exact).abs() < 0.01,
            "case {case}: mc {} vs exact {exact}",
            mc.p_value
        );
    }
    // (b) The published sizing: sigma_p = 0.001 at p = 0.5 needs 250 000
    // permutations.
    let published = PermutationConfig::new(0.001, 0.5, 0).unwrap();
    assert_eq!(permutation_count(&published), 250_000);
    // (c) Identical inputs give p = 1.
    let same = vec![true, false, true, true, false];
    let cfg = PermutationConfig::new(0.01, 0.5, 9).unwrap();
    let out = paired_permutation_test(&same, &same, &cfg).unwrap();
    assert_eq!(out.p_value, 1.0);
    println!("criterion 6 (permutation test: exact-enumeration agreement, n = 250000 sizing, p = 1 on ties): PASS");
}

// ---------------------------------------------------------------------------
// criterion 7

fn eval_opts(mode: BehaviorMode, t: usize, p_drop: f64, seed: u64) -> EvalOptions {
    EvalOptions {
        model: PathBuf::new(),
        data: PathBuf::new(),
        labels: PathBuf::new(),
        mode,
        t,
        p_drop,
        alpha: 0.01,
        rho: 1.0,
        seed,
        tau_params: None,
        literal_mean_offset: false,
        out: PathBuf::new(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn criterion_07_blobs_mean_mode_matches_or_beats_plain() {
    let _guard = HEAVY.lock().unwrap();
    let mut plain_errs = Vec::new();
    let mut mean_errs = Vec::new();
    for seed in 1u64..=5 {
        let spec = DatasetSpec {
            kind: DatasetKind::Blobs {
                classes: 3,
                dim: 8,
                spread: 0.55,
            },
            train_count: 500,
            test_count: 500,
            seed,
        };
        let (train_set, test_set) = generate(&spec).unwrap();
        let net = SplitNetwork::new(
            vec![8],
            vec![
                LayerSpec::Dense {
                    inputs: 8,
                    outputs: 32,
                },
                LayerSpec::Relu,
            ],
            vec![
                LayerSpec::Dropout,
                LayerSpec::Dense {
                    inputs: 32,
                    outputs: 3,
                },
                LayerSpec::Softmax,
            ],
            seed,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 1e-4,
            batch_size: 32,
            iterations: 800,
            lr_drop: vec![(600, 0.1)],
            dropout_rate_train: 0.5,
            base_seed: seed,
            loss: LossKind::CrossEntropy,
        };
        let mut outcome = train(net, &train_set, &cfg).unwrap();
        outcome.net.quantize_weights_f32();

        let plain = evaluate_dataset(
            &outcome.net,
            &test_set,
            &eval_opts(BehaviorMode::Plain, 0, 0.0, seed),
        )
        .unwrap();
        let mean = evaluate_dataset(
            &outcome.net,
            &test_set,
            &eval_opts(BehaviorMode::Mean, 100, 0.5, seed),
        )
        .unwrap();
        let pe = plain.aggregates.top_k_errors[&1];
        let me = mean.aggregates.top_k_errors[&1];
        assert!(
            (0.10..=0.25).contains(&pe),
            "seed {seed}: plain top-1 error {pe} outside the 10-25% calibration band"
        );
        plain_errs.push(pe);
        mean_errs.push(me);
    }
    let wins = plain_errs
        .iter()
        .zip(&mean_errs)
        .filter(|(p, m)| m <= p)
        .count();
    let med_plain = median(plain_errs.clone());
    let med_mean = median(mean_errs.clone());
    assert!(
        med_mean <= med_plain + 0.005,
        "median mean-mode error {med_mean} vs plain {med_plain} (+0.5pp allowed); per-seed plain {plain_errs:?} mean {mean_errs:?}"
    );
    assert!(
        wins >= 3,
        "mean mode wins/ties only {wins}/5 seeds (plain {plain_errs:?} mean {mean_errs:?})"
    );
    println!(
        "criterion 7 (blobs analogue: median mean-mode {med_mean:.4} vs plain {med_plain:.4}, wins/ties {wins}/5): PASS"
    );
}

// ---------------------------------------------------------------------------
// criterion 8

#[test]
fn criterion_08_patches_map_and_optimistic_dominance() {
    let _guard = HEAVY.lock().unwrap();
    let mut plain_maps = Vec::new();
    let mut mean_maps = Vec::new();
    let mut dominance_checked = 0usize;
    for seed in 1u64..=5 {
        let spec = DatasetSpec {
            kind: DatasetKind::MultiHotPatches {
                classes: 4,
                image_size: 16,
                max_objects: 3,
            },
            train_count: 400,
            test_count: 400,
            seed,
        };
        let (train_set, test_set) = generate(&spec).unwrap();
        let net = SplitNetwork::new(
            vec![1, 16, 16],
            vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 6,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
            ],
            vec![
                LayerSpec::Conv {
                    in_channels: 6,
                    out_channels: 8,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout,
                LayerSpec::Conv {
                    in_channels: 8,
                    out_channels: 4,
                    kernel: 3,
                },
                LayerSpec::GlobalMaxPool,
                LayerSpec::Sigmoid,
            ],
            seed,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            weight_decay: 1e-4,
            batch_size: 16,
            iterations: 500,
            lr_drop: vec![(400, 0.1)],
            dropout_rate_train: 0.5,
            base_seed: seed,
            loss: LossKind::CrossEntropy,
        };
        let mut outcome = train(net, &train_set, &cfg).unwrap();
        outcome.net.quantize_weights_f32();

        let plain = evaluate_dataset(
            &outcome.net,
            &test_set,
            &eval_opts(BehaviorMode::Plain, 0, 0.0, seed),
        )
        .unwrap();
        let mean = evaluate_dataset(
            &outcome.net,
            &test_set,
            &eval_opts(BehaviorMode::Mean, 100, 0.5, seed),
        )
        .unwrap();
        plain_maps.push(plain.aggregates.map.unwrap());
        mean_maps.push(mean.aggregates.map.unwrap());

        // Optimistic scores strictly dominate the mean wherever the sampled
        // variance is positive.
        let conf = ConfidenceConfig::new(0.01).unwrap();
        for x in test_set.features.iter().take(25) {
            let samples = sample_predictions(&outcome.net, x, 100, 0.5, seed).unwrap();
            let stats = predictive_stats(&samples, None).unwrap();
            let mean_scores =
                apply_behavior(Some(&stats), &conf, BehaviorMode::Mean, None).unwrap();
            let opt_scores =
                apply_behavior(Some(&stats), &conf, BehaviorMode::Optimistic, None).unwrap();
            for c in 0..stats.std.len() {
                if stats.variance.data()[c] > 0.0 {
                    assert!(
                        opt_scores.data()[c] > mean_scores.data()[c],
                        "seed {seed}: optimistic must strictly exceed mean where variance > 0"
                    );
                    dominance_checked += 1;
                }
            }
        }
    }
    let med_plain = median(plain_maps.clone());
    let med_mean = median(mean_maps.clone());
    assert!(
        med_mean >= med_plain - 0.01,
        "median mean-mode mAP {med_mean} vs plain {med_plain} (-0.01 allowed); per-seed plain {plain_maps:?} mean {mean_maps:?}"
    );
    assert!(dominance_checked > 0);
    println!(
        "criterion 8 (patches analogue: median mAP mean {med_mean:.4} vs plain {med_plain:.4}; optimistic dominance on {dominance_checked} entries): PASS"
    );
}

// ---------------------------------------------------------------------------
// criterion 9

#[test]
fn criterion_09_cache_speedup() {
    let _guard = HEAVY.lock().unwrap();
    let started = Instant::now();
    // Feature part carries ~20x the head FLOPs: two 3x3 convs on 20x20 vs a
    // 2048 -> 4 dense head.
    let net = SplitNetwork::new(
        vec![1, 20, 20],
        vec![
            LayerSpec::Conv {
                in_channels: 1,
                out_channels: 8,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                in_channels: 8,
                out_channels: 8,
                kernel: 3,
            },
            LayerSpec::Relu,
        ],
        vec![
            LayerSpec::Dropout,
            LayerSpec::Dense {
                inputs: 8 * 16 * 16,
                outputs: 4,
            },
            LayerSpec::Sigmoid,
        ],
        3,
    )
    .unwrap();
    let rows = bench_cache(&net, &[10, 100], 7, 0.5, 17).unwrap();
    let t10 = rows.iter().find(|r| r.t == 10).unwrap();
    let t100 = rows.iter().find(|r| r.t == 100).unwrap();
    assert!(
        t100.speedup >= 3.0,
        "fast path speedup at T = 100 is {:.2}x, need >= 3x",
        t100.speedup
    );
    let naive_ratio = t100.naive_ms / t10.naive_ms;
    assert!(
        (5.0..=20.0).contains(&naive_ratio),
        "naive time ratio T=100/T=10 is {naive_ratio:.2}, expected within [5, 20]"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "benchmark took {elapsed:?}");
    println!(
        "criterion 9 (cache speedup {:.1}x at T=100, naive scaling ratio {naive_ratio:.1}, {:.1?}): PASS",
        t100.speedup, elapsed
    );
}

// ---------------------------------------------------------------------------
// criterion 10

#[test]
fn criterion_10_cli_byte_reproducibility() {
    let _guard = HEAVY.lock().unwrap();
    let exe = env!("CARGO_BIN_EXE_opnet");
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).display().to_string();

    let run = |args: &[&str]| {
        let out = std::process::Command::new(exe)
            .args(args)
            .output()
            .expect("command runs");
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();

    std::fs::write(
        dir.path().join("data.json"),
        r#"{"kind": {"blobs": {"classes": 3, "dim": 8, "spread": 0.55}}, "train_count": 80, "test_count": 60}"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("train.json"),
        format!(
            r#"{{
  "network": {{
    "input_shape": [8],
    "feature": [{{"kind": "dense", "inputs": 8, "outputs": 16}}, {{"kind": "relu"}}],
    "head": [{{"kind": "dropout"}}, {{"kind": "dense", "inputs": 16, "outputs": 3}}, {{"kind": "softmax"}}]
  }},
  "training": {{
    "learning_rate": 0.1, "weight_decay": 0.0001, "batch_size": 16,
    "iterations": 60, "lr_drop": [[40, 0.1]], "dropout_rate_train": 0.5,
    "loss": "cross_entropy"
  }},
  "data": {{"features": "{}", "labels": "{}"}},
  "augment": {{"noise_sigma": 0.02, "copies_per_sample": 1}}
}}"#,
            path("d_train.opt1"),
            path("d_train_labels.csv")
        ),
    )
    .unwrap();

    // Two full pipelines into different artifact names; bytes must agree.
    for tag in ["x", "y"] {
        run(&[
            "gen-data",
            "--config",
            &path("data.json"),
            "--seed",
            "5",
            "--out-prefix",
            &path("d"),
        ]);
        run(&[
            "train",
            "--config",
            &path("train.json"),
            "--seed",
            "11",
            "--out-checkpoint",
            &path(&format!("{tag}.opn1")),
            "--out-loss",
            &path(&format!("{tag}_loss.csv")),
        ]);
        run(&[
            "eval",
            "--model",
            &path(&format!("{tag}.opn1")),
            "--data",
            &path("d_test.opt1"),
            "--labels",
            &path("d_test_labels.csv"),
            "--mode",
            "mean",
            "--t",
            "25",
            "--p-drop",
            "0.5",
            "--seed",
            "9",
            "--out",
            &path(&format!("{tag}_mean.json")),
        ]);
        run(&[
            "eval",
            "--model",
            &path(&format!("{tag}.opn1")),
            "--data",
            &path("d_test.opt1"),
            "--labels",
            &path("d_test_labels.csv"),
            "--mode",
            "pessimistic",
            "--t",
            "25",
            "--p-drop",
            "0.5",
            "--seed",
            "9",
            "--out",
            &path(&format!("{tag}_pess.json")),
        ]);
        run(&[
            "sweep",
            "--model",
            &path(&format!("{tag}.opn1")),
            "--data",
            &path("d_test.opt1"),
            "--labels",
            &path("d_test_labels.csv"),
            "--modes",
            "mean,optimistic,pessimistic",
            "--t-values",
            "5,10",
            "--p-drop-values",
            "0.1,0.5",
            "--seed",
            "9",
            "--out",
            &path(&format!("{tag}_sweep.csv")),
        ]);
        run(&[
            "significance",
            "--report-a",
            &path(&format!("{tag}_mean.json")),
            "--report-b",
            &path(&format!("{tag}_pess.json")),
            "--sigma-p",
            "0.01",
            "--seed",
            "21",
            "--out",
            &path(&format!("{tag}_sig.json")),
        ]);
    }

    for (a, b) in [
        ("x.opn1", "y.opn1"),
        ("x_loss.csv", "y_loss.csv"),
        ("x_mean.json", "y_mean.json"),
        ("x_pess.json", "y_pess.json"),
        ("x_sweep.csv", "y_sweep.csv"),
        ("x_sig.json", "y_sig.json"),
    ] {
        assert_eq!(read(a), read(b), "{a} and {b} differ between reruns");
    }

    // The sweep grid has 3 modes x 2 T x 2 p_drop = 12 rows plus the plain
    // baseline and the header.
    let sweep = String::from_utf8(read("x_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 1 + 12, "sweep:\n{sweep}");

    println!("criterion 10 (CLI artifacts byte-identical across reruns): PASS");
}
