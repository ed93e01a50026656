//! Library implementations of the CLI commands: training, evaluation, the
//! T/p_drop sweep, the significance test and the cache benchmark. The binary
//! in `main.rs` only parses flags and delegates here, so every command is
//! testable in-process.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::checkpoint;
use crate::datafile;
use crate::datasets::{self, AugmentOp, Dataset, DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::metrics;
use crate::network::{DropoutMask, LayerSpec, SplitNetwork};
use crate::report::{
    label_fingerprint, per_sample_correct, Aggregates, EvalReport, ReportMetadata,
};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig};
use crate::uncertainty::{
    apply_behavior, model_precision, predictive_stats_with_options, sample_predictions,
    sample_predictions_sequential, BehaviorMode, ConfidenceConfig, PrecisionParams,
};

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataDoc {
    pub kind: DatasetKind,
    pub train_count: usize,
    pub test_count: usize,
}

/// Generates a dataset and writes `<prefix>_{train,test}.opt1` plus the
/// sibling label CSVs. Returns the four paths in that order.
pub fn cmd_gen_data(config: &Path, seed: u64, out_prefix: &str) -> Result<[PathBuf; 4]> {
    let doc: GenDataDoc = read_config(config)?;
    let spec = DatasetSpec {
        kind: doc.kind,
        train_count: doc.train_count,
        test_count: doc.test_count,
        seed,
    };
    let (train, test) = datasets::generate(&spec)?;
    let paths = [
        PathBuf::from(format!("{out_prefix}_train.opt1")),
        PathBuf::from(format!("{out_prefix}_train_labels.csv")),
        PathBuf::from(format!("{out_prefix}_test.opt1")),
        PathBuf::from(format!("{out_prefix}_test_labels.csv")),
    ];
    datafile::write_features(&paths[0], &train.features)?;
    datafile::write_labels_csv(&paths[1], &train.labels)?;
    datafile::write_features(&paths[2], &test.features)?;
    datafile::write_labels_csv(&paths[3], &test.labels)?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDoc {
    pub input_shape: Vec<usize>,
    pub feature: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub features: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentDoc {
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub translate_max_fraction: f64,
    /// Augmented variants appended per original sample.
    #[serde(default = "one")]
    pub copies_per_sample: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDoc {
    pub network: NetworkDoc,
    pub training: TrainConfig,
    pub data: DataPaths,
    #[serde(default)]
    pub augment: Option<AugmentDoc>,
}

/// Trains per the config file, then writes the checkpoint and the loss curve
/// CSV. Weights are quantized to the checkpoint's f32 precision before
/// saving, so the returned network scores inputs exactly like the reloaded
/// file will.
pub fn cmd_train(
    config: &Path,
    seed: u64,
    out_checkpoint: &Path,
    out_loss: &Path,
) -> Result<SplitNetwork> {
    let doc: TrainDoc = read_config(config)?;
    let mut cfg = doc.training.clone();
    cfg.base_seed = seed;
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;

    let net = SplitNetwork::new(
        doc.network.input_shape.clone(),
        doc.network.feature.clone(),
        doc.network.head.clone(),
        seed,
    )?;
    let data = datafile::read_dataset(&doc.data.features, &doc.data.labels)?;
    check_dataset_fits(&net, &data)?;
    let data = match &doc.augment {
        Some(augment) => expand_with_augmentation(data, augment, seed)?,
        None => data,
    };

    let outcome = training::train(net, &data, &cfg)?;
    let mut trained = outcome.net;
    trained.quantize_weights_f32();
    checkpoint::save(&trained, out_checkpoint)?;

    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    fs::write(out_loss, csv).map_err(|e| Error::io(out_loss.display().to_string(), e))?;
    Ok(trained)
}

fn check_dataset_fits(net: &SplitNetwork, data: &Dataset) -> Result<()> {
    let classes = net.output_len()?;
    if data.label_width() != classes {
        return Err(Error::Correctness(format!(
            "dataset has {} label columns but the network outputs {classes} classes",
            data.label_width()
        )));
    }
    if let Some(first) = data.features.first() {
        if first.shape() != net.input_shape() {
            return Err(Error::Correctness(format!(
                "dataset samples have shape {:?} but the network expects {:?}",
                first.shape(),
                net.input_shape()
            )));
        }
    }
    Ok(())
}

fn expand_with_augmentation(data: Dataset, doc: &AugmentDoc, seed: u64) -> Result<Dataset> {
    let mut ops = Vec::new();
    if doc.noise_sigma > 0.0 {
        ops.push(AugmentOp::GaussianNoise {
            sigma: doc.noise_sigma,
        });
    }
    if doc.translate_max_fraction > 0.0 {
        ops.push(AugmentOp::Translate {
            max_fraction: doc.translate_max_fraction,
        });
    }
    if ops.is_empty() || doc.copies_per_sample == 0 {
        return Ok(data);
    }
    let mut features = data.features.clone();
    let mut labels = data.labels.clone();
    for copy in 0..doc.copies_per_sample {
        for (i, (x, y)) in data.features.iter().zip(&data.labels).enumerate() {
            let sample_seed = rng::hash(seed, &[rng::DOMAIN_AUGMENT, copy as u64, i as u64]);
            features.push(datasets::augment(x, &ops, sample_seed)?);
            labels.push(y.clone());
        }
    }
    Ok(Dataset { features, labels })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub model: PathBuf,
    pub data: PathBuf,
    pub labels: PathBuf,
    pub mode: BehaviorMode,
    pub t: usize,
    pub p_drop: f64,
    pub alpha: f64,
    pub rho: f64,
    pub seed: u64,
    pub tau_params: Option<PrecisionParams>,
    pub literal_mean_offset: bool,
    pub out: PathBuf,
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<EvalReport> {
    let net = checkpoint::load(&opts.model)?;
    let data = datafile::read_dataset(&opts.data, &opts.labels)?;
    check_dataset_fits(&net, &data)?;
    let report = evaluate_dataset(&net, &data, opts)?;
    report.save(&opts.out)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadKind {
    Softmax,
    Sigmoid,
}

fn head_kind(net: &SplitNetwork) -> Result<HeadKind> {
    match net.layers().last().map(|l| *l.spec()) {
        Some(LayerSpec::Softmax) => Ok(HeadKind::Softmax),
        Some(LayerSpec::Sigmoid) => Ok(HeadKind::Sigmoid),
        other => Err(Error::Config(format!(
            "evaluation needs a softmax or sigmoid final layer, found {other:?}"
        ))),
    }
}

/// Scores every sample of `data` under the selected behavior and assembles
/// the report.
///
/// Sampling modes share one `base_seed` across samples: pass `t` uses the
/// same thinned network for every input, matching the view of the T passes
/// as a fixed ensemble of subnetworks.
pub fn evaluate_dataset(
    net: &SplitNetwork,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let head = head_kind(net)?;
    if opts.mode != BehaviorMode::Plain && opts.t == 0 {
        return Err(Error::Config(format!(
            "mode {} requires T >= 1",
            opts.mode.as_str()
        )));
    }
    if !(0.0..1.0).contains(&opts.p_drop) {
        return Err(Error::Config(format!(
            "p_drop must lie in [0, 1), got {}",
            opts.p_drop
        )));
    }
    net.validate_split()?;
    let conf = ConfidenceConfig::new(opts.alpha)?;
    let tau = opts.tau_params.as_ref().map(model_precision).transpose()?;

    let mut scores = Vec::with_capacity(data.len());
    let mut tau_inverse_offset = 0.0;
    for x in &data.features {
        let row = match opts.mode {
            BehaviorMode::Plain => net.forward_deterministic(x)?,
            mode => {
                let samples = sample_predictions(net, x, opts.t, opts.p_drop, opts.seed)?;
                let stats = predictive_stats_with_options(&samples, tau, opts.literal_mean_offset)?;
                tau_inverse_offset = stats.tau_inverse_offset;
                apply_behavior(Some(&stats), &conf, mode, None)?
            }
        };
        scores.push(row.data().to_vec());
    }
    let labels: Vec<Vec<f64>> = data.labels.iter().map(|l| l.data().to_vec()).collect();

    let (correct, aggregates) = match head {
        HeadKind::Softmax => {
            let correct = per_sample_correct(&scores, &labels).map_err(|_| {
                Error::Correctness("labels are not one-hot but the model has a softmax head".into())
            })?;
            let classes = labels[0].len();
            let mut top_k_errors = std::collections::BTreeMap::new();
            for k in [1usize, 3, 5] {
                if k <= classes {
                    top_k_errors.insert(k, metrics::top_k_error(&scores, &labels, k)?);
                }
            }
            (
                Some(correct),
                Aggregates {
                    top_k_errors,
                    per_class_ap: None,
                    map: None,
                },
            )
        }
        HeadKind::Sigmoid => {
            let map = metrics::mean_average_precision(&scores, &labels)?;
            (
                None,
                Aggregates {
                    top_k_errors: std::collections::BTreeMap::new(),
                    per_class_ap: Some(map.per_class),
                    map: Some(map.mean),
                },
            )
        }
    };

    let sampling = opts.mode != BehaviorMode::Plain;
    Ok(EvalReport {
        metadata: ReportMetadata {
            mode: opts.mode.as_str().to_string(),
            t: sampling.then_some(opts.t),
            p_drop: sampling.then_some(opts.p_drop),
            alpha: opts.alpha,
            rho: opts.rho,
            seed: opts.seed,
            tau_inverse_offset,
            head: match head {
                HeadKind::Softmax => "softmax".into(),
                HeadKind::Sigmoid => "sigmoid".into(),
            },
            label_hash: label_fingerprint(&labels),
        },
        per_sample_scores: scores,
        labels,
        per_sample_correct: correct,
        aggregates,
    })
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub model: PathBuf,
    pub data: PathBuf,
    pub labels: PathBuf,
    pub modes: Vec<BehaviorMode>,
    pub t_values: Vec<usize>,
    pub p_drop_values: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub out: PathBuf,
    /// Include wall-clock times in the CSV. Off by default so reruns with the
    /// same seed produce byte-identical files.
    pub timing: bool,
}

/// Runs the (mode x T x p_drop) grid plus a plain baseline row and writes one
/// CSV row per cell.
pub fn cmd_sweep(opts: &SweepOptions) -> Result<()> {
    if opts.modes.is_empty() || opts.t_values.is_empty() || opts.p_drop_values.is_empty() {
        return Err(Error::Config("sweep grid must be nonempty".into()));
    }
    if opts.modes.contains(&BehaviorMode::Plain) {
        return Err(Error::Config(
            "the plain baseline row is always included; do not list it in --modes".into(),
        ));
    }
    let net = checkpoint::load(&opts.model)?;
    let data = datafile::read_dataset(&opts.data, &opts.labels)?;
    check_dataset_fits(&net, &data)?;

    let file =
        fs::File::create(&opts.out).map_err(|e| Error::io(opts.out.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(opts.out.display().to_string(), e);
    writeln!(
        w,
        "mode,t,p_drop,alpha,seed,top1_error,top3_error,top5_error,map,runtime_ms"
    )
    .map_err(io_err)?;

    let mut cells = vec![(BehaviorMode::Plain, 0usize, 0.0f64)];
    for &mode in &opts.modes {
        for &t in &opts.t_values {
            for &p in &opts.p_drop_values {
                cells.push((mode, t, p));
            }
        }
    }

    for (mode, t, p_drop) in cells {
        let cell_opts = EvalOptions {
            model: opts.model.clone(),
            data: opts.data.clone(),
            labels: opts.labels.clone(),
            mode,
            t,
            p_drop,
            alpha: opts.alpha,
            rho: 1.0,
            seed: opts.seed,
            tau_params: None,
            literal_mean_offset: false,
            out: PathBuf::new(),
        };
        let started = Instant::now();
        let report = match evaluate_dataset(&net, &data, &cell_opts) {
            Ok(report) => report,
            Err(e) => {
                let msg = e.to_string().replace('"', "''");
                writeln!(w, "error,,,,,,,,,\"{msg}\"").map_err(io_err)?;
                w.flush().map_err(io_err)?;
                return Err(e);
            }
        };
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;

        let col = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let agg = &report.aggregates;
        let row = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            mode.as_str(),
            if mode == BehaviorMode::Plain {
                String::new()
            } else {
                t.to_string()
            },
            if mode == BehaviorMode::Plain {
                String::new()
            } else {
                p_drop.to_string()
            },
            opts.alpha,
            opts.seed,
            col(agg.top_k_errors.get(&1).copied()),
            col(agg.top_k_errors.get(&3).copied()),
            col(agg.top_k_errors.get(&5).copied()),
            col(agg.map),
            if opts.timing {
                format!("{elapsed_ms}")
            } else {
                String::new()
            },
        );
        writeln!(w, "{row}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

// ---------------------------------------------------------------------------
// significance

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SignificanceVerdict {
    pub statistic: f64,
    pub n: usize,
    pub p_value: f64,
    pub seed: u64,
    /// p < 0.01.
    pub significant: bool,
}

pub fn cmd_significance(
    report_a: &Path,
    report_b: &Path,
    sigma_p: f64,
    p_anchor: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<SignificanceVerdict> {
    let a = EvalReport::load(report_a)?;
    let b = EvalReport::load(report_b)?;
    let correct_a = a.per_sample_correct.as_ref().ok_or_else(|| {
        Error::Comparability(format!(
            "{} has no per-sample decisions (multilabel report?)",
            report_a.display()
        ))
    })?;
    let correct_b = b.per_sample_correct.as_ref().ok_or_else(|| {
        Error::Comparability(format!(
            "{} has no per-sample decisions (multilabel report?)",
            report_b.display()
        ))
    })?;
    if correct_a.len() != correct_b.len() {
        return Err(Error::Comparability(format!(
            "reports cover {} vs {} samples",
            correct_a.len(),
            correct_b.len()
        )));
    }
    if a.metadata.label_hash != b.metadata.label_hash {
        return Err(Error::Comparability(
            "reports were produced on different test sets (label hash mismatch)".into(),
        ));
    }
    let cfg = metrics::PermutationConfig::new(sigma_p, p_anchor, seed)?;
    let bools_a: Vec<bool> = correct_a.iter().map(|&c| c == 1).collect();
    let bools_b: Vec<bool> = correct_b.iter().map(|&c| c == 1).collect();
    let outcome = metrics::paired_permutation_test(&bools_a, &bools_b, &cfg)?;
    let verdict = SignificanceVerdict {
        statistic: outcome.statistic,
        n: outcome.n,
        p_value: outcome.p_value,
        seed,
        significant: outcome.p_value < 0.01,
    };
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&verdict).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(verdict)
}

// ---------------------------------------------------------------------------
// bench-cache

#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub t: usize,
    pub naive_ms: f64,
    pub fast_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub model: PathBuf,
    pub t_values: Vec<usize>,
    pub repetitions: usize,
    pub p_drop: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_bench_cache(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let net = checkpoint::load(&opts.model)?;
    let rows = bench_cache(
        &net,
        &opts.t_values,
        opts.repetitions,
        opts.p_drop,
        opts.seed,
    )?;
    if let Some(path) = &opts.out {
        let mut csv = String::from("t,naive_ms,fast_ms,speedup\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.t, r.naive_ms, r.fast_ms, r.speedup
            ));
        }
        fs::write(path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(rows)
}

/// Times naive evaluation (feature part recomputed for each of the T passes)
/// against the cached fast path, single-threaded. Asserts bit-exact output
/// equality before any timing; wrong results are never timed.
pub fn bench_cache(
    net: &SplitNetwork,
    t_values: &[usize],
    repetitions: usize,
    p_drop: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if net.feature_part().is_empty() {
        return Err(Error::Argument(
            "the cache benchmark needs a nonempty feature part".into(),
        ));
    }
    if t_values.is_empty() || repetitions == 0 {
        return Err(Error::Argument(
            "bench-cache needs at least one T value and one repetition".into(),
        ));
    }
    net.validate_split()?;
    let input_len: usize = net.input_shape().iter().product();
    let x = Tensor::new(
        net.input_shape().to_vec(),
        (0..input_len)
            .map(|i| rng::uniform(seed, &[rng::DOMAIN_INPUT, i as u64]))
            .collect(),
    )?;
    let keep_prob = 1.0 - p_drop;

    let naive_pass = |t: usize| -> Result<Vec<Tensor>> {
        (0..t)
            .map(|pass| {
                let features = net.compute_features(&x)?;
                let mask = DropoutMask::generate(
                    net,
                    keep_prob,
                    rng::DOMAIN_TEST_MASK,
                    seed,
                    pass as u64,
                )?;
                net.forward_head(&features, &mask)
            })
            .collect()
    };

    let mut rows = Vec::with_capacity(t_values.len());
    for &t in t_values {
        if t == 0 {
            return Err(Error::Argument("T values must be >= 1".into()));
        }
        let naive = naive_pass(t)?;
        let fast = sample_predictions_sequential(net, &x, t, p_drop, seed)?;
        let identical = naive.len() == fast.len()
            && naive.iter().zip(&fast).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        if !identical {
            return Err(Error::Correctness(format!(
                "naive and cached outputs differ at T = {t}; refusing to time wrong results"
            )));
        }

        let mut naive_times = Vec::with_capacity(repetitions);
        let mut fast_times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            let out = naive_pass(t)?;
            naive_times.push(start.elapsed().as_secs_f64() * 1000.0);
            std::hint::black_box(&out);

            let start = Instant::now();
            let out = sample_predictions_sequential(net, &x, t, p_drop, seed)?;
            fast_times.push(start.elapsed().as_secs_f64() * 1000.0);
            std::hint::black_box(&out);
        }
        let naive_ms = median(naive_times);
        let fast_ms = median(fast_times);
        rows.push(BenchRow {
            t,
            naive_ms,
            fast_ms,
            speedup: naive_ms / fast_ms,
        });
    }
    Ok(rows)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_lists() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn bench_rejects_headless_feature_part() {
        let net = SplitNetwork::new(
            vec![4],
            vec![],
            vec![
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 2,
                },
                LayerSpec::Softmax,
            ],
            0,
        )
        .unwrap();
        assert!(bench_cache(&net, &[1], 1, 0.5, 0).is_err());
    }

    #[test]
    fn unknown_config_keys_are_hard_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"kind": {"blobs": {"classes": 2, "dim": 4, "spread": 0.5}},
                "train_count": 4, "test_count": 2, "typo_key": 1}"#,
        )
        .unwrap();
        let err = cmd_gen_data(&path, 1, dir.path().join("d").to_str().unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("typo_key"), "{msg}");
    }
}
