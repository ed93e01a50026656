//! Test-time dropout sampling and the statistics derived from it.
//!
//! [`sample_predictions`] computes the feature representation once, then runs
//! `T` stochastic head passes whose dropout masks are keyed by
//! `(base_seed, pass)`. [`predictive_stats`] reduces the samples to a
//! per-class mean and variance, optionally offset by the inverse model
//! precision `1/tau` with `tau = p * l^2 / (2 * N * lambda)`. Confidence
//! intervals around the mean give the optimistic (upper bound) and
//! pessimistic (lower bound) behaviors; both are the exact interval
//! endpoints, produced by one shared code path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DropoutMask, SplitNetwork};
use crate::rng;
use crate::tensor::Tensor;

/// Inputs of the model-precision formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionParams {
    /// Keep probability of a unit (1 - dropout rate).
    pub keep_prob: f64,
    /// Squared prior length scale.
    pub length_scale_sq: f64,
    /// Number of training samples.
    pub sample_count: f64,
    /// Weight-decay coefficient.
    pub weight_decay: f64,
}

/// Model precision `tau = p * l^2 / (2 * N * lambda)`.
pub fn model_precision(params: &PrecisionParams) -> Result<f64> {
    let PrecisionParams {
        keep_prob,
        length_scale_sq,
        sample_count,
        weight_decay,
    } = *params;
    if keep_prob <= 0.0 || keep_prob > 1.0 {
        return Err(Error::Argument(format!(
            "keep probability must lie in (0, 1], got {keep_prob}"
        )));
    }
    if length_scale_sq <= 0.0 || sample_count <= 0.0 || weight_decay <= 0.0 {
        return Err(Error::Argument(
            "length scale, sample count and weight decay must be positive".into(),
        ));
    }
    Ok(keep_prob * length_scale_sq / (2.0 * sample_count * weight_decay))
}

/// Per-class sampling statistics over `T` stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveStats {
    pub mean: Tensor,
    pub variance: Tensor,
    pub std: Tensor,
    pub t: usize,
    /// `1/tau` when the caller opted into precision mode, 0 otherwise.
    pub tau_inverse_offset: f64,
}

/// Confidence level and its cached normal quantile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceConfig {
    pub alpha: f64,
    pub z: f64,
}

impl ConfidenceConfig {
    /// Builds the config for a `1 - alpha` confidence level.
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
            return Err(Error::Argument(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            z: normal_quantile(1.0 - alpha / 2.0)?,
        })
    }
}

impl Default for ConfidenceConfig {
    /// 99% certainty.
    fn default() -> Self {
        Self::new(0.01).expect("0.01 is a valid alpha")
    }
}

/// How a sample's class scores are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorMode {
    /// Single deterministic pass, no sampling.
    Plain,
    /// Predictive mean of the T passes.
    Mean,
    /// Upper confidence bound: mean + z * std / sqrt(T).
    Optimistic,
    /// Lower confidence bound: mean - z * std / sqrt(T).
    Pessimistic,
}

impl BehaviorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BehaviorMode::Plain => "plain",
            BehaviorMode::Mean => "mean",
            BehaviorMode::Optimistic => "optimistic",
            BehaviorMode::Pessimistic => "pessimistic",
        }
    }
}

impl std::str::FromStr for BehaviorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BehaviorMode::Plain),
            "mean" => Ok(BehaviorMode::Mean),
            "optimistic" => Ok(BehaviorMode::Optimistic),
            "pessimistic" => Ok(BehaviorMode::Pessimistic),
            other => Err(Error::Argument(format!(
                "unknown behavior mode '{other}' (plain|mean|optimistic|pessimistic)"
            ))),
        }
    }
}

/// Computes features once, then runs `T` head passes with masks keyed by
/// `(base_seed, t)`; returns the raw outputs in pass order.
///
/// Passes run in parallel on the current rayon pool; because each mask is a
/// pure function of its key and results are collected in pass order, the
/// output is independent of the thread schedule.
pub fn sample_predictions(
    net: &SplitNetwork,
    x: &Tensor,
    t: usize,
    p_drop: f64,
    base_seed: u64,
) -> Result<Vec<Tensor>> {
    sample_predictions_impl(net, x, t, p_drop, base_seed, true)
}

/// Single-threaded variant used by the cache benchmark, where wall time on
/// one core is the quantity being measured.
pub fn sample_predictions_sequential(
    net: &SplitNetwork,
    x: &Tensor,
    t: usize,
    p_drop: f64,
    base_seed: u64,
) -> Result<Vec<Tensor>> {
    sample_predictions_impl(net, x, t, p_drop, base_seed, false)
}

fn sample_predictions_impl(
    net: &SplitNetwork,
    x: &Tensor,
    t: usize,
    p_drop: f64,
    base_seed: u64,
    parallel: bool,
) -> Result<Vec<Tensor>> {
    if t == 0 {
        return Err(Error::Argument("sampling requires T >= 1".into()));
    }
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Argument(format!(
            "p_drop must lie in [0, 1), got {p_drop}"
        )));
    }
    net.validate_split()?;
    let keep_prob = 1.0 - p_drop;
    let features = net.compute_features(x)?;
    let one_pass = |pass: usize| -> Result<Tensor> {
        let mask = DropoutMask::generate(
            net,
            keep_prob,
            rng::DOMAIN_TEST_MASK,
            base_seed,
            pass as u64,
        )?;
        net.forward_head(&features, &mask)
    };
    if parallel && t > 1 {
        (0..t).into_par_iter().map(one_pass).collect()
    } else {
        (0..t).map(one_pass).collect()
    }
}

/// Reduces sampled outputs to per-class statistics.
///
/// The mean is always the empirical mean. The empirical variance is the
/// population form `(1/T) sum y_t^2 - mean^2`, elementwise, clamped at zero
/// (tolerating floating-point noise down to -1e-12). When `tau` is supplied,
/// `1/tau` is added to every variance entry and recorded as
/// `tau_inverse_offset`.
pub fn predictive_stats(samples: &[Tensor], tau: Option<f64>) -> Result<PredictiveStats> {
    predictive_stats_with_options(samples, tau, false)
}

/// [`predictive_stats`] with an opt-in variant that also offsets the mean by
/// `1/tau`, as some precision-mode formulations do. Kept behind a flag for
/// comparison experiments; the default mode never shifts the mean.
pub fn predictive_stats_with_options(
    samples: &[Tensor],
    tau: Option<f64>,
    literal_mean_offset: bool,
) -> Result<PredictiveStats> {
    let t = samples.len();
    if t == 0 {
        return Err(Error::Argument(
            "statistics require at least one sample".into(),
        ));
    }
    let width = samples[0].len();
    for s in samples {
        if s.len() != width || s.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "predictive_stats",
                left: samples[0].shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
    }
    let inv_t = 1.0 / t as f64;
    let mut mean = vec![0.0; width];
    let mut second = vec![0.0; width];
    for s in samples {
        for (i, &v) in s.data().iter().enumerate() {
            mean[i] += v;
            second[i] += v * v;
        }
    }
    for i in 0..width {
        mean[i] *= inv_t;
        second[i] *= inv_t;
    }
    let tau_inverse = match tau {
        Some(tau) if tau <= 0.0 => {
            return Err(Error::Argument(format!("tau must be positive, got {tau}")));
        }
        Some(tau) => 1.0 / tau,
        None => 0.0,
    };
    let mut variance = vec![0.0; width];
    for i in 0..width {
        let v = second[i] - mean[i] * mean[i];
        if v < -1e-12 {
            return Err(Error::Numerical(format!(
                "empirical variance {v} below the -1e-12 floating-point tripwire"
            )));
        }
        variance[i] = v.max(0.0) + tau_inverse;
    }
    if literal_mean_offset {
        for m in mean.iter_mut() {
            *m += tau_inverse;
        }
    }
    let variance = Tensor::from_vec(variance);
    let std = variance.sqrt()?;
    Ok(PredictiveStats {
        mean: Tensor::from_vec(mean),
        variance,
        std,
        t,
        tau_inverse_offset: tau_inverse,
    })
}

/// Normal-theory interval around the predictive mean:
/// `mean -+ z * std / sqrt(T)` elementwise.
pub fn confidence_interval(
    stats: &PredictiveStats,
    conf: &ConfidenceConfig,
) -> Result<(Tensor, Tensor)> {
    let half = stats.std.scale(conf.z / (stats.t as f64).sqrt());
    Ok((stats.mean.sub(&half)?, stats.mean.add(&half)?))
}

/// Number of runs needed so the interval half-width shrinks to
/// `rel_tolerance * mean`: `ceil((z * std / (rel_tolerance * mean))^2)`,
/// at least 1. `rel_tolerance = 1` is the literal published formula.
pub fn required_t(
    mean: f64,
    std: f64,
    conf: &ConfidenceConfig,
    rel_tolerance: f64,
) -> Result<usize> {
    if mean == 0.0 {
        return Err(Error::Argument(
            "required_t is undefined for a zero mean".into(),
        ));
    }
    if std < 0.0 {
        return Err(Error::Argument(format!(
            "standard deviation must be nonnegative, got {std}"
        )));
    }
    if rel_tolerance <= 0.0 {
        return Err(Error::Argument(format!(
            "relative tolerance must be positive, got {rel_tolerance}"
        )));
    }
    let ratio = conf.z * std / (rel_tolerance * mean);
    Ok((ratio * ratio).ceil().max(1.0) as usize)
}

/// Scores a sample under the chosen behavior.
///
/// Optimistic and pessimistic scores are exactly the upper and lower
/// [`confidence_interval`] bounds. `Plain` returns the supplied single-pass
/// output unchanged and needs no stats.
pub fn apply_behavior(
    stats: Option<&PredictiveStats>,
    conf: &ConfidenceConfig,
    mode: BehaviorMode,
    plain: Option<&Tensor>,
) -> Result<Tensor> {
    match mode {
        BehaviorMode::Plain => plain.cloned().ok_or_else(|| {
            Error::Argument("plain mode needs the deterministic single-pass output".into())
        }),
        _ => {
            let stats = stats.ok_or_else(|| {
                Error::Argument(format!("{} mode needs sampling statistics", mode.as_str()))
            })?;
            match mode {
                BehaviorMode::Mean => Ok(stats.mean.clone()),
                BehaviorMode::Optimistic => Ok(confidence_interval(stats, conf)?.1),
                BehaviorMode::Pessimistic => Ok(confidence_interval(stats, conf)?.0),
                BehaviorMode::Plain => unreachable!(),
            }
        }
    }
}

/// Inverse standard-normal CDF (Wichura's PPND16 rational approximation,
/// absolute error well under 1e-8 across (1e-10, 1 - 1e-10)).
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Argument(format!(
            "quantile argument must lie in (0, 1), got {q}"
        )));
    }
    let p = q - 0.5;
    if p.abs() <= 0.425 {
        let r = 0.180625 - p * p;
        return Ok(p * poly(&A, r) / poly(&B, r));
    }
    let r = if p < 0.0 { q } else { 1.0 - q };
    let mut r = (-r.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    Ok(if p < 0.0 { -value } else { value })
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

// PPND16 coefficient sets (central / middle-tail / far-tail numerators and
// denominators), constant term first.
const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_104,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_9e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_7e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_8e-15,
];
