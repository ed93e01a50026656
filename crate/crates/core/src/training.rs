//! Losses, SGD with weight decay, and the mini-batch training loop.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::network::{DropoutMask, Gradients, LossKind, SplitNetwork};
use crate::rng;
use crate::tensor::Tensor;

/// Predictions are clipped to `[EPS, 1 - EPS]` inside the cross-entropy loss,
/// which is undefined at exactly 0 or 1.
pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    /// `(iteration, factor)` pairs: at the start of that iteration the
    /// current learning rate is multiplied by the factor (0.1 = "reduced by
    /// the factor of 10").
    #[serde(default)]
    pub lr_drop: Vec<(usize, f64)>,
    #[serde(default)]
    pub dropout_rate_train: f64,
    /// Set from the command line, never from config files.
    #[serde(skip)]
    pub base_seed: u64,
    pub loss: LossKind,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.05
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn iterations() -> usize {
        2000
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate_train) {
            return Err(Error::Config(format!(
                "dropout_rate_train must lie in [0, 1), got {}",
                self.dropout_rate_train
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Squared Euclidean distance halved.
pub fn loss_euclidean(y: &Tensor, prediction: &Tensor) -> Result<f64> {
    if y.shape() != prediction.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_euclidean",
            left: y.shape().to_vec(),
            right: prediction.shape().to_vec(),
        });
    }
    Ok(y.data()
        .iter()
        .zip(prediction.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / 2.0)
}

/// Binary cross-entropy summed over outputs. Labels must be exactly 0 or 1;
/// predictions are clipped to `[CROSS_ENTROPY_EPS, 1 - CROSS_ENTROPY_EPS]`.
pub fn loss_cross_entropy(y: &Tensor, prediction: &Tensor) -> Result<f64> {
    if y.shape() != prediction.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_cross_entropy",
            left: y.shape().to_vec(),
            right: prediction.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for (&yi, &pi) in y.data().iter().zip(prediction.data()) {
        if yi != 0.0 && yi != 1.0 {
            return Err(Error::Label(yi));
        }
        let p = pi.clamp(CROSS_ENTROPY_EPS, 1.0 - CROSS_ENTROPY_EPS);
        total -= yi * p.ln() + (1.0 - yi) * (1.0 - p).ln();
    }
    Ok(total)
}

pub fn loss_value(kind: LossKind, y: &Tensor, prediction: &Tensor) -> Result<f64> {
    match kind {
        LossKind::CrossEntropy => loss_cross_entropy(y, prediction),
        LossKind::Euclidean => loss_euclidean(y, prediction),
    }
}

/// One SGD step: `w <- w - lr * (g + weight_decay * w)`. Biases are exempt
/// from decay.
pub fn sgd_step(
    net: &mut SplitNetwork,
    grads: &Gradients,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    let layers = net.layers().len();
    if grads.layers.len() != layers {
        return Err(Error::Argument(format!(
            "gradient set covers {} layers, network has {layers}",
            grads.layers.len()
        )));
    }
    for li in 0..layers {
        if let Some(dw) = &grads.layers[li].weight {
            let w = net.layers()[li].weight().expect("gradient implies weights");
            let updated = w.sub(&dw.add(&w.scale(weight_decay))?.scale(learning_rate))?;
            net.set_weight(li, updated)?;
        }
        if let Some(db) = &grads.layers[li].bias {
            let b = net.layers()[li].bias().expect("gradient implies bias");
            let updated = b.sub(&db.scale(learning_rate))?;
            net.set_bias(li, updated)?;
        }
    }
    Ok(())
}

/// Outcome of a training run: the final network and the per-iteration mean
/// batch loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SplitNetwork,
    pub loss_curve: Vec<f64>,
}

/// Runs `cfg.iterations` mini-batch SGD steps, fully reproducible from
/// `cfg.base_seed`. Aborts with diagnostics if the mean batch loss stops
/// being finite.
pub fn train(net: SplitNetwork, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training dataset is empty".into()));
    }
    let mut net = net;
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    let mut lr = cfg.learning_rate;
    let keep_prob = 1.0 - cfg.dropout_rate_train;
    let n = dataset.len();

    for iter in 0..cfg.iterations {
        for &(at, factor) in &cfg.lr_drop {
            if at == iter {
                lr *= factor;
            }
        }
        let mut batch_grads: Option<Gradients> = None;
        let mut batch_loss = 0.0;
        for slot in 0..cfg.batch_size {
            let idx = rng::uniform_index(
                cfg.base_seed,
                &[rng::DOMAIN_BATCH, iter as u64, slot as u64],
                n,
            );
            let x = &dataset.features[idx];
            let y = &dataset.labels[idx];
            let pass = (iter * cfg.batch_size + slot) as u64;
            let mask = if cfg.dropout_rate_train > 0.0 {
                Some(DropoutMask::generate(
                    &net,
                    keep_prob,
                    rng::DOMAIN_TRAIN_MASK,
                    cfg.base_seed,
                    pass,
                )?)
            } else {
                None
            };
            let acts = net.forward_all(x, mask.as_ref())?;
            batch_loss += loss_value(cfg.loss, y, acts.last().expect("nonempty"))?;
            let grads = net.backward_from_acts(&acts, y, cfg.loss, mask.as_ref())?;
            batch_grads = Some(match batch_grads {
                None => grads,
                Some(acc) => accumulate(acc, &grads)?,
            });
        }
        let mean_loss = batch_loss / cfg.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                learning_rate: lr,
            });
        }
        let grads = scale_gradients(
            batch_grads.expect("batch_size >= 1"),
            1.0 / cfg.batch_size as f64,
        );
        sgd_step(&mut net, &grads, lr, cfg.weight_decay)?;
        loss_curve.push(mean_loss);
    }
    Ok(TrainOutcome { net, loss_curve })
}

fn accumulate(mut acc: Gradients, other: &Gradients) -> Result<Gradients> {
    for (a, b) in acc.layers.iter_mut().zip(&other.layers) {
        if let (Some(aw), Some(bw)) = (&a.weight, &b.weight) {
            a.weight = Some(aw.add(bw)?);
        }
        if let (Some(ab), Some(bb)) = (&a.bias, &b.bias) {
            a.bias = Some(ab.add(bb)?);
        }
    }
    Ok(acc)
}

fn scale_gradients(mut grads: Gradients, factor: f64) -> Gradients {
    for g in grads.layers.iter_mut() {
        if let Some(w) = &g.weight {
            g.weight = Some(w.scale(factor));
        }
        if let Some(b) = &g.bias {
            g.bias = Some(b.scale(factor));
        }
    }
    grads
}
