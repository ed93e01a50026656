//! Seeded synthetic datasets and data augmentation.
//!
//! Two generators stand in for real corpora at desk scale: Gaussian blobs on
//! simplex corners (one-hot labels, classification) and small images carrying
//! several non-overlapping class-specific glyphs (multi-hot labels, presence
//! prediction). Generation is a pure function of [`DatasetSpec::seed`]; train
//! and test draw from disjoint counter spaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs {
        classes: usize,
        dim: usize,
        spread: f64,
    },
    MultiHotPatches {
        classes: usize,
        image_size: usize,
        max_objects: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

/// Samples plus per-sample label vectors of uniform length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Tensor>,
    pub labels: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn label_width(&self) -> usize {
        self.labels.first().map_or(0, Tensor::len)
    }
}

/// 4x4 glyphs, one per class: filled square, hollow square, plus, diagonal,
/// anti-diagonal, bars. Distinct enough for a two-conv feature part.
const GLYPH_SIZE: usize = 4;
const GLYPHS: [[u8; 16]; 6] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1],
    [0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 0],
    [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1],
    [0, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 0],
    [1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0],
];

const PLACEMENT_ATTEMPTS: usize = 200;

/// Generates the train and test split for `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.train_count == 0 || spec.test_count == 0 {
        return Err(Error::Generation(
            "train and test counts must be positive".into(),
        ));
    }
    match spec.kind {
        DatasetKind::Blobs {
            classes,
            dim,
            spread,
        } => {
            if classes == 0 || dim == 0 {
                return Err(Error::Generation(
                    "blobs need classes >= 1, dim >= 1".into(),
                ));
            }
            if classes > dim {
                return Err(Error::Generation(format!(
                    "blobs place class centers on distinct basis vectors; {classes} classes need dim >= {classes}, got {dim}"
                )));
            }
            let train = gen_blobs(spec.seed, 0, spec.train_count, classes, dim, spread);
            let test = gen_blobs(spec.seed, 1, spec.test_count, classes, dim, spread);
            Ok((train, test))
        }
        DatasetKind::MultiHotPatches {
            classes,
            image_size,
            max_objects,
        } => {
            if image_size < 8 {
                return Err(Error::Generation(format!(
                    "patch images need image_size >= 8, got {image_size}"
                )));
            }
            if classes == 0 || classes > GLYPHS.len() {
                return Err(Error::Generation(format!(
                    "patch datasets support 1..={} classes, got {classes}",
                    GLYPHS.len()
                )));
            }
            let train = gen_patches(
                spec.seed,
                0,
                spec.train_count,
                classes,
                image_size,
                max_objects,
            )?;
            let test = gen_patches(
                spec.seed,
                1,
                spec.test_count,
                classes,
                image_size,
                max_objects,
            )?;
            Ok((train, test))
        }
    }
}

fn gen_blobs(
    seed: u64,
    split_tag: u64,
    count: usize,
    classes: usize,
    dim: usize,
    spread: f64,
) -> Dataset {
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let data = (0..dim)
            .map(|j| {
                let center = if j == class { 1.0 } else { 0.0 };
                center
                    + spread * rng::normal(seed, &[rng::DOMAIN_DATA, split_tag, i as u64, j as u64])
            })
            .collect();
        features.push(Tensor::from_vec(data));
        let mut one_hot = vec![0.0; classes];
        one_hot[class] = 1.0;
        labels.push(Tensor::from_vec(one_hot));
    }
    Dataset { features, labels }
}

fn gen_patches(
    seed: u64,
    split_tag: u64,
    count: usize,
    classes: usize,
    image_size: usize,
    max_objects: usize,
) -> Result<Dataset> {
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let positions = image_size - GLYPH_SIZE + 1;
    for i in 0..count {
        let si = i as u64;
        let n_objects =
            rng::uniform_index(seed, &[rng::DOMAIN_DATA, split_tag, si, 0], max_objects + 1);
        // Partial Fisher-Yates picks n_objects distinct classes.
        let mut pool: Vec<usize> = (0..classes).collect();
        let chosen: Vec<usize> = (0..n_objects.min(classes))
            .map(|step| {
                let j = rng::uniform_index(
                    seed,
                    &[rng::DOMAIN_DATA, split_tag, si, 1, step as u64],
                    pool.len(),
                );
                pool.swap_remove(j)
            })
            .collect();

        let mut image = vec![0.0; image_size * image_size];
        let mut label = vec![0.0; classes];
        let mut placed: Vec<(usize, usize)> = Vec::new();
        for (obj, &class) in chosen.iter().enumerate() {
            let mut spot = None;
            for attempt in 0..PLACEMENT_ATTEMPTS {
                let y = rng::uniform_index(
                    seed,
                    &[
                        rng::DOMAIN_DATA,
                        split_tag,
                        si,
                        2,
                        obj as u64,
                        attempt as u64,
                        0,
                    ],
                    positions,
                );
                let x = rng::uniform_index(
                    seed,
                    &[
                        rng::DOMAIN_DATA,
                        split_tag,
                        si,
                        2,
                        obj as u64,
                        attempt as u64,
                        1,
                    ],
                    positions,
                );
                let overlaps = placed.iter().any(|&(py, px)| {
                    y + GLYPH_SIZE > py
                        && py + GLYPH_SIZE > y
                        && x + GLYPH_SIZE > px
                        && px + GLYPH_SIZE > x
                });
                if !overlaps {
                    spot = Some((y, x));
                    break;
                }
            }
            let (y, x) = spot.ok_or_else(|| {
                Error::Generation(format!(
                    "could not place {} objects of size {GLYPH_SIZE} on a {image_size}x{image_size} image",
                    chosen.len()
                ))
            })?;
            placed.push((y, x));
            for gy in 0..GLYPH_SIZE {
                for gx in 0..GLYPH_SIZE {
                    if GLYPHS[class][gy * GLYPH_SIZE + gx] == 1 {
                        image[(y + gy) * image_size + (x + gx)] = 1.0;
                    }
                }
            }
            label[class] = 1.0;
        }
        features.push(Tensor::new(vec![1, image_size, image_size], image)?);
        labels.push(Tensor::from_vec(label));
    }
    Ok(Dataset { features, labels })
}

/// Augmentation operations, applied in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    GaussianNoise { sigma: f64 },
    Translate { max_fraction: f64 },
}

/// Applies seeded augmentation to one sample; labels are the caller's and
/// remain untouched. Translation requires an image-shaped (rank >= 2) sample.
pub fn augment(sample: &Tensor, ops: &[AugmentOp], seed: u64) -> Result<Tensor> {
    let mut out = sample.clone();
    for (oi, op) in ops.iter().enumerate() {
        match *op {
            AugmentOp::GaussianNoise { sigma } => {
                if sigma == 0.0 {
                    continue;
                }
                for (e, v) in out.data_mut().iter_mut().enumerate() {
                    *v += sigma * rng::normal(seed, &[rng::DOMAIN_AUGMENT, oi as u64, 0, e as u64]);
                }
            }
            AugmentOp::Translate { max_fraction } => {
                if out.rank() < 2 {
                    return Err(Error::Argument(
                        "translation needs an image-shaped sample".into(),
                    ));
                }
                let h = out.shape()[out.rank() - 2];
                let w = out.shape()[out.rank() - 1];
                let mh = (max_fraction * h as f64).floor() as i64;
                let mw = (max_fraction * w as f64).floor() as i64;
                if mh == 0 && mw == 0 {
                    continue;
                }
                let dy = rng::uniform_index(
                    seed,
                    &[rng::DOMAIN_AUGMENT, oi as u64, 1, 0],
                    (2 * mh + 1) as usize,
                ) as i64
                    - mh;
                let dx = rng::uniform_index(
                    seed,
                    &[rng::DOMAIN_AUGMENT, oi as u64, 1, 1],
                    (2 * mw + 1) as usize,
                ) as i64
                    - mw;
                out = translate(&out, dy, dx)?;
            }
        }
    }
    Ok(out)
}

/// Shifts image content by `(dy, dx)` pixels (positive = down/right) over the
/// last two axes, filling vacated pixels with zero.
pub fn translate(sample: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    if sample.rank() < 2 {
        return Err(Error::Argument(
            "translation needs an image-shaped sample".into(),
        ));
    }
    let h = sample.shape()[sample.rank() - 2] as i64;
    let w = sample.shape()[sample.rank() - 1] as i64;
    let planes = sample.len() as i64 / (h * w);
    let mut data = vec![0.0; sample.len()];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let sy = y - dy;
                let sx = x - dx;
                if sy >= 0 && sy < h && sx >= 0 && sx < w {
                    data[(p * h * w + y * w + x) as usize] =
                        sample.data()[(p * h * w + sy * w + sx) as usize];
                }
            }
        }
    }
    Tensor::new(sample.shape().to_vec(), data)
}
