//! Dataset persistence: an `OPT1` binary feature file plus a sibling label
//! CSV (`sample_index`, then one binary column per class).
//!
//! Feature layout: magic `OPT1`, u32 LE version, u64 LE sample count, u32 LE
//! rank, u64 LE dims, then `count * product(dims)` little-endian f32 values.

use std::fs;
use std::path::Path;

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OPT1";
pub const VERSION: u32 = 1;

pub fn write_features(path: &Path, samples: &[Tensor]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot write an empty dataset".into()))?;
    let shape = first.shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::Argument("samples must share one shape".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in samples {
        for &v in s.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_features(path: &Path) -> Result<Vec<Tensor>> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
    let fail = |detail: &str| Error::format(&display, detail);
    if bytes.len() < 16 {
        return Err(fail("file shorter than the fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, expected OPT1"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 20 {
        return Err(fail("missing rank"));
    }
    let rank = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let dims_end = 20 + rank * 8;
    if bytes.len() < dims_end {
        return Err(fail("missing dimensions"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[20 + i * 8..28 + i * 8].try_into().unwrap()) as usize)
        .collect();
    let per_sample: usize = shape.iter().product();
    let expected = dims_end + count * per_sample * 4;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "expected {expected} bytes for {count} samples of shape {shape:?}, file has {}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for s in 0..count {
        let start = dims_end + s * per_sample * 4;
        let data: Vec<f64> = bytes[start..start + per_sample * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        samples.push(Tensor::new(shape.clone(), data).map_err(|e| fail(&e.to_string()))?);
    }
    Ok(samples)
}

pub fn write_labels_csv(path: &Path, labels: &[Tensor]) -> Result<()> {
    let width = labels
        .first()
        .map(Tensor::len)
        .ok_or_else(|| Error::Argument("cannot write empty labels".into()))?;
    let mut out = String::from("sample_index");
    for c in 0..width {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    for (i, row) in labels.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Argument("label rows must share one width".into()));
        }
        out.push_str(&i.to_string());
        for &v in row.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Label(v));
            }
            out.push_str(if v == 1.0 { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<Tensor>> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
    let fail = |detail: String| Error::format(&display, detail);
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| fail("empty label file".into()))?;
    let width = header.split(',').count().saturating_sub(1);
    if width == 0 {
        return Err(fail("header must name at least one class column".into()));
    }
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let index: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| fail(format!("line {}: bad sample index: {e}", lineno + 2)))?;
        if index != labels.len() {
            return Err(fail(format!(
                "line {}: sample index {index} out of order",
                lineno + 2
            )));
        }
        let row: Vec<f64> = fields
            .map(|f| match f {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(fail(format!(
                    "line {}: labels must be 0 or 1, got '{other}'",
                    lineno + 2
                ))),
            })
            .collect::<Result<_>>()?;
        if row.len() != width {
            return Err(fail(format!(
                "line {}: expected {width} label columns, got {}",
                lineno + 2,
                row.len()
            )));
        }
        labels.push(Tensor::from_vec(row));
    }
    Ok(labels)
}

/// Reads a feature file and its label CSV into a [`Dataset`], checking the
/// two agree on sample count.
pub fn read_dataset(features: &Path, labels: &Path) -> Result<Dataset> {
    let feats = read_features(features)?;
    let labs = read_labels_csv(labels)?;
    if feats.len() != labs.len() {
        return Err(Error::Format {
            path: labels.display().to_string(),
            detail: format!("{} labels for {} feature samples", labs.len(), feats.len()),
        });
    }
    Ok(Dataset {
        features: feats,
        labels: labs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, DatasetKind, DatasetSpec};

    #[test]
    fn feature_file_round_trip_is_byte_stable() {
        let (train, _) = generate(&DatasetSpec {
            kind: DatasetKind::Blobs {
                classes: 3,
                dim: 5,
                spread: 0.4,
            },
            train_count: 12,
            test_count: 4,
            seed: 8,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.opt1");
        write_features(&path, &train.features).unwrap();
        let loaded = read_features(&path).unwrap();
        let path2 = dir.path().join("again.opt1");
        write_features(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn labels_round_trip() {
        let (train, _) = generate(&DatasetSpec {
            kind: DatasetKind::MultiHotPatches {
                classes: 4,
                image_size: 12,
                max_objects: 2,
            },
            train_count: 9,
            test_count: 3,
            seed: 2,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        write_labels_csv(&path, &train.labels).unwrap();
        let loaded = read_labels_csv(&path).unwrap();
        assert_eq!(loaded, train.labels);
    }

    #[test]
    fn count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.opt1");
        let l = dir.path().join("y.csv");
        write_features(&f, &[Tensor::from_vec(vec![1.0, 2.0])]).unwrap();
        write_labels_csv(
            &l,
            &[Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![0.0])],
        )
        .unwrap();
        assert!(read_dataset(&f, &l).is_err());
    }

    #[test]
    fn non_binary_label_text_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let l = dir.path().join("bad.csv");
        std::fs::write(&l, "sample_index,class_0\n0,0.7\n").unwrap();
        assert!(read_labels_csv(&l).is_err());
    }
}
