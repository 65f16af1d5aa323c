//! Readers for the standard CIFAR binary batch files.

use super::{DatasetSplit, LongTailSpec};
use crate::error::{Error, Result};
use ndarray::Array2;
use std::path::Path;

const IMAGE_BYTES: usize = 3 * 32 * 32;

/// Load the CIFAR-10 training batches (`data_batch_1.bin` .. `data_batch_5.bin`)
/// from `dir`. Pixels are scaled to [0, 1].
pub fn load_cifar10(dir: &Path) -> Result<DatasetSplit> {
    let mut records = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        read_records(&path, 1, &mut records)?;
    }
    build_split(records, 10)
}

/// Load the CIFAR-10 test batch (`test_batch.bin`).
pub fn load_cifar10_test(dir: &Path) -> Result<DatasetSplit> {
    let mut records = Vec::new();
    read_records(&dir.join("test_batch.bin"), 1, &mut records)?;
    build_split(records, 10)
}

/// Load the CIFAR-100 training file (`train.bin`) from `dir`, using fine labels.
pub fn load_cifar100(dir: &Path) -> Result<DatasetSplit> {
    let mut records = Vec::new();
    read_records(&dir.join("train.bin"), 2, &mut records)?;
    build_split(records, 100)
}

/// Load the CIFAR-100 test file (`test.bin`), using fine labels.
pub fn load_cifar100_test(dir: &Path) -> Result<DatasetSplit> {
    let mut records = Vec::new();
    read_records(&dir.join("test.bin"), 2, &mut records)?;
    build_split(records, 100)
}

/// Each CIFAR record is `label_bytes` label bytes followed by a 3x32x32 image
/// in channel-major order. CIFAR-100 stores (coarse, fine); the last label
/// byte is the one used.
fn read_records(path: &Path, label_bytes: usize, out: &mut Vec<(u8, Vec<u8>)>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let record = label_bytes + IMAGE_BYTES;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Data(format!(
            "{}: size {} is not a multiple of the {}-byte record",
            path.display(),
            bytes.len(),
            record
        )));
    }
    for chunk in bytes.chunks_exact(record) {
        out.push((chunk[label_bytes - 1], chunk[label_bytes..].to_vec()));
    }
    Ok(())
}

fn build_split(records: Vec<(u8, Vec<u8>)>, num_classes: usize) -> Result<DatasetSplit> {
    let n = records.len();
    let mut features = Array2::<f64>::zeros((n, IMAGE_BYTES));
    let mut labels = Vec::with_capacity(n);
    for (i, (label, pixels)) in records.into_iter().enumerate() {
        let label = label as usize;
        if label >= num_classes {
            return Err(Error::Data(format!(
                "record {i}: label {label} out of range for {num_classes} classes"
            )));
        }
        labels.push(label);
        for (j, &p) in pixels.iter().enumerate() {
            features[[i, j]] = f64::from(p) / 255.0;
        }
    }
    let class_sizes = {
        let mut sizes = vec![0usize; num_classes];
        for &y in &labels {
            sizes[y] += 1;
        }
        sizes
    };
    let n_max = class_sizes.iter().copied().max().unwrap_or(0);
    let n_min = class_sizes.iter().copied().min().unwrap_or(0).max(1);
    let spec = LongTailSpec {
        num_classes,
        n_max,
        beta: n_max as f64 / n_min as f64,
        counts: class_sizes,
    };
    DatasetSplit::from_rows(features, labels, vec![3, 32, 32], spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fake_cifar10(dir: &Path, per_batch: usize) {
        for i in 1..=5 {
            let mut bytes = Vec::new();
            for r in 0..per_batch {
                bytes.push((r % 10) as u8);
                bytes.extend(std::iter::repeat_n((r % 251) as u8, IMAGE_BYTES));
            }
            std::fs::write(dir.join(format!("data_batch_{i}.bin")), bytes).unwrap();
        }
    }

    #[test]
    fn reads_fake_cifar10_batches() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar10(dir.path(), 20);
        let split = load_cifar10(dir.path()).unwrap();
        assert_eq!(split.len(), 100);
        assert_eq!(split.input_shape, vec![3, 32, 32]);
        assert_eq!(split.class_sizes(), vec![10; 10]);
        assert!(split.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar10(dir.path(), 2);
        std::fs::write(dir.path().join("data_batch_3.bin"), vec![0u8; 17]).unwrap();
        assert!(load_cifar10(dir.path()).is_err());
    }
}
