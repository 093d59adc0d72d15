use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Per-channel mean and standard deviation of the CIFAR-10 training images
/// after scaling pixels to [0, 1].
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const RECORD: usize = 1 + 3 * 32 * 32;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Decodes binary CIFAR-10 records: one label byte followed by the red,
/// green and blue 32x32 planes in row-major order.
pub fn parse_cifar_records(bytes: &[u8], source: &str) -> Result<LabeledDataset> {
    if bytes.is_empty() {
        return Err(Error::Format(format!("{source}: no records")));
    }
    if bytes.len() % RECORD != 0 {
        let offset = bytes.len() - bytes.len() % RECORD;
        return Err(Error::Format(format!(
            "{source}: truncated record at byte offset {offset}"
        )));
    }
    let n = bytes.len() / RECORD;
    let mut images = Vec::with_capacity(n * (RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!(
                "{source}: label {label} > 9 in record {r} (byte offset {})",
                r * RECORD
            )));
        }
        labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(32 * 32).enumerate() {
            images.extend(
                plane
                    .iter()
                    .map(|&p| ((p as f64 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]) as f32),
            );
        }
    }
    LabeledDataset::new(images, [3, 32, 32], labels, 10)
}

pub fn read_cifar_batch(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, &path.display().to_string())
}

/// Reads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let parts = TRAIN_FILES
        .iter()
        .map(|f| read_cifar_batch(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LabeledDataset> = parts.iter().collect();
    let train = LabeledDataset::concat(&refs)?;
    let test = read_cifar_batch(&dir.join(TEST_FILE))?;
    Ok((train, test))
}
