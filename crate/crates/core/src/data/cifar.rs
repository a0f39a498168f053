//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32×32).

use std::path::Path;

use super::{read_maybe_gz, Dataset};
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Splits a batch file into labels and pixels scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<f32>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::RecordAlignment {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(record[0]);
        pixels.extend(record[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((labels, pixels))
}

/// Concatenates the given batch files into one `[count, 3, 32, 32]` dataset.
pub fn load_cifar10_binary<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in batch_paths {
        let p = p.as_ref();
        let (l, x) = parse_cifar10(&read_maybe_gz(p)?, p)?;
        labels.extend(l);
        pixels.extend(x);
    }
    Dataset::from_parts("cifar10", &[3, 32, 32], 10, pixels, labels)
}

/// Loads `data_batch_1..5.bin` (train) or `test_batch.bin` from `dir` or
/// its `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let mut dir = dir.as_ref().to_path_buf();
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        dir = nested;
    }
    let paths: Vec<_> = if train {
        (1..=5)
            .map(|i| super::locate(&dir, &[&format!("data_batch_{i}.bin")]))
            .collect::<Result<_>>()?
    } else {
        vec![super::locate(&dir, &["test_batch.bin"])?]
    };
    let mut ds = load_cifar10_binary(&paths)?;
    ds.name = if train { "cifar10-train" } else { "cifar10-test" }.into();
    Ok(ds)
}
