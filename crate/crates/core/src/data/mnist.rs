//! MNIST in IDX format: big-endian headers, one unsigned byte per pixel or label.

use std::path::Path;

use super::{locate, read_maybe_gz, Dataset};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let word = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: at + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(header..header + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: header + len,
        available: bytes.len(),
    })
}

/// Returns `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let raw = body(bytes, 16, count * rows * cols, path)?;
    Ok((count, rows, cols, raw.iter().map(|&p| p as f32 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    Ok(body(bytes, 8, count, path)?.to_vec())
}

/// Loads an image file and its label file (either may be gzip-compressed).
/// Images come out as `[count, 1, rows, cols]`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (count, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(ip)?, ip)?;
    let labels = parse_idx_labels(&read_maybe_gz(lp)?, lp)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let name = ip.file_name().map_or_else(|| "mnist".into(), |n| n.to_string_lossy().into_owned());
    Dataset::from_parts(name, &[1, rows, cols], 10, pixels, labels)
}

/// Loads the canonical training (`train = true`) or test split from a
/// directory holding the standard file names, with `-` or `.` before `idx`.
pub fn load_mnist_dir(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    let images = locate(dir, &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")])?;
    let labels = locate(dir, &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")])?;
    let mut ds = load_mnist_idx(images, labels)?;
    ds.name = format!("mnist-{prefix}");
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use flate2::write::GzEncoder;
    use flate2::Compression;

    use super::*;

    fn images_fixture(count: u32, pixel: u8) -> Vec<u8> {
        let mut v = Vec::new();
        for word in [IDX_IMAGES_MAGIC, count, 28, 28] {
            v.extend(word.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(pixel, count as usize * 784));
        v
    }

    fn labels_fixture(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn single_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i", &images_fixture(1, 255));
        let l = write(dir.path(), "l", &labels_fixture(&[7]));
        let ds = load_mnist_idx(i, l).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sample_shape(), &[1, 28, 28]);
        assert!(ds.pixels().iter().all(|&p| p == 1.0));
        let y = ds.labels_onehot().unwrap();
        assert_eq!(y.data().iter().position(|&v| v == 1.0), Some(7));
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&images_fixture(2, 51)).unwrap();
        let i = write(dir.path(), "train-images-idx3-ubyte.gz", &gz.finish().unwrap());
        write(dir.path(), "train-labels.idx1-ubyte", &labels_fixture(&[0, 9]));
        let ds = load_mnist_dir(dir.path(), true).unwrap();
        assert_eq!(ds.labels(), &[0, 9]);
        assert!(ds.pixels().iter().all(|&p| p == 0.2));
        assert!(i.exists());
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "l", &labels_fixture(&[1, 2]));

        let mut truncated = images_fixture(2, 3);
        truncated.truncate(16 + 784 + 10);
        let t = write(dir.path(), "t", &truncated);
        assert!(matches!(load_mnist_idx(&t, &l), Err(Error::Truncated { needed: 1584, .. })));

        let short_header = write(dir.path(), "h", &truncated[..6]);
        assert!(matches!(load_mnist_idx(&short_header, &l), Err(Error::Truncated { .. })));

        let swapped = write(dir.path(), "s", &labels_fixture(&[1]));
        assert!(matches!(
            load_mnist_idx(&swapped, &l),
            Err(Error::BadMagic { found: IDX_LABELS_MAGIC, expected: IDX_IMAGES_MAGIC, .. })
        ));

        let one = write(dir.path(), "one", &images_fixture(1, 0));
        assert!(matches!(
            load_mnist_idx(&one, &l),
            Err(Error::CountMismatch { images: 1, labels: 2 })
        ));

        let bad_label = write(dir.path(), "bl", &labels_fixture(&[10]));
        assert!(matches!(load_mnist_idx(&one, &bad_label), Err(Error::LabelRange { .. })));

        assert!(matches!(load_mnist_dir(dir.path(), false), Err(Error::Io { .. })));
    }
}
