//! Datasets, loaders and deterministic batching.

mod cifar;
mod mnist;

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

pub use cifar::{load_cifar10_binary, load_cifar10_dir, parse_cifar10, CIFAR_RECORD};
pub use mnist::{load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images scaled to `[0, 1]` and one-hot labels, stored row per sample.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    sample_shape: Vec<usize>,
    classes: usize,
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    /// `pixels` holds `labels.len()` samples of `product(sample_shape)` values.
    pub fn from_parts(
        name: impl Into<String>,
        sample_shape: &[usize],
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} values do not form {} samples of {sample_shape:?}", pixels.len(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelRange { label: label as usize, classes });
        }
        Ok(Dataset {
            name: name.into(),
            sample_shape: sample_shape.to_vec(),
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// All images as one `[count, sample_shape..]` tensor.
    pub fn images(&self) -> Result<Tensor<f32>> {
        let mut shape = vec![self.len()];
        shape.extend(&self.sample_shape);
        Tensor::from_vec(&shape, self.pixels.clone(), "data:x")
    }

    pub fn labels_onehot(&self) -> Result<Tensor<f32>> {
        self.onehot(&(0..self.len()).collect::<Vec<_>>())
    }

    /// The first `count` samples (or all, if fewer).
    pub fn subset(&self, count: usize) -> Self {
        let n = count.min(self.len());
        Dataset {
            name: self.name.clone(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    fn onehot<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut y = vec![T::zero(); indices.len() * self.classes];
        for (row, &i) in indices.iter().enumerate() {
            y[row * self.classes + self.labels[i] as usize] = T::one();
        }
        Tensor::from_vec(&[indices.len(), self.classes], y, "data:y")
    }

    /// Copies the listed samples into a batch whose per-sample shape is
    /// `sample_shape` (any shape with the same element count).
    pub fn gather<T: Scalar>(&self, indices: &[usize], sample_shape: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let per = self.sample_len();
        if sample_shape.iter().product::<usize>() != per {
            return Err(Error::shape("gather", &self.sample_shape, sample_shape));
        }
        let mut x = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("gather", format!("index {i} out of {}", self.len())));
            }
            x.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| T::from_f64(p as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend(sample_shape);
        Ok((Tensor::from_vec(&shape, x, "activation:a0")?, self.onehot(indices)?))
    }

    /// Batches of one epoch in seeded random order (see [`batches`]).
    pub fn epoch_batches<T: Scalar>(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        sample_shape: &[usize],
    ) -> Result<Batches<'_, T>> {
        batches(self, batch_size, &mut Rng::new(seed, streams::shuffle(epoch)), sample_shape)
    }
}

/// Lazily gathered `(x, y)` batches over a fixed permutation.
pub struct Batches<'a, T: Scalar> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    sample_shape: Vec<usize>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Batches<'_, T> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Result<(Tensor<T>, Tensor<T>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;
        Some(self.dataset.gather(idx, &self.sample_shape))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.next).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// Shuffles the sample order with `rng` (Fisher–Yates) and splits it into
/// batches of `batch_size`; the last batch may be short.
pub fn batches<'a, T: Scalar>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: &mut Rng,
    sample_shape: &[usize],
) -> Result<Batches<'a, T>> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch size must be positive"));
    }
    if batch_size > dataset.len() {
        return Err(Error::invalid(
            "batches",
            format!("batch size {batch_size} exceeds {} samples", dataset.len()),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    Ok(Batches {
        dataset,
        order,
        batch_size,
        next: 0,
        sample_shape: sample_shape.to_vec(),
        _scalar: std::marker::PhantomData,
    })
}

/// A learnable stand-in dataset: each class has a random prototype image
/// and samples are the prototype blended with uniform noise, clamped to
/// `[0, 1]`. Splits of one seed share prototypes and differ in samples.
pub fn synthetic(
    name: &str,
    sample_shape: &[usize],
    classes: usize,
    count: usize,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    use rand::Rng as _;
    if classes == 0 || classes > 256 {
        return Err(Error::invalid("synthetic", "class count must be in 1..=256"));
    }
    let per: usize = sample_shape.iter().product();
    let mut proto_rng = Rng::new(seed, streams::synthetic(0));
    let prototypes: Vec<f32> = (0..classes * per).map(|_| proto_rng.random::<f32>()).collect();
    let mut rng = Rng::new(seed, streams::synthetic(1 + split));
    let mut pixels = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..classes);
        labels.push(label as u8);
        let proto = &prototypes[label * per..(label + 1) * per];
        pixels.extend(proto.iter().map(|&p| (0.6 * p + 0.4 * rng.random::<f32>()).clamp(0.0, 1.0)));
    }
    Dataset::from_parts(name, sample_shape, classes, pixels, labels)
}

/// Reads a file, inflating it first if it starts with the gzip magic.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Finds `name` or `name.gz` in `dir`.
pub(crate) fn locate(dir: &Path, names: &[&str]) -> Result<std::path::PathBuf> {
    for name in names {
        for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    let wanted = dir.join(names[0]);
    Err(Error::io(
        &wanted,
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let pixels = (0..n * 2).map(|v| v as f32 / (n * 2) as f32).collect();
        let labels = (0..n).map(|i| (i % 3) as u8).collect();
        Dataset::from_parts("toy", &[2], 3, pixels, labels).unwrap()
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let d = toy(7);
        let mut rng = Rng::new(1, 0);
        let mut it = batches::<f64>(&d, 7, &mut rng, &[2]).unwrap();
        let (x, y) = it.next().unwrap().unwrap();
        assert!(it.next().is_none());
        assert_eq!(x.shape(), &[7, 2]);
        assert_eq!(y.shape(), &[7, 3]);
        let mut firsts: Vec<u64> = x.data().chunks(2).map(|r| (r[0] * 14.0).round() as u64).collect();
        firsts.sort();
        assert_eq!(firsts, vec![0, 2, 4, 6, 8, 10, 12]);
    }

    #[test]
    fn batches_are_deterministic_and_cover_the_dataset() {
        let d = toy(10);
        let run = |seed| -> Vec<Vec<f32>> {
            d.epoch_batches::<f32>(3, seed, 1, &[2])
                .unwrap()
                .map(|b| b.unwrap().0.data().to_vec())
                .collect()
        };
        let a = run(4);
        assert_eq!(a, run(4));
        assert_ne!(a, run(5));
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 6, 6, 2]);
        let mut seen: Vec<u32> = a.concat().chunks(2).map(|r| r[0].to_bits()).collect();
        let mut all: Vec<u32> = d.pixels().chunks(2).map(|r| r[0].to_bits()).collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn labels_follow_their_images() {
        let d = toy(9);
        for batch in d.epoch_batches::<f64>(4, 2, 3, &[2]).unwrap() {
            let (x, y) = batch.unwrap();
            for (xr, yr) in x.data().chunks(2).zip(y.data().chunks(3)) {
                let index = (xr[0] * 18.0).round() as usize / 2;
                assert_eq!(yr.iter().position(|&v| v == 1.0), Some(index % 3));
                assert_eq!(yr.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn batch_size_errors() {
        let d = toy(4);
        let mut rng = Rng::new(0, 0);
        assert!(batches::<f32>(&d, 0, &mut rng, &[2]).is_err());
        assert!(batches::<f32>(&d, 5, &mut rng, &[2]).is_err());
        assert!(d.gather::<f32>(&[0], &[3]).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_normalized() {
        let a = synthetic("train", &[2, 3], 4, 50, 7, 0).unwrap();
        let b = synthetic("train", &[2, 3], 4, 50, 7, 0).unwrap();
        let c = synthetic("test", &[2, 3], 4, 50, 7, 1).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert_eq!(a.labels(), b.labels());
        assert_ne!(a.pixels(), c.pixels());
        assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(a.labels().iter().all(|&l| l < 4));
    }

    #[test]
    fn from_parts_validates() {
        assert!(matches!(
            Dataset::from_parts("bad", &[1], 2, vec![0.0], vec![2]),
            Err(Error::LabelRange { label: 2, classes: 2 })
        ));
        assert!(Dataset::from_parts("bad", &[2], 2, vec![0.0], vec![0]).is_err());
        let d = toy(5).subset(2);
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels_onehot().unwrap().data(), &[1., 0., 0., 0., 1., 0.]);
    }
}
