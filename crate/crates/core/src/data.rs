//! Synthetic Gaussian-blob datasets, the CIFAR-10 binary loader, and the
//! crop/flip augmentation pipeline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Images with class labels. Statistics for standardization are computed
/// separately (train split only) and applied through [`standardize`].
#[derive(Clone, Debug)]
pub struct Dataset<E: Element> {
    pub images: Tensor<E>,
    pub labels: Vec<usize>,
}

impl<E: Element> Dataset<E> {
    pub fn new(images: Tensor<E>, labels: Vec<usize>) -> Result<Self> {
        if images.shape().m != labels.len() {
            return Err(Error::shape(format!(
                "{} images with {} labels",
                images.shape().m,
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given sample indices into a contiguous mini-batch.
    pub fn batch(&self, idxs: &[usize]) -> Result<(Tensor<E>, Vec<usize>)> {
        let s = self.images.shape();
        let mut out = Tensor::zeros(Shape::new(idxs.len(), s.c, s.h, s.w));
        let per = s.per_sample();
        let mut labels = Vec::with_capacity(idxs.len());
        for (row, &i) in idxs.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "batch index {i} out of range for {} samples",
                    self.len()
                )));
            }
            out.data_mut()[row * per..(row + 1) * per].copy_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        Ok((out, labels))
    }

    /// Keeps only the first `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        if n >= self.len() {
            return self;
        }
        let s = self.images.shape();
        let per = s.per_sample();
        let mut data = self.images.into_vec();
        data.truncate(n * per);
        self.labels.truncate(n);
        Dataset {
            images: Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data).expect("truncated prefix"),
            labels: self.labels,
        }
    }
}

/// Per-pixel-position mean and standard deviation, computed over the
/// train split only.
#[derive(Clone, Debug)]
pub struct PixelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Computes per-position statistics over every sample. Positions with
/// zero spread get unit scale so standardization stays finite.
pub fn compute_pixel_stats<E: Element>(train: &Dataset<E>) -> Result<PixelStats> {
    let n = train.len();
    if n == 0 {
        return Err(Error::invalid("pixel statistics need at least one sample"));
    }
    let per = train.images.shape().per_sample();
    let mut mean = vec![0.0f64; per];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(train.images.sample(i)) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; per];
    for i in 0..n {
        for (j, &v) in train.images.sample(i).iter().enumerate() {
            let d = v.as_f64() - mean[j];
            var[j] += d * d;
        }
    }
    let std = var
        .iter()
        .map(|&v| {
            let s = (v / n as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(PixelStats { mean, std })
}

/// Standardizes every sample in place with the given statistics.
pub fn standardize<E: Element>(ds: &mut Dataset<E>, stats: &PixelStats) -> Result<()> {
    let per = ds.images.shape().per_sample();
    if stats.mean.len() != per || stats.std.len() != per {
        return Err(Error::shape(format!(
            "statistics cover {} positions, images have {per}",
            stats.mean.len()
        )));
    }
    let n = ds.len();
    let data = ds.images.data_mut();
    for i in 0..n {
        for j in 0..per {
            let v = data[i * per + j].as_f64();
            data[i * per + j] = E::from_f64((v - stats.mean[j]) / stats.std[j]);
        }
    }
    Ok(())
}

/// Standardizes both splits with statistics from the train split alone,
/// returning the statistics that were applied.
pub fn standardize_pair<E: Element>(
    train: &mut Dataset<E>,
    test: &mut Dataset<E>,
) -> Result<PixelStats> {
    let stats = compute_pixel_stats(train)?;
    standardize(train, &stats)?;
    standardize(test, &stats)?;
    Ok(stats)
}

/// Draws `n_samples` points of dimension `dim`: sample `i` belongs to
/// class `i % n_classes` and is the class centroid `separation * e_k`
/// plus unit Gaussian noise, so distinct centroids sit exactly
/// `separation * sqrt(2)` apart.
pub fn gen_gaussian_blobs(
    n_classes: usize,
    dim: usize,
    separation: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset<f64>> {
    if n_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    if dim < n_classes {
        return Err(Error::invalid(format!(
            "dimension {dim} cannot hold {n_classes} orthogonal centroids"
        )));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::invalid(format!(
            "separation {separation} must be positive and finite"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Tensor::zeros(Shape::new(n_samples, dim, 1, 1));
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let k = i % n_classes;
        labels.push(k);
        let row = &mut images.data_mut()[i * dim..(i + 1) * dim];
        for (j, v) in row.iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            *v = noise + if j == k { separation } else { 0.0 };
        }
    }
    Dataset::new(images, labels)
}

/// Reinterprets flat blob vectors as image planes when the experiment
/// drives a convolutional network.
pub fn reshape_images<E: Element>(ds: Dataset<E>, c: usize, h: usize, w: usize) -> Result<Dataset<E>> {
    let n = ds.len();
    let images = ds.images.reshaped(Shape::new(n, c, h, w))?;
    Ok(Dataset {
        images,
        labels: ds.labels,
    })
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parses one CIFAR-10 binary file: 3073-byte records of a label byte
/// followed by 3x32x32 channel-planar pixels, scaled here to [0, 1].
pub fn read_cifar10_file<E: Element>(path: &Path) -> Result<Dataset<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} is {} bytes, not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Tensor::zeros(Shape::new(n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        if rec[0] > 9 {
            return Err(Error::Format(format!(
                "record {i} in {} has label byte {}",
                path.display(),
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        let dst = &mut images.data_mut()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        for (d, &b) in dst.iter_mut().zip(&rec[1..]) {
            *d = E::from_f64(b as f64 / 255.0);
        }
    }
    Dataset::new(images, labels)
}

/// Loads the standard CIFAR-10 binary layout from a directory
/// (`data_batch_1..5.bin` for train, `test_batch.bin` for test),
/// optionally capping each split, then standardizes both splits with
/// train statistics.
pub fn load_cifar10<E: Element>(
    dir: &Path,
    train_cap: Option<usize>,
    test_cap: Option<usize>,
) -> Result<(Dataset<E>, Dataset<E>, PixelStats)> {
    let mut images: Option<Tensor<E>> = None;
    let mut labels = Vec::new();
    for b in 1..=5 {
        if let Some(cap) = train_cap {
            if labels.len() >= cap {
                break;
            }
        }
        let part = read_cifar10_file::<E>(&dir.join(format!("data_batch_{b}.bin")))?;
        labels.extend_from_slice(&part.labels);
        images = Some(match images {
            None => part.images,
            Some(prev) => concat_samples(prev, part.images)?,
        });
    }
    let images = images.ok_or_else(|| Error::invalid("no train batches loaded"))?;
    let mut train = Dataset::new(images, labels)?;
    if let Some(cap) = train_cap {
        train = train.truncate(cap);
    }

    let mut test = read_cifar10_file::<E>(&dir.join("test_batch.bin"))?;
    if let Some(cap) = test_cap {
        test = test.truncate(cap);
    }

    let stats = standardize_pair(&mut train, &mut test)?;
    Ok((train, test, stats))
}

fn concat_samples<E: Element>(a: Tensor<E>, b: Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.c, sa.h, sa.w) != (sb.c, sb.h, sb.w) {
        return Err(Error::shape(format!(
            "cannot concatenate samples of {sa} with {sb}"
        )));
    }
    let total = sa.m + sb.m;
    let mut data = a.into_vec();
    data.extend(b.into_vec());
    Tensor::from_vec(Shape::new(total, sa.c, sa.h, sa.w), data)
}

/// Whether augmentation randomizes (train) or takes the deterministic
/// central crop (test).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    Train,
    Test,
}

/// Output side length of the crop applied by [`augment`].
pub const CROP: usize = 28;

/// Crops every sample to 28x28: train mode picks a uniform-random offset
/// and flips horizontally with probability one half, each sample keyed
/// by (seed, index); test mode takes the central crop. Inputs smaller
/// than the crop are rejected.
pub fn augment<E: Element>(x: &Tensor<E>, mode: AugmentMode, seed: u64) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.h < CROP || s.w < CROP {
        return Err(Error::invalid(format!(
            "cannot take a {CROP}x{CROP} crop from {}x{} images",
            s.h, s.w
        )));
    }
    let mut out = Tensor::zeros(Shape::new(s.m, s.c, CROP, CROP));
    for i in 0..s.m {
        let (oy, ox, flip) = match mode {
            AugmentMode::Test => ((s.h - CROP) / 2, (s.w - CROP) / 2, false),
            AugmentMode::Train => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
                (
                    rng.gen_range(0..=s.h - CROP),
                    rng.gen_range(0..=s.w - CROP),
                    rng.gen::<f64>() < 0.5,
                )
            }
        };
        for c in 0..s.c {
            for y in 0..CROP {
                for xw in 0..CROP {
                    let src_x = if flip { ox + CROP - 1 - xw } else { ox + xw };
                    let v = x.at(i, c, oy + y, src_x);
                    *out.at_mut(i, c, y, xw) = v;
                }
            }
        }
    }
    Ok(out)
}

/// Mirrors every sample along the width axis.
pub fn flip_horizontal<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    Tensor::from_fn(s, |idx| {
        let w = idx % s.w;
        let rest = idx - w;
        x.data()[rest + (s.w - 1 - w)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_separated() {
        let a = gen_gaussian_blobs(4, 16, 10.0, 64, 7).unwrap();
        let b = gen_gaussian_blobs(4, 16, 10.0, 64, 7).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels[..8], [0, 1, 2, 3, 0, 1, 2, 3]);

        let c = gen_gaussian_blobs(4, 16, 10.0, 64, 8).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn empty_blob_dataset_is_valid() {
        let d = gen_gaussian_blobs(3, 8, 1.0, 0, 1).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.images.shape().m, 0);
    }

    #[test]
    fn blob_preconditions_are_enforced() {
        assert!(gen_gaussian_blobs(0, 8, 1.0, 4, 1).is_err());
        assert!(gen_gaussian_blobs(10, 8, 1.0, 4, 1).is_err());
        assert!(gen_gaussian_blobs(2, 8, 0.0, 4, 1).is_err());
        assert!(gen_gaussian_blobs(2, 8, f64::NAN, 4, 1).is_err());
    }

    #[test]
    fn nearest_centroid_is_nearly_perfect_at_wide_separation() {
        let d = gen_gaussian_blobs(4, 128, 10.0, 400, 11).unwrap();
        let mut correct = 0;
        for i in 0..d.len() {
            let row = d.images.sample(i);
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..4 {
                let dist: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let c = if j == k { 10.0 } else { 0.0 };
                        (v - c) * (v - c)
                    })
                    .sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            if best.1 == d.labels[i] {
                correct += 1;
            }
        }
        assert!(correct * 100 >= d.len() * 99, "{correct}/{}", d.len());
    }

    #[test]
    fn batching_gathers_rows_and_validates_indices() {
        let d = gen_gaussian_blobs(2, 4, 5.0, 10, 3).unwrap();
        let (batch, labels) = d.batch(&[3, 0, 7]).unwrap();
        assert_eq!(batch.shape().m, 3);
        assert_eq!(batch.sample(0), d.images.sample(3));
        assert_eq!(batch.sample(2), d.images.sample(7));
        assert_eq!(labels, vec![d.labels[3], d.labels[0], d.labels[7]]);
        assert!(d.batch(&[10]).is_err());
    }

    #[test]
    fn standardization_zeroes_train_statistics_only() {
        let mut train = gen_gaussian_blobs(2, 6, 3.0, 128, 5).unwrap();
        let mut test = gen_gaussian_blobs(2, 6, 3.0, 32, 6).unwrap();
        let stats = standardize_pair(&mut train, &mut test).unwrap();
        assert_eq!(stats.mean.len(), 6);

        let after = compute_pixel_stats(&train).unwrap();
        for j in 0..6 {
            assert!(after.mean[j].abs() < 1e-9, "train mean {}", after.mean[j]);
            assert!((after.std[j] - 1.0).abs() < 1e-9, "train std {}", after.std[j]);
        }
        let test_after = compute_pixel_stats(&test).unwrap();
        // Test split keeps its own offset relative to train statistics.
        assert!(test_after.mean.iter().any(|m| m.abs() > 1e-3));
    }

    #[test]
    fn cifar_loader_recovers_golden_bytes() {
        let dir = std::env::temp_dir().join("normlab-cifar-golden");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("two_records.bin");
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[2] = 51;
        bytes[CIFAR_RECORD] = 0;
        bytes[CIFAR_RECORD + CIFAR_PIXELS] = 102;
        std::fs::write(&path, &bytes).unwrap();

        let d = read_cifar10_file::<f64>(&path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![7, 0]);
        assert_eq!(d.images.at(0, 0, 0, 0), 1.0);
        assert!((d.images.at(0, 0, 0, 1) - 0.2).abs() < 1e-12);
        assert!((d.images.at(1, 2, 31, 31) - 0.4).abs() < 1e-12);
        assert_eq!(d.images.at(1, 0, 0, 0), 0.0);
    }

    #[test]
    fn cifar_loader_rejects_malformed_files() {
        let dir = std::env::temp_dir().join("normlab-cifar-bad");
        std::fs::create_dir_all(&dir).unwrap();

        let truncated = dir.join("truncated.bin");
        std::fs::write(&truncated, vec![0u8; CIFAR_RECORD + 1]).unwrap();
        assert!(matches!(
            read_cifar10_file::<f64>(&truncated),
            Err(Error::Format(_))
        ));

        let bad_label = dir.join("bad_label.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        std::fs::write(&bad_label, &bytes).unwrap();
        assert!(matches!(
            read_cifar10_file::<f64>(&bad_label),
            Err(Error::Format(_))
        ));

        assert!(matches!(
            read_cifar10_file::<f64>(&dir.join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn test_augmentation_takes_the_central_crop() {
        let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, 32, 32));
        *x.at_mut(0, 0, 2, 2) = 1.0;
        *x.at_mut(0, 0, 29, 29) = 2.0;
        let out = augment(&x, AugmentMode::Test, 0).unwrap();
        assert_eq!(out.shape().h, 28);
        assert_eq!(out.at(0, 0, 0, 0), 1.0);
        assert_eq!(out.at(0, 0, 27, 27), 2.0);
    }

    #[test]
    fn train_augmentation_is_seeded_and_stays_in_bounds() {
        let x = gen_gaussian_blobs(1, 3 * 32 * 32, 1.0, 4, 9).unwrap();
        let x = reshape_images(x, 3, 32, 32).unwrap();
        let a = augment(&x.images, AugmentMode::Train, 5).unwrap();
        let b = augment(&x.images, AugmentMode::Train, 5).unwrap();
        assert_eq!(a.data(), b.data());
        let c = augment(&x.images, AugmentMode::Train, 6).unwrap();
        assert_ne!(a.data(), c.data());

        // Every crop window must come verbatim from the source image, so
        // each output row appears somewhere in the input row range.
        for i in 0..4 {
            for y in 0..28 {
                let row: Vec<f64> = (0..28).map(|xw| a.at(i, 0, y, xw)).collect();
                let mut found = false;
                for oy in 0..=4usize {
                    for ox in 0..=4usize {
                        let fwd: Vec<f64> =
                            (0..28).map(|xw| x.images.at(i, 0, oy + y, ox + xw)).collect();
                        let rev: Vec<f64> = fwd.iter().rev().copied().collect();
                        if row == fwd || row == rev {
                            found = true;
                        }
                    }
                }
                assert!(found, "sample {i} row {y} not a crop of the source");
            }
        }
    }

    #[test]
    fn augment_rejects_undersized_inputs() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 27, 32));
        assert!(augment(&x, AugmentMode::Test, 0).is_err());
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let x = gen_gaussian_blobs(1, 2 * 4 * 6, 1.0, 3, 13).unwrap();
        let x = reshape_images(x, 2, 4, 6).unwrap();
        let once = flip_horizontal(&x.images);
        assert_ne!(once.data(), x.images.data());
        let twice = flip_horizontal(&once);
        assert_eq!(twice.data(), x.images.data());
    }

    #[test]
    fn truncate_keeps_the_prefix() {
        let d = gen_gaussian_blobs(2, 4, 5.0, 10, 3).unwrap();
        let keep2 = d.clone().truncate(2);
        assert_eq!(keep2.len(), 2);
        assert_eq!(keep2.images.sample(1), d.images.sample(1));
        assert_eq!(d.clone().truncate(50).len(), 10);
    }
}
