//! Datasets: CIFAR-10 binary batches, a synthetic wide-context task,
//! preprocessing and augmentation.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const GCN_EPS: f64 = 1e-8;
pub const ZCA_EPS: f64 = 0.1;
pub const AUGMENT_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, class_count: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images, {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} outside {class_count} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels of the listed samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

fn cifar_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    }
}

/// Reads one file of fixed-length records: a label byte followed by
/// `C·H·W` pixel bytes in channel-major order.
pub fn read_records(
    path: &Path,
    shape: [usize; 3],
    class_count: usize,
    limit: Option<usize>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = 1 + shape.iter().product::<usize>();
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of {record}-byte records", bytes.len()),
        ));
    }
    let count = (bytes.len() / record).min(limit.unwrap_or(usize::MAX));
    let mut pixels = Vec::with_capacity(count * (record - 1));
    let mut labels = Vec::with_capacity(count);
    for (i, r) in bytes.chunks_exact(record).take(count).enumerate() {
        let label = r[0] as usize;
        if label >= class_count {
            return Err(Error::format(path, format!("record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend(r[1..].iter().map(|&b| f64::from(b)));
    }
    Ok((pixels, labels))
}

/// Loads the standard binary batches from `dir`, raw pixel values 0..=255.
/// With `limit`, only the first `limit` records (in file order) are read.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in cifar_files(split) {
        let remaining = limit.map(|l| l - labels.len());
        if remaining == Some(0) {
            break;
        }
        let (p, l) = read_records(&dir.join(name), CIFAR_SHAPE, 10, remaining)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let [c, h, w] = CIFAR_SHAPE;
    let images = Tensor::from_vec([labels.len(), c, h, w], pixels)?;
    Dataset::new(images, labels, split, 10)
}

/// Writes a dataset in the fixed-length record format, mapping each value to a
/// byte with `to_byte`.
pub fn write_records(path: &Path, data: &Dataset, to_byte: impl Fn(f64) -> u8) -> Result<()> {
    let mut out = Vec::with_capacity(data.len() * (1 + data.images.sample_len()));
    for (i, &label) in data.labels.iter().enumerate() {
        let label = u8::try_from(label)
            .map_err(|_| Error::InvalidConfig(format!("label {label} does not fit a byte")))?;
        out.push(label);
        out.extend(data.images.sample(i).iter().map(|&v| to_byte(v)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Clamp-and-round mapping for raw pixel data.
pub fn pixel_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Per image: subtract the mean, divide by `max(std, GCN_EPS)`.
pub fn global_contrast_normalize(d: &Dataset) -> Dataset {
    let mut out = d.clone();
    let s = out.images.sample_len();
    if s == 0 {
        return out;
    }
    out.images.data_mut().par_chunks_mut(s).for_each(|img| {
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt().max(GCN_EPS);
        for v in img.iter_mut() {
            *v = (*v - mean) / scale;
        }
    });
    out
}

/// ZCA whitening fitted on a training set: `W = U (Λ + ε)^-1/2 Uᵀ`.
#[derive(Debug, Clone)]
pub struct Zca {
    mean: Vec<f64>,
    transform: DMatrix<f64>,
}

impl Zca {
    pub fn fit(images: &Tensor, eps: f64) -> Result<Self> {
        let n = images.shape()[0];
        let d = images.sample_len();
        if n < 2 {
            return Err(Error::InvalidConfig("ZCA needs at least two images".into()));
        }
        let x = DMatrix::from_row_slice(n, d, images.data());
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = (centered.transpose() * &centered) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + eps).sqrt()));
        let transform = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        Ok(Self { mean, transform })
    }

    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let d = images.sample_len();
        if d != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "ZCA fitted on {} values per image, got {d}",
                self.mean.len()
            )));
        }
        let centered = DMatrix::from_fn(n, d, |i, j| images.data()[i * d + j] - self.mean[j]);
        let white = centered * &self.transform;
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(white.row(i).iter());
        }
        Tensor::from_vec(images.shape(), data)
    }
}

/// Crops `(h, w)` from the image zero-padded by [`AUGMENT_PAD`] on every side,
/// with the crop's top-left at `(dy, dx)` in padded coordinates, then mirrors
/// left-right when `flip` is set.
pub fn crop_flip(
    image: &[f64],
    [c, h, w]: [usize; 3],
    dy: usize,
    dx: usize,
    flip: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let r = i as i64 + dy as i64 - AUGMENT_PAD as i64;
            if r < 0 || r >= h as i64 {
                continue;
            }
            for j in 0..w {
                let col = j as i64 + dx as i64 - AUGMENT_PAD as i64;
                if col < 0 || col >= w as i64 {
                    continue;
                }
                let oj = if flip { w - 1 - j } else { j };
                out[(ch * h + i) * w + oj] = image[(ch * h + r as usize) * w + col as usize];
            }
        }
    }
    out
}

/// Random pad-and-crop plus horizontal flip with probability one half.
/// Each image uses its own stream keyed by one draw from `rng`, so the result
/// does not depend on thread scheduling.
pub fn augment_batch<R: Rng + ?Sized>(images: &Tensor, rng: &mut R) -> Tensor {
    let key = rng.next_u64();
    let [_, c, h, w] = images.shape();
    let s = images.sample_len();
    let mut out = images.clone();
    if s == 0 {
        return out;
    }
    out.data_mut()
        .par_chunks_mut(s)
        .enumerate()
        .for_each(|(i, img)| {
            let mut r = ChaCha8Rng::seed_from_u64(key);
            r.set_stream(i as u64);
            let dy = r.random_range(0..=2 * AUGMENT_PAD);
            let dx = r.random_range(0..=2 * AUGMENT_PAD);
            let flip = r.random_bool(0.5);
            let aug = crop_flip(img, [c, h, w], dy, dx, flip);
            img.copy_from_slice(&aug);
        });
    out
}

/// Row filter taps at lags 3..=6 of the synthetic task.
pub const SYNTHETIC_TAPS: [f64; 4] = [0.5, 0.5, 0.5, 0.5];

/// Two-class single-channel images whose rows are independent
/// moving-average sequences `x[j] = n[j] ± Σ_l c_l·n[j+l]`, `l ∈ 3..=6`, the
/// sign given by the class. Both classes share the row autocorrelation at
/// lags 0, 1 and 2, so every 3×3 window has the same distribution in both
/// classes; the classes differ only in the sign of the correlation at lags
/// 3 to 6, i.e. in `x[p-3] - x[p+3]`-type statistics. Values are scaled to
/// unit variance. Labels alternate, so the set is balanced.
pub fn synthetic_dilation_task<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Result<Dataset> {
    if size < 9 {
        return Err(Error::InvalidConfig(format!("synthetic images need size >= 9, got {size}")));
    }
    let norm = (1.0 + SYNTHETIC_TAPS.iter().map(|c| c * c).sum::<f64>()).sqrt();
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let mut noise = vec![0.0; size + 6];
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for _ in 0..size {
            for v in noise.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            for j in 0..size {
                let echo: f64 = SYNTHETIC_TAPS
                    .iter()
                    .enumerate()
                    .map(|(t, c)| c * noise[j + 3 + t])
                    .sum();
                data.push((noise[j] + sign * echo) / norm);
            }
        }
        labels.push(label);
    }
    let images = Tensor::from_vec([n, 1, size, size], data)?;
    Dataset::new(images, labels, Split::Train, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcn_constant_image_is_zero() {
        let images = Tensor::new([1, 3, 4, 4], 7.0).unwrap();
        let d = Dataset::new(images, vec![0], Split::Train, 10).unwrap();
        let g = global_contrast_normalize(&d);
        assert!(g.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_ramp_and_idempotence() {
        let images = Tensor::from_vec([1, 1, 16, 16], (0..256).map(f64::from).collect()).unwrap();
        let d = Dataset::new(images, vec![0], Split::Train, 10).unwrap();
        let g = global_contrast_normalize(&d);
        let v = g.images.data();
        let mean = v.iter().sum::<f64>() / 256.0;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
        let gg = global_contrast_normalize(&g);
        assert!(gg.images.max_abs_diff(&g.images).unwrap() < 1e-9);
    }

    fn marker_image() -> (Vec<f64>, [usize; 3]) {
        let shape = [1, 32, 32];
        let mut img = vec![0.0; 32 * 32];
        img[5 * 32 + 7] = 1.0;
        (img, shape)
    }

    #[test]
    fn centre_crop_is_identity() {
        let (img, shape) = marker_image();
        assert_eq!(crop_flip(&img, shape, 4, 4, false), img);
    }

    #[test]
    fn corner_crop_shifts_content() {
        let (img, shape) = marker_image();
        let out = crop_flip(&img, shape, 0, 0, false);
        let pos = out.iter().position(|&v| v == 1.0).unwrap();
        assert_eq!((pos / 32, pos % 32), (9, 11));
    }

    #[test]
    fn double_flip_is_identity() {
        let (img, shape) = marker_image();
        let once = crop_flip(&img, shape, 4, 4, true);
        assert_ne!(once, img);
        assert_eq!(crop_flip(&once, shape, 4, 4, true), img);
    }

    #[test]
    fn augmentation_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = Tensor::from_vec(
            [4, 3, 32, 32],
            (0..4 * 3072).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let a = augment_batch(&images, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment_batch(&images, &mut ChaCha8Rng::seed_from_u64(9));
        let c = augment_batch(&images, &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 2, 7, 64] {
            let d = synthetic_dilation_task(n, 12, &mut rng).unwrap();
            let ones = d.labels.iter().filter(|&&l| l == 1).count();
            assert!((n - ones).abs_diff(ones) <= 1);
        }
        assert!(synthetic_dilation_task(4, 8, &mut rng).is_err());
    }

    fn row_autocorrelation(d: &Dataset, label: usize, lag: usize) -> f64 {
        let [n, _, h, w] = d.images.shape();
        let (mut s, mut count) = (0.0, 0.0);
        for i in (0..n).filter(|&i| d.labels[i] == label) {
            let p = d.images.plane(i, 0);
            for r in 0..h {
                for j in 0..w - lag {
                    s += p[r * w + j] * p[r * w + j + lag];
                    count += 1.0;
                }
            }
        }
        s / count
    }

    #[test]
    fn synthetic_correlation_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = synthetic_dilation_task(400, 16, &mut rng).unwrap();
        // lags 0..=2 agree across classes; at lags 3..=6 the class-1 correlation
        // exceeds the class-0 one by 2·c_l/(1 + Σc²) = 0.5
        for lag in 0..=2 {
            let (a, b) = (row_autocorrelation(&d, 0, lag), row_autocorrelation(&d, 1, lag));
            assert!((a - b).abs() < 0.03, "lag {lag}: {a} vs {b}");
        }
        for lag in 3..=6 {
            let (a, b) = (row_autocorrelation(&d, 0, lag), row_autocorrelation(&d, 1, lag));
            assert!((b - a - 0.5).abs() < 0.05, "lag {lag}: {a} vs {b}");
        }
    }

    #[test]
    fn zca_whitens_small_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        // correlated 2-d data
        let data: Vec<f64> = (0..n)
            .flat_map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [3.0 * a, a + 0.5 * b]
            })
            .collect();
        let images = Tensor::from_vec([n, 2, 1, 1], data).unwrap();
        let zca = Zca::fit(&images, 1e-9).unwrap();
        let w = zca.apply(&images).unwrap();
        let x = DMatrix::from_row_slice(n, 2, w.data());
        let cov = (x.transpose() * &x) / n as f64;
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((cov[(1, 1)] - 1.0).abs() < 1e-6);
        assert!(cov[(0, 1)].abs() < 1e-6);
    }
}
