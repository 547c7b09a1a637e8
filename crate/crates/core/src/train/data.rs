//! Labeled image sets: the CIFAR-10 binary format and synthetic tasks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{DataConfig, DataKind};
use super::step::Targets;

/// Bytes per CIFAR-10 record: one label byte and 3×32×32 channel-planar pixels.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images with pixel values in `[0, 1]`, channel-planar, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    /// Per-pixel labels, `height·width` per image.
    pub dense: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Keeps the first `n` records (all when `n` is 0 or larger than the set).
    pub fn truncate(&mut self, n: usize) {
        if n == 0 || n >= self.len() {
            return;
        }
        self.pixels.truncate(n * self.image_len());
        self.labels.truncate(n);
        if let Some(d) = &mut self.dense {
            d.truncate(n * self.height * self.width);
        }
    }

    /// Standardized image tensor `[B, C, H, W]` and targets for `indices`.
    ///
    /// With `augment`, each image is zero-padded by 4 pixels, randomly cropped
    /// back to size and flipped horizontally with probability ½; dense labels
    /// follow the same transform.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        mean: &[f64],
        std: &[f64],
        mut augment: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, Targets)> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::invalid("Dataset::batch", "need one mean/std per channel"));
        }
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        let mut dense = self.dense.as_ref().map(|_| Vec::with_capacity(indices.len() * h * w));
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("Dataset::batch", format!("index {i} out of range")));
            }
            let (dy, dx, flip) = match augment.as_deref_mut() {
                Some(rng) => (
                    rng.random_range(0..=8) as isize - 4,
                    rng.random_range(0..=8) as isize - 4,
                    rng.random::<bool>(),
                ),
                None => (0, 0, false),
            };
            let src = |y: usize, x: usize| -> Option<usize> {
                let x = if flip { w - 1 - x } else { x };
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w)
                    .then(|| sy as usize * w + sx as usize)
            };
            let img = self.image(i);
            for ch in 0..c {
                let plane = &img[ch * h * w..(ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = src(y, x).map_or(0.0, |p| plane[p] as f64);
                        data.push(T::from_f64_lossy((v - mean[ch]) / std[ch]));
                    }
                }
            }
            labels.push(self.labels[i]);
            if let (Some(out), Some(all)) = (&mut dense, &self.dense) {
                let lab = &all[i * h * w..(i + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        out.push(src(y, x).map_or(0, |p| lab[p]));
                    }
                }
            }
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data)?;
        Ok((
            images,
            Targets {
                classes: Some(labels),
                dense,
            },
        ))
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8], origin: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            path: origin.into(),
            message: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                path: origin.into(),
                message: format!("record {r} has label byte {}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
        pixels,
        labels,
        dense: None,
    })
}

/// Loads a CIFAR-10 split from the directory of `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut all: Option<Dataset> = None;
    for f in files {
        let path = dir.join(&f);
        let bytes = std::fs::read(&path).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let part = parse_cifar10(&bytes, &path.display().to_string())?;
        match &mut all {
            None => all = Some(part),
            Some(a) => {
                a.pixels.extend(part.pixels);
                a.labels.extend(part.labels);
            }
        }
    }
    Ok(all.expect("at least one file"))
}

/// Number of classes of the synthetic classification task.
pub const SYNTHETIC_CLASSES: usize = 4;

/// Base colours of the synthetic classes: red, green, blue, yellow.
const HUES: [[f32; 3]; SYNTHETIC_CLASSES] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.2, 1.0],
    [1.0, 1.0, 0.2],
];

/// A synthetic classification + dense-labeling task.
///
/// Each `size×size` RGB image has a noisy grey background and one bright
/// axis-aligned rectangle of random size and position. The class is the
/// rectangle's hue (0 red, 1 green, 2 blue, 3 yellow), jittered in brightness;
/// the dense label is 1 inside the rectangle and 0 elsewhere.
pub fn synthetic_task(seed: u64, count: usize, size: usize) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::invalid("synthetic_task", "images must be at least 8×8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut pixels = Vec::with_capacity(count * 3 * plane);
    let mut labels = Vec::with_capacity(count);
    let mut dense = Vec::with_capacity(count * plane);
    for _ in 0..count {
        let rh = rng.random_range(size / 4..=size / 2);
        let rw = rng.random_range(size / 4..=size / 2);
        let top = rng.random_range(0..=size - rh);
        let left = rng.random_range(0..=size - rw);
        let class = rng.random_range(0..SYNTHETIC_CLASSES);
        let brightness: f32 = rng.random_range(0.7..1.0);
        let colour = HUES[class].map(|c| c * brightness);
        labels.push(class);
        let inside = |y: usize, x: usize| y >= top && y < top + rh && x >= left && x < left + rw;
        for &c in &colour {
            for y in 0..size {
                for x in 0..size {
                    let v = if inside(y, x) {
                        c + rng.random_range(-0.05..0.05)
                    } else {
                        rng.random_range(0.0..0.4)
                    };
                    pixels.push(v);
                }
            }
        }
        for y in 0..size {
            for x in 0..size {
                dense.push(usize::from(inside(y, x)));
            }
        }
    }
    Ok(Dataset {
        channels: 3,
        height: size,
        width: size,
        num_classes: SYNTHETIC_CLASSES,
        pixels,
        labels,
        dense: Some(dense),
    })
}

/// Seeds of the synthetic train and test sets.
pub const SYNTHETIC_SEEDS: (u64, u64) = (0x7A11, 0x7E57);

/// Train and test sets described by `cfg`, truncated to the configured subsets.
pub fn load_datasets(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match cfg.kind {
        DataKind::Cifar10 => {
            let dir = Path::new(&cfg.path);
            (load_cifar10(dir, Split::Train)?, load_cifar10(dir, Split::Test)?)
        }
        DataKind::Synthetic => {
            let mut train = synthetic_task(SYNTHETIC_SEEDS.0, cfg.synthetic_train, cfg.image_size)?;
            let mut test = synthetic_task(SYNTHETIC_SEEDS.1, cfg.synthetic_test, cfg.image_size)?;
            if !cfg.dense {
                train.dense = None;
                test.dense = None;
            }
            (train, test)
        }
    };
    train.truncate(cfg.train_subset);
    test.truncate(cfg.test_subset);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_labels_reproducible() {
        let a = synthetic_task(3, 20, 16).unwrap();
        let b = synthetic_task(3, 20, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.iter().all(|&l| l < SYNTHETIC_CLASSES));
    }

    #[test]
    fn augmentation_off_is_deterministic() {
        let d = synthetic_task(1, 4, 8).unwrap();
        let (a, _) = d.batch::<f32>(&[0, 3], &[0.0; 3], &[1.0; 3], None).unwrap();
        let (b, _) = d.batch::<f32>(&[0, 3], &[0.0; 3], &[1.0; 3], None).unwrap();
        assert_eq!(a, b);
    }
}
