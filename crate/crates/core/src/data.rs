//! Dataset ingestion: the portrait segmentation corpus (paired images and
//! alpha mattes, binarized) and a deterministic synthetic fallback corpus of
//! colored shapes on textured backgrounds.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    BadImage { path: PathBuf, message: String },
    #[error("no matte found for {0}")]
    MissingPair(PathBuf),
    #[error("batch size must be positive")]
    BadBatchSize,
    #[error("sample count must be positive")]
    EmptyCorpus,
}

/// Which half of the corpus a split holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One image/mask pair. Image values are in [0, 1], `[3, H, W]`; mask labels
/// are in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f64>,
    pub mask: Array2<usize>,
    pub source_id: String,
}

/// An ordered, deterministically generated or loaded list of samples.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub target_size: (usize, usize),
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Portrait/background binarization rule for continuous matte alphas.
pub fn binarize_alpha(alpha: f64) -> usize {
    usize::from(alpha >= 0.5)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent substream seed; used everywhere a module needs its
/// own deterministic rng.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Ellipse,
    Rect,
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.kind {
            ShapeKind::Ellipse => (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0,
            ShapeKind::Rect => u.abs() <= self.rx && v.abs() <= self.ry,
        }
    }

    /// 2x2 supersampled coverage of a pixel, for anti-aliased rendering.
    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hit = 0;
        for sy in [0.25, 0.75] {
            for sx in [0.25, 0.75] {
                if self.contains(px as f64 + sx, py as f64 + sy) {
                    hit += 1;
                }
            }
        }
        hit as f64 / 4.0
    }
}

/// Generates `count` images of 1-3 anti-aliased ellipses/rectangles over a
/// textured background, with exact masks (pixel-center membership).
/// Bit-deterministic given `seed`.
pub fn synthetic_shapes(
    count: usize,
    image_size: usize,
    seed: u64,
    split: Split,
) -> Result<DatasetSplit, DataError> {
    if count == 0 {
        return Err(DataError::EmptyCorpus);
    }
    let s = image_size;
    let samples = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut image = Array3::zeros((3, s, s));
            let mut mask = Array2::zeros((s, s));

            // Textured background: base color, a linear gradient and a
            // sinusoidal stripe pattern plus pixel noise.
            let base: [f64; 3] = [
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
            ];
            let grad_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let grad_amp = rng.gen_range(0.0..0.25);
            let stripe_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let stripe_freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / s as f64;
            let stripe_amp = rng.gen_range(0.0..0.10);
            let (gc, gs) = (grad_angle.cos(), grad_angle.sin());
            let (sc, ss) = (stripe_angle.cos(), stripe_angle.sin());

            let n_shapes = rng.gen_range(1..=3usize);
            let shapes: Vec<Shape> = (0..n_shapes)
                .map(|_| {
                    let kind = if rng.gen_bool(0.5) {
                        ShapeKind::Ellipse
                    } else {
                        ShapeKind::Rect
                    };
                    // Keep the shape color away from the background color so
                    // the task stays learnable.
                    let mut color = base;
                    for _ in 0..16 {
                        color = [
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.0..1.0),
                        ];
                        let dist: f64 = color
                            .iter()
                            .zip(base.iter())
                            .map(|(a, b)| (a - b).abs())
                            .sum();
                        if dist >= 0.6 {
                            break;
                        }
                    }
                    Shape {
                        kind,
                        cx: rng.gen_range(0.2..0.8) * s as f64,
                        cy: rng.gen_range(0.2..0.8) * s as f64,
                        rx: rng.gen_range(0.10..0.30) * s as f64,
                        ry: rng.gen_range(0.10..0.30) * s as f64,
                        rot: rng.gen_range(0.0..std::f64::consts::TAU),
                        color,
                    }
                })
                .collect();

            for py in 0..s {
                for px in 0..s {
                    let (x, y) = (px as f64, py as f64);
                    let grad = grad_amp * ((gc * x + gs * y) / s as f64 - 0.5);
                    let stripe = stripe_amp * ((sc * x + ss * y) * stripe_freq).sin();
                    let noise = rng.gen_range(-0.02..0.02);
                    let mut pixel = [
                        base[0] + grad + stripe + noise,
                        base[1] + grad + stripe + noise,
                        base[2] + grad + stripe + noise,
                    ];
                    let center_x = x + 0.5;
                    let center_y = y + 0.5;
                    for shape in &shapes {
                        let cov = shape.coverage(px, py);
                        if cov > 0.0 {
                            for c in 0..3 {
                                pixel[c] = (1.0 - cov) * pixel[c] + cov * shape.color[c];
                            }
                        }
                        if shape.contains(center_x, center_y) {
                            mask[[py, px]] = 1;
                        }
                    }
                    for c in 0..3 {
                        image[[c, py, px]] = pixel[c].clamp(0.0, 1.0);
                    }
                }
            }
            Sample {
                image,
                mask,
                source_id: format!("synthetic-{seed}-{i:05}"),
            }
        })
        .collect();
    Ok(DatasetSplit {
        samples,
        split,
        target_size: (s, s),
    })
}

/// Loads the portrait dataset from `root`, resized to `target_size` with
/// bilinear interpolation and mattes binarized at alpha 0.5.
///
/// Layouts accepted, in order of preference:
/// 1. `root/manifest.tsv` with tab-separated `split<TAB>image<TAB>matte`
///    relative paths (entries listed there must exist);
/// 2. `root/train/` and `root/test/` directories of `<stem>.{png,jpg}` plus
///    `<stem>_matte.png` pairs;
/// 3. a flat `root/` of such pairs, all assigned to the requested split.
///
/// Partial directories load what exists; unpaired or unreadable files are
/// skipped with a warning.
pub fn load_portrait_dataset(
    root: &Path,
    split: Split,
    target_size: (usize, usize),
) -> Result<DatasetSplit, DataError> {
    let manifest = root.join("manifest.tsv");
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| DataError::Io {
            path: manifest.clone(),
            source: e,
        })?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(sp), Some(img), Some(matte)) = (cols.next(), cols.next(), cols.next())
            else {
                warn!("manifest line ignored (needs 3 columns): {line}");
                continue;
            };
            let want = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            if sp != want {
                continue;
            }
            let img_path = root.join(img);
            let matte_path = root.join(matte);
            if !matte_path.is_file() {
                return Err(DataError::MissingPair(img_path));
            }
            pairs.push((img.to_string(), img_path, matte_path));
        }
    } else {
        let split_dir = root.join(split.dir_name());
        let scan_dir = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
        let mut entries: Vec<PathBuf> = match std::fs::read_dir(&scan_dir) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(e) => {
                return Err(DataError::Io {
                    path: scan_dir,
                    source: e,
                })
            }
        };
        entries.sort();
        for path in entries {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let Some(ext) = path.extension().and_then(|s| s.to_str()) else {
                continue;
            };
            if stem.ends_with("_matte") || !matches!(ext, "png" | "jpg" | "jpeg") {
                continue;
            }
            let matte = path.with_file_name(format!("{stem}_matte.png"));
            if matte.is_file() {
                pairs.push((stem.to_string(), path, matte));
            } else {
                warn!("no matte for {}, skipping", path.display());
            }
        }
    }

    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    if pairs.is_empty() {
        warn!("portrait dataset at {} yielded no pairs for {split:?}", root.display());
    }

    let (th, tw) = target_size;
    let mut samples = Vec::with_capacity(pairs.len());
    for (id, img_path, matte_path) in pairs {
        let img = match image::open(&img_path) {
            Ok(i) => i,
            Err(e) => {
                warn!("unreadable image {}: {e}, skipping", img_path.display());
                continue;
            }
        };
        let matte = match image::open(&matte_path) {
            Ok(i) => i,
            Err(e) => {
                warn!("unreadable matte {}: {e}, skipping", matte_path.display());
                continue;
            }
        };
        let rgb = image::imageops::resize(&img.to_rgb8(), tw as u32, th as u32, FilterType::Triangle);
        let alpha =
            image::imageops::resize(&matte.to_luma8(), tw as u32, th as u32, FilterType::Triangle);

        let mut image_arr = Array3::zeros((3, th, tw));
        let mut mask = Array2::zeros((th, tw));
        for py in 0..th {
            for px in 0..tw {
                let p = rgb.get_pixel(px as u32, py as u32);
                for c in 0..3 {
                    image_arr[[c, py, px]] = p.0[c] as f64 / 255.0;
                }
                mask[[py, px]] = binarize_alpha(alpha.get_pixel(px as u32, py as u32).0[0] as f64 / 255.0);
            }
        }
        samples.push(Sample {
            image: image_arr,
            mask,
            source_id: id,
        });
    }

    Ok(DatasetSplit {
        samples,
        split,
        target_size,
    })
}

/// Seeded batch stream. Each epoch applies a fresh deterministic permutation
/// derived from `(seed, epoch)`; the union of one epoch's batches is the
/// split, exactly once. The last batch may be short.
pub struct BatchIterator<'a> {
    split: &'a DatasetSplit,
    batch_size: usize,
    seed: u64,
}

impl<'a> BatchIterator<'a> {
    pub fn new(split: &'a DatasetSplit, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::BadBatchSize);
        }
        Ok(BatchIterator {
            split,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.split.len().div_ceil(self.batch_size)
    }

    /// The sample permutation used for `epoch` (Fisher-Yates on a seeded
    /// stream).
    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.split.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// Batches of `epoch` as owned `([B,3,H,W] images, [B,H,W] masks)`.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = (Tensor4, ndarray::Array3<usize>)> + '_ {
        let order = self.permutation(epoch);
        let (h, w) = self.split.target_size;
        let bs = self.batch_size;
        let split = self.split;
        (0..self.batches_per_epoch()).map(move |bi| {
            let idx = &order[bi * bs..((bi + 1) * bs).min(order.len())];
            let b = idx.len();
            let mut images = Tensor4::zeros((b, 3, h, w));
            let mut masks = ndarray::Array3::zeros((b, h, w));
            for (slot, &si) in idx.iter().enumerate() {
                let sample = &split.samples[si];
                images
                    .index_axis_mut(ndarray::Axis(0), slot)
                    .assign(&sample.image);
                masks
                    .index_axis_mut(ndarray::Axis(0), slot)
                    .assign(&sample.mask);
            }
            (images, masks)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_bit_deterministic() {
        let a = synthetic_shapes(8, 64, 7, Split::Train).unwrap();
        let b = synthetic_shapes(8, 64, 7, Split::Train).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.source_id, y.source_id);
        }
    }

    #[test]
    fn synthetic_single_sample() {
        let split = synthetic_shapes(1, 32, 3, Split::Test).unwrap();
        assert_eq!(split.len(), 1);
    }

    #[test]
    fn synthetic_values_and_labels_in_range() {
        let split = synthetic_shapes(16, 32, 11, Split::Train).unwrap();
        for s in &split.samples {
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.iter().all(|&m| m <= 1));
            // Every image should contain some foreground.
            assert!(s.mask.iter().any(|&m| m == 1), "{}", s.source_id);
        }
    }

    #[test]
    fn zero_count_is_error() {
        assert!(matches!(
            synthetic_shapes(0, 32, 1, Split::Train),
            Err(DataError::EmptyCorpus)
        ));
    }

    #[test]
    fn alpha_threshold_is_inclusive() {
        assert_eq!(binarize_alpha(0.5), 1);
        assert_eq!(binarize_alpha(0.4999), 0);
        assert_eq!(binarize_alpha(1.0), 1);
        assert_eq!(binarize_alpha(0.0), 0);
    }

    #[test]
    fn batch_count_and_sizes() {
        let split = synthetic_shapes(170, 8, 5, Split::Test).unwrap();
        let it = BatchIterator::new(&split, 16, 1).unwrap();
        assert_eq!(it.batches_per_epoch(), 11);
        let sizes: Vec<usize> = it.epoch(0).map(|(im, _)| im.dim().0).collect();
        assert_eq!(sizes.len(), 11);
        assert!(sizes[..10].iter().all(|&s| s == 16));
        assert_eq!(sizes[10], 10);
    }

    #[test]
    fn oversized_batch_is_single() {
        let split = synthetic_shapes(5, 8, 5, Split::Test).unwrap();
        let it = BatchIterator::new(&split, 100, 1).unwrap();
        assert_eq!(it.batches_per_epoch(), 1);
    }

    #[test]
    fn same_seed_same_order_and_no_sample_loss() {
        let split = synthetic_shapes(33, 8, 2, Split::Train).unwrap();
        let it = BatchIterator::new(&split, 8, 9).unwrap();
        assert_eq!(it.permutation(4), it.permutation(4));
        assert_ne!(it.permutation(0), it.permutation(1));
        let mut seen: Vec<usize> = it.permutation(3);
        seen.sort_unstable();
        assert_eq!(seen, (0..33).collect::<Vec<_>>());
    }

    #[test]
    fn zero_batch_size_rejected() {
        let split = synthetic_shapes(4, 8, 2, Split::Train).unwrap();
        assert!(matches!(
            BatchIterator::new(&split, 0, 1),
            Err(DataError::BadBatchSize)
        ));
    }

    #[test]
    fn portrait_loader_reads_pairs_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let write_png = |path: &Path, px: [u8; 3], alpha: u8| {
            let img = image::RgbImage::from_pixel(10, 10, image::Rgb(px));
            img.save(path.with_file_name(path.file_name().unwrap())).unwrap();
            let matte = image::GrayImage::from_pixel(10, 10, image::Luma([alpha]));
            let stem = path.file_stem().unwrap().to_str().unwrap();
            matte
                .save(path.with_file_name(format!("{stem}_matte.png")))
                .unwrap();
        };
        write_png(&dir.path().join("a.png"), [200, 10, 10], 255);
        write_png(&dir.path().join("b.png"), [10, 200, 10], 0);

        let split = load_portrait_dataset(dir.path(), Split::Test, (8, 8)).unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split.samples[0].source_id, "a");
        assert!(split.samples[0].mask.iter().all(|&m| m == 1));
        assert!(split.samples[1].mask.iter().all(|&m| m == 0));
        assert!((split.samples[0].image[[0, 0, 0]] - 200.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn portrait_loader_empty_dir_is_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let split = load_portrait_dataset(dir.path(), Split::Train, (8, 8)).unwrap();
        assert!(split.is_empty());
    }

    #[test]
    fn manifest_missing_pair_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]));
        img.save(dir.path().join("x.png")).unwrap();
        std::fs::write(dir.path().join("manifest.tsv"), "train\tx.png\tx_matte.png\n").unwrap();
        assert!(matches!(
            load_portrait_dataset(dir.path(), Split::Train, (4, 4)),
            Err(DataError::MissingPair(_))
        ));
    }
}
