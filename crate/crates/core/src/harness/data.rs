//! Dataset ingestion: the CIFAR-10 binary layout, labeled PNG directories,
//! and a procedural 10-class corpus for self-contained runs.

use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::corruption::ImageBatch;
use crate::error::{Error, Result};

/// CIFAR-10 binary record: 1 label byte + 3x32x32 channel-planar pixels.
const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

/// Labeled image collection in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn batch(&self) -> Result<ImageBatch> {
        ImageBatch::new(self.images.clone(), Some(self.labels.clone()))
    }

    /// Rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, num_classes: self.num_classes }
    }

    /// First `n` rows.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Deterministic shuffled split: `(held_in, held_out)` with
    /// `held_out_frac` of rows in the second part.
    pub fn seeded_split(&self, held_out_frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = crate::nn::substream(seed, "splits");
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_out = ((self.len() as f64) * held_out_frac).round() as usize;
        let n_out = n_out.min(self.len());
        let (out_idx, in_idx) = idx.split_at(n_out);
        (self.select(in_idx), self.select(out_idx))
    }
}

/// Resolves a dataset path against `DDAE_DATA_DIR` when relative and absent
/// from the working directory.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("DDAE_DATA_DIR") {
        Some(root) => {
            let candidate = PathBuf::from(root).join(path);
            if candidate.exists() {
                candidate
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}

/// Parses one file in the CIFAR-10 binary layout: records of 3073 bytes,
/// a label byte then 3x32x32 pixels (channel-planar, row-major), rescaled
/// to `[-1, 1]`.
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = resolve_data_path(path.as_ref());
    let bytes = std::fs::read(&path).map_err(|e| Error::io(e, &path))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::data(format!(
            "{}: size {} is not a multiple of {CIFAR_RECORD}; trailing partial record starts at byte offset {}",
            path.display(),
            bytes.len(),
            bytes.len() - bytes.len() % CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Array4::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    {
        let im = images.as_slice_mut().unwrap();
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::data(format!(
                    "{}: record {i} has label {label} outside [0, {CIFAR_CLASSES})",
                    path.display()
                )));
            }
            labels.push(label);
            for (dst, &src) in im[i * 3072..(i + 1) * 3072].iter_mut().zip(&rec[1..]) {
                *dst = src as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok(Dataset { images, labels, num_classes: CIFAR_CLASSES })
}

/// Writes a dataset in the CIFAR-10 binary layout (32x32 RGB only).
pub fn write_cifar10_binary(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (n, c, h, w) = ds.images.dim();
    if c != 3 || h != 32 || w != 32 {
        return Err(Error::contract(format!(
            "CIFAR binary layout requires 3x32x32 images, got {c}x{h}x{w}"
        )));
    }
    let mut bytes = Vec::with_capacity(n * CIFAR_RECORD);
    let im = ds.images.as_slice().unwrap();
    for i in 0..n {
        bytes.push(ds.labels[i] as u8);
        for &v in &im[i * 3072..(i + 1) * 3072] {
            bytes.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(e, path))
}

/// Loads every matching CIFAR batch file under a directory:
/// `data_batch_*.bin` for the train split, `test_batch.bin` for test.
pub fn load_cifar10_dir(dir: impl AsRef<Path>, test_split: bool) -> Result<Dataset> {
    let dir = resolve_data_path(dir.as_ref());
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(e, &dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if test_split {
                name == "test_batch.bin"
            } else {
                name.starts_with("data_batch") && name.ends_with(".bin")
            }
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!(
            "{}: no CIFAR batch files for the {} split",
            dir.display(),
            if test_split { "test" } else { "train" }
        )));
    }
    let parts: Vec<Dataset> = files
        .iter()
        .map(load_cifar10_binary)
        .collect::<Result<_>>()?;
    let total: usize = parts.iter().map(|d| d.len()).sum();
    let mut images = Array4::zeros((total, 3, 32, 32));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for part in parts {
        for i in 0..part.len() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&part.images.index_axis(Axis(0), i));
            labels.push(part.labels[i]);
            row += 1;
        }
    }
    Ok(Dataset { images, labels, num_classes: CIFAR_CLASSES })
}

/// Loads `filename,label` rows from a CSV and the referenced PNGs, center
/// cropping to square and resizing to `target_size`.
pub fn load_png_directory(
    dir: impl AsRef<Path>,
    labels_csv: impl AsRef<Path>,
    target_size: usize,
) -> Result<Dataset> {
    let dir = resolve_data_path(dir.as_ref());
    let labels_csv = labels_csv.as_ref();
    let raw = std::fs::read_to_string(labels_csv).map_err(|e| Error::io(e, labels_csv))?;
    let mut rows: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let name = parts.next().unwrap_or("").trim();
        let label = parts
            .next()
            .map(str::trim)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::data(format!(
                    "{}: line {}: expected 'filename,label'",
                    labels_csv.display(),
                    lineno + 1
                ))
            })?;
        rows.push((name.to_string(), label));
    }
    let num_classes = rows.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    let mut images = Array4::zeros((rows.len(), 3, target_size, target_size));
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (name, label)) in rows.iter().enumerate() {
        let path = dir.join(name);
        let img = image::open(&path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width(), img.height());
        let side = w.min(h);
        let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side)
            .to_image();
        let resized = image::imageops::resize(
            &cropped,
            target_size as u32,
            target_size as u32,
            image::imageops::FilterType::Triangle,
        );
        for c in 0..3usize {
            for y in 0..target_size {
                for x in 0..target_size {
                    images[[i, c, y, x]] =
                        resized.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0;
                }
            }
        }
        labels.push(*label);
    }
    Ok(Dataset { images, labels, num_classes })
}

/// Procedural 10-class 32x32 corpus: each class is a small textured stamp
/// (stripes, checker, disk, ring, cross, ...) drawn at a random position over
/// a smooth two-color gradient. Class identity is carried by local pattern
/// shape rather than by pixel position or color, so raw-pixel classifiers
/// have little to latch onto while convolutional features do.
pub fn generate_synthetic(n: usize, seed: u64) -> Dataset {
    let size = 32usize;
    let mut rng = crate::nn::substream(seed, "synthdata");
    let mut images = Array4::zeros((n, 3, size, size));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.random_range(0..10usize);
        labels.push(class);
        // gradient background between two random colors
        let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8f32));
        let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8f32));
        let horizontal: bool = rng.random_bool(0.5);
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let f = if horizontal { x } else { y } as f32 / (size - 1) as f32;
                    images[[i, ch, y, x]] = c0[ch] * (1.0 - f) + c1[ch] * f;
                }
            }
        }
        // stamp
        let stamp = 14usize;
        let ox = rng.random_range(0..=size - stamp);
        let oy = rng.random_range(0..=size - stamp);
        let polarity: f32 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let tint: [f32; 3] = std::array::from_fn(|_| polarity * rng.random_range(0.55..0.95f32));
        let half = (stamp / 2) as isize;
        for sy in 0..stamp {
            for sx in 0..stamp {
                let (dy, dx) = (sy as isize - half, sx as isize - half);
                let r2 = (dy * dy + dx * dx) as f32;
                let on = match class {
                    0 => sy % 4 < 2,
                    1 => sx % 4 < 2,
                    2 => (sx + sy) % 4 < 2,
                    3 => (sx / 2 + sy / 2) % 2 == 0,
                    4 => r2 <= 25.0,
                    5 => (9.0..=36.0).contains(&r2),
                    6 => dy.abs() <= 1 || dx.abs() <= 1,
                    7 => (dy - dx).abs() <= 1 || (dy + dx).abs() <= 1,
                    8 => sy % 5 < 2 && sx % 5 < 2,
                    _ => dy >= dx,
                };
                if on {
                    for ch in 0..3 {
                        images[[i, ch, oy + sy, ox + sx]] =
                            (0.25 * images[[i, ch, oy + sy, ox + sx]] + tint[ch]).clamp(-1.0, 1.0);
                    }
                }
            }
        }
        // light pixel noise
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let v: f32 = StandardNormal.sample(&mut rng);
                    images[[i, ch, y, x]] = (images[[i, ch, y, x]] + 0.04 * v).clamp(-1.0, 1.0);
                }
            }
        }
    }
    Dataset { images, labels, num_classes: 10 }
}

/// Locates a usable CIFAR-10 train set: `DDAE_DATA_DIR` (or `data/`)
/// containing `cifar-10-batches-bin`. Returns `None` when absent.
pub fn find_cifar10_train() -> Option<Dataset> {
    let mut roots: Vec<PathBuf> = Vec::new();
    if let Some(root) = std::env::var_os("DDAE_DATA_DIR") {
        roots.push(PathBuf::from(root));
    }
    roots.push(PathBuf::from("data"));
    for root in roots {
        let dir = root.join("cifar-10-batches-bin");
        if dir.is_dir() {
            if let Ok(ds) = load_cifar10_dir(&dir, false) {
                return Some(ds);
            }
        }
    }
    None
}

pub(crate) fn _rng_for_tests(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
