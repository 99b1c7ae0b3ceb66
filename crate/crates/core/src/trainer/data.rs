//! Dataset indexing, balanced sampling and input preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::image::{is_image_path, read_image, RgbImage};
use crate::model::spec::INPUT_SIZE;
use crate::tensor::Tensor;

/// Side length images are resized to before the center crop.
pub const RESIZE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    /// `(image path, category id)` in category-then-file order.
    pub records: Vec<(PathBuf, usize)>,
    pub categories: Vec<String>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.categories.len()];
        for (_, k) in &self.records {
            c[*k] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|(_, k)| *k).collect()
    }

    /// Scans `root/<category>/<image files>`; categories and files are
    /// taken in lexicographic order.
    pub fn scan(root: &Path) -> Result<DatasetIndex, TrainError> {
        let io = |p: &Path, e: std::io::Error| TrainError::Ingest { path: p.to_path_buf(), detail: e.to_string() };
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut records = Vec::new();
        let mut categories = Vec::new();
        for dir in dirs {
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_path(p))
                .collect();
            files.sort();
            let id = categories.len();
            categories.push(dir.file_name().expect("directory entry").to_string_lossy().into_owned());
            records.extend(files.into_iter().map(|f| (f, id)));
        }
        if categories.is_empty() {
            return Err(TrainError::Config(format!("no category directories under {}", root.display())));
        }
        Ok(DatasetIndex { records, categories })
    }
}

/// Draws `N = min count` records per category without replacement.
/// Selected records keep their original relative order.
pub fn balanced_sample(index: &DatasetIndex, seed: u64) -> Result<DatasetIndex, TrainError> {
    let counts = index.counts();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::Config(format!("category `{}` has no images", index.categories[k])));
    }
    let n = counts.iter().copied().min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; index.records.len()];
    for k in 0..index.num_classes() {
        let members: Vec<usize> = (0..index.records.len()).filter(|&i| index.records[i].1 == k).collect();
        for j in sample(&mut rng, members.len(), n) {
            keep[members[j]] = true;
        }
    }
    let records = index.records.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
    Ok(DatasetIndex { records, categories: index.categories.clone() })
}

/// Bilinear resize of a planar `[C, H, W]` image with half-pixel alignment
/// and edge clamping.
pub fn resize_bilinear(src: &[f64], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(c * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Resize to 256×256 and keep the central 224×224, values in `[0, 1]`,
/// planar `[3, 224, 224]`.
pub fn resize_and_crop(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut planar = vec![0.0; 3 * h * w];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    let resized = resize_bilinear(&planar, 3, h, w, RESIZE_SIZE, RESIZE_SIZE);
    let off = (RESIZE_SIZE - INPUT_SIZE) / 2;
    let mut out = Vec::with_capacity(3 * INPUT_SIZE * INPUT_SIZE);
    for c in 0..3 {
        for y in off..off + INPUT_SIZE {
            let row = (c * RESIZE_SIZE + y) * RESIZE_SIZE;
            out.extend_from_slice(&resized[row + off..row + off + INPUT_SIZE]);
        }
    }
    out
}

/// Per-channel mean and standard deviation of the training corpus after
/// resize and crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats { mean: [0.0; 3], std: [1.0; 3] };

    /// Population statistics over every pixel of every image. A channel
    /// whose deviation is below 1e-8 gets a unit divisor.
    pub fn from_cropped(images: &[Vec<f64>]) -> ChannelStats {
        let plane = INPUT_SIZE * INPUT_SIZE;
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        let n = (images.len() * plane) as f64;
        if images.is_empty() {
            return ChannelStats::IDENTITY;
        }
        for c in 0..3 {
            let m = images.iter().map(|im| im[c * plane..(c + 1) * plane].iter().sum::<f64>()).sum::<f64>() / n;
            let v = images
                .iter()
                .map(|im| im[c * plane..(c + 1) * plane].iter().map(|x| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>()
                / n;
            mean[c] = m;
            let s = v.sqrt();
            std[c] = if s < 1e-8 { 1.0 } else { s };
        }
        ChannelStats { mean, std }
    }

    pub fn to_text(&self) -> String {
        format!(
            "mean {} {} {}\nstd {} {} {}\n",
            self.mean[0], self.mean[1], self.mean[2], self.std[0], self.std[1], self.std[2]
        )
    }

    pub fn parse(text: &str) -> Option<ChannelStats> {
        let mut mean = None;
        let mut std = None;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let key = it.next();
            let vals: Vec<f64> = it.map(str::parse).collect::<Result<_, _>>().ok()?;
            let arr: [f64; 3] = vals.try_into().ok()?;
            match key {
                Some("mean") => mean = Some(arr),
                Some("std") => std = Some(arr),
                _ => return None,
            }
        }
        Some(ChannelStats { mean: mean?, std: std? })
    }
}

/// Standardizes a cropped image into a `[3, 224, 224]` tensor.
pub fn standardize(cropped: &[f64], stats: &ChannelStats) -> Tensor {
    let plane = INPUT_SIZE * INPUT_SIZE;
    Tensor::from_fn(&[3, INPUT_SIZE, INPUT_SIZE], |i| {
        let c = i / plane;
        ((cropped[i] - stats.mean[c]) / stats.std[c]) as f32
    })
}

pub fn preprocess(img: &RgbImage, stats: &ChannelStats) -> Tensor {
    standardize(&resize_and_crop(img), stats)
}

/// Decoded, preprocessed images held in memory with their labels.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub stats: ChannelStats,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the images at `indices` into an `[N, 3, 224, 224]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * 3 * INPUT_SIZE * INPUT_SIZE);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        let images = Tensor::new(vec![indices.len(), 3, INPUT_SIZE, INPUT_SIZE], data).expect("[3,224,224] images");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn load_cropped(index: &DatasetIndex) -> Result<Vec<Vec<f64>>, TrainError> {
    index
        .records
        .iter()
        .map(|(p, _)| {
            let img = read_image(p).map_err(|e| TrainError::Ingest { path: p.clone(), detail: e.to_string() })?;
            Ok(resize_and_crop(&img))
        })
        .collect()
}

/// Reads every image, computes corpus statistics and standardizes.
pub fn load_training_set(index: &DatasetIndex) -> Result<LoadedDataset, TrainError> {
    let cropped = load_cropped(index)?;
    let stats = ChannelStats::from_cropped(&cropped);
    Ok(LoadedDataset {
        images: cropped.iter().map(|c| standardize(c, &stats)).collect(),
        labels: index.labels(),
        num_classes: index.num_classes(),
        stats,
    })
}

/// Reads images standardized with statistics from another corpus.
pub fn load_with_stats(index: &DatasetIndex, stats: ChannelStats) -> Result<LoadedDataset, TrainError> {
    let cropped = load_cropped(index)?;
    Ok(LoadedDataset {
        images: cropped.iter().map(|c| standardize(c, &stats)).collect(),
        labels: index.labels(),
        num_classes: index.num_classes(),
        stats,
    })
}
