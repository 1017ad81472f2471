//! Image datasets: CIFAR-10 binary batches, MNIST IDX files and a procedural
//! shapes dataset used when no real data is available.
//!
//! Every parser works on byte slices and reports malformed input as
//! [`Error::Parse`] with the byte offset of the problem.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CIFAR_IMAGE_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_IMAGE_SIDE * CIFAR_IMAGE_SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Per-channel statistics subtracted and divided out at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics of raw `[0, 1]` pixel values in `N × C × H × W` layout.
    pub fn fit(pixels: &[f32], channels: usize, plane: usize) -> Self {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for image in pixels.chunks_exact(channels * plane) {
            for (c, values) in image.chunks_exact(plane).enumerate() {
                for &v in values {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let count = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt()).max(1e-6) as f32)
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, pixels: &mut [f32], plane: usize) {
        let channels = self.mean.len();
        for image in pixels.chunks_exact_mut(channels * plane) {
            for (c, values) in image.chunks_exact_mut(plane).enumerate() {
                for v in values {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Normalized images in `N × C × H × W` layout with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub split: Split,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        side: usize,
        split: Split,
        class_names: Vec<String>,
        normalization: Normalization,
    ) -> Result<Self> {
        let pixels = channels * side * side;
        if pixels == 0 || images.len() != labels.len() * pixels {
            return Err(Error::Shape(format!(
                "{} image values for {} labels of {channels}x{side}x{side}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Config(format!("label {bad} out of range for {} classes", class_names.len())));
        }
        if normalization.mean.len() != channels || normalization.std.len() != channels {
            return Err(Error::Config("normalization channel count mismatch".into()));
        }
        Ok(Self {
            images,
            labels,
            channels,
            side,
            split,
            class_names,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// Images and labels of the given samples, concatenated.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (images, labels)
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        self.subset(&indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.gather(indices);
        Self {
            images,
            labels,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            side: self.side,
            split: self.split,
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

// ── CIFAR-10 ──────────────────────────────────────────────────────────

/// Raw CIFAR-10 records: labels and `[0, 1]` pixel planes.
pub fn parse_cifar_batch(bytes: &[u8], source_name: &str) -> Result<(Vec<u8>, Vec<f32>)> {
    if bytes.is_empty() {
        return Err(Error::parse(source_name, 0, "empty file"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::parse(
            source_name,
            offset,
            format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() % CIFAR_RECORD
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label as usize >= CIFAR_CLASSES.len() {
            return Err(Error::parse(source_name, r * CIFAR_RECORD, format!("label byte {label} is not in 0..=9")));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((labels, pixels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_cifar_files(dir: &Path, files: &[&str]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for file in files {
        let path = dir.join(file);
        let bytes = read_file(&path)?;
        let (l, p) = parse_cifar_batch(&bytes, &path.display().to_string())?;
        labels.extend(l.into_iter().map(usize::from));
        pixels.extend(p);
    }
    Ok((labels, pixels))
}

/// Loads the five training batches and the test batch, normalizing both
/// with statistics fitted on the training split.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let (train_labels, mut train_pixels) = load_cifar_files(dir, &CIFAR_TRAIN_FILES)?;
    let (test_labels, mut test_pixels) = load_cifar_files(dir, &[CIFAR_TEST_FILE])?;
    let plane = CIFAR_IMAGE_SIDE * CIFAR_IMAGE_SIDE;
    let norm = Normalization::fit(&train_pixels, CIFAR_CHANNELS, plane);
    norm.apply(&mut train_pixels, plane);
    norm.apply(&mut test_pixels, plane);
    let names: Vec<String> = CIFAR_CLASSES.iter().map(|s| s.to_string()).collect();
    let train = Dataset::new(train_pixels, train_labels, CIFAR_CHANNELS, CIFAR_IMAGE_SIDE, Split::Train, names.clone(), norm.clone())?;
    let test = Dataset::new(test_pixels, test_labels, CIFAR_CHANNELS, CIFAR_IMAGE_SIDE, Split::Test, names, norm)?;
    Ok((train, test))
}

// ── MNIST IDX ─────────────────────────────────────────────────────────

fn read_u32_be(bytes: &[u8], offset: usize, source_name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(source_name, bytes.len(), format!("unexpected end of file, header field at byte {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32, source_name: &str) -> Result<()> {
    let magic = read_u32_be(bytes, 0, source_name)?;
    if magic != expected {
        return Err(Error::parse(source_name, 0, format!("bad magic: expected {expected:#010x}, found {magic:#010x}")));
    }
    Ok(())
}

/// Parsed IDX image file: count, rows, cols and `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

pub fn parse_idx_images(bytes: &[u8], source_name: &str) -> Result<IdxImages> {
    check_magic(bytes, MNIST_IMAGE_MAGIC, source_name)?;
    let count = read_u32_be(bytes, 4, source_name)? as usize;
    let rows = read_u32_be(bytes, 8, source_name)? as usize;
    let cols = read_u32_be(bytes, 12, source_name)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::parse(source_name, 4, "image dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::parse(
            source_name,
            bytes.len().min(expected),
            format!("expected {expected} bytes for {count} images of {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], source_name: &str) -> Result<Vec<u8>> {
    check_magic(bytes, MNIST_LABEL_MAGIC, source_name)?;
    let count = read_u32_be(bytes, 4, source_name)? as usize;
    let expected = count.checked_add(8).ok_or_else(|| Error::parse(source_name, 4, "label count overflow"))?;
    if bytes.len() != expected {
        return Err(Error::parse(
            source_name,
            bytes.len().min(expected),
            format!("expected {expected} bytes for {count} labels, found {}", bytes.len()),
        ));
    }
    let labels = bytes[8..].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::parse(source_name, 8 + pos, format!("label byte {} is not in 0..=9", labels[pos])));
    }
    Ok(labels)
}

/// Fits a `rows × cols` image into `side × side`: centred zero padding when
/// it is larger, nearest-neighbour resampling when it is smaller.
pub fn fit_image(src: &[f32], rows: usize, cols: usize, side: usize) -> Vec<f32> {
    let mut out = vec![0.0; side * side];
    if side >= rows && side >= cols {
        let (top, left) = ((side - rows) / 2, (side - cols) / 2);
        for r in 0..rows {
            out[(top + r) * side + left..(top + r) * side + left + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
    } else {
        for r in 0..side {
            for c in 0..side {
                let sr = (r * rows) / side;
                let sc = (c * cols) / side;
                out[r * side + c] = src[sr * cols + sc];
            }
        }
    }
    out
}

fn mnist_split(dir: &Path, images: &str, labels: &str, side: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let ipath = dir.join(images);
    let lpath = dir.join(labels);
    let idx = parse_idx_images(&read_file(&ipath)?, &ipath.display().to_string())?;
    let labels = parse_idx_labels(&read_file(&lpath)?, &lpath.display().to_string())?;
    if labels.len() != idx.count {
        return Err(Error::Config(format!(
            "{} has {} images but {} has {} labels",
            ipath.display(),
            idx.count,
            lpath.display(),
            labels.len()
        )));
    }
    let plane = idx.rows * idx.cols;
    let mut out = Vec::with_capacity(idx.count * side * side);
    for i in 0..idx.count {
        out.extend(fit_image(&idx.pixels[i * plane..(i + 1) * plane], idx.rows, idx.cols, side));
    }
    Ok((out, labels.into_iter().map(usize::from).collect()))
}

/// Loads the standard MNIST training and test IDX files as single-channel
/// `side × side` images.
pub fn load_mnist_idx(dir: &Path, side: usize) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let (mut train_px, train_labels) = mnist_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", side)?;
    let (mut test_px, test_labels) = mnist_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", side)?;
    let plane = side * side;
    let norm = Normalization::fit(&train_px, 1, plane);
    norm.apply(&mut train_px, plane);
    norm.apply(&mut test_px, plane);
    let names: Vec<String> = (0..10).map(|d| d.to_string()).collect();
    let train = Dataset::new(train_px, train_labels, 1, side, Split::Train, names.clone(), norm.clone())?;
    let test = Dataset::new(test_px, test_labels, 1, side, Split::Test, names, norm)?;
    Ok((train, test))
}

// ── procedural shapes ─────────────────────────────────────────────────

pub const SHAPE_CLASSES: [&str; 10] = [
    "square", "frame", "hbar", "vbar", "diagonal", "antidiagonal", "cross", "plus", "checker", "dot",
];

/// Parameters of the procedural dataset. Each image holds one small glyph
/// whose pattern is the class, placed at a random position over a noisy
/// background, so only a few patches carry the label.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub side: usize,
    pub channels: usize,
    pub glyph: usize,
    pub train: usize,
    pub test: usize,
    /// Background noise amplitude range; harder samples get more noise.
    pub noise: (f32, f32),
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            side: 16,
            channels: 3,
            glyph: 5,
            train: 4000,
            test: 1000,
            noise: (0.0, 0.3),
            seed: 0,
        }
    }
}

fn glyph_mask(class: usize, g: usize) -> Vec<bool> {
    let mut m = vec![false; g * g];
    let mid = g / 2;
    for r in 0..g {
        for c in 0..g {
            m[r * g + c] = match class {
                0 => true,
                1 => r == 0 || c == 0 || r == g - 1 || c == g - 1,
                2 => r == mid,
                3 => c == mid,
                4 => r == c,
                5 => r + c == g - 1,
                6 => r == c || r + c == g - 1,
                7 => r == mid || c == mid,
                8 => (r + c) % 2 == 0,
                _ => r.abs_diff(mid) <= 1 && c.abs_diff(mid) <= 1 && (r == mid || c == mid),
            };
        }
    }
    m
}

fn shapes_split(cfg: &ShapesConfig, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<usize>) {
    let (side, ch, g) = (cfg.side, cfg.channels, cfg.glyph);
    let plane = side * side;
    let mut images = Vec::with_capacity(n * ch * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES.len();
        let mask = glyph_mask(class, g);
        let noise = rng.gen_range(cfg.noise.0..=cfg.noise.1);
        let (top, left) = (rng.gen_range(0..=side - g), rng.gen_range(0..=side - g));
        let colour: Vec<f32> = (0..ch).map(|_| rng.gen_range(0.55..1.0)).collect();
        let mut img = vec![0.0f32; ch * plane];
        for c in 0..ch {
            for p in 0..plane {
                img[c * plane + p] = (0.5 + noise * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0) * 0.6;
            }
        }
        for r in 0..g {
            for c in 0..g {
                if mask[r * g + c] {
                    let p = (top + r) * side + left + c;
                    for (k, &v) in colour.iter().enumerate() {
                        img[k * plane + p] = v;
                    }
                }
            }
        }
        images.extend(img);
        labels.push(class);
    }
    // interleave classes
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let pixels = ch * plane;
    let images = order.iter().flat_map(|&i| images[i * pixels..(i + 1) * pixels].iter().copied()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    (images, labels)
}

/// Deterministic procedural dataset with train and test splits.
pub fn synthetic_shapes(cfg: &ShapesConfig) -> Result<(Dataset, Dataset)> {
    if cfg.glyph == 0 || cfg.glyph > cfg.side || cfg.channels == 0 {
        return Err(Error::Config(format!("glyph {} does not fit a {} pixel image", cfg.glyph, cfg.side)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_px, train_labels) = shapes_split(cfg, cfg.train, &mut rng);
    let (mut test_px, test_labels) = shapes_split(cfg, cfg.test, &mut rng);
    let plane = cfg.side * cfg.side;
    let norm = Normalization::fit(&train_px, cfg.channels, plane);
    norm.apply(&mut train_px, plane);
    norm.apply(&mut test_px, plane);
    let names: Vec<String> = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
    let train = Dataset::new(train_px, train_labels, cfg.channels, cfg.side, Split::Train, names.clone(), norm.clone())?;
    let test = Dataset::new(test_px, test_labels, cfg.channels, cfg.side, Split::Test, names, norm)?;
    Ok((train, test))
}

// ── augmentation ──────────────────────────────────────────────────────

/// Random horizontal flip and a random crop from a zero-padded copy, applied
/// in place to one `C × side × side` image.
pub fn augment(image: &mut [f32], channels: usize, side: usize, pad: usize, rng: &mut impl Rng) {
    let plane = side * side;
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let src = image.to_vec();
    for c in 0..channels {
        for r in 0..side {
            for col in 0..side {
                let sr = r as isize + dy;
                let sc0 = if flip { side - 1 - col } else { col } as isize + dx;
                let v = if (0..side as isize).contains(&sr) && (0..side as isize).contains(&sc0) {
                    src[c * plane + sr as usize * side + sc0 as usize]
                } else {
                    0.0
                };
                image[c * plane + r * side + col] = v;
            }
        }
    }
}
