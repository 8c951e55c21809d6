//! Datasets: a deterministic synthetic shape/texture generator, the `PKDS`
//! binary format, and an IDX (MNIST-style) reader.
//!
//! `PKDS` layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "PKDS" | version (1) | samples | channels | height | width | classes
//! then per sample: label (u32) followed by channels·height·width f32 pixels
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PKDS";
const VERSION: u32 = 1;

/// Per-channel mean and standard deviation applied when batches are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    IdxFile,
}

/// Images in `[0, 1]`, CHW, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixels for {} samples of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Normalized NCHW batch of the given sample indices.
    pub fn batch(&self, indices: &[usize], norm: &Normalization) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * c * plane);
        for &i in indices {
            for (ch, px) in self.image(i).chunks_exact(plane).enumerate() {
                let (m, s) = (norm.mean[ch], norm.std[ch]);
                data.extend(px.iter().map(|v| (v - m) / s));
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("sized batch");
        (t, labels)
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..self.len() {
            for (ch, px) in self.image(i).chunks_exact(plane).enumerate() {
                for &v in px {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    /// The first `per_class` samples of every class, in dataset order.
    pub fn per_class_subset(&self, per_class: usize) -> Dataset {
        let mut taken = vec![0usize; self.classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i];
                taken[l] += 1;
                taken[l] <= per_class
            })
            .collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            classes: self.classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn write_pkds(&self, path: &Path) -> Result<()> {
        let [c, h, w] = self.shape;
        let mut buf = Vec::with_capacity(28 + self.len() * (4 + 4 * self.sample_len()));
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, c as u32, h as u32, w as u32, self.classes as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            buf.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
            for v in self.image(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_pkds(path: &Path) -> Result<Dataset> {
        let bytes = read_all(path)?;
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(Error::Data(format!("{} is not a PKDS file", path.display())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        if word(0) as u32 != VERSION {
            return Err(Error::Data(format!("unsupported PKDS version {}", word(0))));
        }
        let (n, c, h, w, classes) = (word(1), word(2), word(3), word(4), word(5));
        let per = c * h * w;
        let expected = 28 + n * (4 + 4 * per);
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "{}: expected {expected} bytes, found {}",
                path.display(),
                bytes.len()
            )));
        }
        let mut labels = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n * per);
        let mut off = 28;
        for _ in 0..n {
            labels.push(u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize);
            off += 4;
            images.extend(
                bytes[off..off + 4 * per]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            );
            off += 4 * per;
        }
        Dataset::new([c, h, w], classes, images, labels)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub classes: usize,
    /// Computed from the training split.
    pub normalization: Normalization,
    pub provenance: Provenance,
}

impl DatasetBundle {
    pub fn new(train: Dataset, test: Dataset, provenance: Provenance) -> Result<Self> {
        if train.shape != test.shape || train.classes != test.classes {
            return Err(Error::Data("train and test splits disagree in shape or classes".into()));
        }
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let normalization = train.channel_stats();
        Ok(DatasetBundle {
            classes: train.classes,
            normalization,
            train,
            test,
            provenance,
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            train_per_class: 500,
            test_per_class: 250,
            size: 16,
            noise: 0.25,
            seed: 7,
        }
    }
}

const PATTERNS: usize = 8;

/// Draws one single-channel image of `class`. Classes cycle through eight
/// pattern families; classes beyond eight reuse a family at a different
/// spatial frequency.
fn draw(class: usize, size: usize, noise: &Normal<f32>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let family = class % PATTERNS;
    let octave = (class / PATTERNS) as f32;
    let period = rng.random_range(3.0..5.0) * (1.0 + 0.5 * octave);
    let phase = rng.random_range(0.0..period);
    let half = rng.random_range(0.2 * s..0.35 * s);
    let cx = rng.random_range(half..s - half);
    let cy = rng.random_range(half..s - half);
    let contrast = rng.random_range(0.6f32..1.0);
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (fx - cx, fy - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let on = match family {
                0 => ((fy + phase) / period).floor() as i64 % 2 == 0,
                1 => ((fx + phase) / period).floor() as i64 % 2 == 0,
                2 => dx.abs() < half && dy.abs() < half,
                3 => (r - half).abs() < 1.2,
                4 => ((fx + fy + phase) / period).floor() as i64 % 2 == 0,
                5 => (dx.abs() < 1.2 || dy.abs() < 1.2) && r < half * 1.4,
                6 => (((fx + phase) / period).floor() as i64 + ((fy + phase) / period).floor() as i64) % 2 == 0,
                _ => r < half * 0.8,
            };
            let base = if on { contrast } else { 0.0 };
            img.push((base + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    img
}

fn synthesize(cfg: &SyntheticConfig, per_class: usize, stream: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Argument(format!("noise: {e}")))?;
    let mut images = Vec::with_capacity(cfg.classes * per_class * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(cfg.classes * per_class);
    // Interleave classes so every prefix of the set is balanced.
    for _ in 0..per_class {
        for class in 0..cfg.classes {
            images.extend(draw(class, cfg.size, &noise, &mut rng));
            labels.push(class);
        }
    }
    Dataset::new([1, cfg.size, cfg.size], cfg.classes, images, labels)
}

/// Deterministic train/test pair. The splits come from independent random
/// streams so they never share a sample.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    if cfg.classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.size < 8 {
        return Err(Error::Argument(format!("image size {} is below 8", cfg.size)));
    }
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Argument("per-class counts must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Argument(format!("noise {} must be a non-negative number", cfg.noise)));
    }
    let train = synthesize(cfg, cfg.train_per_class, 1)?;
    let test = synthesize(cfg, cfg.test_per_class, 2)?;
    DatasetBundle::new(train, test, Provenance::Synthetic)
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn parse_idx<'a>(bytes: &'a [u8], what: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let bad = |m: &str| Error::Data(format!("{}: {m}", what.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte IDX data is supported"));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let body = &bytes[header..];
    if body.len() != dims.iter().product::<usize>() {
        return Err(bad("payload length does not match dimensions"));
    }
    Ok((dims, body))
}

/// Reads an IDX image file (`n×h×w` or `n×c×h×w`, unsigned bytes) and its
/// label file. Pixels are scaled to `[0, 1]`; the class count is one more
/// than the largest label.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read_all(images)?;
    let lb = read_all(labels)?;
    let (idims, ibody) = parse_idx(&ib, images)?;
    let (ldims, lbody) = parse_idx(&lb, labels)?;
    let shape = match idims.as_slice() {
        [_, h, w] => [1, *h, *w],
        [_, c, h, w] => [*c, *h, *w],
        _ => return Err(Error::Data(format!("{}: expected 3 or 4 dimensions", images.display()))),
    };
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(Error::Data("label count does not match image count".into()));
    }
    let labels: Vec<usize> = lbody.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let pixels = ibody.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(shape, classes, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_per_class: 5,
            test_per_class: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.test.len(), 12);
        assert!(a.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_class_is_rejected() {
        let cfg = SyntheticConfig {
            classes: 1,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn splits_differ() {
        let b = generate_synthetic(&small()).unwrap();
        assert_ne!(b.train.image(0), b.test.image(0));
    }

    #[test]
    fn pkds_round_trip() {
        let b = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.pkds");
        b.train.write_pkds(&path).unwrap();
        assert_eq!(Dataset::read_pkds(&path).unwrap(), b.train);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(Dataset::read_pkds(&path), Err(Error::Data(_))));
    }

    #[test]
    fn idx_reader() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102, 255, 0, 0, 0]);
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let d = read_idx(&ip, &lp).unwrap();
        assert_eq!(d.shape, [1, 2, 2]);
        assert_eq!(d.classes, 2);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.image(0), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn normalized_batch_has_zero_mean() {
        let b = generate_synthetic(&small()).unwrap();
        let idx: Vec<usize> = (0..b.train.len()).collect();
        let (x, y) = b.train.batch(&idx, &b.normalization);
        let mean: f64 = x.data().iter().map(|v| *v as f64).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert_eq!(y.len(), 20);
    }

    #[test]
    fn per_class_subset_is_balanced() {
        let b = generate_synthetic(&small()).unwrap();
        let s = b.train.per_class_subset(2);
        assert_eq!(s.len(), 8);
        for c in 0..4 {
            assert_eq!(s.labels.iter().filter(|&&l| l == c).count(), 2);
        }
    }
}
