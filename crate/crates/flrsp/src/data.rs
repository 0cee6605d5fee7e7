//! Datasets: a seeded synthetic generator, a raw binary file format, and
//! i.i.d. / Dirichlet partitioning across clients.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Labeled images with pixel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Config(format!(
                "dataset needs matching nonempty images/labels, got {}/{}",
                images.len(),
                labels.len()
            )));
        }
        if classes == 0 || labels.iter().any(|&l| l >= classes) {
            return Err(Error::Config(format!(
                "dataset label out of range for {classes} classes"
            )));
        }
        let shape = images[0].shape().to_vec();
        if images.iter().any(|im| im.shape() != shape) {
            return Err(Error::Config("dataset images must share one shape".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn samples(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// New dataset holding the selected rows (class count preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Config("empty dataset subset".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Config(format!("subset index {bad} out of range")));
        }
        Ok(Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Per-class mean images; the sanity oracle for separability.
    pub fn class_centroids(&self) -> Vec<Tensor> {
        let mut sums = vec![Tensor::zeros(self.image_shape()); self.classes];
        let mut counts = vec![0usize; self.classes];
        for (im, label) in self.samples() {
            counts[label] += 1;
            for (acc, &v) in sums[label].data_mut().iter_mut().zip(im.data()) {
                *acc += v;
            }
        }
        for (sum, count) in sums.iter_mut().zip(&counts) {
            if *count > 0 {
                for v in sum.data_mut() {
                    *v /= *count as f64;
                }
            }
        }
        sums
    }

    /// Classify every image by nearest class centroid and return accuracy.
    pub fn centroid_accuracy(&self) -> f64 {
        let centroids = self.class_centroids();
        let mut correct = 0usize;
        for (im, label) in self.samples() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d: f64 = im
                    .data()
                    .iter()
                    .zip(centroid.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        correct as f64 / self.len() as f64
    }
}

/// How to obtain a dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Gaussian class blobs rendered as small grayscale images.
    Synthetic {
        classes: usize,
        count: usize,
        height: usize,
        width: usize,
        /// Pixel noise standard deviation around the class template.
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Raw binary file written by [`save_binary`].
    File { path: String },
}

fn default_noise() -> f64 {
    0.1
}

pub fn load_dataset(spec: &DatasetSpec, data_seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic {
            classes,
            count,
            height,
            width,
            noise,
        } => synthetic_blobs(*classes, *count, *height, *width, *noise, data_seed),
        DatasetSpec::File { path } => load_binary(path),
    }
}

/// Class templates are bright Gaussian bumps at class-specific positions;
/// each image is its class template plus i.i.d. pixel noise, clamped to
/// [0, 1]. Labels are balanced round-robin. Well-separated by construction:
/// a centroid classifier scores near 1 at the default noise level.
pub fn synthetic_blobs(
    classes: usize,
    count: usize,
    height: usize,
    width: usize,
    noise: f64,
    data_seed: u64,
) -> Result<Dataset> {
    if classes == 0 || count == 0 || height == 0 || width == 0 {
        return Err(Error::Config(
            "synthetic dataset needs positive classes/count/size".into(),
        ));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!(
            "synthetic noise must be nonnegative, got {noise}"
        )));
    }
    let mut rng = seed::rng(data_seed, "data", &[]);
    let templates: Vec<Tensor> = (0..classes)
        .map(|c| {
            // Bump centers spread over a small grid of anchor points.
            let fy = 0.25 + 0.5 * ((c % 2) as f64);
            let fx = 0.25 + 0.5 * (((c / 2) % 2) as f64);
            let extra = (c / 4) as f64; // shifts for class counts beyond 4
            let cy = fy * height as f64 + extra;
            let cx = fx * width as f64;
            let spread = 2.0 * (height.min(width) as f64 / 8.0).max(0.75);
            let mut t = Tensor::zeros(&[height, width]);
            for y in 0..height {
                for x in 0..width {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    t.set2(y, x, (-d2 / (2.0 * spread * spread)).exp());
                }
            }
            t
        })
        .collect();

    let pixel_noise = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid noise std");
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let mut im = templates[label].clone();
        if noise > 0.0 {
            for v in im.data_mut() {
                *v = (*v + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        images.push(im);
        labels.push(label);
    }
    Dataset::new(images, labels, classes)
}

// ── binary dataset format ────────────────────────────────────────────────
//
// Header: count, C, H, W as 32-bit little-endian. Per image: one label byte,
// then C*H*W pixel bytes, each byte b decoding to b/255.

pub fn save_binary(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let shape = ds.image_shape();
    let (c, h, w) = match shape.len() {
        2 => (1usize, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => return Err(Error::Config(format!("unsupported image rank {:?}", shape))),
    };
    if ds.classes() > 256 {
        return Err(Error::Config(
            "binary format labels are single bytes".into(),
        ));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for v in [ds.len() as u32, c as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for (im, label) in ds.samples() {
        out.write_all(&[label as u8])?;
        for &p in im.data() {
            out.write_all(&[(p.clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let bad = |offset: u64, detail: &str| Error::Format {
        path: display.clone(),
        offset,
        detail: detail.into(),
    };
    let u32_at = |r: &mut BufReader<File>, offset: &mut u64, what: &str| -> Result<u32> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| bad(*offset, &format!("unexpected end of file reading {what}")))?;
        *offset += 4;
        Ok(u32::from_le_bytes(buf))
    };
    let count = u32_at(&mut r, &mut offset, "image count")? as usize;
    let c = u32_at(&mut r, &mut offset, "channels")? as usize;
    let h = u32_at(&mut r, &mut offset, "height")? as usize;
    let w = u32_at(&mut r, &mut offset, "width")? as usize;
    if count == 0 {
        return Err(bad(0, "image count is zero"));
    }
    if c == 0 || h == 0 || w == 0 || c * h * w > 1 << 24 {
        return Err(bad(4, "implausible image dimensions"));
    }
    let shape: Vec<usize> = if c == 1 { vec![h, w] } else { vec![c, h, w] };
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut pixel_buf = vec![0u8; c * h * w];
    for _ in 0..count {
        let mut label = [0u8; 1];
        r.read_exact(&mut label)
            .map_err(|_| bad(offset, "unexpected end of file reading label"))?;
        offset += 1;
        r.read_exact(&mut pixel_buf)
            .map_err(|_| bad(offset, "unexpected end of file reading pixels"))?;
        offset += pixel_buf.len() as u64;
        let data: Vec<f64> = pixel_buf.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(shape.clone(), data).expect("shape matches buffer"));
        labels.push(label[0] as usize);
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(images, labels, classes)
}

// ── partitioning ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Split the dataset into `n` disjoint, exhaustive index shards.
///
/// i.i.d.: a seeded shuffle chopped into near-equal chunks. Dirichlet(alpha):
/// per class, client proportions are drawn from Dirichlet(alpha, ..., alpha)
/// and samples assigned by largest remainder. Any client left empty is given
/// one sample from the largest shard so every client can train.
pub fn partition(
    ds: &Dataset,
    n: usize,
    scheme: &PartitionScheme,
    seed_val: u64,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Config("cannot partition across zero clients".into()));
    }
    if n > ds.len() {
        return Err(Error::Config(format!(
            "cannot split {} images across {} clients",
            ds.len(),
            n
        )));
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    match scheme {
        PartitionScheme::Iid => {
            let mut rng = seed::rng(seed_val, "partition", &[]);
            let mut indices: Vec<usize> = (0..ds.len()).collect();
            indices.shuffle(&mut rng);
            let base = ds.len() / n;
            let extra = ds.len() % n;
            let mut cursor = 0;
            for (i, shard) in shards.iter_mut().enumerate() {
                let take = base + usize::from(i < extra);
                shard.extend_from_slice(&indices[cursor..cursor + take]);
                cursor += take;
            }
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !(*alpha > 0.0) {
                return Err(Error::Config(format!(
                    "dirichlet alpha must be positive, got {alpha}"
                )));
            }
            let mut rng = seed::rng(seed_val, "partition", &[]);
            for class in 0..ds.classes() {
                let mut members: Vec<usize> =
                    (0..ds.len()).filter(|&i| ds.label(i) == class).collect();
                if members.is_empty() {
                    continue;
                }
                members.shuffle(&mut rng);
                let proportions = dirichlet_symmetric(*alpha, n, &mut rng)?;
                let counts = largest_remainder(&proportions, members.len());
                let mut cursor = 0;
                for (shard, take) in shards.iter_mut().zip(counts) {
                    shard.extend_from_slice(&members[cursor..cursor + take]);
                    cursor += take;
                }
            }
            // Rebalance so no client is left without data.
            loop {
                let Some(empty) = shards.iter().position(|s| s.is_empty()) else {
                    break;
                };
                let donor = shards
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, s)| s.len())
                    .map(|(i, _)| i)
                    .expect("nonempty shard exists");
                let moved = shards[donor].pop().expect("donor nonempty");
                shards[empty].push(moved);
            }
        }
    }
    Ok(shards)
}

/// One draw from the symmetric Dirichlet(alpha, ..., alpha) over `n`
/// components, via the standard construction: normalize i.i.d. Gamma(alpha,
/// 1) variates.
fn dirichlet_symmetric(alpha: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma =
        Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet setup: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // At very small alpha every variate can underflow to zero; redraw.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Materialize index shards as per-client datasets.
pub fn partition_datasets(
    ds: &Dataset,
    n: usize,
    scheme: &PartitionScheme,
    seed_val: u64,
) -> Result<Vec<Dataset>> {
    partition(ds, n, scheme, seed_val)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect()
}

/// Integer apportionment of `total` by `proportions` (floors plus largest
/// fractional remainders).
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite proportions")
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Draw `count` distinct sample indices, or the whole range when count is
/// larger; used for mini-batch composition.
pub fn sample_indices(len: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    if count >= len {
        return indices;
    }
    // Partial Fisher-Yates: the first `count` entries form the sample.
    for i in 0..count {
        let j = rng.random_range(i..len);
        indices.swap(i, j);
    }
    indices.truncate(count);
    indices
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_blobs(2, 200, 8, 8, 0.1, 7).unwrap();
        let b = synthetic_blobs(2, 200, 8, 8, 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = synthetic_blobs(2, 200, 8, 8, 0.1, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_is_separable() {
        let ds = synthetic_blobs(4, 400, 8, 8, 0.1, 1).unwrap();
        assert!(ds.centroid_accuracy() > 0.95);
    }

    #[test]
    fn binary_roundtrip() {
        let ds = synthetic_blobs(3, 30, 8, 8, 0.1, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        save_binary(&ds, &path).unwrap();
        let back = load_binary(&path).unwrap();
        assert_eq!(back.len(), 30);
        assert_eq!(back.classes(), 3);
        assert_eq!(back.image_shape(), &[8, 8]);
        // Quantization to bytes loses at most half a step.
        for ((a, la), (b, lb)) in ds.samples().zip(back.samples()) {
            assert_eq!(la, lb);
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn binary_rejects_empty_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.bin");
        std::fs::write(&empty, 0u32.to_le_bytes()).unwrap();
        assert!(matches!(load_binary(&empty), Err(Error::Format { .. })));

        let ds = synthetic_blobs(2, 4, 4, 4, 0.0, 1).unwrap();
        let path = dir.path().join("cut.bin");
        save_binary(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_binary(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn iid_partition_is_disjoint_and_even() {
        let ds = synthetic_blobs(2, 200, 8, 8, 0.1, 2).unwrap();
        let shards = partition(&ds, 5, &PartitionScheme::Iid, 3).unwrap();
        assert_eq!(shards.len(), 5);
        assert!(shards.iter().all(|s| s.len() == 40));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn dirichlet_partition_is_disjoint_exhaustive() {
        let ds = synthetic_blobs(4, 200, 8, 8, 0.1, 2).unwrap();
        let shards = partition(&ds, 5, &PartitionScheme::Dirichlet { alpha: 0.1 }, 3).unwrap();
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert!(shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn dirichlet_small_alpha_concentrates() {
        // With alpha = 0.1 most seeds produce at least one client dominated
        // by a single class.
        let ds = synthetic_blobs(4, 400, 8, 8, 0.1, 2).unwrap();
        let mut hits = 0;
        for s in 0..10u64 {
            let shards = partition(&ds, 5, &PartitionScheme::Dirichlet { alpha: 0.1 }, s).unwrap();
            let skewed = shards.iter().any(|shard| {
                let mut counts = vec![0usize; ds.classes()];
                for &i in shard {
                    counts[ds.label(i)] += 1;
                }
                counts.iter().any(|&c| c * 10 > shard.len() * 8)
            });
            hits += usize::from(skewed);
        }
        assert!(hits >= 8, "only {hits}/10 seeds showed heterogeneity");
    }

    #[test]
    fn dirichlet_large_alpha_approaches_iid_proportions() {
        let ds = synthetic_blobs(2, 1000, 8, 8, 0.1, 2).unwrap();
        let shards = partition(&ds, 5, &PartitionScheme::Dirichlet { alpha: 1000.0 }, 4).unwrap();
        for shard in &shards {
            let ones = shard.iter().filter(|&&i| ds.label(i) == 1).count();
            let frac = ones as f64 / shard.len() as f64;
            assert!((frac - 0.5).abs() < 0.05, "class fraction {frac}");
        }
    }

    #[test]
    fn partition_rejects_oversubscription() {
        let ds = synthetic_blobs(2, 4, 4, 4, 0.1, 1).unwrap();
        assert!(partition(&ds, 5, &PartitionScheme::Iid, 0).is_err());
    }

    #[test]
    fn sample_indices_without_replacement() {
        let mut rng = seed::rng(0, "batch", &[0, 0]);
        let idx = sample_indices(10, 4, &mut rng);
        assert_eq!(idx.len(), 4);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert_eq!(sample_indices(3, 10, &mut rng), vec![0, 1, 2]);
    }
}
