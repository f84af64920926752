//! Datasets, Dirichlet non-IID partitioning, and per-client train/test
//! splits.
//!
//! Partition-then-split: the Dirichlet draw allocates each class across the
//! K clients first, then every client shard is shuffled and split into local
//! train/test sets. Aggregation weights downstream use the *train* sizes.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ImageShape;
use crate::rng::stream;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// n × d, values scaled to the unit interval
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
    pub input: ImageShape,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a batch (rows `idx`) as (images, labels).
    pub fn batch(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let d = self.images.ncols();
        let mut x = Array2::zeros((idx.len(), d));
        let mut y = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            x.row_mut(row).assign(&self.images.row(i));
            y.push(self.labels[i] as usize);
        }
        (x, y)
    }

    /// Uniform subsample without replacement; deterministic in `seed`.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!(
                "subsample_fraction must be in (0,1], got {fraction}"
            )));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let n = self.len();
        let keep = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream(seed, "subsample", &[]);
        order.shuffle(&mut rng);
        order.truncate(keep);
        order.sort_unstable();
        let (images, labels) = {
            let d = self.images.ncols();
            let mut x = Array2::zeros((keep, d));
            let mut y = Vec::with_capacity(keep);
            for (row, &i) in order.iter().enumerate() {
                x.row_mut(row).assign(&self.images.row(i));
                y.push(self.labels[i]);
            }
            (x, y)
        };
        Ok(Dataset {
            name: self.name.clone(),
            images,
            labels,
            input: self.input,
            num_classes: self.num_classes,
        })
    }
}

/// Gaussian class blobs: a fast, separable synthetic classification set.
/// Class means sit on scaled random directions; labels are balanced.
pub fn synthetic_blobs(
    n: usize,
    dim: usize,
    num_classes: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    let mut rng = stream(seed, "synthetic", &[]);
    let normal = StandardNormal;
    // well-separated unit directions, scaled
    let mut means = Array2::zeros((num_classes, dim));
    for c in 0..num_classes {
        let mut norm = 0.0;
        for j in 0..dim {
            let v: f64 = normal.sample(&mut rng);
            means[(c, j)] = v;
            norm += v * v;
        }
        let norm = norm.sqrt().max(1e-9);
        for j in 0..dim {
            means[(c, j)] = means[(c, j)] / norm * 3.0;
        }
    }
    let mut images = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c as u8);
        for j in 0..dim {
            let noise: f64 = normal.sample(&mut rng);
            // squash into [0,1] around 0.5 so the generator range matches
            images[(i, j)] = sigmoid(means[(c, j)] + spread * noise);
        }
    }
    Dataset {
        name: format!("synthetic[{n}x{dim},C{num_classes}]"),
        images,
        labels,
        input: ImageShape::new(1, 1, dim),
        num_classes,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// IDX / CIFAR readers
// ---------------------------------------------------------------------------

/// Read a whole file, transparently gunzipping if it starts with 1f 8b.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::data(format!("gunzip {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// IDX3 image file → (raw pixels, n, rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let b = read_maybe_gz(path)?;
    if b.len() < 16 || be_u32(&b, 0) != 0x0000_0803 {
        return Err(Error::data(format!("{}: not an IDX3 image file", path.display())));
    }
    let n = be_u32(&b, 4) as usize;
    let rows = be_u32(&b, 8) as usize;
    let cols = be_u32(&b, 12) as usize;
    if b.len() != 16 + n * rows * cols {
        return Err(Error::data(format!("{}: truncated IDX3 payload", path.display())));
    }
    Ok((b[16..].to_vec(), n, rows, cols))
}

/// IDX1 label file → labels.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let b = read_maybe_gz(path)?;
    if b.len() < 8 || be_u32(&b, 0) != 0x0000_0801 {
        return Err(Error::data(format!("{}: not an IDX1 label file", path.display())));
    }
    let n = be_u32(&b, 4) as usize;
    if b.len() != 8 + n {
        return Err(Error::data(format!("{}: truncated IDX1 payload", path.display())));
    }
    Ok(b[8..].to_vec())
}

fn find_idx_file(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for cand in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&cand);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::data(format!(
        "missing {stem}[.gz] under {}",
        dir.display()
    )))
}

/// Load an MNIST-layout dataset (IDX images + labels) from `dir`.
/// `stems` maps the dataset name to its on-disk file stems.
pub fn load_idx_dataset(
    dir: &Path,
    name: &str,
    images_stem: &str,
    labels_stem: &str,
    num_classes: usize,
) -> Result<Dataset> {
    let (pix, n, rows, cols) = read_idx_images(&find_idx_file(dir, images_stem)?)?;
    let labels = read_idx_labels(&find_idx_file(dir, labels_stem)?)?;
    if labels.len() != n {
        return Err(Error::data(format!(
            "{name}: image count {n} != label count {}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::data(format!("{name}: label {bad} >= C={num_classes}")));
    }
    let d = rows * cols;
    let mut images = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            images[(i, j)] = pix[i * d + j] as f64 / 255.0;
        }
    }
    Ok(Dataset {
        name: name.to_string(),
        images,
        labels,
        input: ImageShape::new(1, rows, cols),
        num_classes,
    })
}

/// CIFAR-10 binary batches (label byte + 3072 pixel bytes per record).
pub fn load_cifar10(dir: &Path, files: &[&str]) -> Result<Dataset> {
    let mut pix: Vec<u8> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for f in files {
        let b = read_maybe_gz(&dir.join(f))?;
        if b.len() % 3073 != 0 {
            return Err(Error::data(format!("{f}: not a CIFAR-10 binary batch")));
        }
        for rec in b.chunks_exact(3073) {
            if rec[0] >= 10 {
                return Err(Error::data(format!("{f}: label {} out of range", rec[0])));
            }
            labels.push(rec[0]);
            pix.extend_from_slice(&rec[1..]);
        }
    }
    let n = labels.len();
    let d = 3072;
    let mut images = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            images[(i, j)] = pix[i * d + j] as f64 / 255.0;
        }
    }
    Ok(Dataset {
        name: "cifar10".into(),
        images,
        labels,
        input: ImageShape::new(3, 32, 32),
        num_classes: 10,
    })
}

/// Resolve a dataset by name from a data directory. Synthetic datasets
/// ignore the directory.
pub fn load_dataset(name: &str, data_dir: &Path, seed: u64) -> Result<Dataset> {
    match name {
        "synthetic" => Ok(synthetic_blobs(1200, 16, 4, 1.0, seed)),
        "mnist" => load_idx_dataset(
            &data_dir.join("mnist"),
            "mnist",
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            10,
        ),
        "emnist-balanced" => load_idx_dataset(
            &data_dir.join("emnist"),
            "emnist-balanced",
            "emnist-balanced-train-images-idx3-ubyte",
            "emnist-balanced-train-labels-idx1-ubyte",
            47,
        ),
        "emnist-letters" => load_idx_dataset(
            &data_dir.join("emnist"),
            "emnist-letters",
            "emnist-letters-train-images-idx3-ubyte",
            "emnist-letters-train-labels-idx1-ubyte",
            26,
        ),
        "cifar10" => load_cifar10(
            &data_dir.join("cifar10"),
            &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
        ),
        other => Err(Error::config(format!("unknown dataset '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Dirichlet partition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_subsample_fraction")]
    pub subsample_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_subsample_fraction() -> f64 {
    1.0
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must be in (0,1), got {}",
                self.train_fraction
            )));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::config(format!(
                "subsample_fraction must be in (0,1], got {}",
                self.subsample_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientShard {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientShard {
    pub fn total(&self) -> usize {
        self.train.len() + self.test.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub spec: PartitionSpec,
    /// seed that actually produced this partition (spec.seed + retries)
    pub effective_seed: u64,
    pub num_classes: usize,
    pub shards: Vec<ClientShard>,
    /// K × C whole-shard label counts (before the train/test split)
    pub label_counts: Vec<Vec<usize>>,
}

/// Smallest shard size n such that both split sides are non-empty:
/// 1 <= round(f·n) <= n−1.
pub fn min_shard_size(train_fraction: f64) -> usize {
    let mut n = 2usize;
    loop {
        let t = (train_fraction * n as f64).round() as usize;
        if t >= 1 && t <= n - 1 {
            return n;
        }
        n += 1;
        assert!(n < 10_000, "no valid shard size for f={train_fraction}");
    }
}

/// One Dirichlet draw over the K-simplex; falls back to a one-hot vector if
/// every Gamma component underflows to zero (extreme small alpha).
fn dirichlet_draw(k: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..k)
        .map(|_| {
            let v: f64 = gamma.sample(rng);
            if v.is_finite() && v > 0.0 {
                v
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    if sum <= f64::MIN_POSITIVE {
        let hot = rng.random_range(0..k);
        for (i, d) in draws.iter_mut().enumerate() {
            *d = if i == hot { 1.0 } else { 0.0 };
        }
        return draws;
    }
    for d in &mut draws {
        *d /= sum;
    }
    draws
}

fn partition_once(
    labels: &[u8],
    num_classes: usize,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, "partition", &[]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == c)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let props = dirichlet_draw(k, alpha, &mut rng);
        // cumulative-sum boundaries over this class's members
        let n_c = members.len();
        let mut cum = 0.0;
        let mut start = 0usize;
        for (ki, &p) in props.iter().enumerate() {
            cum += p;
            let end = if ki == k - 1 {
                n_c
            } else {
                ((cum * n_c as f64).round() as usize).clamp(start, n_c)
            };
            shards[ki].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    shards
}

/// Dirichlet partition with retry-on-small-shard: redraw with seed+1 (up to
/// 100 retries) until every client has at least `min_shard_size` samples.
///
/// At extreme concentrations (e.g. alpha=0.01 with K at or above the class
/// count) the per-class draws are nearly one-hot, so some clients receive
/// nothing no matter how often we redraw. In that case the first draw is
/// repaired deterministically: samples move one at a time from the largest
/// shard to the smallest until every shard is viable. The repair touches a
/// handful of samples, so heterogeneity stays intact.
pub fn dirichlet_partition(
    labels: &[u8],
    num_classes: usize,
    spec: &PartitionSpec,
) -> Result<Partition> {
    spec.validate()?;
    if labels.len() < spec.k * min_shard_size(spec.train_fraction) {
        return Err(Error::Partition(format!(
            "{} samples cannot give {} clients >= {} each",
            labels.len(),
            spec.k,
            min_shard_size(spec.train_fraction)
        )));
    }
    let min_size = min_shard_size(spec.train_fraction);
    for attempt in 0..=100u64 {
        let eff_seed = spec.seed.wrapping_add(attempt);
        let raw = partition_once(labels, num_classes, spec.k, spec.alpha, eff_seed);
        if raw.iter().any(|s| s.len() < min_size) {
            continue;
        }
        return Ok(finalize_partition(raw, labels, num_classes, spec, eff_seed));
    }
    let mut raw = partition_once(labels, num_classes, spec.k, spec.alpha, spec.seed);
    repair_min_sizes(&mut raw, min_size);
    Ok(finalize_partition(raw, labels, num_classes, spec, spec.seed))
}

/// Move samples from the largest shard to the smallest until every shard has
/// at least `min_size`. Terminates because the caller guarantees
/// `total >= k * min_size`; deterministic (first-index tie breaking).
fn repair_min_sizes(raw: &mut [Vec<usize>], min_size: usize) {
    loop {
        let (smallest, _) = raw
            .iter()
            .enumerate()
            .min_by_key(|(_, s)| s.len())
            .expect("at least one shard");
        if raw[smallest].len() >= min_size {
            return;
        }
        let (largest, _) = raw
            .iter()
            .enumerate()
            .max_by_key(|(_, s)| s.len())
            .expect("at least one shard");
        let moved = raw[largest].pop().expect("largest shard is non-empty");
        raw[smallest].push(moved);
    }
}

/// Split each raw shard into train/test and assemble the manifest.
fn finalize_partition(
    raw: Vec<Vec<usize>>,
    labels: &[u8],
    num_classes: usize,
    spec: &PartitionSpec,
    eff_seed: u64,
) -> Partition {
    let mut shards = Vec::with_capacity(spec.k);
    let mut label_counts = vec![vec![0usize; num_classes]; spec.k];
    for (ki, mut idxs) in raw.into_iter().enumerate() {
        for &i in &idxs {
            label_counts[ki][labels[i] as usize] += 1;
        }
        let mut rng = stream(eff_seed, "split", &[ki as u64]);
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let test = idxs.split_off(n_train);
        shards.push(ClientShard { train: idxs, test });
    }
    Partition {
        spec: *spec,
        effective_seed: eff_seed,
        num_classes,
        shards,
        label_counts,
    }
}

/// Mean per-client label entropy (natural log; 0·log 0 := 0).
pub fn mean_label_entropy(p: &Partition) -> f64 {
    let mut acc = 0.0;
    for counts in &p.label_counts {
        let n: usize = counts.iter().sum();
        if n == 0 {
            continue;
        }
        let mut h = 0.0;
        for &c in counts {
            if c > 0 {
                let q = c as f64 / n as f64;
                h -= q * q.ln();
            }
        }
        acc += h;
    }
    acc / p.label_counts.len() as f64
}

// ---------------------------------------------------------------------------
// Partition manifest (the `partition` subcommand artifact)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub dataset: String,
    pub num_samples: usize,
    pub spec: PartitionSpec,
    pub effective_seed: u64,
    pub num_classes: usize,
    pub label_counts: Vec<Vec<usize>>,
    pub train_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub mean_label_entropy: f64,
    /// sha256 over the concatenated (train, test) index lists of all clients
    pub indices_sha256: String,
    pub shards: Vec<ClientShard>,
}

impl PartitionManifest {
    pub fn new(dataset: &str, num_samples: usize, p: &Partition) -> Self {
        let mut hasher = Sha256::new();
        for s in &p.shards {
            for &i in s.train.iter().chain(s.test.iter()) {
                hasher.update((i as u64).to_le_bytes());
            }
            hasher.update([0xff]);
        }
        let digest = hasher.finalize();
        PartitionManifest {
            dataset: dataset.to_string(),
            num_samples,
            spec: p.spec,
            effective_seed: p.effective_seed,
            num_classes: p.num_classes,
            label_counts: p.label_counts.clone(),
            train_sizes: p.shards.iter().map(|s| s.train.len()).collect(),
            test_sizes: p.shards.iter().map(|s| s.test.len()).collect(),
            mean_label_entropy: mean_label_entropy(p),
            indices_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            shards: p.shards.clone(),
        }
    }
}
