//! Model zoo: classifier and generator architectures, deterministic
//! initialization, the `ModelWeights` exchange format, and checkpoints.
//!
//! `ModelWeights` is the unit of federation: an ordered name → tensor map
//! tagged with an `arch_id`. Two values with the same `arch_id` are
//! guaranteed name- and shape-compatible, which is what aggregation relies
//! on. Runtime `Classifier`/`Generator` values hold the executable layer
//! pipelines and convert to/from `ModelWeights` losslessly.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvT2d, Dense, GroupNorm, Layer, Network};
use crate::rng::{stream, stream_tag};
use crate::Tensor;

// ---------------------------------------------------------------------------
// Architecture specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape { channels, height, width }
    }
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ClassifierArch {
    Lenet5 { input: ImageShape, num_classes: usize },
    Resnet8 { input: ImageShape, num_classes: usize },
    TinyMlp { input_dim: usize, hidden: usize, num_classes: usize },
}

impl ClassifierArch {
    pub fn arch_id(&self) -> String {
        match self {
            ClassifierArch::Lenet5 { input, num_classes } => format!(
                "lenet5[{}x{}x{}->{}]",
                input.channels, input.height, input.width, num_classes
            ),
            ClassifierArch::Resnet8 { input, num_classes } => format!(
                "resnet8[{}x{}x{}->{}]",
                input.channels, input.height, input.width, num_classes
            ),
            ClassifierArch::TinyMlp { input_dim, hidden, num_classes } => {
                format!("tiny_mlp[{input_dim}->{hidden}->{num_classes}]")
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierArch::Lenet5 { num_classes, .. }
            | ClassifierArch::Resnet8 { num_classes, .. }
            | ClassifierArch::TinyMlp { num_classes, .. } => *num_classes,
        }
    }

    /// Flat per-sample input dimension.
    pub fn input_dim(&self) -> usize {
        match self {
            ClassifierArch::Lenet5 { input, .. } | ClassifierArch::Resnet8 { input, .. } => {
                input.len()
            }
            ClassifierArch::TinyMlp { input_dim, .. } => *input_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum GeneratorArch {
    /// Deep-convolutional generator; output spatial dims must be divisible by 4.
    Dcgen { output: ImageShape, noise_dim: usize, ngf: usize },
    TinyGen { output_dim: usize, noise_dim: usize, hidden: usize },
}

impl GeneratorArch {
    pub fn arch_id(&self) -> String {
        match self {
            GeneratorArch::Dcgen { output, noise_dim, ngf } => format!(
                "dcgen[{}->{}x{}x{},ngf{}]",
                noise_dim, output.channels, output.height, output.width, ngf
            ),
            GeneratorArch::TinyGen { output_dim, noise_dim, hidden } => {
                format!("tiny_gen[{noise_dim}->{hidden}->{output_dim}]")
            }
        }
    }

    pub fn noise_dim(&self) -> usize {
        match self {
            GeneratorArch::Dcgen { noise_dim, .. } | GeneratorArch::TinyGen { noise_dim, .. } => {
                *noise_dim
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            GeneratorArch::Dcgen { output, .. } => output.len(),
            GeneratorArch::TinyGen { output_dim, .. } => *output_dim,
        }
    }
}

// ---------------------------------------------------------------------------
// ModelWeights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub arch_id: String,
    pub entries: IndexMap<String, Tensor>,
}

impl ModelWeights {
    pub fn num_params(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_compatible(&self, other: &ModelWeights) -> Result<()> {
        if self.arch_id != other.arch_id {
            return Err(Error::shape(format!(
                "arch mismatch: {} vs {}",
                self.arch_id, other.arch_id
            )));
        }
        // equal arch_id guarantees equal names/shapes by construction; verify anyway
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape("weight entry count mismatch"));
        }
        for ((an, av), (bn, bv)) in self.entries.iter().zip(other.entries.iter()) {
            if an != bn || av.shape() != bv.shape() {
                return Err(Error::shape(format!("weight entry mismatch at {an}/{bn}")));
            }
        }
        Ok(())
    }

    /// Elementwise in-place combine with another compatible value.
    pub fn zip_mut(&mut self, other: &ModelWeights, f: impl Fn(&mut f64, f64)) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.zip_mut_with(b, |x, &y| f(x, y));
        }
        Ok(())
    }

    pub fn map_mut(&mut self, f: impl Fn(&mut f64)) {
        for t in self.entries.values_mut() {
            t.mapv_inplace(|v| {
                let mut v = v;
                f(&mut v);
                v
            });
        }
    }

    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            arch_id: self.arch_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.raw_dim())))
                .collect(),
        }
    }

    /// Squared L2 distance Σ (a−b)².
    pub fn sq_l2_diff(&self, other: &ModelWeights) -> Result<f64> {
        self.check_compatible(other)?;
        let mut acc = 0.0;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc += d * d;
            }
        }
        Ok(acc)
    }

    pub fn max_abs_diff(&self, other: &ModelWeights) -> Result<f64> {
        self.check_compatible(other)?;
        let mut m: f64 = 0.0;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            for (x, y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
        Ok(m)
    }
}

/// Weighted mean of compatible weight sets. Weights must be non-negative
/// with a positive sum; they are normalized internally.
pub fn weighted_mean(items: &[(f64, &ModelWeights)]) -> Result<ModelWeights> {
    if items.is_empty() {
        return Err(Error::config("weighted_mean of empty set"));
    }
    let total: f64 = items.iter().map(|(w, _)| *w).sum();
    if !(total > 0.0) || items.iter().any(|(w, _)| *w < 0.0) {
        return Err(Error::config(format!(
            "aggregation weights must be non-negative with positive sum, got total {total}"
        )));
    }
    let mut out = items[0].1.zeros_like();
    for (w, m) in items {
        let c = w / total;
        out.zip_mut(m, |acc, v| *acc += c * v)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layer constructors with fan-in-scaled uniform init
// ---------------------------------------------------------------------------

fn uniform(rng: &mut impl Rng, bound: f64) -> impl FnMut() -> f64 + '_ {
    move || rng.random_range(-bound..bound)
}

fn dense_init(input: usize, output: usize, rng: &mut impl Rng) -> Layer {
    let bound = 1.0 / (input as f64).sqrt();
    let mut draw = uniform(rng, bound);
    let w = Array2::from_shape_simple_fn((input, output), &mut draw);
    let b = Array1::from_shape_simple_fn(output, &mut draw);
    Layer::Dense(Dense::new(w, b))
}

fn conv_init(
    oc: usize,
    ic: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rng: &mut impl Rng,
) -> Layer {
    let bound = 1.0 / ((ic * k * k) as f64).sqrt();
    let mut draw = uniform(rng, bound);
    let w = Array4::from_shape_simple_fn((oc, ic, k, k), &mut draw);
    let b = Array1::from_shape_simple_fn(oc, &mut draw);
    Layer::Conv(Conv2d::new(w, b, stride, pad))
}

fn convt_init(
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    rng: &mut impl Rng,
) -> Layer {
    let bound = 1.0 / ((ci * k * k) as f64).sqrt();
    let mut draw = uniform(rng, bound);
    let w = Array4::from_shape_simple_fn((ci, co, k, k), &mut draw);
    let b = Array1::from_shape_simple_fn(co, &mut draw);
    Layer::ConvT(ConvT2d::new(w, b, stride, pad))
}

fn gn(channels: usize) -> Layer {
    Layer::Gn(GroupNorm::per_channel(channels))
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Runtime classifier: trunk producing penultimate features, plus a linear
/// classification head. `forward` returns (logits, features).
#[derive(Debug, Clone)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub trunk: Network,
    pub head: Network,
}

fn as2(x: Tensor) -> Array2<f64> {
    x.into_dimensionality().expect("rank-2 tensor")
}

impl Classifier {
    fn build(arch: ClassifierArch, rng: &mut impl Rng) -> Result<Self> {
        let (trunk, head) = match arch {
            ClassifierArch::TinyMlp { input_dim, hidden, num_classes } => {
                let trunk = Network::new(vec![
                    ("fc1".into(), dense_init(input_dim, hidden, rng)),
                    ("act1".into(), Layer::relu()),
                ]);
                let head =
                    Network::new(vec![("fc_out".into(), dense_init(hidden, num_classes, rng))]);
                (trunk, head)
            }
            ClassifierArch::Lenet5 { input, num_classes } => {
                let ImageShape { channels, height, width } = input;
                if height < 12 || width < 12 {
                    return Err(Error::config("lenet5 needs at least 12x12 input"));
                }
                // conv1 (pad 2) keeps H, pool halves; conv2 (no pad) shrinks by 4.
                let h2 = (height / 2 - 4) / 2;
                let w2 = (width / 2 - 4) / 2;
                let flat = 16 * h2 * w2;
                let trunk = Network::new(vec![
                    ("in".into(), Layer::Reshape { to: (channels, height, width) }),
                    ("conv1".into(), conv_init(6, channels, 5, 1, 2, rng)),
                    ("act1".into(), Layer::relu()),
                    ("pool1".into(), Layer::maxpool()),
                    ("conv2".into(), conv_init(16, 6, 5, 1, 0, rng)),
                    ("act2".into(), Layer::relu()),
                    ("pool2".into(), Layer::maxpool()),
                    ("flat".into(), Layer::flatten()),
                    ("fc1".into(), dense_init(flat, 120, rng)),
                    ("act3".into(), Layer::relu()),
                    ("fc2".into(), dense_init(120, 84, rng)),
                    ("act4".into(), Layer::relu()),
                ]);
                let head =
                    Network::new(vec![("fc3".into(), dense_init(84, num_classes, rng))]);
                (trunk, head)
            }
            ClassifierArch::Resnet8 { input, num_classes } => {
                let ImageShape { channels, height, width } = input;
                let block = |ci: usize,
                             co: usize,
                             s: usize,
                             rng: &mut dyn rand::RngCore|
                 -> Layer {
                    let mut rng = rng;
                    let body = vec![
                        ("conv1".into(), conv_init(co, ci, 3, s, 1, &mut rng)),
                        ("gn1".into(), gn(co)),
                        ("act1".into(), Layer::relu()),
                        ("conv2".into(), conv_init(co, co, 3, 1, 1, &mut rng)),
                        ("gn2".into(), gn(co)),
                    ];
                    let shortcut = if ci == co && s == 1 {
                        vec![]
                    } else {
                        vec![
                            ("proj".into(), conv_init(co, ci, 1, s, 0, &mut rng)),
                            ("gn".into(), gn(co)),
                        ]
                    };
                    Layer::Residual { body, shortcut }
                };
                let trunk = Network::new(vec![
                    ("in".into(), Layer::Reshape { to: (channels, height, width) }),
                    ("stem".into(), conv_init(16, channels, 3, 1, 1, rng)),
                    ("stem_gn".into(), gn(16)),
                    ("stem_act".into(), Layer::relu()),
                    ("block1".into(), block(16, 16, 1, rng)),
                    ("act1".into(), Layer::relu()),
                    ("block2".into(), block(16, 32, 2, rng)),
                    ("act2".into(), Layer::relu()),
                    ("block3".into(), block(32, 64, 2, rng)),
                    ("act3".into(), Layer::relu()),
                    ("gap".into(), Layer::gap()),
                ]);
                let head =
                    Network::new(vec![("fc".into(), dense_init(64, num_classes, rng))]);
                (trunk, head)
            }
        };
        Ok(Classifier { arch, trunk, head })
    }

    pub fn init(arch: ClassifierArch, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "init", &[stream_tag(&arch.arch_id())]);
        Self::build(arch, &mut rng)
    }

    pub fn from_weights(arch: ClassifierArch, w: &ModelWeights) -> Result<Self> {
        let mut c = Self::init(arch, 0)?;
        c.set_weights(w)?;
        Ok(c)
    }

    /// (logits n×C, features n×F). `keep` enables backward caches.
    pub fn forward(&mut self, x: &Array2<f64>, keep: bool) -> (Array2<f64>, Array2<f64>) {
        let feats = as2(self.trunk.forward(x.clone().into_dyn(), keep));
        let logits = as2(self.head.forward(feats.clone().into_dyn(), keep));
        (logits, feats)
    }

    /// Backprop from (dL/dlogits, optional dL/dfeatures); returns dL/dx.
    pub fn backward(&mut self, dlogits: &Array2<f64>, dfeats: Option<&Array2<f64>>) -> Array2<f64> {
        let mut dfe = as2(self.head.backward(dlogits.clone().into_dyn()));
        if let Some(df) = dfeats {
            dfe += df;
        }
        as2(self.trunk.backward(dfe.into_dyn()))
    }

    pub fn zero_grads(&mut self) {
        self.trunk.zero_grads();
        self.head.zero_grads();
    }

    pub fn weights(&self) -> ModelWeights {
        let mut entries = IndexMap::new();
        self.trunk.for_each_param(&mut |name, v| {
            entries.insert(format!("trunk.{name}"), v.to_owned());
        });
        self.head.for_each_param(&mut |name, v| {
            entries.insert(format!("head.{name}"), v.to_owned());
        });
        ModelWeights { arch_id: self.arch.arch_id(), entries }
    }

    pub fn set_weights(&mut self, w: &ModelWeights) -> Result<()> {
        if w.arch_id != self.arch.arch_id() {
            return Err(Error::shape(format!(
                "arch mismatch: classifier {} given {}",
                self.arch.arch_id(),
                w.arch_id
            )));
        }
        let mut assigned = 0usize;
        let mut fail: Option<String> = None;
        {
            let entries = &w.entries;
            let mut assign = |full: String, mut p: ndarray::ArrayViewMutD<'_, f64>| {
                match entries.get(&full) {
                    Some(t) if t.shape() == p.shape() => {
                        p.assign(t);
                        assigned += 1;
                    }
                    Some(_) => fail = Some(format!("shape mismatch for {full}")),
                    None => fail = Some(format!("missing weight entry {full}")),
                }
            };
            self.trunk.for_each_param_grad_mut(&mut |name, p, _| {
                assign(format!("trunk.{name}"), p);
            });
            self.head.for_each_param_grad_mut(&mut |name, p, _| {
                assign(format!("head.{name}"), p);
            });
        }
        if let Some(msg) = fail {
            return Err(Error::shape(msg));
        }
        if assigned != w.entries.len() {
            return Err(Error::shape(format!(
                "weight entry count mismatch: model has {assigned}, value has {}",
                w.entries.len()
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.trunk.param_count() + self.head.param_count()
    }
}

/// Deterministic classifier weight initialization.
pub fn init_classifier(arch: ClassifierArch, seed: u64) -> Result<ModelWeights> {
    Ok(Classifier::init(arch, seed)?.weights())
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub net: Network,
}

impl Generator {
    fn build(arch: GeneratorArch, rng: &mut impl Rng) -> Result<Self> {
        let net = match arch {
            GeneratorArch::TinyGen { output_dim, noise_dim, hidden } => Network::new(vec![
                ("fc1".into(), dense_init(noise_dim, hidden, rng)),
                ("act1".into(), Layer::relu()),
                ("fc2".into(), dense_init(hidden, output_dim, rng)),
                ("out".into(), Layer::sigmoid()),
            ]),
            GeneratorArch::Dcgen { output, noise_dim, ngf } => {
                let ImageShape { channels, height, width } = output;
                if height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::config("dcgen output dims must be divisible by 4"));
                }
                let (h0, w0) = (height / 4, width / 4);
                let c0 = ngf * 2;
                Network::new(vec![
                    ("fc".into(), dense_init(noise_dim, c0 * h0 * w0, rng)),
                    ("shape".into(), Layer::Reshape { to: (c0, h0, w0) }),
                    ("gn1".into(), gn(c0)),
                    ("act1".into(), Layer::relu()),
                    ("up1".into(), convt_init(c0, ngf, 4, 2, 1, rng)),
                    ("gn2".into(), gn(ngf)),
                    ("act2".into(), Layer::relu()),
                    ("up2".into(), convt_init(ngf, channels, 4, 2, 1, rng)),
                    ("out".into(), Layer::sigmoid()),
                    ("flat".into(), Layer::flatten()),
                ])
            }
        };
        Ok(Generator { arch, net })
    }

    pub fn init(arch: GeneratorArch, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "init", &[stream_tag(&arch.arch_id())]);
        Self::build(arch, &mut rng)
    }

    pub fn from_weights(arch: GeneratorArch, w: &ModelWeights) -> Result<Self> {
        let mut g = Self::init(arch, 0)?;
        g.set_weights(w)?;
        Ok(g)
    }

    /// Z: (n, noise_dim) → pseudo-samples (n, output_dim), entries in (0,1).
    pub fn forward(&mut self, z: &Array2<f64>, keep: bool) -> Result<Array2<f64>> {
        if z.ncols() != self.arch.noise_dim() {
            return Err(Error::shape(format!(
                "noise dim {} != expected {}",
                z.ncols(),
                self.arch.noise_dim()
            )));
        }
        Ok(as2(self.net.forward(z.clone().into_dyn(), keep)))
    }

    /// Backprop dL/d(output) into parameter grads; returns dL/dZ.
    pub fn backward(&mut self, dout: &Array2<f64>) -> Array2<f64> {
        as2(self.net.backward(dout.clone().into_dyn()))
    }

    pub fn zero_grads(&mut self) {
        self.net.zero_grads();
    }

    pub fn weights(&self) -> ModelWeights {
        let mut entries = IndexMap::new();
        self.net.for_each_param(&mut |name, v| {
            entries.insert(name, v.to_owned());
        });
        ModelWeights { arch_id: self.arch.arch_id(), entries }
    }

    pub fn set_weights(&mut self, w: &ModelWeights) -> Result<()> {
        if w.arch_id != self.arch.arch_id() {
            return Err(Error::shape(format!(
                "arch mismatch: generator {} given {}",
                self.arch.arch_id(),
                w.arch_id
            )));
        }
        let mut assigned = 0usize;
        let mut fail: Option<String> = None;
        {
            let entries = &w.entries;
            self.net.for_each_param_grad_mut(&mut |name, mut p, _| {
                match entries.get(&name) {
                    Some(t) if t.shape() == p.shape() => {
                        p.assign(t);
                        assigned += 1;
                    }
                    Some(_) => fail = Some(format!("shape mismatch for {name}")),
                    None => fail = Some(format!("missing weight entry {name}")),
                }
            });
        }
        if let Some(msg) = fail {
            return Err(Error::shape(msg));
        }
        if assigned != w.entries.len() {
            return Err(Error::shape("weight entry count mismatch"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.net.param_count()
    }
}

pub fn init_generator(arch: GeneratorArch, seed: u64) -> Result<ModelWeights> {
    Ok(Generator::init(arch, seed)?.weights())
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + little-endian f32 blob
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    arch_id: String,
    round: usize,
    dtype: String,
    entries: Vec<CheckpointEntry>,
    sha256: String,
}

fn blob_bytes(w: &ModelWeights) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(w.num_params() * 4);
    for t in w.entries.values() {
        for &v in t.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `manifest.json` + `weights.bin` into `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, w: &ModelWeights, round: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let blob = blob_bytes(w);
    let manifest = CheckpointManifest {
        arch_id: w.arch_id.clone(),
        round,
        dtype: "f32le".into(),
        entries: w
            .entries
            .iter()
            .map(|(n, t)| CheckpointEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
        sha256: sha256_hex(&blob),
    };
    let mut f = std::fs::File::create(dir.join("weights.bin"))?;
    f.write_all(&blob)?;
    let mf = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(mf, &manifest)?;
    Ok(())
}

/// Load a checkpoint; verifies blob checksum, entry shapes and total length.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelWeights, usize)> {
    let mf = std::fs::File::open(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_reader(mf)?;
    if manifest.dtype != "f32le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join("weights.bin"))?.read_to_end(&mut blob)?;
    if sha256_hex(&blob) != manifest.sha256 {
        return Err(Error::Checkpoint("weights.bin checksum mismatch".into()));
    }
    let expected: usize = manifest
        .entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "blob length {} != manifest total {}",
            blob.len(),
            expected * 4
        )));
    }
    let mut entries = IndexMap::new();
    let mut off = 0usize;
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let b = &blob[(off + i) * 4..(off + i) * 4 + 4];
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            })
            .collect();
        off += n;
        let t = Tensor::from_shape_vec(ndarray::IxDyn(&e.shape), vals)
            .map_err(|e| Error::Checkpoint(format!("bad entry shape: {e}")))?;
        entries.insert(e.name.clone(), t);
    }
    Ok((ModelWeights { arch_id: manifest.arch_id, entries }, manifest.round))
}
