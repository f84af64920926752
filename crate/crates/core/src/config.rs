//! Experiment configuration: a strict, human-editable TOML tree.
//!
//! Unknown keys are hard errors (no silent typos), every default is
//! materialized on load, and the fully-resolved config can be written back
//! out and replayed to reproduce a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{AlgorithmName, AlgorithmSpec};
use crate::client::ClientHyperparams;
use crate::data::{dirichlet_partition, load_dataset, synthetic_blobs, Dataset, Partition,
    PartitionSpec};
use crate::error::{Error, Result};
use crate::losses::{FusionWeights, GenLossWeights};
use crate::models::{ClassifierArch, GeneratorArch};
use crate::server::{FailurePolicy, SelectionPolicy};

/// Environment variable naming the dataset directory; `--data-dir` and the
/// config's `data_dir` key both override it.
pub const DATA_DIR_ENV: &str = "FEDLAB_DATA_DIR";

fn default_eval_every() -> u64 {
    1
}

fn default_failure_policy() -> FailurePolicy {
    FailurePolicy::Abort
}

/// Shape of the in-repo synthetic dataset (Gaussian class blobs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub spread: f64,
    /// Dataset seed — fixed per experiment so every sub-run sees the same data.
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 1200,
            dim: 16,
            num_classes: 4,
            spread: 1.0,
            seed: 42,
        }
    }
}

/// Classifier choice; input/output dimensions come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "lenet5" | "resnet8" | "tiny_mlp"
    pub arch: String,
    /// Hidden width (tiny_mlp only).
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl ModelConfig {
    pub fn resolve(&self, data: &Dataset) -> Result<ClassifierArch> {
        match self.arch.as_str() {
            "lenet5" | "resnet8" => {
                if self.hidden.is_some() {
                    return Err(Error::config(format!(
                        "model.hidden does not apply to '{}'",
                        self.arch
                    )));
                }
                let input = data.input;
                Ok(if self.arch == "lenet5" {
                    ClassifierArch::Lenet5 {
                        input,
                        num_classes: data.num_classes,
                    }
                } else {
                    ClassifierArch::Resnet8 {
                        input,
                        num_classes: data.num_classes,
                    }
                })
            }
            "tiny_mlp" => Ok(ClassifierArch::TinyMlp {
                input_dim: data.input.len(),
                hidden: self.hidden.unwrap_or(64),
                num_classes: data.num_classes,
            }),
            other => Err(Error::config(format!("unknown model arch '{other}'"))),
        }
    }
}

/// Generator choice; the output shape comes from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// "dcgen" | "tiny_gen"
    pub arch: String,
    /// Noise vector length (default 100, the usual convolutional-GAN choice).
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    /// Base feature-map width (dcgen only).
    #[serde(default)]
    pub ngf: Option<usize>,
    /// Hidden width (tiny_gen only).
    #[serde(default)]
    pub hidden: Option<usize>,
}

fn default_noise_dim() -> usize {
    100
}

impl GeneratorConfig {
    pub fn resolve(&self, data: &Dataset) -> Result<GeneratorArch> {
        match self.arch.as_str() {
            "dcgen" => {
                if self.hidden.is_some() {
                    return Err(Error::config("generator.hidden does not apply to 'dcgen'"));
                }
                Ok(GeneratorArch::Dcgen {
                    output: data.input,
                    noise_dim: self.noise_dim,
                    ngf: self.ngf.unwrap_or(32),
                })
            }
            "tiny_gen" => {
                if self.ngf.is_some() {
                    return Err(Error::config("generator.ngf does not apply to 'tiny_gen'"));
                }
                Ok(GeneratorArch::TinyGen {
                    output_dim: data.input.len(),
                    noise_dim: self.noise_dim,
                    hidden: self.hidden.unwrap_or(64),
                })
            }
            other => Err(Error::config(format!("unknown generator arch '{other}'"))),
        }
    }
}

/// Local-update hyperparameters (E, B, learning rates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Student/local SGD learning rate.
    pub eta: f64,
    /// Generator Adam learning rate.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1e-3
}

impl ClientConfig {
    /// Loss weights default to zero here; for fedkf the algorithm's
    /// lambda1/lambda2/gamma parameters replace them at run time.
    pub fn hyperparams(&self) -> ClientHyperparams {
        ClientHyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            eta: self.eta,
            beta: self.beta,
            gen_weights: GenLossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
            },
            fusion: FusionWeights { gamma: 0.0 },
        }
    }
}

/// A complete, declarative experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "synthetic" | "mnist" | "emnist-balanced" | "emnist-letters" | "cifar10"
    pub dataset: String,
    /// Communication rounds T.
    pub rounds: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// One independent sub-run per seed.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Dataset directory; overrides the environment variable.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "default_failure_policy")]
    pub failure_policy: FailurePolicy,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    pub partition: PartitionSpec,
    pub selection: SelectionPolicy,
    pub algorithm: AlgorithmSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    pub client: ClientConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.as_str() {
            "synthetic" | "mnist" | "emnist-balanced" | "emnist-letters" | "cifar10" => {}
            other => return Err(Error::config(format!("unknown dataset '{other}'"))),
        }
        if self.dataset != "synthetic" && self.synthetic.is_some() {
            return Err(Error::config(
                "the [synthetic] section only applies to dataset = \"synthetic\"",
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        self.partition.validate()?;
        self.selection.validate()?;
        self.algorithm.validate()?;
        self.client.hyperparams().validate()?;
        if self.algorithm.name == AlgorithmName::FedKf {
            let fusion = self.algorithm.fusion()?;
            if fusion.gamma > 0.0 && self.generator.is_none() {
                return Err(Error::config(
                    "fedkf with gamma > 0 requires a [generator] section",
                ));
            }
        }
        // Surface obvious model/generator name typos before any data loads.
        match self.model.arch.as_str() {
            "lenet5" | "resnet8" | "tiny_mlp" => {}
            other => return Err(Error::config(format!("unknown model arch '{other}'"))),
        }
        if let Some(g) = &self.generator {
            match g.arch.as_str() {
                "dcgen" | "tiny_gen" => {}
                other => {
                    return Err(Error::config(format!("unknown generator arch '{other}'")))
                }
            }
        }
        Ok(())
    }

    /// Load the dataset, applying any subsampling from the partition spec.
    /// The returned dataset is the one shard indices refer to.
    pub fn load_data(&self, data_dir: &Path) -> Result<Dataset> {
        let ds = if self.dataset == "synthetic" {
            let s = self.synthetic.unwrap_or_default();
            synthetic_blobs(s.n, s.dim, s.num_classes, s.spread, s.seed)
        } else {
            load_dataset(&self.dataset, data_dir, 0)?
        };
        ds.subsample(self.partition.subsample_fraction, self.partition.seed)
    }

    pub fn build_partition(&self, data: &Dataset) -> Result<Partition> {
        dirichlet_partition(&data.labels, data.num_classes, &self.partition)
    }

    /// Materialize every default so the emitted config replays bit-for-bit.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.dataset == "synthetic" {
            cfg.synthetic = Some(cfg.synthetic.unwrap_or_default());
        }
        cfg
    }
}

/// Resolve the dataset directory: CLI flag, then config key, then the
/// environment. The synthetic dataset never touches it.
pub fn resolve_data_dir(
    flag: Option<&Path>,
    config_dir: Option<&Path>,
    env_value: Option<&str>,
) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = config_dir {
        return Ok(p.to_path_buf());
    }
    if let Some(v) = env_value {
        if !v.is_empty() {
            return Ok(PathBuf::from(v));
        }
    }
    Err(Error::config(format!(
        "no data directory: set {DATA_DIR_ENV}, add data_dir to the config, or pass --data-dir"
    )))
}

/// `resolve_data_dir` against the live environment.
pub fn data_dir_from_env(flag: Option<&Path>, config_dir: Option<&Path>) -> Result<PathBuf> {
    let env_value = std::env::var(DATA_DIR_ENV).ok();
    resolve_data_dir(flag, config_dir, env_value.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        r#"
            dataset = "synthetic"
            rounds = 3
            seeds = [1, 2]

            [partition]
            k = 4
            alpha = 0.5
            seed = 7

            [selection]
            tau = 1.0

            [algorithm]
            name = "fedavg"

            [model]
            arch = "tiny_mlp"

            [client]
            epochs = 1
            batch_size = 16
            eta = 0.05
        "#
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(minimal_toml()).unwrap();
        assert_eq!(cfg.eval_every, 1);
        assert_eq!(cfg.partition.train_fraction, 0.8);
        assert_eq!(cfg.partition.subsample_fraction, 1.0);
        assert!(!cfg.algorithm.use_t1);
        assert!(cfg.algorithm.params.is_empty());
        assert_eq!(cfg.failure_policy, FailurePolicy::Abort);
        assert_eq!(cfg.client.beta, 1e-3);
        assert!(cfg.generator.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let top = format!("typo_key = 1\n{}", minimal_toml());
        assert!(ExperimentConfig::from_toml_str(&top).is_err());
        let nested = minimal_toml().replace("k = 4", "k = 4\nkk = 5");
        assert!(ExperimentConfig::from_toml_str(&nested).is_err());
        let algo = minimal_toml().replace("name = \"fedavg\"", "name = \"fedavg\"\nbogus = 1");
        assert!(ExperimentConfig::from_toml_str(&algo).is_err());
    }

    #[test]
    fn algorithm_params_validate_through_config() {
        let bad = minimal_toml().replace(
            "name = \"fedavg\"",
            "name = \"fedavg\"\n[algorithm.params]\nmu = 0.1",
        );
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let qffl_t1 = minimal_toml().replace(
            "name = \"fedavg\"",
            "name = \"qffl\"\nuse_t1 = true\n[algorithm.params]\nq = 1.0",
        );
        assert!(ExperimentConfig::from_toml_str(&qffl_t1).is_err());
    }

    #[test]
    fn fedkf_with_gamma_requires_generator_section() {
        let no_gen = minimal_toml().replace(
            "name = \"fedavg\"",
            "name = \"fedkf\"\nuse_t1 = true\n[algorithm.params]\nlambda1 = 1.0\nlambda2 = 0.5\ngamma = 0.1",
        );
        assert!(ExperimentConfig::from_toml_str(&no_gen).is_err());
        let with_gen = format!(
            "{}\n[generator]\narch = \"tiny_gen\"\n",
            no_gen
        );
        let cfg = ExperimentConfig::from_toml_str(&with_gen).unwrap();
        assert_eq!(cfg.generator.as_ref().unwrap().noise_dim, 100);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for (from, to) in [
            ("dataset = \"synthetic\"", "dataset = \"imagenet\""),
            ("seeds = [1, 2]", "seeds = []"),
            ("seeds = [1, 2]", "seeds = [3, 3]"),
            ("rounds = 3", "rounds = 3\neval_every = 0"),
            ("tau = 1.0", "tau = 0.0"),
        ] {
            let text = minimal_toml().replace(from, to);
            assert!(
                ExperimentConfig::from_toml_str(&text).is_err(),
                "accepted: {to}"
            );
        }
        // non-synthetic dataset must reject the [synthetic] section
        let text = format!("{}\n[synthetic]\nn = 10\n", minimal_toml())
            .replace("dataset = \"synthetic\"", "dataset = \"mnist\"");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn resolved_config_round_trips_exactly() {
        let cfg = ExperimentConfig::from_toml_str(minimal_toml()).unwrap().resolved();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        let again = back.to_toml_string().unwrap();
        assert_eq!(text, again, "resolved config must be a fixed point");
        assert_eq!(cfg.synthetic, back.synthetic);
        assert_eq!(cfg.partition, back.partition);
        assert_eq!(cfg.client, back.client);
    }

    #[test]
    fn synthetic_pipeline_builds_partition() {
        let cfg = ExperimentConfig::from_toml_str(minimal_toml()).unwrap();
        let data = cfg.load_data(Path::new("/nonexistent")).unwrap();
        assert_eq!(data.len(), 1200);
        let p = cfg.build_partition(&data).unwrap();
        assert_eq!(p.shards.len(), 4);
        let total: usize = p.shards.iter().map(|s| s.train.len() + s.test.len()).sum();
        assert_eq!(total, 1200);
    }

    #[test]
    fn subsample_fraction_shrinks_dataset_before_partitioning() {
        let text = minimal_toml().replace("seed = 7", "seed = 7\nsubsample_fraction = 0.5");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let data = cfg.load_data(Path::new("/nonexistent")).unwrap();
        assert_eq!(data.len(), 600);
    }

    #[test]
    fn model_and_generator_resolution() {
        let cfg = ExperimentConfig::from_toml_str(minimal_toml()).unwrap();
        let data = cfg.load_data(Path::new("/nonexistent")).unwrap();
        let arch = cfg.model.resolve(&data).unwrap();
        assert_eq!(
            arch,
            ClassifierArch::TinyMlp { input_dim: 16, hidden: 64, num_classes: 4 }
        );
        let g = GeneratorConfig {
            arch: "tiny_gen".into(),
            noise_dim: 8,
            ngf: None,
            hidden: Some(12),
        };
        assert_eq!(
            g.resolve(&data).unwrap(),
            GeneratorArch::TinyGen { output_dim: 16, noise_dim: 8, hidden: 12 }
        );
        let bad = ModelConfig { arch: "lenet5".into(), hidden: Some(3) };
        assert!(bad.resolve(&data).is_err());
        let bad_gen = GeneratorConfig {
            arch: "dcgen".into(),
            noise_dim: 8,
            ngf: None,
            hidden: Some(12),
        };
        assert!(bad_gen.resolve(&data).is_err());
    }

    #[test]
    fn data_dir_precedence_is_flag_config_env() {
        let flag = Path::new("/from/flag");
        let cfg_dir = Path::new("/from/config");
        let got = resolve_data_dir(Some(flag), Some(cfg_dir), Some("/from/env")).unwrap();
        assert_eq!(got, flag);
        let got = resolve_data_dir(None, Some(cfg_dir), Some("/from/env")).unwrap();
        assert_eq!(got, cfg_dir);
        let got = resolve_data_dir(None, None, Some("/from/env")).unwrap();
        assert_eq!(got, Path::new("/from/env"));
        let err = resolve_data_dir(None, None, None).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains(DATA_DIR_ENV));
    }
}
