//! Experiment configuration: a TOML file with one section per module,
//! overridable from the command line with `--set section.key=value`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cpe_core::classifier::ClassifierConfig;
use cpe_core::corpus::{ChunkConfig, SyntheticSpec, TaskKind};
use cpe_core::encoders::EncoderConfig;
use cpe_core::pooling::PoolingKind;
use cpe_core::training::PretrainConfig;
use serde::{Deserialize, Serialize};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// JSONL corpus. Unset means the `corpus.jsonl` written by `gen-synthetic`.
    pub path: Option<PathBuf>,
    /// Unset means inferred: one label per document gives multi-class.
    pub task: Option<TaskKind>,
    /// Unset means one more than the largest label id in the corpus.
    pub num_labels: Option<usize>,
    /// Trailing fraction of the corpus held out for evaluation.
    pub test_fraction: f64,
    pub min_freq: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            task: None,
            num_labels: None,
            test_fraction: 0.2,
            min_freq: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub pooling: PoolingKind,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            pooling: PoolingKind::Max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_pts: usize,
    /// Z-score every embedding dimension before clustering.
    pub standardize: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: 3.0,
            min_pts: 5,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    /// Run the arms on separate threads.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512],
            parallel: false,
        }
    }
}

/// The full experiment. `pretrain.chunk`, `pretrain.seed` and
/// `classifier.seed` mirror the top-level `chunk` and `seed` and cannot be
/// set separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub chunk: ChunkConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

/// Keys copied from the top level; setting them in a section is an error.
const MIRRORED: [(&str, &str); 3] = [("pretrain", "chunk"), ("pretrain", "seed"), ("classifier", "seed")];

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self {
            seed,
            out_dir: default_out_dir(),
            corpus: CorpusConfig::default(),
            synthetic: SyntheticSpec::default(),
            chunk: ChunkConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            embed: EmbedConfig::default(),
            classifier: ClassifierConfig::default(),
            cluster: ClusterConfig::default(),
            sweep: SweepConfig::default(),
        };
        c.sync();
        c
    }

    /// Parses TOML text, then applies `overrides` (`section.key=value`).
    /// Values parse as TOML and fall back to plain strings.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        for (section, key) in MIRRORED {
            if root.get(section).and_then(|s| s.get(key)).is_some() {
                bail!("{section}.{key} is taken from the top-level `{key}`; set it there");
            }
        }
        if !root.contains_key("seed") {
            bail!("config has no seed; add `seed = N` or pass --set seed=N");
        }
        let mut config: Self = toml::Value::Table(root).try_into().context("invalid config")?;
        config.sync();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    fn sync(&mut self) {
        self.pretrain.chunk = self.chunk;
        self.pretrain.seed = self.seed;
        self.classifier.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.chunk.validate()?;
        self.synthetic.validate()?;
        self.pretrain.validate()?;
        self.classifier.validate()?;
        if !(0.0..1.0).contains(&self.corpus.test_fraction) {
            bail!("corpus.test_fraction must lie in [0, 1)");
        }
        if !(self.cluster.eps > 0.0) || self.cluster.min_pts == 0 {
            bail!("cluster.eps must be positive and cluster.min_pts at least 1");
        }
        if self.sweep.sizes.is_empty() || self.sweep.sizes.contains(&0) {
            bail!("sweep.sizes must list positive chunk lengths");
        }
        Ok(())
    }

    /// TOML text that parses back to `self`; mirrored keys are left out.
    pub fn to_toml(&self) -> Result<String> {
        let mut root = toml::Table::try_from(self).context("cannot serialize config")?;
        for (section, key) in MIRRORED {
            if let Some(t) = root.get_mut(section).and_then(toml::Value::as_table_mut) {
                t.remove(key);
            }
        }
        toml::to_string(&root).context("cannot serialize config")
    }

    /// Writes the config `command` ran with to `config.<command>.toml` in
    /// the output directory.
    pub fn echo(&self, command: &str) -> Result<()> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("cannot create {}", self.out_dir.display()))?;
        let path = self.out_dir.join(format!("config.{command}.toml"));
        fs::write(&path, self.to_toml()?).with_context(|| format!("cannot write {}", path.display()))
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not key=value"))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().unwrap();
    let mut table = root;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {spec:?}: {p} is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
