//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `CPECKPT\0` |
//! | 4     | format version, `u32` |
//! | 8     | header length `h`, `u64` |
//! | h     | UTF-8 JSON header: `{"meta": CheckpointMeta, "tensors": [{"name", "rows", "cols"}]}` |
//! | 8 x n | tensor data as `f64`, row-major, in header order |
//!
//! Readers reject other magic values and versions newer than
//! [`FORMAT_VERSION`]. Unknown header fields are ignored, so optional
//! metadata can grow without a version bump. Optimizer state is not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Mlp;
use crate::corpus::{ChunkConfig, TaskKind, Vocab};
use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::pooling::{Aggregator, AggregatorConfig, PoolingKind};
use crate::tensor::{ParamSet, Tensor};
use crate::training::Objective;

pub const MAGIC: &[u8; 8] = b"CPECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub task: TaskKind,
    pub depth: usize,
    pub threshold: f64,
}

/// Everything needed to rebuild the stored models, plus a free-form echo of
/// the run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    /// Stage that wrote the file, e.g. `pretrain` or `random-init`.
    pub stage: String,
    pub seed: u64,
    /// Initialization distribution of the encoder weights.
    pub init: String,
    pub objective: Option<Objective>,
    pub encoder: Option<EncoderConfig>,
    pub chunk: Option<ChunkConfig>,
    pub pooling: Option<PoolingKind>,
    pub aggregator: Option<AggregatorConfig>,
    pub head: Option<HeadMeta>,
    /// Vocabulary entries from id 3 on; the reserved ids are implied.
    pub vocab: Option<Vec<String>>,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(bad(format!("truncated checkpoint while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            params: ParamSet::new(),
        }
    }

    /// Stores an encoder's params and config.
    pub fn with_encoder(mut self, encoder: &Encoder) -> Result<Self> {
        self.meta.encoder = Some(encoder.config().clone());
        self.params.extend(encoder.params())?;
        Ok(self)
    }

    pub fn with_aggregator(mut self, aggregator: &Aggregator) -> Result<Self> {
        self.meta.aggregator = Some(aggregator.config().clone());
        self.params.extend(aggregator.params())?;
        Ok(self)
    }

    pub fn with_head(mut self, head: &Mlp, threshold: f64) -> Result<Self> {
        self.meta.head = Some(HeadMeta {
            task: head.task(),
            depth: head.depth(),
            threshold,
        });
        self.params.extend(head.params())?;
        Ok(self)
    }

    pub fn with_vocab(mut self, vocab: &Vocab) -> Self {
        self.meta.vocab = Some(vocab.entries().to_vec());
        self
    }

    pub fn encoder(&self) -> Result<Encoder> {
        let config = self.meta.encoder.clone().ok_or_else(|| bad("checkpoint holds no encoder"))?;
        Encoder::from_params(config, self.params.with_prefix("encoder."))
    }

    pub fn aggregator(&self) -> Result<Option<Aggregator>> {
        self.meta
            .aggregator
            .clone()
            .map(|config| Aggregator::from_params(config, self.params.with_prefix("aggregator.")))
            .transpose()
    }

    pub fn head(&self) -> Result<Mlp> {
        let meta = self.meta.head.as_ref().ok_or_else(|| bad("checkpoint holds no classifier head"))?;
        Mlp::from_params(meta.task, meta.depth, self.params.with_prefix("head."))
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let entries = self.meta.vocab.clone().ok_or_else(|| bad("checkpoint holds no vocabulary"))?;
        Vocab::from_tokens(entries)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            if !t.all_finite() {
                return Err(Error::NonFinite("refusing to store non-finite parameters".into()));
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let b = &mut bytes;
        if take(b, 8, "magic")? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().unwrap());
        if version == 0 || version > FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(take(b, 8, "header length")?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| bad("header length overflows"))?;
        let header: Header = serde_json::from_slice(take(b, len, "header")?).map_err(|e| bad(format!("header: {e}")))?;
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let n = entry.rows.checked_mul(entry.cols).ok_or_else(|| bad("tensor size overflows"))?;
            let raw = take(b, n.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?, &entry.name)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.add(entry.name, Tensor::new(entry.rows, entry.cols, data)?);
        }
        if !b.is_empty() {
            return Err(bad(format!("{} trailing bytes after tensor data", b.len())));
        }
        Ok(Self {
            meta: header.meta,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::AttentionMode;

    fn small_encoder() -> Encoder {
        Encoder::init(
            EncoderConfig {
                vocab_size: 20,
                dim: 8,
                layers: 1,
                heads: 2,
                ff_dim: 16,
                max_positions: 9,
                dropout: 0.0,
                attention: AttentionMode::sliding(2),
            },
            3,
        )
        .unwrap()
    }

    fn full_checkpoint() -> Checkpoint {
        let enc = small_encoder();
        let agg = Aggregator::init(AggregatorConfig::for_encoder(enc.config(), 4), 4).unwrap();
        let head = Mlp::init(8, &[5], 3, TaskKind::MultiLabel, 5).unwrap();
        let vocab = Vocab::from_tokens(vec!["x".into()]).unwrap();
        let meta = CheckpointMeta {
            stage: "pretrain".into(),
            seed: 9,
            objective: Some(Objective::CpeHier),
            config: serde_json::json!({"lr": 1e-3}),
            ..Default::default()
        };
        Checkpoint::new(meta)
            .with_encoder(&enc)
            .unwrap()
            .with_aggregator(&agg)
            .unwrap()
            .with_head(&head, 0.5)
            .unwrap()
            .with_vocab(&vocab)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = full_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("checkpoint.bin");
        ck.write(&p).unwrap();
        let back = Checkpoint::read(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encoder().unwrap().params(), small_encoder().params());
        assert!(back.aggregator().unwrap().is_some());
        assert_eq!(back.head().unwrap().num_labels(), 3);
        assert_eq!(back.vocab().unwrap().len(), 4);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = full_checkpoint().to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        let h = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + h]).unwrap();
        assert_eq!(header["meta"]["stage"], "pretrain");
        let n: usize = header["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["rows"].as_u64().unwrap() as usize * t["cols"].as_u64().unwrap() as usize)
            .sum();
        assert_eq!(bytes.len(), 20 + h + 8 * n);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = full_checkpoint().to_bytes().unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(Checkpoint::from_bytes(&future).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn missing_sections_are_reported() {
        let ck = Checkpoint::new(CheckpointMeta::default());
        assert!(ck.encoder().is_err());
        assert!(ck.head().is_err());
        assert!(ck.aggregator().unwrap().is_none());
        assert!(ck.vocab().is_err());
    }

    #[test]
    fn mismatched_shapes_fail_to_load() {
        let mut ck = full_checkpoint();
        ck.meta.encoder.as_mut().unwrap().vocab_size = 21;
        assert!(ck.encoder().is_err());
    }
}
