//! Binary checkpoint: `LPMC` magic, version, a `key=value` config blob and
//! the named f64 tensors. Everything is little-endian.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::TrainConfig;
use crate::data::{AugmentationSpec, Transform};
use crate::featurenet::FeatureConfigKind;
use crate::losses::NodeReduction;
use crate::metricnet::{Aggregation, LoopyConfig, StreamMode};
use crate::model::LoopyModel;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LPMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint config lacks `{0}`")]
    MissingKey(String),
    #[error("checkpoint config has bad value for `{key}`: {value:?}")]
    BadValue { key: String, value: String },
    #[error("checkpoint tensors do not match the model: {0}")]
    TensorMismatch(String),
}

/// Full position of the training RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LoopyModel,
    pub train: TrainConfig,
    /// Completed SGD updates.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: RngState,
}

fn reduction_name(r: NodeReduction) -> &'static str {
    match r {
        NodeReduction::Mean => "mean",
        NodeReduction::Sum => "sum",
    }
}

impl Checkpoint {
    fn config_blob(&self) -> String {
        let l = &self.model.loopy;
        let t = &self.train;
        let aug: Vec<&str> = t.augmentation.enabled.iter().map(|x| x.name()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("feature_config", self.model.feature_config().kind.name().to_string()),
            ("n_nodes", l.n_nodes.to_string()),
            ("hidden_dim", l.hidden_dim.to_string()),
            ("feature_dim", l.feature_dim.to_string()),
            ("stream_mode", l.mode.name().to_string()),
            ("aggregation", l.aggregation.name().to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("decay_interval", t.decay_interval.to_string()),
            ("decay_factor", t.decay_factor.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("lambda", t.lambda.to_string()),
            ("reduction", reduction_name(t.reduction).to_string()),
            ("augmentation", aug.join(",")),
            ("seed", t.seed.to_string()),
            ("iteration", self.iteration.to_string()),
            ("epoch", self.epoch.to_string()),
            ("rng_seed", hex::encode(self.rng.seed)),
            ("rng_stream", self.rng.stream.to_string()),
            ("rng_word_pos", self.rng.word_pos.to_string()),
        ];
        entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = self.config_blob();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        let tensors = self.model.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format { offset: 0, message: "bad magic".into() });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let blob_len = r.u32()? as usize;
        let blob_at = r.pos;
        let blob = std::str::from_utf8(r.take(blob_len)?)
            .map_err(|_| CheckpointError::Format { offset: blob_at, message: "config is not UTF-8".into() })?;
        let kv = parse_blob(blob, blob_at)?;

        let kind = FeatureConfigKind::parse(kv.get("feature_config")?).ok_or_else(|| kv.bad("feature_config"))?;
        let mut loopy = LoopyConfig::new(kv.num("n_nodes")?, kv.num("hidden_dim")?, kv.num("feature_dim")?);
        loopy.mode = StreamMode::parse(kv.get("stream_mode")?).ok_or_else(|| kv.bad("stream_mode"))?;
        loopy.aggregation = Aggregation::parse(kv.get("aggregation")?).ok_or_else(|| kv.bad("aggregation"))?;
        let feature_dim = loopy.feature_dim;
        let mut model = LoopyModel::zeros(kind.config(), loopy)
            .map_err(|e| CheckpointError::TensorMismatch(e.to_string()))?;
        if model.loopy.feature_dim != feature_dim {
            return Err(kv.bad("feature_dim"));
        }

        let reduction = match kv.get("reduction")? {
            "mean" => NodeReduction::Mean,
            "sum" => NodeReduction::Sum,
            _ => return Err(kv.bad("reduction")),
        };
        let aug_text = kv.get("augmentation")?;
        let enabled = if aug_text.is_empty() {
            Vec::new()
        } else {
            aug_text
                .split(',')
                .map(|s| Transform::parse(s).ok_or_else(|| kv.bad("augmentation")))
                .collect::<Result<_, _>>()?
        };
        let train = TrainConfig {
            learning_rate: kv.num("learning_rate")?,
            decay_interval: kv.num("decay_interval")?,
            decay_factor: kv.num("decay_factor")?,
            batch_size: kv.num("batch_size")?,
            max_epochs: kv.num("max_epochs")?,
            lambda: kv.num("lambda")?,
            reduction,
            augmentation: AugmentationSpec { enabled },
            seed: kv.num("seed")?,
        };
        let mut seed = [0u8; 32];
        hex::decode_to_slice(kv.get("rng_seed")?, &mut seed).map_err(|_| kv.bad("rng_seed"))?;
        let rng = RngState { seed, stream: kv.num("rng_stream")?, word_pos: kv.num("rng_word_pos")? };

        let count = r.u32()? as usize;
        let expected: Vec<(String, Vec<usize>)> =
            model.named_tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if count != expected.len() {
            return Err(CheckpointError::TensorMismatch(format!(
                "{count} tensors stored, model has {}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Format { offset: at, message: "tensor name is not UTF-8".into() })?;
            if name != want_name {
                return Err(CheckpointError::TensorMismatch(format!("expected {want_name}, found {name}")));
            }
            let at = r.pos;
            if r.u8()? != DTYPE_F64 {
                return Err(CheckpointError::Format { offset: at, message: format!("{name}: unknown dtype") });
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if &shape != want_shape {
                return Err(CheckpointError::TensorMismatch(format!(
                    "{name}: stored shape {shape:?}, model wants {want_shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            loaded.push(Tensor::new(shape, data).expect("shape checked above"));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format { offset: r.pos, message: "trailing bytes".into() });
        }
        for (slot, t) in model.tensors_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        Ok(Self { model, train, iteration: kv.num("iteration")?, epoch: kv.num("epoch")?, rng })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Format {
            offset: self.pos,
            message: format!("truncated: wanted {n} more bytes"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Blob<'a>(BTreeMap<&'a str, &'a str>);

fn parse_blob(blob: &str, offset: usize) -> Result<Blob<'_>, CheckpointError> {
    let mut map = BTreeMap::new();
    for line in blob.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Format {
            offset,
            message: format!("config line without '=': {line:?}"),
        })?;
        map.insert(k, v);
    }
    Ok(Blob(map))
}

impl<'a> Blob<'a> {
    fn get(&self, key: &str) -> Result<&'a str, CheckpointError> {
        self.0.get(key).copied().ok_or_else(|| CheckpointError::MissingKey(key.into()))
    }

    fn bad(&self, key: &str) -> CheckpointError {
        CheckpointError::BadValue { key: key.into(), value: self.0.get(key).copied().unwrap_or_default().into() }
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.get(key)?.parse().map_err(|_| self.bad(key))
    }
}
