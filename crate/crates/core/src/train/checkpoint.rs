use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{MlpModel, MlpParams, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::config::TrainConfig;
use crate::train::trainer::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLPS";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPTIM_PREFIX: &str = "optim.";

/// JSON header of a checkpoint. Training randomness is derived from
/// `(seed, epoch, batch)`, so `seed` and `epoch` are the complete RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epoch: usize,
    pub seed: u64,
    pub cum_flops: u128,
    pub stats: ChannelStats,
    pub param_tensors: usize,
    pub optimizer_tensors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: MlpParams<T>,
    pub optimizer_state: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(trainer: &Trainer<T>) -> Self {
        let params = trainer.model().params().clone();
        let optimizer_state = trainer.optimizer().state().clone();
        Self {
            meta: CheckpointMeta {
                model: trainer.model().config().clone(),
                optimizer: trainer.optimizer().config(),
                epoch: trainer.epoch(),
                seed: trainer.config().seed,
                cum_flops: trainer.cum_flops(),
                stats: trainer.stats().clone(),
                param_tensors: params.named().len(),
                optimizer_tensors: optimizer_state.len(),
            },
            params,
            optimizer_state,
        }
    }

    /// A checkpoint of a bare model, with empty optimizer slots.
    pub fn for_model(model: &MlpModel<T>, optimizer: OptimizerConfig, stats: ChannelStats, seed: u64, epoch: usize, cum_flops: u128) -> Self {
        let params = model.params().clone();
        Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                optimizer,
                epoch,
                seed,
                cum_flops,
                stats,
                param_tensors: params.named().len(),
                optimizer_tensors: 0,
            },
            params,
            optimizer_state: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<MlpModel<T>> {
        MlpModel::from_params(self.meta.model.clone(), self.params.clone())
    }

    /// Rebuilds a trainer that continues where the checkpoint left off.
    /// `config` must carry the same seed as the original run.
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer<T>> {
        if config.seed != self.meta.seed {
            return Err(Error::InvalidConfig(format!(
                "resume seed {} differs from checkpoint seed {}",
                config.seed, self.meta.seed
            )));
        }
        let model = MlpModel::from_params(self.meta.model, self.params)?;
        Trainer::resume(
            model,
            self.optimizer_state,
            config,
            self.meta.stats,
            self.meta.epoch,
            self.meta.cum_flops,
        )
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in self.params.named() {
            write_tensor(&mut out, &name, t);
        }
        for (name, t) in &self.optimizer_state {
            write_tensor(&mut out, &format!("{OPTIM_PREFIX}{name}"), t);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected MLPS"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let len = r.u32("header length")? as usize;
        let json_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::format(json_at as u64, format!("bad header: {e}")))?;
        meta.model
            .validate()
            .map_err(|e| Error::format(json_at as u64, format!("bad model config: {e}")))?;

        let mut params = MlpParams::<T>::zeros(&meta.model);
        let expected = params.named().len();
        if meta.param_tensors != expected {
            return Err(Error::format(
                json_at as u64,
                format!("header lists {} parameter tensors, model has {expected}", meta.param_tensors),
            ));
        }
        for (name, slot) in params.named_mut() {
            let at = r.pos;
            let (got, t) = r.tensor::<T>()?;
            if got != name {
                return Err(Error::format(at as u64, format!("expected tensor {name}, found {got}")));
            }
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    at as u64,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        let mut optimizer_state = BTreeMap::new();
        for _ in 0..meta.optimizer_tensors {
            let at = r.pos;
            let (got, t) = r.tensor::<T>()?;
            let Some(name) = got.strip_prefix(OPTIM_PREFIX) else {
                return Err(Error::format(at as u64, format!("expected optimizer slot, found {got}")));
            };
            optimizer_state.insert(name.to_string(), t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Self {
            meta,
            params,
            optimizer_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        let path = path.as_ref();
        // Write to a sibling file and rename so a crash never leaves half a checkpoint.
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::capture(trainer).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let start = self.pos;
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::format(start as u64 + 4, "tensor name is not UTF-8"))?
            .to_string();
        let tag_at = self.pos;
        let tag = self.take(1, "dtype tag")?[0];
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(Error::format(
                    tag_at as u64,
                    format!("tensor {name} stored as {d:?}, requested {:?}", T::DTYPE),
                ))
            }
            None => return Err(Error::format(tag_at as u64, format!("unknown dtype tag {tag}"))),
        }
        let ndim = self.u32("rank")? as usize;
        if ndim > 8 {
            return Err(Error::format(self.pos as u64 - 4, format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let e = self.u64("extent")?;
            let e = usize::try_from(e).map_err(|_| Error::format(self.pos as u64 - 8, "extent overflows"))?;
            count = count
                .checked_mul(e)
                .ok_or_else(|| Error::format(self.pos as u64 - 8, "element count overflows"))?;
            shape.push(e);
        }
        let size = T::DTYPE.size();
        let raw = self.take(
            count.checked_mul(size).ok_or_else(|| Error::format(self.pos as u64, "byte count overflows"))?,
            "tensor data",
        )?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}
