//! Binary checkpoint container.
//!
//! ```text
//! magic[8] version:u32 config_hash:u64 config_len:u32 config_toml
//! vocab:6×u64 epoch:u64
//! has_rng:u8 [seed[32] word_pos:u128]
//! opt_step:u64 tensor_count:u32
//! per tensor: name_len:u16 name dtype:u8 ndim:u8 dims:ndim×u64
//!             trainable:u8 values has_moments:u8 [m v]
//! crc32:u32
//! ```
//!
//! All integers and floats are little-endian; `dtype` 0 is `f64`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{OptimizerKind, OptimizerState, Trainer};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, Vocab};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"NEGFEED\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Snapshot of a ChaCha stream: seed plus position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub rng: Option<RngState>,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &Config) -> Self {
        let mut config = config.clone();
        config.training = trainer.config.clone();
        config.model = trainer.model.config.clone();
        Self {
            config,
            vocab: trainer.model.vocab,
            params: trainer.model.params.clone(),
            optimizer: trainer.optimizer.state.clone(),
            rng: Some(RngState::capture(&trainer.rng)),
            epoch: trainer.epoch,
        }
    }

    /// Checkpoint of bare parameters, without optimizer or RNG state.
    pub fn from_model(model: &Model, config: &Config) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            vocab: model.vocab,
            params: model.params.clone(),
            optimizer: OptimizerState::default(),
            rng: None,
            epoch: 0,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.config.model, self.vocab, self.params.clone())
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(self.model()?, &self.config.training)?;
        if self.optimizer.step > 0 {
            let st = &self.optimizer;
            let fits = |buf: &[Vec<f64>]| {
                buf.len() == self.params.len()
                    && buf
                        .iter()
                        .zip(self.params.iter())
                        .all(|(b, (_, p))| b.len() == if p.is_trainable() { p.len() } else { 0 })
            };
            if t.optimizer.settings.kind == OptimizerKind::Adam && !(fits(&st.m) && fits(&st.v)) {
                return Err(Error::Format("optimizer state does not match the parameters".into()));
            }
            t.optimizer.state = st.clone();
        }
        if let Some(r) = &self.rng {
            t.rng = r.restore();
        }
        t.epoch = self.epoch;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let toml = self.config.to_toml();
        let mut w = Vec::new();
        w.extend_from_slice(&CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.extend_from_slice(&self.config.hash().to_le_bytes());
        w.extend_from_slice(&(toml.len() as u32).to_le_bytes());
        w.extend_from_slice(toml.as_bytes());
        for v in self.vocab.as_array() {
            w.extend_from_slice(&(v as u64).to_le_bytes());
        }
        w.extend_from_slice(&self.epoch.to_le_bytes());
        match &self.rng {
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => w.push(0),
        }
        w.extend_from_slice(&self.optimizer.step.to_le_bytes());
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, (name, t)) in self.params.iter().enumerate() {
            w.extend_from_slice(&(name.len() as u16).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            w.push(DTYPE_F64);
            w.push(t.shape().len() as u8);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            w.push(t.is_trainable() as u8);
            put_f64s(&mut w, t.data());
            let m = self.optimizer.m.get(i).filter(|m| !m.is_empty());
            let v = self.optimizer.v.get(i).filter(|v| !v.is_empty());
            match (m, v) {
                (Some(m), Some(v)) => {
                    w.push(1);
                    put_f64s(&mut w, m);
                    put_f64s(&mut w, v);
                }
                _ => w.push(0),
            }
        }
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = CHECKPOINT_MAGIC.len() + 4;
        if bytes.len() < header || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < header + 4 {
            return Err(Error::Checksum);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Checksum);
        }

        let mut r = Reader { buf: body, pos: header };
        let hash = r.u64()?;
        let toml_len = r.u32()? as usize;
        let toml = std::str::from_utf8(r.take(toml_len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config = Config::from_toml_str(toml).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
        if config.hash() != hash {
            return Err(Error::Format("config hash mismatch".into()));
        }
        let mut vocab = [0usize; 6];
        for v in &mut vocab {
            *v = r.u64()? as usize;
        }
        let epoch = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, word_pos })
            }
            x => return Err(Error::Format(format!("bad rng flag {x}"))),
        };
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Format(format!("tensor {name}: unsupported dtype")));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::Format(format!("tensor {name}: bad shape {shape:?}")))?;
            let trainable = r.u8()? != 0;
            let mut t = Tensor::new(&shape, r.f64s(n)?).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            t.set_requires_grad(trainable);
            match r.u8()? {
                0 => {
                    m.push(Vec::new());
                    v.push(Vec::new());
                }
                1 => {
                    m.push(r.f64s(n)?);
                    v.push(r.f64s(n)?);
                }
                x => return Err(Error::Format(format!("bad moments flag {x}"))),
            }
            params
                .add(name.clone(), t)
                .map_err(|_| Error::Format(format!("duplicate tensor {name}")))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        let optimizer = OptimizerState { step, m, v };
        Ok(Self {
            config,
            vocab: Vocab::from_array(vocab),
            params,
            optimizer,
            rng,
            epoch,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
