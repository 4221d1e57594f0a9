use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{TrainConfig, Trainer};
use crate::autodiff::Tensor;
use crate::data::Scaling;
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::nn::ParamGroup;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub name: String,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn rebuild(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Complete training state. On disk: magic, version, fingerprint, embedded
/// configs, epoch, noise-stream position, named parameter blobs, optimizer
/// moments, and a trailing SHA-256 of everything before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scaling: Option<Scaling>,
    pub epoch: usize,
    pub rng: RngState,
    pub params: Vec<SavedParam>,
    pub optimizers: Vec<SavedOptimizer>,
}

impl Checkpoint {
    pub(super) fn capture(t: &Trainer) -> Self {
        Checkpoint {
            fingerprint: t.bundle.config.fingerprint(),
            model: t.bundle.config.clone(),
            train: t.config.clone(),
            scaling: t.scaling.clone(),
            epoch: t.epoch,
            rng: RngState::capture(&t.rng),
            params: t
                .bundle
                .params
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.clone(),
                })
                .collect(),
            optimizers: t
                .optimizers()
                .into_iter()
                .map(|(name, opt)| {
                    let (m, v) = opt.moments();
                    SavedOptimizer {
                        name: name.to_string(),
                        step: opt.steps(),
                        m: m.to_vec(),
                        v: v.to_vec(),
                    }
                })
                .collect(),
        }
    }

    /// Errors unless the checkpoint was written for `config`'s architecture.
    pub fn check_fingerprint(&self, config: &ModelConfig) -> Result<()> {
        let want = config.clone().normalized().fingerprint();
        if want != self.fingerprint {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: checkpoint {}, requested {}",
                &self.fingerprint[..12.min(self.fingerprint.len())],
                &want[..12]
            )));
        }
        Ok(())
    }

    /// Rebuilds the model alone.
    pub fn bundle(&self) -> Result<ModelBundle> {
        if self.model.fingerprint() != self.fingerprint {
            return Err(Error::Checkpoint("embedded config does not match the stored fingerprint".into()));
        }
        let mut bundle = ModelBundle::new(self.model.clone(), 0)?;
        for (p, saved) in bundle.params.iter().map(|(_, p)| p).zip(&self.params) {
            if p.group != saved.group {
                return Err(Error::Checkpoint(format!(
                    "parameter {} belongs to {} in the model but {} in the checkpoint",
                    p.name, p.group, saved.group
                )));
            }
        }
        let values: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        bundle.params.load_values(&values)?;
        Ok(bundle)
    }

    /// Rebuilds the trainer so that continuing is identical to never stopping.
    pub fn restore(self) -> Result<Trainer> {
        let bundle = self.bundle()?;
        let mut t = Trainer::new(bundle, self.train.clone())?;
        if self.optimizers.len() != 3 {
            return Err(Error::Checkpoint(format!("expected 3 optimizer states, found {}", self.optimizers.len())));
        }
        for saved in self.optimizers {
            let opt = match saved.name.as_str() {
                "encoder" => &mut t.opt_encoder,
                "generator" => &mut t.opt_generator,
                "regressor" => &mut t.opt_regressor,
                other => return Err(Error::Checkpoint(format!("unknown optimizer '{other}'"))),
            };
            opt.restore(saved.step, saved.m, saved.v)?;
        }
        t.rng = self.rng.rebuild();
        t.epoch = self.epoch;
        t.scaling = self.scaling;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut w, &self.fingerprint);
        put_str(&mut w, &serde_json::to_string(&self.model)?);
        put_str(&mut w, &serde_json::to_string(&self.train)?);
        put_str(&mut w, &serde_json::to_string(&self.scaling)?);
        w.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut w, &p.name);
            w.push(p.group.code());
            w.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut w, p.value.data());
        }
        w.extend_from_slice(&(self.optimizers.len() as u32).to_le_bytes());
        for o in &self.optimizers {
            put_str(&mut w, &o.name);
            w.extend_from_slice(&o.step.to_le_bytes());
            w.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
            for (m, v) in o.m.iter().zip(&o.v) {
                w.extend_from_slice(&(m.len() as u64).to_le_bytes());
                put_f64s(&mut w, m);
                put_f64s(&mut w, v);
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        Ok(w)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 6 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupt".into()));
        }
        let mut r = Cursor { buf: body, pos: 6 };
        let fingerprint = r.string()?;
        let model: ModelConfig = serde_json::from_str(&r.string()?)?;
        let train: TrainConfig = serde_json::from_str(&r.string()?)?;
        let scaling: Option<Scaling> = serde_json::from_str(&r.string()?)?;
        let epoch = r.u64()? as usize;
        let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.bytes(16)?.try_into().expect("16 bytes"));
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let code = r.bytes(1)?[0];
            let group = ParamGroup::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group {code}")))?;
            let rank = r.bytes(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let value = Tensor::new(shape, r.f64s(numel)?)?;
            params.push(SavedParam { name, group, value });
        }
        let n = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let step = r.u64()?;
            let slots = r.u32()? as usize;
            let (mut m, mut v) = (Vec::with_capacity(slots), Vec::with_capacity(slots));
            for _ in 0..slots {
                let len = r.u64()? as usize;
                m.push(r.f64s(len)?);
                v.push(r.f64s(len)?);
            }
            optimizers.push(SavedOptimizer { name, step, m, v });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            fingerprint,
            model,
            train,
            scaling,
            epoch,
            rng: RngState { seed, stream, word_pos },
            params,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
