//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LOGK"  u32 version
//! u64 len, canonical run-config JSON
//! u64 count, then per tensor: u64 len, len x f64      (declaration order)
//! u64 adam step, u64 count, per tensor: u64 len, m values, v values
//! u64 len, metadata JSON (training state, parameter names, vocabulary, answers)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answer::AnswerSpace;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::LogNet;
use crate::text::Vocabulary;
use crate::train::{Adam, TrainState, Trainer};

pub const MAGIC: &[u8; 4] = b"LOGK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub state: TrainState,
    pub param_names: Vec<String>,
    pub vocab: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub params: Vec<Vec<f64>>,
    pub adam: Adam,
    pub meta: Meta,
}

impl Checkpoint {
    /// Snapshot of a trainer's current parameters and optimizer.
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocabulary, answers: &AnswerSpace) -> Self {
        Self::capture(&trainer.model, trainer, vocab, answers)
    }

    /// Snapshot using the best-validation parameters (optimizer state is the
    /// current one).
    pub fn best_of(trainer: &Trainer, vocab: &Vocabulary, answers: &AnswerSpace) -> Self {
        Self::capture(&trainer.best_model(), trainer, vocab, answers)
    }

    fn capture(model: &LogNet, trainer: &Trainer, vocab: &Vocabulary, answers: &AnswerSpace) -> Self {
        let store = &model.store;
        Self {
            run: RunConfig { model: model.config.clone(), train: trainer.config.clone() },
            params: store.values().iter().map(|t| t.data().to_vec()).collect(),
            adam: trainer.optimizer.clone(),
            meta: Meta {
                state: trainer.state.clone(),
                param_names: store.ids().map(|id| store.name(id).to_string()).collect(),
                vocab: vocab.tokens().to_vec(),
                answers: answers.answers().to_vec(),
            },
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_text(&self.meta.vocab.join("\n"))
    }

    pub fn answer_space(&self) -> Result<AnswerSpace> {
        AnswerSpace::new(self.meta.answers.clone())
    }

    /// Rebuild the network and load the stored parameters.
    pub fn model(&self) -> Result<LogNet> {
        self.run.validate()?;
        let mut net = LogNet::new(self.run.model.clone(), 0)?;
        let ids: Vec<_> = net.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, configuration declares {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, values) in ids.into_iter().zip(&self.params) {
            let name = net.store.name(id).to_string();
            if self.meta.param_names.get(id.index()) != Some(&name) {
                return Err(Error::Format(format!("tensor {} should be '{name}'", id.index())));
            }
            let t = net.store.get_mut(id);
            if t.len() != values.len() {
                return Err(Error::Format(format!("tensor '{name}' has {} values, expected {}", values.len(), t.len())));
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(net)
    }

    /// Trainer ready to continue from this checkpoint.
    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        if self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        let mut t = Trainer::new(model, self.run.train.clone())?;
        t.optimizer = self.adam.clone();
        t.state = self.meta.state.clone();
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_blob(&mut out, self.run.to_canonical_json()?.as_bytes());
        put_arrays(&mut out, &self.params);
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        put_u64(&mut out, self.adam.m.len());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_u64(&mut out, m.len());
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        put_blob(&mut out, serde_json::to_string(&self.meta)?.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let run: RunConfig = serde_json::from_slice(r.blob()?)?;
        let count = r.u64()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u64()?;
            params.push(r.f64s(n)?);
        }
        let t = r.u64()? as u64;
        let count = r.u64()?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let n = r.u64()?;
            m.push(r.f64s(n)?);
            v.push(r.f64s(n)?);
        }
        let meta: Meta = serde_json::from_slice(r.blob()?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { run, params, adam: Adam { m, v, t }, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u64).to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len());
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[Vec<f64>]) {
    put_u64(out, arrays.len());
    for a in arrays {
        put_u64(out, a.len());
        put_f64s(out, a);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length overflows".into()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflows".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, TrainConfig};

    fn trainer() -> Trainer {
        let net = LogNet::new(ModelConfig::tiny(12, 4), 7).unwrap();
        Trainer::new(net, TrainConfig::default()).unwrap()
    }

    fn vocab_answers() -> (Vocabulary, AnswerSpace) {
        let v = Vocabulary::new((0..10).map(|i| format!("w{i}")));
        let a = AnswerSpace::new((0..4).map(|i| format!("a{i}")).collect()).unwrap();
        (v, a)
    }

    #[test]
    fn byte_round_trip() {
        let t = trainer();
        let (v, a) = vocab_answers();
        let c = Checkpoint::from_trainer(&t, &v, &a);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LOGK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model().unwrap().store.values(), t.model.store.values());
        assert_eq!(back.vocabulary().unwrap(), v);
    }

    #[test]
    fn rejects_corruption() {
        let t = trainer();
        let (v, a) = vocab_answers();
        let bytes = Checkpoint::from_trainer(&t, &v, &a).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let t = trainer();
        let (v, a) = vocab_answers();
        let mut c = Checkpoint::from_trainer(&t, &v, &a);
        c.run.model.d = 10;
        assert!(c.model().is_err());
    }
}
