//! Binary checkpoint: 8-byte magic, little-endian `u64` header length, a JSON
//! header, then every tensor listed in the header as raw little-endian `f64`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::a2l::A2lModel;
use crate::ddpm::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::l2i::{Codec, L2iModel};
use crate::nn::{Adam, ParamId, ParamStore};

const MAGIC: &[u8; 8] = b"DHCKPT01";
const FORMAT: &str = "dreamhead-checkpoint";

/// Complete training state of both hierarchies.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub a2l: A2lModel,
    pub l2i: L2iModel,
    pub a2l_opt: Adam,
    pub l2i_opt: Adam,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config_hash: String,
    config: ExperimentConfig,
    schedule: ScheduleConfig,
    step: u64,
    codec: Codec,
    rng: ChaCha8Rng,
    a2l_adam_step: u64,
    l2i_adam_step: u64,
    tensors: Vec<TensorEntry>,
}

fn push_store(prefix: &str, store: &ParamStore, opt: &Adam, entries: &mut Vec<TensorEntry>, data: &mut Vec<f64>) {
    for (kind, source) in [("param", None), ("adam_m", Some(&opt.m)), ("adam_v", Some(&opt.v))] {
        for (id, p) in store.iter() {
            entries.push(TensorEntry {
                name: format!("{prefix}/{kind}/{}", p.name),
                shape: p.shape.clone(),
            });
            match source {
                None => data.extend_from_slice(&p.data),
                Some(moments) => data.extend_from_slice(&moments[id.index()]),
            }
        }
    }
}

struct TensorReader<'a> {
    entries: &'a [TensorEntry],
    data: &'a [u8],
    next: usize,
    offset: usize,
}

impl TensorReader<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let e = self
            .entries
            .get(self.next)
            .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is missing")))?;
        if e.name != name || e.shape != shape {
            return Err(Error::format(
                "checkpoint",
                format!("expected tensor {name} {shape:?}, found {} {:?}", e.name, e.shape),
            ));
        }
        let n: usize = shape.iter().product();
        let bytes = self
            .data
            .get(self.offset..self.offset + 8 * n)
            .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is truncated")))?;
        self.next += 1;
        self.offset += 8 * n;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn fill_store(&mut self, prefix: &str, store: &mut ParamStore, opt: &mut Adam) -> Result<()> {
        let meta: Vec<(String, Vec<usize>)> = store.iter().map(|(_, p)| (p.name.clone(), p.shape.clone())).collect();
        for (k, (name, shape)) in meta.iter().enumerate() {
            let v = self.take(&format!("{prefix}/param/{name}"), shape)?;
            store.get_mut(ParamId::from_index(k)).data = v;
        }
        for (k, (name, shape)) in meta.iter().enumerate() {
            opt.m[k] = self.take(&format!("{prefix}/adam_m/{name}"), shape)?;
        }
        for (k, (name, shape)) in meta.iter().enumerate() {
            opt.v[k] = self.take(&format!("{prefix}/adam_v/{name}"), shape)?;
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        push_store("a2l", self.a2l.params(), &self.a2l_opt, &mut entries, &mut data);
        push_store("l2i", self.l2i.params(), &self.l2i_opt, &mut entries, &mut data);
        let header = Header {
            format: FORMAT.into(),
            version: 1,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            schedule: self.config.schedule,
            step: self.step,
            codec: self.l2i.codec().clone(),
            rng: self.rng.clone(),
            a2l_adam_step: self.a2l_opt.step,
            l2i_adam_step: self.l2i_opt.step,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format("checkpoint", "not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::format("checkpoint", "header is truncated"))?;
        let h: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        if h.format != FORMAT || h.version != 1 {
            return Err(Error::format("checkpoint", format!("unsupported format {} v{}", h.format, h.version)));
        }
        h.config.validate()?;
        if h.config.hash() != h.config_hash {
            return Err(Error::format("checkpoint", "config hash does not match the stored config"));
        }
        if h.schedule != h.config.schedule {
            return Err(Error::format("checkpoint", "stored schedule differs from the config schedule"));
        }
        let mut a2l = A2lModel::new(h.config.a2l.clone(), 0)?;
        let mut l2i = L2iModel::new(h.config.l2i.clone(), h.codec, 0)?;
        let mut a2l_opt = Adam::new(h.config.train.a2l_optimizer, a2l.params());
        let mut l2i_opt = Adam::new(h.config.train.l2i_optimizer, l2i.params());
        a2l_opt.step = h.a2l_adam_step;
        l2i_opt.step = h.l2i_adam_step;
        let mut reader = TensorReader {
            entries: &h.tensors,
            data: &bytes[16 + len..],
            next: 0,
            offset: 0,
        };
        reader.fill_store("a2l", a2l.params_mut(), &mut a2l_opt)?;
        reader.fill_store("l2i", l2i.params_mut(), &mut l2i_opt)?;
        if reader.next != h.tensors.len() || reader.offset != reader.data.len() {
            return Err(Error::format("checkpoint", "trailing tensors or bytes"));
        }
        Ok(Self {
            config: h.config,
            step: h.step,
            a2l,
            l2i,
            a2l_opt,
            l2i_opt,
            rng: h.rng,
        })
    }

    /// Writes via a temporary file so a partially written checkpoint never
    /// replaces a good one.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
