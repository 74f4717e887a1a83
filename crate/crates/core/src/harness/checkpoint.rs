//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "HEGSCKPT"
//! version    u32
//! config     u32 length + UTF-8 TOML snapshot of the run config
//! epoch      u64      completed epochs
//! step       u64      optimizer steps taken
//! rng_state  u64      seed of the data-order stream for the next epoch
//! best_ap50  u8 flag + f64
//! params     section
//! buffers    section
//! adam_step  u64
//! adam_m     section
//! adam_v     section
//! ```
//!
//! A section is a u32 count followed by entries sorted by name:
//! u32 name length, name, u8 dtype (0 = f32, 1 = f64), u32 rank,
//! u64 per dimension, then the raw little-endian element bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

use super::config::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HEGSCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayRecord {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl ArrayRecord {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            d => return Err(Error::Format(format!("unsupported dtype {d:?} in checkpoint"))),
        };
        Ok(Self {
            dtype: t.dtype(),
            shape: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self.data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
            _ => {
                let v: Vec<f64> = self.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
        };
        Ok(t)
    }
}

pub type ArrayMap = BTreeMap<String, ArrayRecord>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: String,
    pub epoch: u64,
    pub step: u64,
    pub rng_state: u64,
    pub best_ap50: Option<f64>,
    pub params: ArrayMap,
    pub buffers: ArrayMap,
    pub adam_step: u64,
    pub adam_m: ArrayMap,
    pub adam_v: ArrayMap,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn section(&mut self, m: &ArrayMap) {
        self.u32(m.len() as u32);
        for (name, a) in m {
            self.str(name);
            self.u8(if a.dtype == DType::F32 { 0 } else { 1 });
            self.u32(a.shape.len() as u32);
            for &d in &a.shape {
                self.u64(d as u64);
            }
            self.0.extend(&a.data);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
    fn section(&mut self) -> Result<ArrayMap> {
        let n = self.u32()?;
        let mut m = ArrayMap::new();
        for _ in 0..n {
            let name = self.str()?;
            let (dtype, width) = match self.u8()? {
                0 => (DType::F32, 4),
                1 => (DType::F64, 8),
                t => return Err(Error::Format(format!("unknown dtype tag {t} for {name}"))),
            };
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(width, |acc: usize, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
            let data = self.take(count)?.to_vec();
            if m.insert(name.clone(), ArrayRecord { dtype, shape, data }).is_some() {
                return Err(Error::Format(format!("duplicate array {name}")));
            }
        }
        Ok(m)
    }
}

fn store_map(vars: Vec<(String, candle_core::Var)>) -> Result<ArrayMap> {
    vars.into_iter()
        .map(|(n, v)| Ok((n, ArrayRecord::from_tensor(v.as_tensor())?)))
        .collect()
}

impl Checkpoint {
    /// Snapshot of a parameter store; optimizer fields start empty.
    pub fn from_store(store: &ParamStore, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            config: config.to_toml_string()?,
            epoch: 0,
            step: 0,
            rng_state: config.seed,
            best_ap50: None,
            params: store_map(store.params())?,
            buffers: store_map(store.buffers())?,
            adam_step: 0,
            adam_m: ArrayMap::new(),
            adam_v: ArrayMap::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.u32(self.format_version);
        w.str(&self.config);
        w.u64(self.epoch);
        w.u64(self.step);
        w.u64(self.rng_state);
        w.u8(self.best_ap50.is_some() as u8);
        w.0.extend(self.best_ap50.unwrap_or(0.0).to_le_bytes());
        w.section(&self.params);
        w.section(&self.buffers);
        w.u64(self.adam_step);
        w.section(&self.adam_m);
        w.section(&self.adam_v);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let format_version = r.u32()?;
        if format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {format_version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config = r.str()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let rng_state = r.u64()?;
        let has_best = r.u8()? != 0;
        let best = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let ck = Self {
            format_version,
            config,
            epoch,
            step,
            rng_state,
            best_ap50: has_best.then_some(best),
            params: r.section()?,
            buffers: r.section()?,
            adam_step: r.u64()?,
            adam_m: r.section()?,
            adam_v: r.section()?,
        };
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.config)
    }

    /// Lists every name whose presence or shape differs between the
    /// checkpoint and the store, one line each.
    pub fn shape_diff(&self, store: &ParamStore) -> Vec<String> {
        let mut lines = Vec::new();
        for (kind, saved, live) in [
            ("parameter", &self.params, store.params()),
            ("buffer", &self.buffers, store.buffers()),
        ] {
            let live: BTreeMap<String, Vec<usize>> =
                live.into_iter().map(|(n, v)| (n, v.as_tensor().dims().to_vec())).collect();
            for (name, a) in saved {
                match live.get(name) {
                    None => lines.push(format!("{kind} {name}: in checkpoint {:?}, absent from model", a.shape)),
                    Some(s) if *s != a.shape => {
                        lines.push(format!("{kind} {name}: checkpoint {:?} vs model {:?}", a.shape, s))
                    }
                    _ => {}
                }
            }
            for (name, s) in &live {
                if !saved.contains_key(name) {
                    lines.push(format!("{kind} {name}: in model {s:?}, absent from checkpoint"));
                }
            }
        }
        lines
    }

    /// Copies parameters and buffers into `store`, converting dtype if needed.
    pub fn restore_store(&self, store: &ParamStore) -> Result<()> {
        let diff = self.shape_diff(store);
        if !diff.is_empty() {
            return Err(Error::Shape(format!(
                "checkpoint does not fit the model:\n  {}",
                diff.join("\n  ")
            )));
        }
        for (name, var) in store.params().into_iter().chain(store.buffers()) {
            let a = self.params.get(&name).or_else(|| self.buffers.get(&name)).expect("checked by shape_diff");
            var.set(&a.to_tensor(store.device())?.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}
