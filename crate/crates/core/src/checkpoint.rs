//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SCNETCKP" | u32 version | u32 header_len | header (JSON)
//! u32 tensor_count
//! per tensor: u16 len + group utf8 | u16 len + name utf8 | u8 kind
//!             | u8 ndim | ndim * u32 dims | f32 data
//! u8 has_train_state
//! [train state: u64 iteration | f32 lr, beta1, beta2, eps | u64 adam_step
//!  | f32 data of m then v for every tensor | f64 best_value | u64 best_step]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use scenenet_tensor::{Adam, ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BranchedModel, NetworkConfig, Task};

pub const MAGIC: &[u8; 8] = b"SCNETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tasks: Vec<Task>,
    network: NetworkConfig,
    metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub adam: Adam,
    /// Best validation score seen so far (NaN when none).
    pub best_value: f64,
    pub best_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tasks: Vec<Task>,
    pub network: NetworkConfig,
    pub metadata: BTreeMap<String, String>,
    pub store: ParamStore,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model(model: &BranchedModel) -> Self {
        Self {
            tasks: model.tasks(),
            network: model.config.clone(),
            metadata: BTreeMap::new(),
            store: model.store.clone(),
            train_state: None,
        }
    }

    /// Rebuilds the model topology and fills it with the stored values.
    pub fn to_model(&self) -> Result<BranchedModel> {
        let mut model = crate::network::build_model_for_tasks(&self.network, &self.tasks, 0)?;
        if model.store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.store.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let (src, dst) = (self.store.entry(id), model.store.entry(id));
            if src.group != dst.group || src.name != dst.name || src.value.shape() != dst.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}/{} does not match model tensor {}/{}",
                    src.group, src.name, dst.group, dst.name
                )));
            }
            *model.store.get_mut(id) = src.value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            tasks: self.tasks.clone(),
            network: self.network.clone(),
            metadata: self.metadata.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, self.store.len() as u32);
        for e in self.store.entries() {
            put_str(&mut out, &e.group)?;
            put_str(&mut out, &e.name)?;
            out.push(e.kind.code());
            out.push(e.value.shape().len() as u8);
            for &d in e.value.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, e.value.data());
        }
        match &self.train_state {
            None => out.push(0),
            Some(ts) => {
                out.push(1);
                out.extend_from_slice(&ts.iteration.to_le_bytes());
                for v in [ts.adam.lr, ts.adam.beta1, ts.adam.beta2, ts.adam.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&ts.adam.step.to_le_bytes());
                if ts.adam.m.len() != self.store.len() || ts.adam.v.len() != self.store.len() {
                    return Err(Error::Checkpoint("optimizer moments do not match the store".into()));
                }
                for t in ts.adam.m.iter().chain(&ts.adam.v) {
                    put_f32s(&mut out, t.data());
                }
                out.extend_from_slice(&ts.best_value.to_le_bytes());
                out.extend_from_slice(&ts.best_step.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let group = r.string()?;
            let name = r.string()?;
            let code = r.u8()?;
            let kind = ParamKind::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor kind {code}")))?;
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let data = r.f32s(shape.iter().product())?;
            store.add(&group, &name, kind, Tensor::from_vec(&shape, data));
        }
        let train_state = match r.u8()? {
            0 => None,
            1 => {
                let iteration = r.u64()?;
                let lr = r.f32()?;
                let beta1 = r.f32()?;
                let beta2 = r.f32()?;
                let eps = r.f32()?;
                let step = r.u64()?;
                let mut moments = Vec::with_capacity(2 * store.len());
                for _ in 0..2 {
                    for e in store.entries() {
                        let data = r.f32s(e.value.numel())?;
                        moments.push(Tensor::from_vec(e.value.shape(), data));
                    }
                }
                let v = moments.split_off(store.len());
                let best_value = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let best_step = r.u64()?;
                Some(TrainState {
                    iteration,
                    adam: Adam {
                        lr,
                        beta1,
                        beta2,
                        eps,
                        step,
                        m: moments,
                        v,
                    },
                    best_value,
                    best_step,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad train-state flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            tasks: header.tasks,
            network: header.network,
            metadata: header.metadata,
            store,
            train_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Checkpoint(format!("name too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
