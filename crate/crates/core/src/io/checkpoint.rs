//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian):
//! `"FLPR"`, version `u8`, config text (`u32` length + UTF-8), step `u64`,
//! actnorm-initialized `u8`, parameter count `u32`, then per parameter:
//! name (`u16` length + UTF-8), rank `u8`, dims (`u32` each), values (`f64`).
//! Finally an Adam flag `u8`; when set: `t: u64`, learning rate, beta1,
//! beta2, eps (`f64`), then first and second moments of every parameter in
//! store order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"FLPR";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub model: FlowModel,
    pub adam: Option<Adam>,
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let text = ck.config.print();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.push(ck.model.is_initialized() as u8);
    out.extend_from_slice(&(ck.model.params.len() as u32).to_le_bytes());
    for p in ck.model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, &p.value);
    }
    match &ck.adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.t.to_le_bytes());
            for v in [a.learning_rate, a.beta1, a.beta2, a.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for t in a.m.iter().chain(&a.v) {
                put_f64s(&mut out, t);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse {
                offset: self.pos,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Parse {
            offset: at,
            detail: format!("{what} is not UTF-8"),
        })
    }

    fn f64s(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.saturating_mul(8), what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}, expected {VERSION}"),
        });
    }
    let len = r.u32("config length")? as usize;
    let config = TrainConfig::parse(r.str(len, "config")?)?;
    let step = r.u64("step")?;
    let initialized = r.u8("init flag")? != 0;
    let mut model = FlowModel::new(config.flow.clone(), config.seed)?;
    let count = r.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, config implies {}",
            model.params.len()
        )));
    }
    for i in 0..count {
        let at = r.pos;
        let name_len = r.u16("parameter name length")? as usize;
        let name = r.str(name_len, "parameter name")?.to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let value = r.f64s(&shape, "parameter values")?;
        let id = model.params.find(&name).ok_or_else(|| Error::Parse {
            offset: at,
            detail: format!("unknown parameter '{name}'"),
        })?;
        if id.index() != i {
            return Err(Error::Parse {
                offset: at,
                detail: format!("parameter '{name}' out of order"),
            });
        }
        model.params.set(id, value)?;
    }
    model.set_initialized(initialized);
    let adam = match r.u8("adam flag")? {
        0 => None,
        _ => {
            let t = r.u64("adam step")?;
            let mut a = Adam::new(r.f64("learning rate")?, model.params.iter().map(|p| p.value.shape()));
            a.t = t;
            a.beta1 = r.f64("beta1")?;
            a.beta2 = r.f64("beta2")?;
            a.eps = r.f64("eps")?;
            for k in 0..2 * model.params.len() {
                let slot = if k < model.params.len() {
                    &mut a.m[k]
                } else {
                    &mut a.v[k - model.params.len()]
                };
                *slot = r.f64s(slot.shape(), "adam moments")?;
            }
            Some(a)
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        config,
        step,
        model,
        adam,
    })
}

/// Written to a sibling temporary file first, then renamed into place.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(ck)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
