//! `MMCK` checkpoints: magic, u32 version, u32 entry count, then per entry a
//! u16 name length, the UTF-8 name and an `.mmt` tensor. All integers are
//! little-endian.
//!
//! Besides parameters and batch-norm buffers two reserved entries are
//! written: `__config__` holds the training configuration text as one f32
//! per UTF-8 byte and `__step__` holds the step counter as a one-element
//! tensor. Entries appear in name order.

use std::path::Path;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::ndtensor::{mmt, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;
const CONFIG_KEY: &str = "__config__";
const STEP_KEY: &str = "__step__";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    /// Parameters and batch-norm running statistics, f32-representable.
    pub params: ParamStore,
    pub config: TrainConfig,
    pub step: u64,
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.config.to_text();
        let cfg_t = Tensor::new(vec![cfg.len().max(1)], {
            let mut v: Vec<f64> = cfg.bytes().map(f64::from).collect();
            if v.is_empty() {
                v.push(0.0);
            }
            v
        })?;
        if self.step > 1 << 24 {
            return Err(Error::InvalidConfig(format!("step {} not representable in a checkpoint", self.step)));
        }
        let step_t = Tensor::new(vec![1], vec![self.step as f64])?;
        let mut entries: Vec<(&str, &Tensor)> = self.params.iter().map(|(k, t)| (k.as_str(), t)).collect();
        entries.push((CONFIG_KEY, &cfg_t));
        entries.push((STEP_KEY, &step_t));
        entries.sort_by(|a, b| a.0.cmp(b.0));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::InvalidConfig(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            mmt::encode(t, &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::BadFormat(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing MMCK header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let mut pos = 12;
        let mut params = ParamStore::new();
        let mut config = None;
        let mut step = None;
        for _ in 0..count {
            if pos + 2 > bytes.len() {
                return Err(bad("truncated entry"));
            }
            let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
            pos += 2;
            let name = bytes
                .get(pos..pos + len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| bad("bad entry name"))?
                .to_string();
            pos += len;
            let (t, used) = mmt::decode(&bytes[pos..])?;
            pos += used;
            match name.as_str() {
                CONFIG_KEY => {
                    let text: Vec<u8> = t.data().iter().map(|&b| b as u8).filter(|&b| b != 0).collect();
                    let text = String::from_utf8(text).map_err(|_| bad("config is not UTF-8"))?;
                    config = Some(TrainConfig::from_text(&text)?);
                }
                STEP_KEY => step = Some(t.data()[0] as u64),
                _ => {
                    let trainable = !is_buffer(&name);
                    params.insert(name, t.with_requires_grad(trainable))?;
                }
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            version,
            params,
            config: config.ok_or_else(|| bad("missing config entry"))?,
            step: step.ok_or_else(|| bad("missing step entry"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// One line per entry: name, shape, parameter count.
    pub fn describe(&self) -> String {
        let mut s = format!("version={} step={} entries={}\n", self.version, self.step, self.params.len());
        let mut total = 0;
        for (name, t) in self.params.iter() {
            total += t.numel();
            s.push_str(&format!(
                "{name} shape={:?} numel={} {}\n",
                t.shape(),
                t.numel(),
                if t.requires_grad() { "param" } else { "buffer" }
            ));
        }
        s.push_str(&format!("total_values={total}\n"));
        s.push_str(&self.config.to_text());
        s
    }
}
