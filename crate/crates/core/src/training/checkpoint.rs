//! `APLC` checkpoints.
//!
//! ```text
//! "APLC" | version u32 | step u64 | config_len u32 | config (TOML)
//! | param_count u32 | params | slot_count u32 | slots
//! | rng seed [u8; 32] | rng stream u64 | rng word_pos u128
//! tensor: name_len u32 | name | rank u32 | dims u32[rank] | f64 data
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelState, Result, TrainConfig, TrainError};
use crate::parts::QueryBank;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"APLC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_checkpoint(state: &ModelState, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let config = toml::to_string(cfg).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    let params = state.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        put_tensor(&mut buf, name, t);
    }
    buf.extend_from_slice(&(state.slots.len() as u32).to_le_bytes());
    for (name, t) in &state.slots {
        put_tensor(&mut buf, name, t);
    }
    buf.extend_from_slice(&state.rng.get_seed());
    buf.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, state: &ModelState, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, write_checkpoint(state, cfg)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::Checkpoint(format!(
                "truncated at byte {}: need {n} more bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| {
            TrainError::Checkpoint(format!("non-UTF-8 tensor name at byte {}", self.pos))
        })?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()?;
        (0..count).map(|_| self.tensor()).collect()
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelState, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad magic {:?}, expected \"APLC\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let step = r.u64()?;
    let len = r.u32()? as usize;
    let text =
        std::str::from_utf8(r.take(len)?).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let cfg: TrainConfig =
        toml::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut params = r.tensors()?;
    let slots = r.tensors()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    if r.pos != bytes.len() {
        return Err(TrainError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut take = |name: &str| {
        params
            .remove(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing parameter {name}")))
    };
    let bank = QueryBank {
        queries: take("queries")?,
        prior_proj_q: take("prior_proj_q")?,
        prior_proj_k: take("prior_proj_k")?,
        prior_proj_v: take("prior_proj_v")?,
        assign_proj_q: take("assign_proj_q")?,
        assign_proj_k: take("assign_proj_k")?,
        gumbel_tau: cfg.gumbel_tau,
        prior_threshold_rho: cfg.rho,
        prior_mode: cfg.prior_mode,
    };
    bank.validate().map_err(TrainError::Checkpoint)?;
    let projector = take("projector")?;
    let classifier = take("classifier")?;
    let adapter = params.remove("adapter");
    if let Some(extra) = params.keys().next() {
        return Err(TrainError::Checkpoint(format!("unknown parameter {extra}")));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let state = ModelState {
        bank,
        projector,
        classifier,
        adapter,
        slots,
        step,
        rng,
    };
    for (name, t) in state.params() {
        match state.slots.get(name) {
            Some(s) if s.shape() == t.shape() => {}
            _ => {
                return Err(TrainError::Checkpoint(format!(
                    "missing or misshapen slot for {name}"
                )))
            }
        }
    }
    Ok((state, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, TrainConfig)> {
    read_checkpoint(&std::fs::read(path)?)
}
