//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "SVKT"
//! version  u32
//! stage    u8
//! step     u64
//! rng      32-byte seed, u64 stream, u128 word position
//! config   u32 length + utf-8 bytes (effective key=value echo)
//! params   u32 count, then per parameter:
//!          u32 name length + utf-8 name
//!          u8  trainable flag
//!          u32 ndim + u64 dims
//!          f64 payload, row-major
//! ```
//!
//! Serialization is a pure function of its inputs, so save -> load -> save
//! reproduces identical bytes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::CurriculumStage;
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SVKT";
pub const VERSION: u32 = 1;

/// Complete state of a ChaCha stream, enough to resume draws exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub stage: CurriculumStage,
    pub step: u64,
    pub rng: RngState,
    pub config_echo: String,
    pub params: Vec<(String, bool, Tensor)>,
}

impl Checkpoint {
    /// Overwrite `params` with the stored values and trainable flags. Every
    /// stored name must exist in the target and vice versa, with matching
    /// shapes.
    pub fn apply_to(&self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, trainable, value) in &self.params {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::ShapeMismatch(format!("checkpoint parameter {name} missing from model"))
            })?;
            if p.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: model shape {:?} vs checkpoint {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value.clone();
            p.trainable = *trainable;
        }
        Ok(())
    }
}

pub fn checkpoint_bytes(
    params: &ParamSet,
    stage: CurriculumStage,
    step: u64,
    rng: &RngState,
    config_echo: &str,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(stage.index());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&rng.seed);
    out.extend_from_slice(&rng.stream.to_le_bytes());
    out.extend_from_slice(&rng.word_pos.to_le_bytes());
    let cfg = config_echo.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.value.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    stage: CurriculumStage,
    step: u64,
    rng: &RngState,
    config_echo: &str,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, stage, step, rng, config_echo))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint truncated while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::CorruptHeader(format!(
            "bad magic {:?}",
            &bytes[..bytes.len().min(4)]
        )));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let stage = CurriculumStage::from_index(r.take(1, "stage")?[0])
        .map_err(|_| Error::CorruptHeader("invalid stage byte".into()))?;
    let step = r.u64("step")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
    let cfg_len = r.u32("config length")? as usize;
    let config_echo = String::from_utf8(r.take(cfg_len, "config echo")?.to_vec())
        .map_err(|_| Error::CorruptHeader("config echo is not utf-8".into()))?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::CorruptHeader("parameter name is not utf-8".into()))?;
        let trainable = r.take(1, "trainable flag")?[0] != 0;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, &format!("payload of {name}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, trainable, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        stage,
        step,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
        config_echo,
        params,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}
