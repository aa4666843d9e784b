//! Binary checkpoint format.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! "PSDP1"
//! u8 variant (0 stacked, 1 psdp)
//! u64 × 8  embed, heads, head_size, hidden, ffn, layers, max_seq_len, vocab
//! tensors  model parameters in declared order
//! f64 × 4  lr, beta1, beta2, epsilon
//! u64      optimizer step
//! tensors  first moments
//! tensors  second moments
//! u64      global step
//! u64      seed
//! u64      checksum: first 8 bytes of SHA-256 over everything above
//! ```
//!
//! A `tensors` block is a `u32` count followed by, per tensor, a `u32` rank,
//! `rank` `u64` dims and the elements as `f32`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PSDP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("checkpoint truncated or malformed at byte {0}")]
    Truncated(usize),
    #[error("checkpoint does not match its config: {0}")]
    ConfigShape(#[from] ModelError),
    #[error("optimizer state does not match parameters: {0}")]
    OptimizerShape(String),
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointSize {
    pub file_bytes: u64,
    pub parameter_bytes: u64,
}

impl Checkpoint {
    /// Fresh model and zeroed optimizer state.
    pub fn init(config: ModelConfig, adam: AdamConfig, seed: u64) -> Result<Self, ModelError> {
        let model = Model::init(config, seed)?;
        let optimizer = AdamState::new(adam, model.params().leaves());
        Ok(Self {
            model,
            optimizer,
            step: 0,
            seed,
        })
    }

    pub fn parameter_bytes(&self) -> u64 {
        self.model.num_parameters() as u64 * 4
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<'a>(buf: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = &'a Tensor>) {
    put_u32(buf, tensors.len() as u32);
    for t in tensors {
        put_u32(buf, t.rank() as u32);
        for &d in t.shape() {
            put_u64(buf, d as u64);
        }
        buf.reserve(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = ckpt.model.config();
    let mut buf = Vec::with_capacity(ckpt.model.num_parameters() * 4 * 3 + 256);
    buf.extend_from_slice(MAGIC);
    buf.push(match cfg.variant {
        Variant::StackedBaseline => 0,
        Variant::Psdp => 1,
    });
    for v in [
        cfg.embed_size,
        cfg.num_heads,
        cfg.head_size,
        cfg.hidden_size,
        cfg.ffn_size,
        cfg.num_layers,
        cfg.max_seq_len,
        cfg.vocab_size,
    ] {
        put_u64(&mut buf, v as u64);
    }
    put_tensors(&mut buf, ckpt.model.params().leaves().into_iter());
    let opt = &ckpt.optimizer;
    for v in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.epsilon] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(&mut buf, opt.step);
    put_tensors(&mut buf, opt.m.iter());
    put_tensors(&mut buf, opt.v.iter());
    put_u64(&mut buf, ckpt.step);
    put_u64(&mut buf, ckpt.seed);
    let sum = checksum(&buf);
    put_u64(&mut buf, sum);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let at = self.pos;
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated(at))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>, CheckpointError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = self.pos;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated(at))?;
            let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(at))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            out.push(Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated(at))?);
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let variant = match r.u8()? {
        0 => Variant::StackedBaseline,
        1 => Variant::Psdp,
        _ => return Err(CheckpointError::Truncated(MAGIC.len())),
    };
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let config = ModelConfig {
        embed_size: dims[0],
        num_heads: dims[1],
        head_size: dims[2],
        hidden_size: dims[3],
        ffn_size: dims[4],
        num_layers: dims[5],
        max_seq_len: dims[6],
        vocab_size: dims[7],
        variant,
    };
    let params = r.tensors()?;
    let model = Model::from_tensors(config, params)?;
    let adam = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let opt_step = r.u64()?;
    let m = r.tensors()?;
    let v = r.tensors()?;
    let leaves = model.params().leaves();
    for moments in [&m, &v] {
        if moments.len() != leaves.len()
            || moments.iter().zip(&leaves).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(CheckpointError::OptimizerShape(format!(
                "{} moment tensors for {} parameters",
                moments.len(),
                leaves.len()
            )));
        }
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated(r.pos));
    }
    Ok(Checkpoint {
        model,
        optimizer: AdamState {
            config: adam,
            step: opt_step,
            m,
            v,
        },
        step,
        seed,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<CheckpointSize, CheckpointError> {
    let path = path.as_ref();
    let bytes = encode(ckpt);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(CheckpointSize {
        file_bytes: bytes.len() as u64,
        parameter_bytes: ckpt.parameter_bytes(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
