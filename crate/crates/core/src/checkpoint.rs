//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "LSUMCKPT"
//! version        u32      1
//! config         u32 × 9  vocab_size d_model heads encoder_layers decoder_layers
//!                         d_ff max_input_len max_summary_len window
//!                u32      number of extra globals, then that many u32
//! tensors        u32      count
//!   per tensor   u32      rank, then rank × u32 dims, then numel × f32
//! ```
//!
//! Tensors appear in parameter declaration order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LSUMCKPT";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(buf, t.shape().len())?;
    for &d in t.shape() {
        put_u32(buf, d)?;
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.vocab_size,
        c.d_model,
        c.heads,
        c.encoder_layers,
        c.decoder_layers,
        c.d_ff,
        c.max_input_len,
        c.max_summary_len,
        c.window,
        c.extra_globals.len(),
    ] {
        put_u32(&mut buf, v)?;
    }
    for &g in &c.extra_globals {
        put_u32(&mut buf, g)?;
    }
    put_u32(&mut buf, model.params().len())?;
    for p in model.params() {
        put_tensor(&mut buf, &p.tensor)?;
    }
    Ok(buf)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let rank = self.u32()?;
        if rank == 0 || rank > 8 {
            return Err(format!("implausible tensor rank {rank}"));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let raw = self.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut fields = [0usize; 10];
    for f in fields.iter_mut() {
        *f = r.u32()?;
    }
    let extra_globals = (0..fields[9]).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        vocab_size: fields[0],
        d_model: fields[1],
        heads: fields[2],
        encoder_layers: fields[3],
        decoder_layers: fields[4],
        d_ff: fields[5],
        max_input_len: fields[6],
        max_summary_len: fields[7],
        window: fields[8],
        extra_globals,
    };
    let mut model = Model::new(config, 0).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let tensors = (0..count).map(|_| r.tensor()).collect::<std::result::Result<Vec<_>, _>>()?;
    if !r.finished() {
        return Err("trailing bytes after last tensor".into());
    }
    model.load_tensors(tensors).map_err(|e| e.to_string())?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}
