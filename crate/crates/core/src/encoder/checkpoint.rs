//! Flat binary parameter files: magic, little-endian shape table, f64 payload.
//!
//! ```text
//! "S2S1" | u32 count | count × (u32 rank, rank × u64 dim) | f64 values, tensor order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2S1";

pub fn save_checkpoint(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
    }
    for t in tensors {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const K: usize>(&mut self) -> Result<[u8; K]> {
        let end = self.pos + K;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice has length K"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if &r.take::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let count = u32::from_le_bytes(r.take()?) as usize;
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = u32::from_le_bytes(r.take()?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(r.take()?) as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    let mut out = Vec::with_capacity(count);
    for shape in shapes {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| Ok(f64::from_le_bytes(r.take()?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}
