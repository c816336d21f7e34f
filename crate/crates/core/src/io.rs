//! File formats.
//!
//! Tensor files (`.tns`, little-endian): magic `FTNS`, `u32` rank (1-4),
//! rank x `u32` extents, then product-of-extents `f32` payload. No padding,
//! no footer. Checkpoints are one `u32` record count followed by that many
//! back-to-back `.tns` records. Excitation maps are binary PGM (`P5`,
//! maxval 255).

use std::io::Write as _;
use std::path::Path;

use crate::error::{Result, SefcnError};
use crate::tensor::Tensor;

pub const TNS_MAGIC: [u8; 4] = *b"FTNS";

/// Streaming byte parser that tracks its absolute offset for error reports.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SefcnError::format(
                self.path,
                self.buf.len() as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn encode_tensor(t: &Tensor<f32>, out: &mut Vec<u8>) {
    out.extend_from_slice(&TNS_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_tensor(r: &mut Reader) -> Result<Tensor<f32>> {
    let magic_at = r.pos as u64;
    let magic = r.take(4, "magic")?;
    if magic != TNS_MAGIC {
        return Err(SefcnError::format(
            r.path,
            magic_at,
            format!("bad magic {magic:02x?}, expected \"FTNS\""),
        ));
    }
    let rank_at = r.pos as u64;
    let rank = r.u32("rank")? as usize;
    if !(1..=4).contains(&rank) {
        return Err(SefcnError::format(
            r.path,
            rank_at,
            format!("rank must be 1..=4, got {rank}"),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = r.pos as u64;
        let e = r.u32("extent")?;
        if e == 0 {
            return Err(SefcnError::format(
                r.path,
                at,
                format!("extent {i} is zero"),
            ));
        }
        shape.push(e as usize);
    }
    let len: usize = shape.iter().product();
    let payload = r.take(len * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    encode_tensor(t, &mut bytes);
    std::fs::write(path, &bytes).map_err(|e| SefcnError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let buf = std::fs::read(path).map_err(|e| SefcnError::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let t = decode_tensor(&mut r)?;
    if r.pos != buf.len() {
        return Err(SefcnError::format(
            path,
            r.pos as u64,
            format!("{} trailing bytes after payload", buf.len() - r.pos),
        ));
    }
    Ok(t)
}

/// Write a checkpoint: `u32` record count, then each tensor as a `.tns`
/// record. Record order is the network's stable state-visitation order.
pub fn write_checkpoint(tensors: &[Tensor<f32>], path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        encode_tensor(t, &mut bytes);
    }
    std::fs::write(path, &bytes).map_err(|e| SefcnError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Tensor<f32>>> {
    let buf = std::fs::read(path).map_err(|e| SefcnError::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let count = r.u32("record count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(decode_tensor(&mut r)?);
    }
    if r.pos != buf.len() {
        return Err(SefcnError::format(
            path,
            r.pos as u64,
            format!("{} trailing bytes after last record", buf.len() - r.pos),
        ));
    }
    Ok(tensors)
}

/// Map `[0, 1]` linearly to `[0, 255]` with round-half-to-even; values are
/// clamped into `[0, 1]` first.
pub fn pgm_byte(v: f32) -> u8 {
    let clamped = (v as f64).clamp(0.0, 1.0);
    (255.0 * clamped).round_ties_even() as u8
}

/// Write a rank-2 `(H, W)` map as a binary PGM (`P5`, maxval 255).
pub fn write_pgm(map: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| pgm_byte(v)));
    let mut f = std::fs::File::create(path).map_err(|e| SefcnError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| SefcnError::io(path, e))
}
