//! Binary checkpoints.
//!
//! Layout, little-endian: `b"SDZE"`, version `u32 = 1`, master seed `u64`,
//! step `u64`, layer count `u32`, then per layer `rows u32`, `cols u32` and
//! `rows·cols` `f64` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, SdzeError};
use crate::jets::Activation;
use crate::net::MlpParams;

const MAGIC: &[u8; 4] = b"SDZE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub layers: Vec<Array2<f64>>,
}

impl Checkpoint {
    pub fn into_params(self, activation: Activation, biased: bool) -> Result<MlpParams> {
        MlpParams::from_layers(self.layers, activation, biased)
    }
}

pub fn encode_checkpoint(params: &MlpParams, step: u64, seed: u64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(28 + 8 * params.param_count() + 8 * params.depth());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&(params.depth() as u32).to_le_bytes());
    for w in &params.layers {
        buf.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
        for v in w.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(SdzeError::Checkpoint(format!(
                "truncated while reading {what} at byte {} (file has {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SdzeError::Checkpoint("bad magic bytes, not an SDZE checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SdzeError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024) as usize);
    for l in 0..count {
        let rows = r.u32(&format!("layer {l} rows"))? as usize;
        let cols = r.u32(&format!("layer {l} cols"))? as usize;
        let raw = r.take(rows * cols * 8, &format!("layer {l} values"))?;
        let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        layers.push(Array2::from_shape_vec((rows, cols), vals).expect("rows x cols values"));
    }
    if r.pos != bytes.len() {
        return Err(SdzeError::Checkpoint(format!("{} trailing bytes after last layer", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { seed, step, layers })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, params: &MlpParams, step: u64, seed: u64) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode_checkpoint(params, step, seed))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SdzeError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> MlpParams {
        MlpParams::init(3, 5, &[4], Activation::Sin, true).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = params();
        let ck = decode_checkpoint(&encode_checkpoint(&p, 17, 99)).unwrap();
        assert_eq!((ck.seed, ck.step), (99, 17));
        let q = ck.into_params(Activation::Sin, true).unwrap();
        let bits = |m: &MlpParams| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn header_layout() {
        let b = encode_checkpoint(&params(), 2, 1);
        assert_eq!(&b[..4], b"SDZE");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[28..32].try_into().unwrap()), 6);
    }

    #[test]
    fn corrupted_magic() {
        let mut b = encode_checkpoint(&params(), 0, 0);
        b[0] = b'X';
        assert!(decode_checkpoint(&b).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch() {
        let mut b = encode_checkpoint(&params(), 0, 0);
        b[4] = 2;
        assert!(decode_checkpoint(&b).unwrap_err().to_string().contains("version 2"));
    }

    #[test]
    fn truncated_and_trailing() {
        let b = encode_checkpoint(&params(), 0, 0);
        assert!(decode_checkpoint(&b[..b.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut longer = b.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer).unwrap_err().to_string().contains("trailing"));
    }
}
