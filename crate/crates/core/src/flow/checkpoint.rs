//! Binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "ICONFLOW"
//! version    u32      1
//! K, N       u32, u32
//! width      u32
//! n_blocks   u32
//! perms      n_blocks × K × u32
//! n_segments u32
//! segment    u32 name length, name bytes (UTF-8), u64 offset, u64 rows, u64 cols
//! n_values   u64
//! values     n_values × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamVector, Segment};
use crate::error::{IconError, Result};

use super::{FlowArch, FlowParams};

const MAGIC: &[u8; 8] = b"ICONFLOW";
const VERSION: u32 = 1;

fn bad(path: &Path, message: impl Into<String>) -> IconError {
    IconError::Ingestion {
        record: path.display().to_string(),
        message: message.into(),
    }
}

pub fn write_checkpoint(flow: &FlowParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + flow.params.len() * 8);
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        flow.arch.k as u32,
        flow.arch.n as u32,
        flow.arch.width as u32,
        flow.arch.n_blocks() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in flow.arch.permutations() {
        for &i in p {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    let layout = flow.params.layout();
    buf.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for s in layout {
        buf.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.name.as_bytes());
        for v in [s.offset, s.rows, s.cols] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(flow.params.len() as u64).to_le_bytes());
    for v in flow.params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(bad(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<FlowParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if c.take(8)? != MAGIC {
        return Err(bad(path, "not a flow checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(bad(path, format!("unsupported checkpoint version {version}")));
    }
    let (k, n, width, n_blocks) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    if k.checked_mul(n_blocks).is_none_or(|total| total * 4 > bytes.len()) {
        return Err(bad(path, "header dimensions exceed file size"));
    }
    let mut perms = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        perms.push((0..k).map(|_| c.u32()).collect::<Result<Vec<_>>>()?);
    }
    let n_segments = c.u32()?;
    let mut layout = Vec::new();
    for _ in 0..n_segments {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| bad(path, "segment name is not UTF-8"))?;
        layout.push(Segment {
            name,
            offset: c.u64()?,
            rows: c.u64()?,
            cols: c.u64()?,
        });
    }
    let n_values = c.u64()?;
    if n_values.checked_mul(8).is_none_or(|b| c.pos + b != bytes.len()) {
        return Err(bad(path, "value count does not match file size"));
    }
    let values = (0..n_values).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let arch = FlowArch::new(k, n, width, perms).map_err(|e| bad(path, e.to_string()))?;
    let params = ParamVector::from_parts(layout, values).map_err(|e| bad(path, e.to_string()))?;
    if params.layout() != arch.layout()?.layout() {
        return Err(bad(path, "parameter layout does not match the architecture"));
    }
    params.ensure_finite()?;
    Ok(FlowParams { arch, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::init_flow;
    use crate::numerics::RngStream;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut rng = RngStream::new(3, 1);
        let mut f = init_flow(5, 3, 3, 7, &mut rng).unwrap();
        for v in f.params.values_mut() {
            *v += rng.normal() * 1e-3;
        }
        write_checkpoint(&f, &path).unwrap();
        let g = read_checkpoint(&path).unwrap();
        assert_eq!(f, g);
        let bits = |p: &FlowParams| p.params.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&f), bits(&g));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let f = init_flow(4, 2, 2, 3, &mut RngStream::new(0, 0)).unwrap();
        write_checkpoint(&f, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(IconError::Ingestion { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(IconError::Ingestion { .. })));
    }
}
