//! Versioned binary container of named `f32` tensors.
//!
//! ```text
//! "WKCK" | u32 version | u32 header_len | header (JSON, UTF-8)
//! u32 n_tensors | { u32 name_len | name | u32 rows | u32 cols | f32 LE … }*
//! ```
//!
//! All integers are little-endian. The JSON header carries the model
//! configuration and anything else the writer wants to round-trip.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use super::params::TextEncoderParams;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

const MAGIC: &[u8; 4] = b"WKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: Vec<(String, Mat<f32>)>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Mat<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Result<&Mat<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    /// Copies the named tensor into `dst`, checking the shape.
    pub fn load_into<T: Real>(&self, name: &str, dst: &mut Mat<T>) -> Result<()> {
        let t = self.get(name)?;
        if (t.rows(), t.cols()) != (dst.rows(), dst.cols()) {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored {}x{}, expected {}x{}",
                t.rows(),
                t.cols(),
                dst.rows(),
                dst.cols()
            )));
        }
        *dst = t.cast();
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u32).to_le_bytes())?;
            w.write_all(&(t.cols() as u32).to_le_bytes())?;
            for &x in t.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let magic = read_bytes(&mut r, 4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = read_u32(&mut r)? as usize;
        let header: Value = serde_json::from_slice(&read_bytes(&mut r, hlen)?)?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let raw = read_bytes(&mut r, rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Mat::from_vec(rows, cols, data)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

impl<T: Real> TextEncoderParams<T> {
    /// Appends every tensor as `{prefix}{name}`.
    pub fn push_to(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, t) in self.named() {
            ck.push(format!("{prefix}{name}"), t);
        }
    }

    /// Fills every tensor from `{prefix}{name}` entries.
    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, t) in self.named_mut() {
            ck.load_into(&format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textenc::TextEncoderConfig;
    use rand::SeedableRng;

    #[test]
    fn round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let cfg = TextEncoderConfig {
            n_layers: 1,
            n_heads: 2,
            width: 4,
            max_len: 6,
            vocab_size: 9,
        };
        let p = TextEncoderParams::<f32>::init(cfg, &mut rng).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({ "text": cfg }));
        p.push_to(&mut ck, "text.");
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut q = TextEncoderParams::<f32>::zeros(cfg);
        q.load_from(&back, "text.").unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let ck = Checkpoint::new(serde_json::json!({}));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::read_from(bad.as_slice()),
            Err(Error::Version { .. })
        ));
        assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
