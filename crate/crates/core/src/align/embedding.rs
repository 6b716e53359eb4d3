use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Image,
    Text,
}

/// Per-token features of one image or one caption.
///
/// For images with a grid, rows `[0, H·W)` are the spatial tokens in
/// row-major order; an extra row at index `H·W`, when present, is the
/// `[CLS]` token. For text, row 0 is `[CLS]` and the last unmasked row is
/// `[SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<T> {
    pub data: Mat<T>,
    pub grid: Option<(usize, usize)>,
    pub mask: Vec<u8>,
    pub kind: EmbeddingKind,
}

impl<T: Real> EmbeddingSet<T> {
    pub fn new(
        data: Mat<T>,
        grid: Option<(usize, usize)>,
        mask: Vec<u8>,
        kind: EmbeddingKind,
    ) -> Result<Self> {
        if mask.len() != data.rows() {
            return Err(Error::Shape(format!(
                "mask length {} != {} tokens",
                mask.len(),
                data.rows()
            )));
        }
        if let Some((h, w)) = grid {
            if h * w > data.rows() {
                return Err(Error::Shape(format!(
                    "grid {h}x{w} exceeds {} tokens",
                    data.rows()
                )));
            }
        }
        Ok(Self {
            data,
            grid,
            mask,
            kind,
        })
    }

    /// All rows unmasked, no grid.
    pub fn dense(data: Mat<T>, kind: EmbeddingKind) -> Self {
        let mask = vec![1; data.rows()];
        Self {
            data,
            grid: None,
            mask,
            kind,
        }
    }

    pub fn image_grid(data: Mat<T>, h: usize, w: usize) -> Result<Self> {
        let mask = vec![1; data.rows()];
        Self::new(data, Some((h, w)), mask, EmbeddingKind::Image)
    }

    pub fn n_tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn unmasked(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i] != 0).collect()
    }

    /// Text rows eligible for token-wise matching: unmasked rows minus the
    /// leading `[CLS]` and the trailing `[SEP]`.
    pub fn content_rows(&self) -> Vec<usize> {
        let mut rows = self.unmasked();
        if rows.first() == Some(&0) {
            rows.remove(0);
        }
        rows.pop();
        rows
    }

    pub fn spatial_len(&self) -> usize {
        self.grid.map_or(0, |(h, w)| h * w)
    }

    /// Row index of the image `[CLS]` token, if the set carries one.
    pub fn cls_row(&self) -> Option<usize> {
        let (h, w) = self.grid?;
        let i = h * w;
        (i < self.n_tokens() && self.mask[i] != 0).then_some(i)
    }

    /// Raw (pre-projection) global image feature: the `[CLS]` row when
    /// present, otherwise the mean of the unmasked spatial tokens (or of all
    /// unmasked rows when there is no grid).
    pub fn image_global(&self) -> Result<Vec<T>> {
        if let Some(i) = self.cls_row() {
            return Ok(self.data.row(i).to_vec());
        }
        let rows: Vec<usize> = match self.grid {
            Some((h, w)) => (0..h * w).filter(|&i| self.mask[i] != 0).collect(),
            None => self.unmasked(),
        };
        if rows.is_empty() {
            return Err(Error::Shape("image has no unmasked tokens".into()));
        }
        let mut acc = vec![T::zero(); self.dim()];
        for &r in &rows {
            for (a, &x) in acc.iter_mut().zip(self.data.row(r)) {
                *a = *a + x;
            }
        }
        let n = T::from_usize(rows.len()).unwrap();
        acc.iter_mut().for_each(|a| *a = *a / n);
        Ok(acc)
    }
}

const MAGIC: &[u8; 4] = b"WKEB";
pub const WKEB_VERSION: u32 = 1;

/// A batch of equally-shaped embedding sets in the binary `WKEB` layout:
/// magic, u32 version, u32 {n_items, n_tokens, d, H, W}, then
/// `n_items·n_tokens·d` little-endian f32 values, then `n_items·n_tokens`
/// mask bytes. `H = W = 0` means no grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub n_items: usize,
    pub n_tokens: usize,
    pub dim: usize,
    pub grid: Option<(usize, usize)>,
    pub data: Vec<f32>,
    pub mask: Vec<u8>,
}

impl EmbeddingFile {
    pub fn from_sets(sets: &[EmbeddingSet<f32>]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::EmbeddingFormat("no embedding sets".into()))?;
        let (n_tokens, dim, grid) = (first.n_tokens(), first.dim(), first.grid);
        let mut data = Vec::with_capacity(sets.len() * n_tokens * dim);
        let mut mask = Vec::with_capacity(sets.len() * n_tokens);
        for (i, s) in sets.iter().enumerate() {
            if s.n_tokens() != n_tokens || s.dim() != dim || s.grid != grid {
                return Err(Error::Shape(format!("set {i} differs in shape from set 0")));
            }
            data.extend_from_slice(s.data.as_slice());
            mask.extend_from_slice(&s.mask);
        }
        Ok(Self {
            n_items: sets.len(),
            n_tokens,
            dim,
            grid,
            data,
            mask,
        })
    }

    pub fn item(&self, i: usize, kind: EmbeddingKind) -> EmbeddingSet<f32> {
        let stride = self.n_tokens * self.dim;
        let data = Mat::from_vec(
            self.n_tokens,
            self.dim,
            self.data[i * stride..(i + 1) * stride].to_vec(),
        );
        let mask = self.mask[i * self.n_tokens..(i + 1) * self.n_tokens].to_vec();
        EmbeddingSet {
            data,
            grid: self.grid,
            mask,
            kind,
        }
    }

    pub fn items(&self, kind: EmbeddingKind) -> Vec<EmbeddingSet<f32>> {
        (0..self.n_items).map(|i| self.item(i, kind)).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (h, wd) = self.grid.unwrap_or((0, 0));
        w.write_all(MAGIC)?;
        for v in [
            WKEB_VERSION,
            u32_of(self.n_items)?,
            u32_of(self.n_tokens)?,
            u32_of(self.dim)?,
            u32_of(h)?,
            u32_of(wd)?,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.write_all(&self.mask)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::EmbeddingFormat("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::EmbeddingFormat(format!("bad magic {magic:?}")));
        }
        let mut header = [0u32; 6];
        for h in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::EmbeddingFormat("truncated header".into()))?;
            *h = u32::from_le_bytes(b);
        }
        let [version, n_items, n_tokens, dim, h, w] = header.map(|v| v as usize);
        if version as u32 != WKEB_VERSION {
            return Err(Error::Version {
                what: "WKEB",
                found: version as u32,
                expected: WKEB_VERSION,
            });
        }
        if (h == 0) != (w == 0) {
            return Err(Error::EmbeddingFormat(format!("grid {h}x{w} is half-empty")));
        }
        if h * w > n_tokens {
            return Err(Error::EmbeddingFormat(format!(
                "grid {h}x{w} exceeds {n_tokens} tokens"
            )));
        }
        let n_vals = n_items
            .checked_mul(n_tokens)
            .and_then(|x| x.checked_mul(dim))
            .ok_or_else(|| Error::EmbeddingFormat("dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n_vals * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::EmbeddingFormat("truncated payload".into()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut mask = vec![0u8; n_items * n_tokens];
        r.read_exact(&mut mask)
            .map_err(|_| Error::EmbeddingFormat("truncated mask".into()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::EmbeddingFormat(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(Self {
            n_items,
            n_tokens,
            dim,
            grid: (h > 0).then_some((h, w)),
            data,
            mask,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn u32_of(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::EmbeddingFormat(format!("{x} does not fit in u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingFile {
        let a = EmbeddingSet::image_grid(
            Mat::from_vec(5, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]),
            2,
            2,
        )
        .unwrap();
        let mut b = a.clone();
        b.mask[4] = 0;
        EmbeddingFile::from_sets(&[a, b]).unwrap()
    }

    #[test]
    fn byte_layout() {
        let f = sample();
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"WKEB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 4 + 24 + 2 * 5 * 2 * 4 + 2 * 5);
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 10..], &[1, 1, 1, 1, 1, 1, 1, 1, 1, 0]);
        assert_eq!(EmbeddingFile::read_from(&bytes[..]).unwrap(), f);
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            EmbeddingFile::read_from(&v2[..]),
            Err(Error::Version { found: 2, .. })
        ));
        assert!(EmbeddingFile::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingFile::read_from(&bad[..]),
            Err(Error::EmbeddingFormat(_))
        ));
    }

    #[test]
    fn global_feature_rules() {
        let f = sample();
        let with_cls = f.item(0, EmbeddingKind::Image);
        assert_eq!(with_cls.image_global().unwrap(), vec![9.0, 10.0]);
        let no_cls = f.item(1, EmbeddingKind::Image);
        assert_eq!(no_cls.image_global().unwrap(), vec![4.0, 5.0]);
    }

    #[test]
    fn text_content_rows_drop_cls_and_sep() {
        let s = EmbeddingSet::new(
            Mat::<f64>::zeros(6, 2),
            None,
            vec![1, 1, 1, 1, 0, 0],
            EmbeddingKind::Text,
        )
        .unwrap();
        assert_eq!(s.content_rows(), vec![1, 2]);
    }
}
