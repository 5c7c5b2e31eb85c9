//! Dense f32 tensors and the `weights.bin` container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic   "RWZW"
//! version u32 = 1
//! count   u32
//! count × {
//!     name_len u32, name utf-8 bytes,
//!     dtype u8 (0 = f32), rank u8, dims rank × u64,
//!     data prod(dims) × f32
//! }
//! ```

use indexmap::IndexMap;
use thiserror::Error;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RWZW";
pub const WEIGHTS_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WeightsError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated weights file")]
    TruncatedFile,
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("malformed weights file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, WeightsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(WeightsError::Malformed(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Named tensors in a stable order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightsFile {
    tensors: IndexMap<String, Tensor>,
}

impl WeightsFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), WeightsError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(WeightsError::Malformed(format!("duplicate tensor {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

pub fn serialize_weights(w: &WeightsFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    for (name, t) in w.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        if self.buf.len() < n {
            return Err(WeightsError::TruncatedFile);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<WeightsFile, WeightsError> {
    let mut r = Reader { buf: bytes };
    if bytes.len() < 4 {
        return Err(if WEIGHTS_MAGIC.starts_with(bytes) {
            WeightsError::TruncatedFile
        } else {
            WeightsError::BadMagic
        });
    }
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut w = WeightsFile::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| WeightsError::Malformed("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(WeightsError::UnsupportedDtype(dtype));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| WeightsError::TruncatedFile)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(WeightsError::TruncatedFile)?;
        let raw = r.take(numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        w.insert(name, Tensor { shape, data })?;
    }
    if !r.buf.is_empty() {
        return Err(WeightsError::Malformed(format!(
            "{} trailing bytes",
            r.buf.len()
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: [u8; 35] = [
        0x52, 0x57, 0x5A, 0x57, // magic
        0x01, 0x00, 0x00, 0x00, // version
        0x01, 0x00, 0x00, 0x00, // count
        0x01, 0x00, 0x00, 0x00, 0x62, // name "b"
        0x00, 0x01, // dtype, rank
        0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, // dim
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3F, // 0.0, 1.0
    ];

    #[test]
    fn golden_single_tensor() {
        let mut w = WeightsFile::new();
        w.insert("b", Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(serialize_weights(&w), GOLDEN);
        let back = deserialize_weights(&GOLDEN).unwrap();
        assert_eq!(back.get("b").unwrap().shape(), &[2]);
        assert_eq!(back.get("b").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn empty_list_is_header_only() {
        let bytes = serialize_weights(&WeightsFile::new());
        assert_eq!(bytes, [0x52, 0x57, 0x5A, 0x57, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(deserialize_weights(&bytes).unwrap().is_empty());
    }

    #[test]
    fn error_cases() {
        assert_eq!(
            deserialize_weights(&GOLDEN[..GOLDEN.len() - 2]),
            Err(WeightsError::TruncatedFile)
        );
        assert_eq!(deserialize_weights(b"RW"), Err(WeightsError::TruncatedFile));
        let mut bad = GOLDEN;
        bad[0] = b'X';
        assert_eq!(deserialize_weights(&bad), Err(WeightsError::BadMagic));
        let mut bad = GOLDEN;
        bad[4] = 2;
        assert_eq!(deserialize_weights(&bad), Err(WeightsError::UnsupportedVersion(2)));
        let mut bad = GOLDEN;
        bad[17] = 7;
        assert_eq!(deserialize_weights(&bad), Err(WeightsError::UnsupportedDtype(7)));
        let mut long = GOLDEN.to_vec();
        long.push(0);
        assert!(matches!(deserialize_weights(&long), Err(WeightsError::Malformed(_))));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_ok());
    }
}
