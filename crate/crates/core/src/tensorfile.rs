//! The `SKOPTEN1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SKOPTEN1"
//! count    u32
//! per tensor:
//!   name_len u16, name UTF-8 bytes
//!   rank     u8, dims u64 x rank
//!   payload  f64 x prod(dims), row-major
//! checksum u64      wrapping sum of every payload byte
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"SKOPTEN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn expect_shape(&self, expected: &[usize]) -> Result<&Self, FormatError> {
        if self.dims != expected {
            return Err(FormatError::ShapeMismatch {
                name: self.name.clone(),
                expected: expected.to_vec(),
                found: self.dims.clone(),
            });
        }
        Ok(self)
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.data.clone()),
            _ => Err(FormatError::ShapeMismatch {
                name: self.name.clone(),
                expected: vec![0, 0],
                found: self.dims.clone(),
            }
            .into()),
        }
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("tensor name too long"));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid("tensor rank too large"));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "tensor {name}: dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(FormatError::DuplicateTensor(name).into());
        }
        self.tensors.push(Tensor { name, dims, data });
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.push(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len()], v.to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, FormatError> {
        self.get(name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()))
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let t = self.require(name)?.expect_shape(&[rows, cols])?;
        Ok(Matrix::from_vec_unchecked(rows, cols, t.data.clone()))
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.require(name)?.expect_shape(&[len])?.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + payload + 64 * self.tensors.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut checksum = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in &t.data {
                let bytes = x.to_le_bytes();
                checksum = bytes.iter().fold(checksum, |s, &b| s.wrapping_add(b as u64));
                out.extend_from_slice(&bytes);
            }
        }
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut rd = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        rd.pos = MAGIC.len();
        let count = u32::from_le_bytes(rd.take::<4>("tensor count")?);
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        let mut checksum = 0u64;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(rd.take::<2>("name length")?) as usize;
            let name = std::str::from_utf8(rd.slice(name_len, "tensor name")?)
                .map_err(|_| FormatError::BadName)?
                .to_string();
            let rank = rd.take::<1>("rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(rd.take::<8>("dims")?) as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| FormatError::Truncated {
                    what: format!("payload of {name}"),
                })?
                / 8;
            let raw = rd.slice(numel * 8, &format!("payload of {name}"))?;
            checksum = raw.iter().fold(checksum, |s, &b| s.wrapping_add(b as u64));
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(FormatError::NonFinite(name));
            }
            if !seen.insert(name.clone()) {
                return Err(FormatError::DuplicateTensor(name));
            }
            tensors.push(Tensor { name, dims, data });
        }
        let stored = u64::from_le_bytes(rd.take::<8>("checksum")?);
        if stored != checksum {
            return Err(FormatError::Checksum {
                stored,
                computed: checksum,
            });
        }
        if rd.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - rd.pos));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FormatError::Truncated {
            what: what.to_string(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        Ok(self.slice(N, what)?.try_into().expect("length checked"))
    }
}
