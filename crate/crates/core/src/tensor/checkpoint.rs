//! `HNGW` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HNGW" | u32 version (=1) | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 ndim | ndim × u64 dims | payload
//! ```
//!
//! The payload is `prod(dims)` × f32, row-major. Tensors whose name ends in
//! `.mask` or `.mode` carry one u8 per element instead.

use std::fs;
use std::path::Path;

use crate::error::{HingeError, Result};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"HNGW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

fn is_byte_tensor(name: &str) -> bool {
    name.ends_with(".mask") || name.ends_with(".mode")
}

impl Tensor {
    pub fn element_count(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    /// Payload widened to f64, any rank.
    pub fn to_matrix_flat(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::U8(_) => Err(HingeError::Format(format!("{} holds bytes, not reals", self.name))),
        }
    }

    pub fn to_matrix(&self) -> Result<DenseMatrix> {
        let values = self.to_matrix_flat()?;
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            dims => {
                return Err(HingeError::Format(format!(
                    "{} has rank {}, expected 1 or 2",
                    self.name,
                    dims.len()
                )))
            }
        };
        DenseMatrix::from_vec(r, c, values)
    }

    pub fn to_bytes_vec(&self) -> Result<Vec<u8>> {
        match &self.data {
            TensorData::U8(v) => Ok(v.clone()),
            TensorData::F32(_) => Err(HingeError::Format(format!("{} holds reals, not bytes", self.name))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| HingeError::Format(format!("missing tensor {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        self.require(name)?.to_matrix()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        let byte_name = is_byte_tensor(&tensor.name);
        let consistent = matches!(
            (&tensor.data, byte_name),
            (TensorData::U8(_), true) | (TensorData::F32(_), false)
        );
        if !consistent {
            return Err(HingeError::Format(format!(
                "tensor {} payload type does not match its name",
                tensor.name
            )));
        }
        let len = match &tensor.data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        };
        if len != tensor.element_count() {
            return Err(HingeError::Format(format!(
                "tensor {}: {} elements for dims {:?}",
                tensor.name, len, tensor.dims
            )));
        }
        if tensor.name.len() > u16::MAX as usize || tensor.dims.len() > u8::MAX as usize {
            return Err(HingeError::Format(format!("tensor {} header too large", tensor.name)));
        }
        if self.contains(&tensor.name) {
            return Err(HingeError::Format(format!("duplicate tensor {}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &DenseMatrix) -> Result<()> {
        self.push(Tensor {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F32(m.data().iter().map(|&v| v as f32).collect()),
        })
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.push(Tensor {
            name: name.into(),
            dims: vec![v.len() as u64],
            data: TensorData::F32(v.iter().map(|&x| x as f32).collect()),
        })
    }

    pub fn push_mask(&mut self, name: impl Into<String>, alive: &[bool]) -> Result<()> {
        self.push(Tensor {
            name: name.into(),
            dims: vec![alive.len() as u64],
            data: TensorData::U8(alive.iter().map(|&a| a as u8).collect()),
        })
    }

    pub fn push_byte(&mut self, name: impl Into<String>, value: u8) -> Result<()> {
        self.push(Tensor {
            name: name.into(),
            dims: vec![1],
            data: TensorData::U8(vec![value]),
        })
    }

    pub fn mask(&self, name: &str) -> Result<Vec<bool>> {
        self.require(name)?
            .to_bytes_vec()?
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(HingeError::Format(format!("mask {name} holds byte {other}"))),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(HingeError::Format("bad magic, expected HNGW".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HingeError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| HingeError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| HingeError::Format(format!("tensor {name} dims overflow")))?
                as usize;
            let data = if is_byte_tensor(&name) {
                TensorData::U8(r.take(count)?.to_vec())
            } else {
                let raw = r.take(count.checked_mul(4).ok_or_else(|| {
                    HingeError::Format(format!("tensor {name} too large"))
                })?)?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            };
            ckpt.push(Tensor { name, dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(HingeError::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HingeError::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_byte_layout() {
        let mut c = Checkpoint::new();
        c.push_matrix("w", &DenseMatrix::from_rows(&[&[1.0, -2.0]])).unwrap();
        c.push_mask("w.mask", &[true, false]).unwrap();
        let bytes = c.to_bytes();
        let mut expect = b"HNGW".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.push(b'w');
        expect.push(2);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        expect.extend_from_slice(&6u16.to_le_bytes());
        expect.extend_from_slice(b"w.mask");
        expect.push(1);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&[1, 0]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new();
        c.push_vector("b", &[1.0, 2.0, 3.0]).unwrap();
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 2;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn payload_type_follows_name() {
        let mut c = Checkpoint::new();
        let bad = Tensor {
            name: "x.mask".into(),
            dims: vec![1],
            data: TensorData::F32(vec![1.0]),
        };
        assert!(c.push(bad).is_err());
        c.push_vector("v", &[1.0]).unwrap();
        assert!(c.push_vector("v", &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), mask in proptest::collection::vec(any::<bool>(), 1..10)) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DenseMatrix::random_normal(rows, cols, 1.0, &mut rng);
            let mut c = Checkpoint::new();
            c.push_matrix("layer.W", &m).unwrap();
            c.push_mask("layer.mask", &mask).unwrap();
            c.push_byte("layer.mode", 2).unwrap();
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            let m2 = back.matrix("layer.W").unwrap();
            for (a, b) in m.data().iter().zip(m2.data()) {
                prop_assert_eq!(*a as f32 as f64, *b);
            }
            prop_assert_eq!(back.mask("layer.mask").unwrap(), mask);
        }
    }
}
