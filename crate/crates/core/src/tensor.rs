//! Dense row-major `f64` tensors and their binary dump format.
//!
//! Dump layout: magic `LSAT`, one dtype byte (`0` = f64 little-endian), one
//! byte holding the rank, `rank` little-endian `u32` extents, then the
//! row-major payload.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"LSAT";
pub const DTYPE_F64_LE: u8 = 0;

/// Dense n-dimensional array of 64-bit reals with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::shape("tensor", dims, &[values.len()]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            values: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: Vec::new(),
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Rank-1 tensor over the given values.
    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            dims: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::shape("set_grad", &self.dims, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.values[0])
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.values.len() {
            return Err(Error::shape("reshape", &self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Appends the binary dump of this tensor to `out`.
    pub fn write_dump(&self, out: &mut Vec<u8>) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", self.dims.len())));
        }
        out.extend_from_slice(DUMP_MAGIC);
        out.push(DTYPE_F64_LE);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn to_dump(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 8 * self.values.len());
        self.write_dump(&mut out)?;
        Ok(out)
    }

    /// Parses one dump from the front of `bytes`, returning the tensor and the
    /// number of bytes consumed.
    pub fn read_dump(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 6 {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[..4] != DUMP_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes[4] != DTYPE_F64_LE {
            return Err(Error::Format(format!("unsupported dtype tag {}", bytes[4])));
        }
        let rank = bytes[5] as usize;
        let mut pos = 6;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::Format("truncated extents".into()))?;
            dims.push(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as usize);
            pos += 4;
        }
        let n: usize = dims.iter().product();
        let payload = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        pos += 8 * n;
        Ok((Self::new(&dims, values)?, pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dump_header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_dump().unwrap();
        assert_eq!(&bytes[..4], b"LSAT");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..22], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn dump_rejects_bad_magic_and_truncation() {
        let mut bytes = Tensor::scalar(1.0).to_dump().unwrap();
        assert!(Tensor::read_dump(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Tensor::read_dump(&bytes).is_err());
    }

    #[test]
    fn grad_slot_must_match() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }

    proptest::proptest! {
        #[test]
        fn dump_roundtrip(dims in proptest::collection::vec(1usize..4, 0..4), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let values: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64) * 0.37 - 1.0).collect();
            let t = Tensor::new(&dims, values).unwrap();
            let mut buf = t.to_dump().unwrap();
            buf.extend_from_slice(&[9, 9]);
            let (back, used) = Tensor::read_dump(&buf).unwrap();
            proptest::prop_assert_eq!(used, buf.len() - 2);
            proptest::prop_assert_eq!(back, t);
        }
    }
}
