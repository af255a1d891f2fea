//! Dense tensors, named parameter groups and the `DTEN` binary encoding.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Feature maps use `[C, H, W]`, optionally with a leading batch axis.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "tensor.grad",
                format!("gradient length {} for shape {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Index of the first NaN/Inf, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Encodes as `DTEN` with 64-bit values.
    pub fn to_dten(&self) -> Vec<u8> {
        self.to_dten_as(DType::F64)
    }

    pub fn to_dten_as(&self, dtype: DType) -> Vec<u8> {
        let width = dtype.width();
        let mut out =
            Vec::with_capacity(DTEN_MAGIC.len() + 3 + 8 * self.shape.len() + width * self.numel());
        out.extend_from_slice(DTEN_MAGIC);
        out.push(DTEN_VERSION);
        out.push(dtype as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes one `DTEN` record from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed.
    pub fn from_dten(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let mut r = ByteReader::new(bytes, "DTEN");
        let magic = r.take(4)?;
        if magic != DTEN_MAGIC {
            return Err(Error::format("DTEN", format!("bad magic {:?}", magic)));
        }
        let version = r.u8()?;
        if version != DTEN_VERSION {
            return Err(Error::format(
                "DTEN",
                format!("unsupported version {}", version),
            ));
        }
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::format("DTEN", format!("unknown dtype {}", other))),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::format("DTEN", "dimension does not fit in memory"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format("DTEN", "element count overflows"))?;
            shape.push(d);
        }
        let width = dtype.width();
        let nbytes = numel
            .checked_mul(width)
            .ok_or_else(|| Error::format("DTEN", "byte count overflows"))?;
        let raw = r.take(nbytes)?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let consumed = r.position();
        Ok((Tensor::new(shape, data)?, consumed))
    }
}

pub const DTEN_MAGIC: &[u8; 4] = b"DTEN";
pub const DTEN_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Bounds-checked little-endian cursor; every short read is a `Format` error.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], context: &'static str) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            context,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.context,
                    format!(
                        "truncated: need {} bytes at offset {}, {} available",
                        n,
                        self.pos,
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.pos += n;
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Named, ordered parameters updated (or frozen) together.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub trainable: bool,
    params: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        ParamGroup {
            name: name.into(),
            trainable: true,
            params: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(
                "param_group",
                format!("duplicate parameter {} in group {}", name, self.name),
            ));
        }
        self.params.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::invalid(
                "param_group",
                format!("no parameter {} in group {}", name, self.name),
            )),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dten_layout_matches_wire_format() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_dten();
        assert_eq!(&bytes[..4], b"DTEN");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..15], &2u64.to_le_bytes());
        assert_eq!(&bytes[15..23], &1u64.to_le_bytes());
        assert_eq!(&bytes[23..31], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 39);
        let (back, used) = Tensor::from_dten(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, t);
    }

    #[test]
    fn dten_f32_decodes_to_f64() {
        let t = Tensor::new(vec![3], vec![0.5, 0.25, -4.0]).unwrap();
        let bytes = t.to_dten_as(DType::F32);
        assert_eq!(bytes[5], 0);
        let (back, _) = Tensor::from_dten(&bytes).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn dten_truncation_is_an_error() {
        let bytes = Tensor::zeros(&[2, 2]).to_dten();
        for cut in 0..bytes.len() {
            assert!(Tensor::from_dten(&bytes[..cut]).is_err(), "cut at {}", cut);
        }
    }

    #[test]
    fn dten_absurd_dims_do_not_allocate() {
        let mut bytes = b"DTEN".to_vec();
        bytes.extend_from_slice(&[1, 1, 2]);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            Tensor::from_dten(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn group_names_unique() {
        let mut g = ParamGroup::new("shared");
        g.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(g.insert("w", Tensor::zeros(&[1])).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dten_round_trip_is_byte_exact(
            (shape, bits) in prop::collection::vec(0usize..4, 0..4).prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                (Just(shape), prop::collection::vec(any::<u64>(), n))
            })
        ) {
            // arbitrary bit patterns, NaN payloads included
            let t = Tensor::new(shape, bits.into_iter().map(f64::from_bits).collect()).unwrap();
            let bytes = t.to_dten();
            let (back, used) = Tensor::from_dten(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back.to_dten(), bytes);
        }

        #[test]
        fn dten_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut framed = DTEN_MAGIC.to_vec();
            framed.push(DTEN_VERSION);
            framed.extend_from_slice(&bytes);
            let _ = Tensor::from_dten(&framed);
            let _ = Tensor::from_dten(&bytes);
        }
    }
}
