//! Dense tensors and named parameter collections.
//!
//! Every backbone, gate set and control variate in the simulation is a
//! [`ParamSet`]: an ordered list of named [`Param`]s. Arithmetic between two
//! sets is only defined when they are structure-equal (same names, order and
//! shapes). The flat binary encoding produced by [`ParamSet::to_blob`] is the
//! unit of communication accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Structural(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Structural(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        debug_assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Structural(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Bit-for-bit equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A learnable (or buffered) tensor together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Buffers such as normalization running statistics are carried, averaged
    /// and transmitted like weights but never receive gradient updates.
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// On-the-wire value width used by [`ParamSet::to_blob`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

const BLOB_MAGIC: &[u8; 4] = b"DPPS";
const BLOB_VERSION: u16 = 1;

/// Ordered, named collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Param)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, param: Param) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Structural(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, param));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.entries[index].1
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    /// Total number of scalars across all entries, buffers included.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Same names, same order, same shapes.
    pub fn structure_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, pa), (nb, pb))| na == nb && pa.value.shape() == pb.value.shape())
    }

    pub fn check_structure(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structural(format!(
                "parameter sets differ in length: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, pa), (nb, pb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || pa.value.shape() != pb.value.shape() {
                return Err(Error::Structural(format!(
                    "parameter mismatch: `{na}` {:?} vs `{nb}` {:?}",
                    pa.value.shape(),
                    pb.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Structure-equal copy with every value set to zero.
    pub fn zeros_like(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(n, p)| {
                let mut q = Param::new(Tensor::zeros(p.value.shape()));
                q.trainable = p.trainable;
                (n.clone(), q)
            })
            .collect();
        ParamSet { entries }
    }

    fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_structure(other)?;
        let mut out = self.zeros_like();
        for ((_, o), ((_, a), (_, b))) in out
            .entries
            .iter_mut()
            .zip(self.entries.iter().zip(&other.entries))
        {
            for ((o, &a), &b) in o
                .value
                .data_mut()
                .iter_mut()
                .zip(a.value.data())
                .zip(b.value.data())
            {
                *o = f(a, b);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> ParamSet {
        let mut out = self.clone();
        out.scale_in_place(factor);
        out.zero_grad();
        out
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for (_, p) in &mut self.entries {
            p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_structure(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (a, &b) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *a += alpha * b;
            }
        }
        Ok(())
    }

    /// `self += other`, without an intermediate multiply.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.check_structure(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (a, &b) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Zeroes the values of every non-trainable entry.
    pub fn zero_buffers(&mut self) {
        for (_, p) in &mut self.entries {
            if !p.trainable {
                p.value.fill(0.0);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.entries {
            p.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, p)| p.value.is_finite())
    }

    /// Values (not gradients) are identical bit for bit.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.structure_eq(other)
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((_, a), (_, b))| a.value.bitwise_eq(&b.value))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, p)| p.value.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Concatenation of every value, in entry order.
    pub fn flatten_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    fn header_len(&self) -> usize {
        let mut n = 4 + 2 + 1 + 1 + 4;
        for (name, p) in &self.entries {
            n += 2 + name.len() + 1 + 1 + 4 * p.value.shape().len();
        }
        n
    }

    /// Byte length of [`ParamSet::to_blob`] without materializing it.
    pub fn encoded_len(&self, precision: Precision) -> usize {
        self.header_len() + self.num_scalars() * precision.bytes()
    }

    /// Serializes to `header (name table, shapes) ++ little-endian values`.
    ///
    /// Layout: magic `DPPS`, u16 version, u8 value width (4 or 8), u8 reserved,
    /// u32 entry count; per entry a u16 name length, UTF-8 name, u8 flags
    /// (bit 0 = trainable), u8 rank and u32 extents. All values follow in entry
    /// order. Integers are little-endian.
    pub fn to_blob(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len(precision));
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.push(precision.bytes() as u8);
        out.push(0);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(p.trainable));
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, p) in &self.entries {
            for &v in p.value.data() {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = BlobReader { bytes, pos: 0 };
        if r.take(4)? != BLOB_MAGIC {
            return Err(Error::Format("bad parameter blob magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != BLOB_VERSION {
            return Err(Error::Format(format!("unsupported blob version {version}")));
        }
        let width = r.take(1)?[0];
        let precision = match width {
            4 => Precision::F32,
            8 => Precision::F64,
            w => return Err(Error::Format(format!("unsupported value width {w}"))),
        };
        r.take(1)?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_owned();
            let flags = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            headers.push((name, flags & 1 == 1, shape));
        }
        let mut set = ParamSet::new();
        for (name, trainable, shape) in headers {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(match precision {
                    Precision::F32 => f32::from_le_bytes(r.array()?) as f64,
                    Precision::F64 => f64::from_le_bytes(r.array()?),
                });
            }
            let mut p = Param::new(Tensor::new(shape, data)?);
            p.trainable = trainable;
            set.push(name, p)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after parameter blob",
                bytes.len() - r.pos
            )));
        }
        Ok(set)
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format(format!(
                "parameter blob truncated at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
}
