//! Dense row-major tensors and the kernels the rest of the crate builds on.
//!
//! A [`Tensor`] owns a contiguous buffer plus its shape. Every transform that
//! changes layout (transpose, axis reductions) materializes a fresh buffer;
//! only [`Tensor::reshape`] is metadata-only.
//!
//! Tensors serialize to the `PFST` binary layout:
//!
//! ```text
//! magic "PFST" | version u8 = 1 | dtype u8 (0 f32, 1 f64, 2 u8) | ndim u8
//! | ndim x u32 LE dims | row-major LE payload
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"PFST";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::UnsupportedDType(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }
}

/// Scalar types a tensor can store.
pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Floating-point element types usable for computation (f32 and f64).
pub trait Real:
    Element + num_traits::Float + Sum + AddAssign + SubAssign + MulAssign + fmt::Display
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// `c = alpha * a b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product on slices: `c (+)= op(a) op(b)`.
///
/// `a` holds `[m,k]` (or `[k,m]` when `trans_a`), `b` holds `[k,n]` (or
/// `[n,k]` when `trans_b`), `c` holds `[m,n]`. With `accumulate` false the
/// previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths asserted above and strides describe exactly those buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense tensor with an explicit shape and a contiguous row-major buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dtype", &std::any::type_name::<T>())
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    ))
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| {
                debug_assert!(i < extent);
                acc * extent + i
            })
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Swaps the last two axes, materializing a copy.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank must be at least 2"));
        }
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = numel_of(&self.shape[..r - 2]);
        let mut out = Vec::with_capacity(self.data.len());
        for b in 0..batch {
            let src = &self.data[b * rows * cols..(b + 1) * rows * cols];
            for j in 0..cols {
                out.extend((0..rows).map(|i| src[i * cols + j]));
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self { shape, data: out })
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose2d", "expected a matrix"));
        }
        self.transpose_last2()
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.into_f64()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn exp(&self) -> Result<Self> {
        self.map(|v| v.exp()).ensure_finite("exp")
    }

    pub fn ln(&self) -> Result<Self> {
        self.map(|v| v.ln()).ensure_finite("log")
    }

    /// Elementwise `max(0, x)`.
    pub fn max0(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn max_value(&self) -> Option<T> {
        self.data.iter().copied().reduce(|a, b| if b > a { b } else { a })
    }

    fn reduce_axis(&self, axis: usize, init: T, f: impl Fn(T, T) -> T) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = f(*d, s);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, T::zero(), |a, b| a + b)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let len = *self.shape.get(axis).ok_or(Error::Axis {
            axis,
            rank: self.rank(),
        })?;
        let inv = T::one() / T::from_f64(len as f64);
        Ok(self.sum_axis(axis)?.scale(inv))
    }

    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        self.reduce_axis(axis, T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Class index of the maximum along `axis`, stored as `u8`. First index
    /// wins ties.
    pub fn argmax_axis_u8(&self, axis: usize) -> Result<Tensor<u8>> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        if len > 256 {
            return Err(Error::InvalidArgument(format!(
                "argmax over {len} classes does not fit u8"
            )));
        }
        let mut out = vec![0u8; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0usize;
                let mut best_v = self.data[o * len * inner + i];
                for a in 1..len {
                    let v = self.data[(o * len + a) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = a;
                    }
                }
                out[o * inner + i] = best as u8;
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax_axis(&self, axis: usize) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::NonFinite("softmax"));
        }
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        let mut scratch = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(self.data[at(a)]);
                }
                let mut total = T::zero();
                for (a, s) in scratch.iter_mut().enumerate() {
                    *s = (self.data[at(a)] - max).exp();
                    total += *s;
                }
                for (a, s) in scratch.iter().enumerate() {
                    out[at(a)] = *s / total;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Row-wise softmax of a matrix (or of the last axis of any tensor).
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.rank() == 0 {
            return Err(Error::shape("softmax_rows", "rank-0 input"));
        }
        self.softmax_axis(self.rank() - 1)
    }

    pub fn log_softmax_axis(&self, axis: usize) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::NonFinite("log_softmax"));
        }
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(self.data[at(a)]);
                }
                let mut total = T::zero();
                for a in 0..len {
                    total += (self.data[at(a)] - max).exp();
                }
                let log_z = max + total.ln();
                for a in 0..len {
                    out[at(a)] = self.data[at(a)] - log_z;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Self::new(vec![m, n], out)?.ensure_finite("matmul")
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, other: &Self) -> Result<Self> {
        if self.rank() != 3
            || other.rank() != 3
            || self.shape[0] != other.shape[0]
            || self.shape[2] != other.shape[1]
        {
            return Err(Error::shape(
                "bmm",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (b, m, k, n) = (self.shape[0], self.shape[1], self.shape[2], other.shape[2]);
        let mut out = vec![T::zero(); b * m * n];
        for i in 0..b {
            gemm(
                m,
                k,
                n,
                &self.data[i * m * k..(i + 1) * m * k],
                false,
                &other.data[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Self::new(vec![b, m, n], out)?.ensure_finite("bmm")
    }
}

/// A tensor whose element type is only known at runtime (after a load).
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }
}

/// Extracts a statically-typed tensor from an [`AnyTensor`].
pub trait FromAny: Element {
    fn from_any(any: AnyTensor) -> Result<Tensor<Self>>;
}

fn mismatch<T: Element>(found: DType) -> Error {
    Error::DTypeMismatch {
        expected: T::DTYPE.name(),
        found: found.name(),
    }
}

impl FromAny for f32 {
    fn from_any(any: AnyTensor) -> Result<Tensor<Self>> {
        match any {
            AnyTensor::F32(t) => Ok(t),
            other => Err(mismatch::<f32>(other.dtype())),
        }
    }
}

impl FromAny for f64 {
    fn from_any(any: AnyTensor) -> Result<Tensor<Self>> {
        match any {
            AnyTensor::F64(t) => Ok(t),
            other => Err(mismatch::<f64>(other.dtype())),
        }
    }
}

impl FromAny for u8 {
    fn from_any(any: AnyTensor) -> Result<Tensor<Self>> {
        match any {
            AnyTensor::U8(t) => Ok(t),
            other => Err(mismatch::<u8>(other.dtype())),
        }
    }
}

/// Serializes `tensor` in the `PFST` layout.
pub fn encode_tensor<T: Element>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", tensor.rank())));
    }
    let mut out = Vec::with_capacity(7 + 4 * tensor.rank() + tensor.numel() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(T::DTYPE.code());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated tensor data while reading {what}"))
        } else {
            Error::Format(format!("read failure at {what}: {e}"))
        }
    })
}

fn decode_payload<T: Element>(r: &mut impl Read, shape: Vec<usize>) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let mut bytes = vec![0u8; numel_of(&shape) * size];
    read_exact(r, &mut bytes, "payload")?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Reads one `PFST` tensor from a stream.
pub fn read_tensor_any(r: &mut impl Read) -> Result<AnyTensor> {
    let mut header = [0u8; 7];
    read_exact(r, &mut header, "header")?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"PFST\"",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    if header[4] != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {}",
            header[4]
        )));
    }
    let dtype = DType::from_code(header[5])?;
    let ndim = header[6] as usize;
    let mut dims = vec![0u8; 4 * ndim];
    read_exact(r, &mut dims, "dims")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(r, shape)?),
        DType::F64 => AnyTensor::F64(decode_payload(r, shape)?),
        DType::U8 => AnyTensor::U8(decode_payload(r, shape)?),
    })
}

pub fn read_tensor<T: FromAny>(r: &mut impl Read) -> Result<Tensor<T>> {
    T::from_any(read_tensor_any(r)?)
}

pub fn save_tensor<T: Element>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(tensor)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let tensor = read_tensor_any(&mut r)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(tensor),
        Ok(_) => Err(Error::Format(format!(
            "trailing bytes after tensor in {}",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn load_tensor<T: FromAny>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    T::from_any(load_tensor_any(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(eye.matmul(&x).unwrap(), x);
    }

    #[test]
    fn outer_product() {
        let col = t(&[2, 1], &[1.0, 3.0]);
        let row = t(&[1, 2], &[1.0, 3.0]);
        assert_eq!(col.matmul(&row).unwrap().data(), &[1.0, 3.0, 3.0, 9.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[1, 2], &[0.0, 0.0]).softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[1, 2], &[1.0, 3.0]).softmax_rows().unwrap();
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        assert!((s.data()[0] - e1 / (e1 + e3)).abs() < 1e-15);
        assert!((s.data()[0] - 0.1192).abs() < 1e-4);
        assert!((s.data()[1] - 0.8808).abs() < 1e-4);
        let big = t(&[1, 2], &[1000.0, 1001.0]).softmax_rows().unwrap();
        let base = t(&[1, 2], &[0.0, 1.0]).softmax_rows().unwrap();
        assert_eq!(big, base);
    }

    #[test]
    fn softmax_rejects_nan() {
        let s = t(&[1, 2], &[f64::NAN, 0.0]).softmax_rows();
        assert!(matches!(s, Err(Error::NonFinite(_))));
    }

    #[test]
    fn reshape_keeps_order() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), x.data());
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn elementwise_and_reductions() {
        let x = t(&[2], &[-2.0, 3.5]);
        assert_eq!(x.max0().data(), &[0.0, 3.5]);
        assert_eq!(Tensor::<f64>::ones(&[4, 5]).sum(), 20.0);
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.mean_axis(1).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(m.max_axis(1).unwrap().data(), &[3.0, 6.0]);
        assert!(matches!(m.sum_axis(2), Err(Error::Axis { .. })));
        assert_eq!(
            m.transpose2d().unwrap().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }

    #[test]
    fn argmax_first_wins() {
        let x = t(&[1, 3, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]);
        assert_eq!(x.argmax_axis_u8(1).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = encode_tensor(&Tensor::<f32>::zeros(&[2])).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            read_tensor_any(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bytes = encode_tensor(&Tensor::<f32>::zeros(&[2])).unwrap();
        bytes[5] = 9;
        assert!(matches!(
            read_tensor_any(&mut bytes.as_slice()),
            Err(Error::UnsupportedDType(9))
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_tensor(&Tensor::<f64>::zeros(&[3, 3])).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_tensor_any(&mut &cut[..]),
            Err(Error::Format(_))
        ));
    }
}
