//! Dense row-major tensors and the raw numeric kernels the tape records.
//!
//! Storage precision is a type parameter: `f32` for training, `f64` for
//! verification and for everything that touches the noise schedule.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = op(a) * op(b)` on row-major buffers, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
    );

    fn write_le(&self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

/// Element type tag used by the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Strides of `op(X)` where `X` is stored row-major with `cols` columns.
fn strides(cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        trans_a: bool,
        b: &[f32],
        trans_b: bool,
        c: &mut [f32],
    ) {
        let (rsa, csa) = strides(if trans_a { m } else { k }, trans_a);
        let (rsb, csb) = strides(if trans_b { k } else { n }, trans_b);
        // SAFETY: buffer lengths are checked by the caller against m, k, n.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        trans_a: bool,
        b: &[f64],
        trans_b: bool,
        c: &mut [f64],
    ) {
        let (rsa, csa) = strides(if trans_a { m } else { k }, trans_a);
        let (rsb, csb) = strides(if trans_b { k } else { n }, trans_b);
        // SAFETY: buffer lengths are checked by the caller against m, k, n.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<R: Real = f64> {
    shape: Vec<usize>,
    data: Vec<R>,
    pub requires_grad: bool,
    pub grad: Option<Vec<R>>,
}

impl<R: Real> Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad).finish()
    }
}

/// Counts of non-finite entries, as reported by [`Tensor::health`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Health {
    pub data_nan: usize,
    pub data_inf: usize,
    pub grad_nan: usize,
    pub grad_inf: usize,
}

impl Health {
    pub fn is_ok(&self) -> bool {
        self.data_nan + self.data_inf + self.grad_nan + self.grad_inf == 0
    }
}

fn count_bad<R: Real>(xs: &[R]) -> (usize, usize) {
    xs.iter().fold((0, 0), |(n, i), v| {
        (n + v.is_nan() as usize, i + v.is_infinite() as usize)
    })
}

impl<R: Real> Tensor<R> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<R>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                msg: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, R::one())
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: R) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = R::one();
        }
        t
    }

    /// Standard normal entries.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| R::from_f64c(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                msg: "expected a matrix".into(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.shape[1] + j]
    }

    /// Value of a tensor with exactly one element.
    pub fn item(&self) -> Result<R> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                msg: "expected a single element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::InvalidShape {
                shape,
                msg: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| S::from_f64c(v.as_f64()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| S::from_f64c(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn health(&self) -> Health {
        let (data_nan, data_inf) = count_bad(&self.data);
        let (grad_nan, grad_inf) = self.grad.as_deref().map(count_bad).unwrap_or((0, 0));
        Health {
            data_nan,
            data_inf,
            grad_nan,
            grad_inf,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(R, R) -> R) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: R) -> Self {
        self.map(|v| v * c)
    }

    pub fn square(&self) -> Self {
        self.map(|v| v * v)
    }

    pub fn sqrt(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|v| **v < R::zero()) {
            return Err(Error::NegativeSqrt(v.as_f64()));
        }
        Ok(self.map(|v| v.sqrt()))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > R::zero() { v } else { R::zero() })
    }

    /// Heaviside step, the derivative of ReLU (zero at the kink).
    pub fn step(&self) -> Self {
        self.map(|v| if v > R::zero() { R::one() } else { R::zero() })
    }

    /// `order`-th derivative of SiLU, `x * sigmoid(x)`.
    pub fn silu_n(&self, order: usize) -> Self {
        let poly = sigmoid_derivative_polys(order);
        let n = R::from_usize(order).unwrap();
        self.map(|x| {
            let s = R::one() / (R::one() + (-x).exp());
            let hi = eval_poly(&poly[order], s);
            if order == 0 {
                x * hi
            } else {
                x * hi + n * eval_poly(&poly[order - 1], s)
            }
        })
    }

    pub fn sum(&self) -> Self {
        Self::scalar(self.data.iter().copied().sum())
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Self> {
        let v = self.item()?;
        Ok(Self::full(shape.to_vec(), v))
    }

    /// Column sums of a matrix as a `1 x cols` row.
    pub fn sum_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![R::zero(); c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o = *o + *v;
            }
        }
        Self::from_vec([1, c], out)
    }

    /// Repeats a `1 x cols` row `rows` times.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if r != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                msg: "broadcast_rows expects a single row".into(),
            });
        }
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Self::from_vec([rows, c], data)
    }

    /// `op(self) * op(other)` with optional transposes.
    pub fn matmul_t(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = other.dims2()?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![R::zero(); m * n];
        if m * n > 0 && k > 0 {
            R::gemm(m, k, n, &self.data, trans_a, &other.data, trans_b, &mut out);
        }
        Self::from_vec([m, n], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::from_vec([c, r], out)
    }

    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = other.dims2()?;
        if ar != br {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            out.extend_from_slice(&self.data[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&other.data[i * bc..(i + 1) * bc]);
        }
        Self::from_vec([ar, ac + bc], out)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                msg: format!("column range {start}..{end}"),
            });
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self::from_vec([r, end - start], out)
    }

    /// Inverse of [`slice_cols`](Self::slice_cols): zero-pads to `total` columns.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + c > total {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                msg: format!("cannot pad at {start} into {total} columns"),
            });
        }
        let mut out = vec![R::zero(); r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c]
                .copy_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self::from_vec([r, total], out)
    }

    pub fn frobenius_sq(&self) -> R {
        self.data.iter().map(|v| *v * *v).sum()
    }
}

/// Polynomials `P_n(s)` with `sigmoid^(n)(x) = P_n(sigmoid(x))`, ascending
/// coefficients, for orders `0..=order`.
fn sigmoid_derivative_polys(order: usize) -> Vec<Vec<f64>> {
    let mut polys = vec![vec![0.0, 1.0]];
    for _ in 0..order {
        let p = polys.last().unwrap();
        // d/dx P(s) = P'(s) * (s - s^2)
        let dp: Vec<f64> = p.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect();
        let mut next = vec![0.0; dp.len() + 2];
        for (i, c) in dp.iter().enumerate() {
            next[i + 1] += c;
            next[i + 2] -= c;
        }
        polys.push(next);
    }
    polys
}

fn eval_poly<R: Real>(coeffs: &[f64], s: R) -> R {
    coeffs
        .iter()
        .rev()
        .fold(R::zero(), |acc, c| acc * s + R::from_f64c(*c))
}

const MAGIC: &[u8; 4] = b"IPDT";

impl<R: Real> Tensor<R> {
    /// Appends the binary encoding: magic, dtype code, rank (u32), dims (u64
    /// each), then little-endian element data.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(R::DTYPE.code());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.reserve(self.data.len() * R::DTYPE.size());
        for v in &self.data {
            v.write_le(out);
        }
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let header = 4 + 1 + 4;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        if &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| format!("unknown dtype code {}", bytes[4]))?;
        if dtype != R::DTYPE {
            return Err(format!("dtype {dtype:?} does not match requested {:?}", R::DTYPE));
        }
        let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut pos = header;
        if bytes.len() < pos + rank * 8 {
            return Err("truncated shape".into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
            pos += 8;
        }
        let n: usize = shape.iter().product();
        let size = dtype.size();
        if bytes.len() < pos + n * size {
            return Err("truncated data".into());
        }
        let data = bytes[pos..pos + n * size].chunks_exact(size).map(R::read_le).collect();
        pos += n * size;
        Ok((Self::from_vec(shape, data).map_err(|e| e.to_string())?, pos))
    }

    /// Reads the dtype code of an encoded tensor without decoding it.
    pub fn peek_dtype(bytes: &[u8]) -> Option<DType> {
        (bytes.len() >= 5 && &bytes[..4] == MAGIC)
            .then(|| DType::from_code(bytes[4]))
            .flatten()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_all(path, std::slice::from_ref(self))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut all = load_all::<R>(path)?;
        if all.len() != 1 {
            return Err(Error::format(path, format!("expected one tensor, found {}", all.len())));
        }
        Ok(all.pop().unwrap())
    }
}

/// Writes a sequence of encoded tensors to one file.
pub fn save_all<R: Real>(path: impl AsRef<Path>, tensors: &[Tensor<R>]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for t in tensors {
        t.encode(&mut buf);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads every tensor stored back-to-back in a file.
pub fn load_all<R: Real>(path: impl AsRef<Path>) -> Result<Vec<Tensor<R>>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        let (t, used) = Tensor::decode(&buf[pos..]).map_err(|m| Error::format(path, m))?;
        out.push(t);
        pos += used;
    }
    Ok(out)
}

/// Dtype of the first tensor stored in a file.
pub fn file_dtype(path: impl AsRef<Path>) -> Result<DType> {
    let path = path.as_ref();
    let mut head = [0u8; 5];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::io(path, e))?;
    Tensor::<f64>::peek_dtype(&head).ok_or_else(|| Error::format(path, "not a tensor file"))
}
