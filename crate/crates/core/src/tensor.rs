//! Dense row-major tensors and the TNS1 binary framing.
//!
//! TNS1 layout, all integers and floats little-endian:
//!
//! ```text
//! b"TNS1" | u32 rank | rank x u32 dims | product(dims) x f32
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::real::Real;

pub const TNS1_MAGIC: &[u8; 4] = b"TNS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Checked constructor: shape must match the data length and every
    /// element must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(t)
    }

    /// Shape-checked constructor that admits non-finite values.
    pub fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Rows of a rank-2 view: first dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a rank-2 view: product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Collapse everything but the last dimension: `[.., d] -> [n, d]`.
    pub fn flatten_rows(self) -> Self {
        let d = *self.shape.last().expect("rank >= 1");
        let n = self.data.len() / d;
        Self {
            shape: vec![n, d],
            data: self.data,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", format!("rank {}", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_tns1<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TNS1_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_tns1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_tns1(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_tns1<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != TNS1_MAGIC {
            return Err(Error::format("TNS1", format!("bad magic {magic:02x?}")));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::format("TNS1", format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format("TNS1", format!("invalid shape {shape:?}")))?;
        let mut bytes = vec![0u8; n * 4];
        read_exact(r, &mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Self::from_parts(shape, data)
    }

    pub fn from_tns1_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_tns1(&mut bytes)
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format("binary", format!("truncated payload: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// `a[m x k] * b[k x n]`, accumulated in f64 and rounded to `T`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim("matmul", "both operands must be rank 2"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: matmul_kernel(&a.data, m, k, &b.data, n),
    })
}

/// Row-major `[m x k] * [k x n]`, accumulated in f64 in ascending `k` order.
fn matmul_kernel<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.as_f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.shape[0], a.cols());
    let (m2, n) = (b.shape[0], b.cols());
    if m != m2 {
        return Err(Error::dim("matmul_tn", format!("[{m}x{k}]^T * [{m2}x{n}]")));
    }
    let mut acc = vec![0f64; k * n];
    for r in 0..m {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            let dst = &mut acc[i * n..(i + 1) * n];
            for (s, &bv) in dst.iter_mut().zip(brow) {
                *s += av * bv.as_f64();
            }
        }
    }
    Ok(Tensor {
        shape: vec![k, n],
        data: acc.into_iter().map(T::from_f64).collect(),
    })
}

/// `a * b^T`. Transposes `b` once so the inner loop runs over contiguous
/// rows; the summation order matches [`matmul`].
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.shape[0], a.cols());
    let (n, k2) = (b.shape[0], b.cols());
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
    }
    let mut bt = vec![T::zero(); n * k];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b.data[j * k + p];
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: matmul_kernel(&a.data, m, k, &bt, n),
    })
}
