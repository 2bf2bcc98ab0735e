//! Dense row-major `f64` tensors.
//!
//! Every operation here is a pure function returning a fresh tensor. There is
//! no broadcasting: operands of elementwise ops must have identical shapes.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{dim_err, Error, Result};

/// Shape of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape2 {
    pub rows: usize,
    pub cols: usize,
}

impl Shape2 {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract(format!("shape ({rows}, {cols}) has a zero dimension")));
        }
        Ok(Shape2 { rows, cols })
    }
}

/// Shape of a single feature map: channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Contract(format!("shape ({c}, {h}, {w}) has a zero dimension")));
        }
        Ok(Shape3 { c, h, w })
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err("Tensor::new", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Tensor::new (index {i})")));
        }
        Ok(Tensor { shape, data })
    }

    /// Construction for values that are finite and shape-consistent by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor of shape {shape:?}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor { shape: vec![n, n], data }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Matrix from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return dim_err("from_rows", "ragged rows");
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return dim_err("item", format!("tensor of shape {:?} is not a scalar", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn shape2(&self) -> Result<Shape2> {
        match self.shape[..] {
            [rows, cols] => Ok(Shape2 { rows, cols }),
            _ => dim_err("shape2", format!("expected rank 2, got {:?}", self.shape)),
        }
    }

    pub fn shape3(&self) -> Result<Shape3> {
        match self.shape[..] {
            [c, h, w] => Ok(Shape3 { c, h, w }),
            _ => dim_err("shape3", format!("expected rank 3, got {:?}", self.shape)),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let a = self.shape2()?;
        let b = other.shape2()?;
        if a.cols != b.rows {
            return dim_err("matmul", format!("({}, {}) x ({}, {})", a.rows, a.cols, b.rows, b.cols));
        }
        let mut out = vec![0.0; a.rows * b.cols];
        matmul_acc(&self.data, &other.data, &mut out, a.rows, a.cols, b.cols);
        Ok(Tensor::from_parts(vec![a.rows, b.cols], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape2()?;
        Ok(Tensor::from_parts(vec![s.cols, s.rows], transpose_raw(&self.data, s.rows, s.cols)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let s = self.shape2()?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(s.cols) {
            softmax_in_place(row);
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// `C×H×W` feature map to its `C×(H·W)` matrix view.
    pub fn flatten_spatial(&self) -> Result<Tensor> {
        let s = self.shape3()?;
        Ok(Tensor { shape: vec![s.c, s.spatial()], data: self.data.clone() })
    }

    /// Inverse of [`Tensor::flatten_spatial`].
    pub fn unflatten_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape2()?;
        if s.cols != h * w || h == 0 || w == 0 {
            return dim_err("unflatten_spatial", format!("{} columns cannot be viewed as {h}x{w}", s.cols));
        }
        Ok(Tensor { shape: vec![s.rows, h, w], data: self.data.clone() })
    }

    /// Mean over the spatial extent of every channel of a `C×H×W` map.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape3()?;
        let n = s.spatial() as f64;
        let data = self.data.chunks(s.spatial()).map(|ch| ch.iter().sum::<f64>() / n).collect();
        Ok(Tensor::from_parts(vec![s.c], data))
    }

    /// Concatenation along axis 0 of rank-3 maps sharing their spatial shape.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = match parts.first() {
            Some(t) => t.shape3()?,
            None => return dim_err("concat_channels", "no inputs"),
        };
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape3()?;
            if (s.h, s.w) != (first.h, first.w) {
                return dim_err("concat_channels", format!("spatial {}x{} vs {}x{}", s.h, s.w, first.h, first.w));
            }
            c += s.c;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![c, first.h, first.w], data))
    }

    /// Slice `index` along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Result<Tensor> {
        if self.rank() < 2 || index >= self.shape[0] {
            return dim_err("index_axis0", format!("index {index} into {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor::from_parts(self.shape[1..].to_vec(), self.data[index * inner..(index + 1) * inner].to_vec()))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = match parts.first() {
            Some(t) => t,
            None => return dim_err("stack", "no inputs"),
        };
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            first.same_shape(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Little-endian binary encoding: rank (u32), dims (u32 each), then f64 payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 * self.shape.len() + 8 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let t = Tensor::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(t)
    }
}

/// `out += a·b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
