//! Dense row-major `f64` tensors and the `TNS v1` binary format.
//!
//! A [`Tensor`] is a plain value. Gradient tracking lives on the tape in
//! [`crate::autodiff`], which wraps tensors in graph nodes.

use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input {
                op: "Tensor::new",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Rank-2 constructor; panics on inconsistent lengths (internal use).
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols}");
        assert!(rows > 0 && cols > 0, "matrix {rows}x{cols}");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::matrix(1, n, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(Error::Empty("Tensor::from_rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dim("Tensor::from_rows", &[r, c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self::matrix(r, c, data))
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

    /// Rows when viewed as a matrix: all leading extents folded together.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = (self.rows(), self.cols());
        let (k2, c) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() > 2 || other.shape.len() > 2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        Ok(Tensor::matrix(
            r,
            c,
            matmul_kernel(&self.data, &other.data, r, k, c),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec())
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().ok_or(Error::Empty("concat_rows"))?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::dim("concat_rows", &parts[0].shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::matrix(rows, c, data))
    }

    /// Mean over rows, as a `1×cols` row.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row_slice(i)) {
                *o += v;
            }
        }
        Tensor::row(out.into_iter().map(|v| v / r as f64).collect())
    }

    /// SHA-256 over shape and little-endian data.
    pub fn digest_into(&self, hasher: &mut Sha256) {
        for &e in &self.shape {
            hasher.update((e as u64).to_le_bytes());
        }
        for &v in &self.data {
            hasher.update(v.to_le_bytes());
        }
    }

    /// Writes `TNS v1 <rank> <extents...>\n` followed by little-endian `f64`s.
    pub fn write_tns<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let extents: Vec<String> = self.shape.iter().map(|e| e.to_string()).collect();
        writeln!(w, "TNS v1 {} {}", self.shape.len(), extents.join(" "))?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_tns<R: BufRead>(r: &mut R) -> Result<Tensor> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)
            .map_err(|e| Error::io("<tns stream>", e))?;
        let header = std::str::from_utf8(&line).map_err(|_| bad_tns("header is not UTF-8"))?;
        let mut parts = header.trim_end().split(' ');
        if parts.next() != Some("TNS") || parts.next() != Some("v1") {
            return Err(bad_tns(&format!("bad magic in {header:?}")));
        }
        let rank: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad_tns("missing rank"))?;
        let shape: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| bad_tns("bad extent")))
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(bad_tns("rank does not match extent count"));
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::io("<tns stream>", e))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

fn bad_tns(detail: &str) -> Error {
    Error::Format {
        what: "TNS tensor",
        detail: detail.to_string(),
    }
}

/// Writes several tensors back to back.
pub fn write_tns_all<W: Write>(w: &mut W, tensors: &[&Tensor]) -> std::io::Result<()> {
    for t in tensors {
        t.write_tns(w)?;
    }
    Ok(())
}

/// Reads tensors until the stream is exhausted.
pub fn read_tns_all<R: BufRead>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    loop {
        let done = r
            .fill_buf()
            .map_err(|e| Error::io("<tns stream>", e))?
            .is_empty();
        if done {
            return Ok(out);
        }
        out.push(Tensor::read_tns(r)?);
    }
}

/// `r×k · k×c` in i-k-j order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a: k×r`, `b: k×c` without materializing the transpose.
pub(crate) fn matmul_tn_kernel(a: &[f64], b: &[f64], k: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for p in 0..k {
        let a_row = &a[p * r..(p + 1) * r];
        let b_row = &b[p * c..(p + 1) * c];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: r×k`, `b: c×k`.
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * c + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::identity(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn transposed_kernels_agree() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]);
        let b = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.3).collect());
        let tn = matmul_tn_kernel(a.data(), b.data(), 3, 2, 4);
        assert_eq!(tn, a.transpose().matmul(&b).unwrap().into_data());
        let c = Tensor::matrix(4, 2, (0..8).map(|v| v as f64 - 3.0).collect());
        let nt = matmul_nt_kernel(a.data(), c.data(), 3, 2, 4);
        assert_eq!(nt, a.matmul(&c.transpose()).unwrap().into_data());
    }

    #[test]
    fn tns_header_layout() {
        let t = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tns(&mut buf).unwrap();
        assert!(buf.starts_with(b"TNS v1 3 2 1 3\n"));
        assert_eq!(buf.len(), "TNS v1 3 2 1 3\n".len() + 48);
        assert_eq!(&buf[15..23], &1.0f64.to_le_bytes());
    }

    #[test]
    fn tns_rejects_bad_magic() {
        let mut r = std::io::Cursor::new(b"TNZ v1 1 1\n\0\0\0\0\0\0\0\0".to_vec());
        assert!(Tensor::read_tns(&mut r).is_err());
    }

    proptest! {
        #[test]
        fn tns_stream_round_trip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..4),
            seed in any::<u64>(),
        ) {
            let tensors: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|i| ((seed as f64) + (i * 31 + k) as f64).sin() * 1e3).collect();
                    Tensor::new(s.clone(), data).unwrap()
                })
                .collect();
            let refs: Vec<&Tensor> = tensors.iter().collect();
            let mut buf = Vec::new();
            write_tns_all(&mut buf, &refs).unwrap();
            let back = read_tns_all(&mut std::io::Cursor::new(buf)).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
