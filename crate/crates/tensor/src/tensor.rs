//! Plain dense tensors, detached from any tape.
//!
//! A [`Tensor`] owns its data and can move freely between threads. Values
//! enter a [`crate::Tape`] as leaves and come back out as owned tensors.

use std::io::{BufRead, Write};

use crate::error::{Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
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

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Dimensions of an NCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::shape(
                "dims4",
                format!("expected NCHW, got {:?}", self.shape),
            )),
        }
    }

    /// Writes one `TNSR` record: an ASCII header line followed by
    /// little-endian `f32` values in row-major order.
    pub fn write_tnsr<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut header = format!("TNSR {}", self.shape.len());
        for d in &self.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        out.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)
    }

    /// Reads one `TNSR` record written by [`Tensor::write_tnsr`].
    pub fn read_tnsr<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut line = Vec::new();
        input.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(TensorError::Parse("truncated TNSR header".into()));
        }
        let text = std::str::from_utf8(&line[..line.len() - 1])
            .map_err(|_| TensorError::Parse("TNSR header is not UTF-8".into()))?;
        let mut fields = text.split(' ');
        if fields.next() != Some("TNSR") {
            return Err(TensorError::Parse(format!("bad TNSR magic in {text:?}")));
        }
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| TensorError::Parse(format!("bad TNSR header {text:?}")))
        };
        let ndim = parse(fields.next())?;
        let shape = (0..ndim)
            .map(|_| parse(fields.next()))
            .collect::<Result<Vec<_>>>()?;
        if fields.next().is_some() {
            return Err(TensorError::Parse(format!("trailing fields in {text:?}")));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(&shape, data)
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn tnsr_round_trip_is_exact_for_f32_values() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.25 - 1.0);
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        assert!(buf.starts_with(b"TNSR 3 2 3 4\n"));
        let back = Tensor::read_tnsr(&mut &buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tnsr_rejects_bad_header() {
        let err = Tensor::read_tnsr(&mut &b"TNSX 1 2\n\0\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, TensorError::Parse(_)));
        let err = Tensor::read_tnsr(&mut &b"TNSR 1 2\n\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, TensorError::Io(_)));
    }

    #[test]
    fn scalar_tensor_has_no_dims() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.item().unwrap(), 3.5);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }
}
