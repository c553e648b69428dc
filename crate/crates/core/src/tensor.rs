//! Dense row-major f64 tensor.
//!
//! `Tensor` is a plain value type: shape, data, and an optional gradient
//! buffer. Differentiation happens on a [`crate::graph::Graph`], which owns
//! tensors for the duration of a forward/backward pass. Everything is f64;
//! verifiability at desk scale matters more than speed here.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero dimension in {:?}", shape)));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a rank-0 or length-1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Multi-index into the flat buffer. Debug-checked against the shape.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shapes("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Zero the gradient buffer, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Text dump: `shape: d0 d1 ...` header then whitespace-separated values,
    /// row-major. Values round-trip bit-exactly.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = String::from("shape:");
        for d in &self.shape {
            write!(header, " {}", d).unwrap();
        }
        writeln!(w, "{}", header)?;
        let mut line = String::new();
        for (i, v) in self.data.iter().enumerate() {
            if i > 0 {
                if i % 8 == 0 {
                    line.push('\n');
                } else {
                    line.push(' ');
                }
            }
            write!(line, "{:?}", v).unwrap();
        }
        writeln!(w, "{}", line)?;
        Ok(())
    }

    pub fn read_dump<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim();
        let rest = header
            .strip_prefix("shape:")
            .ok_or_else(|| Error::invalid("tensor dump", format!("expected `shape:` header, got {:?}", header)))?;
        let shape: Vec<usize> = rest
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::invalid("tensor dump", format!("bad dimension {:?}", t))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut line = String::new();
        while data.len() < n {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::invalid(
                    "tensor dump",
                    format!("expected {} values, got {}", n, data.len()),
                ));
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::invalid("tensor dump", format!("bad value {:?}", tok)))?;
                data.push(v);
            }
        }
        if data.len() != n {
            return Err(Error::invalid(
                "tensor dump",
                format!("expected {} values, got {}", n, data.len()),
            ));
        }
        Tensor::new(shape, data)
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_dump(&mut f)
    }

    pub fn load_dump(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_dump(&mut f)
    }
}

/// Row-major flat offset for a multi-index.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut off = 0;
    for (d, (&s, &i)) in shape.iter().zip(idx).enumerate() {
        debug_assert!(i < s, "index {} out of range for dim {} of {:?}", i, d, shape);
        off = off * s + i;
    }
    off
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("6 elements"));
    }

    #[test]
    fn flat_index_row_major() {
        assert_eq!(flat_index(&[2, 3, 4], &[1, 2, 3]), 23);
        assert_eq!(flat_index(&[2, 3, 4], &[0, 0, 0]), 0);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn dump_round_trips_bit_exact() {
        let mut rng = Rng::seed_from(7);
        let t = Tensor::randn(&[3, 5, 2], 1.7, &mut rng);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        let back = Tensor::read_dump(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn dump_scalar_round_trips() {
        let t = Tensor::scalar(std::f64::consts::PI);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        let back = Tensor::read_dump(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert!(back.is_scalar());
        assert_eq!(back.item(), std::f64::consts::PI);
    }

    #[test]
    fn dump_rejects_truncated_input() {
        let buf = b"shape: 2 2\n1.0 2.0\n".to_vec();
        assert!(Tensor::read_dump(&mut std::io::BufReader::new(&buf[..])).is_err());
    }
}
