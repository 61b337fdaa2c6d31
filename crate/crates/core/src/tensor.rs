//! Dense 4-D tensors in batch × channel × height × width order.
//!
//! Storage is a contiguous `Vec<f64>` in row-major order with the width axis
//! fastest, so the flat offset of `(n, c, h, w)` is `((n·C + c)·H + h)·W + w`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

fn element_count(shape: [usize; 4]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Overflow(shape))
}

impl Tensor {
    pub fn new(shape: [usize; 4], fill: f64) -> Result<Self> {
        let len = element_count(shape)?;
        Ok(Self {
            shape,
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = element_count(shape)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            data: vec![0.0; self.data.len()],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Elements in one (n, c) plane.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements in one sample (all channels).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> Result<usize> {
        let [sn, sc, sh, sw] = self.shape;
        if n >= sn || c >= sc || h >= sh || w >= sw {
            return Err(Error::IndexOutOfRange {
                index: [n, c, h, w],
                shape: self.shape,
            });
        }
        Ok(((n * sc + c) * sh + h) * sw + w)
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> Result<f64> {
        Ok(self.data[self.offset(n, c, h, w)?])
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) -> Result<()> {
        let off = self.offset(n, c, h, w)?;
        self.data[off] = value;
        Ok(())
    }

    /// Read of a (possibly out-of-range) spatial location; outside reads as zero.
    #[inline]
    pub fn get_or_zero(&self, n: usize, c: usize, h: i64, w: i64) -> f64 {
        let [_, sc, sh, sw] = self.shape;
        if h < 0 || w < 0 || h as usize >= sh || w as usize >= sw {
            return 0.0;
        }
        self.data[((n * sc + c) * sh + h as usize) * sw + w as usize]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    /// Copies the listed samples into a new tensor, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::IndexOutOfRange {
                    index: [i, 0, 0, 0],
                    shape: self.shape,
                });
            }
            data.extend_from_slice(self.sample(i));
        }
        Self::from_vec([indices.len(), self.shape[1], self.shape[2], self.shape[3]], data)
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::ShapeMismatch("cannot concatenate zero tensors".into()));
        };
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::ShapeMismatch(format!(
                    "concat of {:?} onto {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::from_vec([n, c, h, w], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}
