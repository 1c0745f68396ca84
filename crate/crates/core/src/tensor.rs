//! Dense activation containers.

use rand::Rng;

use crate::element::{cast_vec, Element};
use crate::error::{Error, Result};

/// Rank-3 activation `[batch, channels, frames]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<F> {
    data: Vec<F>,
    batch: usize,
    channels: usize,
    frames: usize,
}

impl<F: Element> Tensor3<F> {
    pub fn new(data: Vec<F>, batch: usize, channels: usize, frames: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || frames == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor dimensions must be positive, got [{batch}, {channels}, {frames}]"
            )));
        }
        if data.len() != batch * channels * frames {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match [{batch}, {channels}, {frames}]",
                data.len()
            )));
        }
        Ok(Self {
            data,
            batch,
            channels,
            frames,
        })
    }

    pub fn zeros(batch: usize, channels: usize, frames: usize) -> Self {
        Self::filled(batch, channels, frames, F::zero())
    }

    pub fn filled(batch: usize, channels: usize, frames: usize, value: F) -> Self {
        assert!(batch > 0 && channels > 0 && frames > 0, "empty tensor");
        Self {
            data: vec![value; batch * channels * frames],
            batch,
            channels,
            frames,
        }
    }

    pub fn from_fn(
        batch: usize,
        channels: usize,
        frames: usize,
        mut f: impl FnMut(usize, usize, usize) -> F,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * channels * frames);
        for b in 0..batch {
            for n in 0..channels {
                for t in 0..frames {
                    data.push(f(b, n, t));
                }
            }
        }
        Self::new(data, batch, channels, frames).expect("positive dims")
    }

    /// Standard-normal-ish entries (sum of uniforms), deterministic for a given RNG state.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        batch: usize,
        channels: usize,
        frames: usize,
    ) -> Self {
        Self::from_fn(batch, channels, frames, |_, _, _| {
            F::from_f64_lossy(rng.gen_range(-1.0..1.0) * 1.7320508075688772)
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.channels, self.frames]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, n: usize, t: usize) -> F {
        self.data[(b * self.channels + n) * self.frames + t]
    }

    /// Frames of one `(batch, channel)` row.
    pub fn row(&self, b: usize, n: usize) -> &[F] {
        let start = (b * self.channels + n) * self.frames;
        &self.data[start..start + self.frames]
    }

    /// All channels of one batch item, `[channels, frames]` contiguous.
    pub fn item(&self, b: usize) -> &[F] {
        let len = self.channels * self.frames;
        &self.data[b * len..(b + 1) * len]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [F] {
        let len = self.channels * self.frames;
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Element>(&self) -> Tensor3<G> {
        Tensor3 {
            data: cast_vec(&self.data),
            batch: self.batch,
            channels: self.channels,
            frames: self.frames,
        }
    }

    /// Largest absolute element-wise difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }
}

/// Row-major 2-D array `[rows, cols]`, used after pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    data: Vec<F>,
    rows: usize,
    cols: usize,
}

impl<F: Element> Matrix<F> {
    pub fn new(data: Vec<F>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match [{rows}, {cols}]",
                data.len()
            )));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![F::zero(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { data, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<G: Element>(&self) -> Matrix<G> {
        Matrix {
            data: cast_vec(&self.data),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "max_abs_diff shape mismatch"
        );
        max_abs_diff(&self.data, &other.data)
    }
}

pub(crate) fn max_abs_diff<F: Element>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()))
}
