//! The image payload shared by every stage of the pipeline.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A 2D image with one or more channels.
///
/// Storage is planar: `channels` consecutive row-major `height×width` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorImage<S> {
    data: Vec<S>,
    height: usize,
    width: usize,
    channels: usize,
}

impl<S: Scalar> TensorImage<S> {
    /// Builds an image, rejecting wrong lengths, zero dimensions and
    /// non-finite values.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::shape("image dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image element {i}")));
        }
        Ok(TensorImage {
            data,
            height,
            width,
            channels,
        })
    }

    /// Builds without the finiteness scan. Callers guarantee the invariant.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        TensorImage {
            data,
            height,
            width,
            channels,
        }
    }

    pub fn filled(height: usize, width: usize, value: S) -> Self {
        Self::from_raw(height, width, 1, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, S::zero())
    }

    /// Single-channel image from a `(row, col)` function.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::from_raw(height, width, 1, data)
    }

    /// Single-channel image from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| S::lit(v)))
            .collect();
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[S] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?} (channels, height, width)",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise combination; errors on shape mismatch.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other, "elementwise operation")?;
        Ok(Self::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn cast<T: Scalar>(&self) -> TensorImage<T> {
        TensorImage::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm in `f64`.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}
