use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorImage;

/// Dense n-dimensional array, row-major. Feature maps are `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Array<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "array of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 array.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            3,
            "expected a [C, H, W] array, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Array<T> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn from_image(img: &TensorImage<S>) -> Self {
        let (c, h, w) = img.dims();
        Array {
            shape: vec![c, h, w],
            data: img.data().to_vec(),
        }
    }

    pub fn to_image(&self) -> Result<TensorImage<S>> {
        let (c, h, w) = self.chw();
        TensorImage::new(h, w, c, self.data.clone())
    }
}
