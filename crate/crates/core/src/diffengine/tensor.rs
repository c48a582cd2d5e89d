use crate::error::{Error, Result};
use crate::image::Image;

/// Dense row-major `f64` array with 1 to 4 dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidTensor(format!(
            "tensors have 1 to 4 dimensions, got {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidTensor(format!(
            "zero-sized dimension in {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// `[H, W]` tensor holding the image.
    pub fn from_image(img: &Image) -> Self {
        Self {
            shape: vec![img.height(), img.width()],
            data: img.data().to_vec(),
            requires_grad: false,
        }
    }

    /// Interprets a `[H, W]` or `[1, H, W]` tensor as an image.
    pub fn to_image(&self) -> Result<Image> {
        match self.shape.as_slice() {
            [h, w] | [1, h, w] => Image::from_vec(*w, *h, self.data.clone()),
            s => Err(Error::InvalidTensor(format!(
                "cannot view shape {s:?} as an image"
            ))),
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn into_parts(self) -> (Vec<usize>, Vec<f64>, bool) {
        (self.shape, self.data, self.requires_grad)
    }
}
