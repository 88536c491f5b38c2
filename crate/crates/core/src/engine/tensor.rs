use crate::error::{Error, Result};

/// Dense row-major `f32` array with an optional gradient buffer.
///
/// Feature maps use the `[channels, depth, height, width]` layout and
/// convolution kernels `[out_ch, in_ch, kd, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected = checked_numel(shape)?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    /// A rank-1 tensor with one element, used for scalar losses.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Argument(format!(
                "item() needs a one-element tensor, shape is {:?}",
                self.shape
            ))),
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial extents `(D, H, W)` of a `[C, D, H, W]` feature map.
    pub fn spatial(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [_, d, h, w] => Ok((*d, *h, *w)),
            s => Err(Error::Shape(format!(
                "expected a [C, D, H, W] tensor, got {s:?}"
            ))),
        }
    }

    /// Strips the gradient buffer and returns a plain value copy.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))
}
