use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Plain SGD: `p <- p - lr * g` for every parameter, then clears the
/// gradients. Nothing is modified if any parameter lacks a gradient.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f32) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Argument(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::State(format!("parameter {i} has no gradient")));
    }
    for p in params.iter_mut() {
        let grad = p.take_grad().expect("checked above");
        for (v, g) in p.data_mut().iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}
