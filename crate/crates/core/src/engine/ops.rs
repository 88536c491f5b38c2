//! Elementwise, affine and loss kernels on plain tensors.

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape(), data)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
}

/// `y = W x + b` for `x: [c]`, `W: [k, c]`, `b: [k]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k, c) = linear_dims(x, weight, bias)?;
    let w = weight.data();
    let out = (0..k)
        .map(|row| {
            let dot: f32 = w[row * c..(row + 1) * c]
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum();
            dot + bias.data()[row]
        })
        .collect();
    Tensor::new(&[k], out)
}

pub(crate) fn linear_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    match (x.shape(), weight.shape(), bias.shape()) {
        (&[c], &[k, c2], &[k2]) if c == c2 && k == k2 => Ok((k, c)),
        (xs, ws, bs) => Err(Error::Shape(format!(
            "linear: incompatible shapes x {xs:?}, W {ws:?}, b {bs:?}"
        ))),
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// `-log softmax(logits)[label]` via the log-sum-exp shift.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f32> {
    let z = logits.data();
    if logits.rank() != 1 {
        return Err(Error::Shape(format!(
            "logits must be rank 1, got {:?}",
            logits.shape()
        )));
    }
    if label >= z.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + z.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    Ok((lse - z[label] as f64) as f32)
}
