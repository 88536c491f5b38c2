//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. [`Graph::backward`]
//! walks the tape from the loss back to the first node, so adjoints are
//! replayed in exact reverse execution order and a value consumed by `k`
//! operations receives exactly `k` contributions.

use super::conv;
use super::ops;
use super::pool;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AvgPool3d(Var),
    GlobalAvgPool(Var),
    ChannelNorm(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
    },
    Sum(Var),
    Scale(Var, f32),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    replay: Vec<Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn last_replay(&self) -> &[Var] {
        &self.replay
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = conv::conv3d(self.value(input), self.value(kernel), stride)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                stride,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let out = pool::avg_pool3d(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::AvgPool3d(x), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let out = pool::channel_norm(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::ChannelNorm(x), rg))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(weight), self.value(bias))?;
        let rg = self.needs(&[x, weight, bias]);
        Ok(self.push(out, Op::Linear { x, weight, bias }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let loss = ops::softmax_cross_entropy(self.value(logits), label)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, label },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let src = self.value(x);
        let out = Tensor::from_fn(src.shape(), |i| src.data()[i] * factor);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Back-propagates from a scalar `loss`. Afterwards every trainable leaf
    /// holds `dLoss/dLeaf`; leaves the loss does not depend on hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        self.replay.clear();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.replay.push(Var(idx));
            for (target, contribution) in self.adjoints(idx, &g)? {
                accumulate(&mut grads[target.0], contribution);
            }
            grads[idx] = Some(g);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let n = node.value.numel();
                node.value.set_grad(grad.unwrap_or_else(|| vec![0.0; n]))?;
            } else if let Some(g) = grad {
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Contributions of node `idx`'s output gradient to each of its inputs.
    fn adjoints(&self, idx: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                stride,
            } => {
                let (gi, gk) = conv::conv3d_backward(
                    self.value(input),
                    self.value(kernel),
                    stride,
                    g,
                    wants(input),
                    wants(kernel),
                )?;
                out.extend(gi.map(|gi| (input, gi)));
                out.extend(gk.map(|gk| (kernel, gk)));
            }
            Op::Relu(x) => {
                let xs = self.value(x).data();
                let dx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((x, dx));
            }
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, g.to_vec()));
                }
                if wants(b) {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, g.to_vec()));
                }
                if wants(b) {
                    out.push((b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::AvgPool3d(x) => out.push((x, pool::avg_pool3d_backward(self.value(x).shape(), g)?)),
            Op::GlobalAvgPool(x) => {
                out.push((x, pool::global_avg_pool_backward(self.value(x).shape(), g)))
            }
            Op::ChannelNorm(x) => out.push((
                x,
                pool::channel_norm_backward(self.value(x), node.value.data(), g)?,
            )),
            Op::Linear { x, weight, bias } => {
                let (k, c) = ops::linear_dims(self.value(x), self.value(weight), self.value(bias))?;
                let xs = self.value(x).data();
                let w = self.value(weight).data();
                if wants(x) {
                    let dx = (0..c)
                        .map(|j| (0..k).map(|i| w[i * c + j] * g[i]).sum())
                        .collect();
                    out.push((x, dx));
                }
                if wants(weight) {
                    let dw = (0..k * c).map(|i| g[i / c] * xs[i % c]).collect();
                    out.push((weight, dw));
                }
                if wants(bias) {
                    out.push((bias, g.to_vec()));
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let mut p = ops::softmax(self.value(logits).data());
                p[label] -= 1.0;
                out.push((logits, p.into_iter().map(|v| v * g[0]).collect()));
            }
            Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).numel()])),
            Op::Scale(x, factor) => out.push((x, g.iter().map(|v| v * factor).collect())),
        }
        out.retain(|(v, _)| wants(*v));
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}
