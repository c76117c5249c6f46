//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every taped operation appends a node holding its forward value and the
//! context its backward rule needs. Nodes only reference earlier nodes, so the
//! tape order is a topological order and the backward pass is a single reverse
//! sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeometry};
use crate::kernels::dense;
use crate::kernels::norm::{self, Mode};
use crate::kernels::pool;
use crate::tensor::{Element, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Softmax {
        input: Var,
    },
    Cce {
        probs: Var,
        onehot: Tensor<T>,
    },
    Sum {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::Cce { .. } => "cce_loss",
            Op::Sum { .. } => "sum",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by one backward sweep.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the seeded output with respect to `v`, if `v` lies on a
    /// differentiable path to it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }

    /// Number of nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var belongs to this tape").value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::Autodiff(
                "value was not recorded on this tape".into(),
            ));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Autodiff(format!("unknown node {}", v.index)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out = conv::conv2d(
            &self.node(input)?.value,
            &self.node(kernel)?.value,
            bias.map(|b| self.node(b).map(|n| &n.value)).transpose()?,
            geom,
        )?;
        let rg = self.any_grad(&[input, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel spatial filtering with `kernel [C,k,k]`.
    pub fn depthwise(&mut self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let out = conv::depthwise_conv2d(&self.node(input)?.value, &self.node(kernel)?.value, geom)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(out, Op::Depthwise { input, kernel, geom }, rg))
    }

    /// Depthwise-separable convolution: depthwise stage then 1×1 mixing.
    pub fn separable_conv2d(
        &mut self,
        input: Var,
        depth_kernel: Var,
        point_kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let (_, _, kh, kw) = self.node(point_kernel)?.value.dims4("separable_conv2d")?;
        if (kh, kw) != (1, 1) {
            return Err(Error::shape(
                "separable_conv2d",
                format!("pointwise kernel must be 1×1, got {kh}×{kw}"),
            ));
        }
        let depth = self.depthwise(input, depth_kernel, geom)?;
        self.conv2d(depth, point_kernel, Some(bias), ConvGeometry::valid())
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.node(input)?.value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Relu { input }, rg))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = pool::max_pool2d(&self.node(input)?.value, 2, 2)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = pool::global_avg_pool(&self.node(input)?.value)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    /// Batch normalization. In train mode the batch mean and biased variance
    /// are returned so the caller can update its running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let f = norm::batch_norm(
            &self.node(input)?.value,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
            running_mean,
            running_var,
            mode,
        )?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            f.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized: f.normalized,
                inv_std: f.inv_std,
                mode,
            },
            rg,
        );
        Ok((v, f.batch_stats))
    }

    /// Concatenates along axis 1 (channels); all other extents must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = self
            .node(*inputs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)?
            .value
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape(OP, "inputs need a channel axis"));
        }
        let n = first[0];
        let inner: Vec<usize> = first[2..].to_vec();
        let inner_len: usize = inner.iter().product();
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.node(v)?.value.shape();
            if s.len() != first.len() || s[0] != n || s[2..] != inner[..] {
                return Err(Error::shape(
                    OP,
                    format!("extent mismatch: {s:?} vs {first:?} outside the channel axis"),
                ));
            }
            channels.push(s[1]);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * inner_len);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let src = self.node(v)?.value.data();
                data.extend_from_slice(&src[b * c * inner_len..(b + 1) * c * inner_len]);
            }
        }
        let mut shape = vec![n, total];
        shape.extend(inner);
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = dense::linear(
            &self.node(input)?.value,
            &self.node(weights)?.value,
            &self.node(bias)?.value,
        )?;
        let rg = self.any_grad(&[input, weights, bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = dense::softmax(&self.node(input)?.value)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Softmax { input }, rg))
    }

    /// Fully connected layer followed by softmax. Returns `(logits, probs)`.
    pub fn dense_softmax(&mut self, input: Var, weights: Var, bias: Var) -> Result<(Var, Var)> {
        let k = self.node(weights)?.value.shape().first().copied().unwrap_or(0);
        if k < 2 {
            return Err(Error::shape(
                "dense_softmax",
                format!("need at least 2 classes, weights give {k}"),
            ));
        }
        let logits = self.linear(input, weights, bias)?;
        let probs = self.softmax(logits)?;
        Ok((logits, probs))
    }

    pub fn cce_loss(&mut self, probs: Var, onehot: Tensor<T>) -> Result<Var> {
        let loss = dense::cce_loss(&self.node(probs)?.value, &onehot)?;
        let rg = self.requires_grad(probs);
        Ok(self.push(Tensor::scalar(loss), Op::Cce { probs, onehot }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.node(input)?.value.sum();
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, rg))
    }

    /// `Σ input ⊙ weights` for a constant `weights` of the same shape.
    pub fn dot(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.shape() != weights.shape() {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", x.shape(), weights.shape()),
            ));
        }
        let s = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }, rg))
    }

    /// Differentiates a scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let seed = Tensor::full(node.value.shape(), T::one());
        self.backward_with(loss, seed)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// through the tape.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let node = self.node(output)?;
        if !node.requires_grad {
            return Err(Error::Autodiff(format!(
                "`{}` output does not depend on any trainable value",
                node.op.name()
            )));
        }
        if seed.shape() != node.value.shape() {
            return Err(Error::Autodiff(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.index] = Some(seed);
        let mut visited = 0;
        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.index].requires_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need_input = self.requires_grad(*input);
                let cg = conv::conv2d_backward(
                    &self.nodes[input.index].value,
                    &self.nodes[kernel.index].value,
                    g,
                    *geom,
                    need_input,
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *kernel, cg.kernel);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias);
                }
            }
            Op::Depthwise {
                input,
                kernel,
                geom,
            } => {
                let need_input = self.requires_grad(*input);
                let (dx, dk) = conv::depthwise_conv2d_backward(
                    &self.nodes[input.index].value,
                    &self.nodes[kernel.index].value,
                    g,
                    *geom,
                    need_input,
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *kernel, dk);
            }
            Op::Relu { input } => {
                let x = &self.nodes[input.index].value;
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, Tensor::from_vec(x.shape(), data)?);
            }
            Op::MaxPool { input, argmax } => {
                let shape = self.nodes[input.index].value.shape();
                self.accumulate(grads, *input, pool::max_pool2d_backward(shape, argmax, g));
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.nodes[input.index].value.shape();
                self.accumulate(grads, *input, pool::global_avg_pool_backward(shape, g));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            } => {
                let (dx, dg, db) = norm::batch_norm_backward(
                    normalized,
                    inv_std,
                    &self.nodes[gamma.index].value,
                    g,
                    *mode,
                );
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Concat { inputs } => {
                let shape = g.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1];
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.nodes[v.index].value.shape().to_vec();
                    let c = vs[1];
                    if self.nodes[v.index].requires_grad {
                        let mut part = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let start = (b * total + offset) * inner;
                            part.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(&vs, part)?);
                    }
                    offset += c;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Linear {
                input,
                weights,
                bias,
            } => {
                let (dx, dw, db) = dense::linear_backward(
                    &self.nodes[input.index].value,
                    &self.nodes[weights.index].value,
                    g,
                );
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *weights, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::Softmax { input } => {
                self.accumulate(grads, *input, dense::softmax_backward(&node.value, g));
            }
            Op::Cce { probs, onehot } => {
                let p = &self.nodes[probs.index].value;
                self.accumulate(grads, *probs, dense::cce_loss_backward(p, onehot, g.item()));
            }
            Op::Sum { input } => {
                let shape = self.nodes[input.index].value.shape();
                self.accumulate(grads, *input, Tensor::full(shape, g.item()));
            }
            Op::Dot { input, weights } => {
                let s = g.item();
                self.accumulate(grads, *input, weights.map(|w| w * s));
            }
        }
        Ok(())
    }
}
