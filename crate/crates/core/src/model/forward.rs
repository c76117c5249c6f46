use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::norm::{self, Mode};
use crate::tensor::{Element, Tensor};

use super::graph::{LayerKind, ModelGraph, NodeId};

/// Handles into a tape produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub probs: Var,
    /// One entry per model parameter, in [`ModelGraph::params`] order.
    pub params: Vec<Var>,
    /// Output of every layer, in node order.
    pub nodes: Vec<Var>,
}

impl ForwardPass {
    pub fn node(&self, id: NodeId) -> Var {
        self.nodes[id]
    }
}

type BnStats<T> = (usize, Vec<T>, Vec<T>);

impl<T: Element> ModelGraph<T> {
    /// Records a forward pass over `input [N,C,H,W]`. In train mode batch
    /// statistics are used and the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardPass> {
        let mut stats = Vec::new();
        let pass = self.run(tape, input, mode, true, &mut stats)?;
        for (node, mean, var) in stats {
            let ids = &self.node_buffers[node];
            norm::update_running(&mut self.buffers[ids[0]].tensor, &mean);
            norm::update_running(&mut self.buffers[ids[1]].tensor, &var);
        }
        Ok(pass)
    }

    /// Inference-mode pass with trainable parameters, for attribution.
    pub fn forward_infer(&self, tape: &mut Tape<T>, input: Var) -> Result<ForwardPass> {
        self.run(tape, input, Mode::Infer, true, &mut Vec::new())
    }

    /// Class probabilities for a batch in inference mode.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.run(&mut tape, x, Mode::Infer, false, &mut Vec::new())?;
        Ok(tape.value(pass.probs).clone())
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        trainable: bool,
        stats: &mut Vec<BnStats<T>>,
    ) -> Result<ForwardPass> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.nodes[0].shape[..] {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has shape {shape:?}, model expects N×{:?}",
                    self.nodes[0].shape
                ),
            ));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable))
            .collect();
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut logits = None;
        let mut probs = None;
        for (id, node) in self.nodes.iter().enumerate() {
            let spec = &node.spec;
            let src = |i: usize| vars[spec.sources[i]];
            let p = |i: usize| params[self.node_params[id][i]];
            let out = match spec.kind {
                LayerKind::Input => input,
                k if k.is_dense_conv() => tape.conv2d(src(0), p(0), Some(p(1)), spec.geometry())?,
                LayerKind::Dwsc => {
                    tape.separable_conv2d(src(0), p(0), p(1), p(2), spec.geometry())?
                }
                LayerKind::Relu => tape.relu(src(0))?,
                LayerKind::BatchNorm => {
                    let bufs = &self.node_buffers[id];
                    let (v, batch) = tape.batch_norm(
                        src(0),
                        p(0),
                        p(1),
                        &self.buffers[bufs[0]].tensor,
                        &self.buffers[bufs[1]].tensor,
                        mode,
                    )?;
                    if let Some((m, var)) = batch {
                        stats.push((id, m, var));
                    }
                    v
                }
                LayerKind::MaxPool => tape.max_pool2d(src(0))?,
                LayerKind::Gap => tape.global_avg_pool(src(0))?,
                LayerKind::Concat => {
                    let inputs: Vec<Var> = spec.sources.iter().map(|&s| vars[s]).collect();
                    tape.concat_channels(&inputs)?
                }
                LayerKind::Add => {
                    let mut acc = src(0);
                    for i in 1..spec.sources.len() {
                        acc = tape.add(acc, src(i))?;
                    }
                    acc
                }
                LayerKind::DenseSoftmax => {
                    let (l, pr) = tape.dense_softmax(src(0), p(0), p(1))?;
                    logits = Some(l);
                    probs = Some(pr);
                    pr
                }
                other => unreachable!("unhandled layer kind {other}"),
            };
            vars.push(out);
        }
        Ok(ForwardPass {
            logits: logits.expect("graph has a classifier"),
            probs: probs.expect("graph has a classifier"),
            params,
            nodes: vars,
        })
    }
}
