//! Closed-form trainable-parameter counts, checked against a built graph.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Branch, LayerKind, ModelGraph};
use crate::tensor::Element;

/// `(k²·f0 + 1)·f1`: a k×k convolution from `f0` to `f1` maps with bias.
pub fn count_conv(f0: usize, f1: usize, k: usize) -> usize {
    (k * k * f0 + 1) * f1
}

/// `(f0 + 1)·f1x1`: a pointwise convolution with bias.
pub fn count_conv1x1(f0: usize, f1x1: usize) -> usize {
    (f0 + 1) * f1x1
}

/// Cost of a 3×3 convolution `f0 → f1` with and without a 1×1 bottleneck of
/// width `f1x1` in front of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Sandwich {
    pub with_bottleneck: usize,
    pub without_bottleneck: usize,
    /// Negative when the bottleneck costs more than it saves.
    pub savings: i64,
}

pub fn count_sandwich(f0: usize, f1x1: usize, f1: usize) -> Sandwich {
    let with_bottleneck = count_conv(f1x1, f1, 3) + count_conv1x1(f0, f1x1);
    let without_bottleneck = count_conv(f0, f1, 3);
    Sandwich {
        with_bottleneck,
        without_bottleneck,
        savings: without_bottleneck as i64 - with_bottleneck as i64,
    }
}

/// Simplified DWSC count `(3²·1 + 1)·C = 10C`.
pub fn count_dwsc_quoted(c: usize) -> usize {
    10 * c
}

/// Depthwise `k²·C` (no bias) plus pointwise `(C + 1)·F`.
pub fn count_dwsc_full(c: usize, f: usize, k: usize) -> usize {
    k * k * c + (c + 1) * f
}

/// `γ` and `β`; running statistics are not trainable.
pub fn count_batch_norm(c: usize) -> usize {
    2 * c
}

/// Fully connected `d → k` with bias.
pub fn count_dense(d: usize, k: usize) -> usize {
    (d + 1) * k
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerEntry {
    pub layer: String,
    pub kind: LayerKind,
    pub block: String,
    pub branch: Branch,
    pub closed_form: usize,
    pub actual: usize,
    /// The simplified `10C` figure for DWSC layers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dwsc_quoted_form: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SandwichEntry {
    pub module: String,
    pub f0: usize,
    pub f1x1: usize,
    pub f1: usize,
    #[serde(flatten)]
    pub counts: Sandwich,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub layers: Vec<LayerEntry>,
    pub blocks: BTreeMap<String, usize>,
    pub branches: BTreeMap<String, usize>,
    pub sandwiches: Vec<SandwichEntry>,
    pub total: usize,
}

impl ParamReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn branch_total(&self, branch: Branch) -> usize {
        self.branches.get(branch_key(branch)).copied().unwrap_or(0)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.layers.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "{:<width$}  {:<13}  {:>11}  {:>11}  {:>8}",
            "layer", "kind", "closed_form", "actual", "10C"
        )?;
        for l in &self.layers {
            let quoted = l.dwsc_quoted_form.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                f,
                "{:<width$}  {:<13}  {:>11}  {:>11}  {:>8}",
                l.layer,
                l.kind.as_str(),
                l.closed_form,
                l.actual,
                quoted
            )?;
        }
        writeln!(f)?;
        for (block, n) in &self.blocks {
            writeln!(f, "block {block:<12} {n:>11}")?;
        }
        for (branch, n) in &self.branches {
            writeln!(f, "branch {branch:<11} {n:>11}")?;
        }
        for s in &self.sandwiches {
            let mut line = String::new();
            let _ = write!(
                line,
                "sandwich {} ({}→{}→{}): with 1×1 {}, without {}, savings {}",
                s.module,
                s.f0,
                s.f1x1,
                s.f1,
                s.counts.with_bottleneck,
                s.counts.without_bottleneck,
                s.counts.savings
            );
            writeln!(f, "{line}")?;
        }
        write!(f, "total {}", self.total)
    }
}

fn branch_key(b: Branch) -> &'static str {
    match b {
        Branch::Base => "base",
        Branch::Skip => "skip",
        Branch::Attention => "attention",
        Branch::Head => "head",
    }
}

/// Closed-form count of one layer from its layer spec and input shape.
fn closed_form<T: Element>(model: &ModelGraph<T>, id: usize) -> Option<(usize, Option<usize>)> {
    let node = model.node(id);
    let spec = &node.spec;
    let f_in = spec.sources.first().map(|&s| model.node(s).shape[0]);
    let f_out = node.shape[0];
    Some(match spec.kind {
        LayerKind::Conv3x3 | LayerKind::Conv5x5 | LayerKind::DilConv => {
            (count_conv(f_in?, f_out, spec.kernel), None)
        }
        LayerKind::Conv1x1 => (count_conv1x1(f_in?, f_out), None),
        LayerKind::Dwsc => (
            count_dwsc_full(f_in?, f_out, spec.kernel),
            Some(count_dwsc_quoted(f_in?)),
        ),
        LayerKind::BatchNorm => (count_batch_norm(f_out), None),
        LayerKind::DenseSoftmax => (count_dense(f_in?, f_out), None),
        _ => return None,
    })
}

/// Counts every parameterized layer both ways and fails on the first layer
/// whose closed form disagrees with its tensors.
pub fn audit<T: Element>(model: &ModelGraph<T>) -> Result<ParamReport> {
    let mut layers = Vec::new();
    let mut blocks = BTreeMap::new();
    let mut branches = BTreeMap::new();
    for (id, node) in model.nodes().iter().enumerate() {
        let actual: usize = model
            .node_params(id)
            .iter()
            .map(|&p| model.params()[p].tensor.numel())
            .sum();
        let Some((closed, quoted)) = closed_form(model, id) else {
            if actual != 0 {
                return Err(Error::Audit {
                    layer: node.spec.name.clone(),
                    closed_form: 0,
                    actual,
                });
            }
            continue;
        };
        if closed != actual {
            return Err(Error::Audit {
                layer: node.spec.name.clone(),
                closed_form: closed,
                actual,
            });
        }
        let block = node.spec.name.split('.').next().unwrap_or_default().to_string();
        *blocks.entry(block.clone()).or_insert(0) += actual;
        *branches.entry(branch_key(node.spec.branch).to_string()).or_insert(0) += actual;
        layers.push(LayerEntry {
            layer: node.spec.name.clone(),
            kind: node.spec.kind,
            block,
            branch: node.spec.branch,
            closed_form: closed,
            actual,
            dwsc_quoted_form: quoted,
        });
    }
    let total: usize = layers.iter().map(|l| l.actual).sum();
    if total != model.trainable_count() {
        return Err(Error::Audit {
            layer: "<total>".into(),
            closed_form: total,
            actual: model.trainable_count(),
        });
    }
    Ok(ParamReport {
        sandwiches: sandwiches(model),
        layers,
        blocks,
        branches,
        total,
    })
}

/// The 3×3 → 1×1 → 3×3 core of each dense module.
fn sandwiches<T: Element>(model: &ModelGraph<T>) -> Vec<SandwichEntry> {
    let mut out = Vec::new();
    for (id, node) in model.nodes().iter().enumerate() {
        if node.spec.kind != LayerKind::Conv1x1 || !node.spec.name.ends_with(".bottleneck") {
            continue;
        }
        let module = node.spec.name.trim_end_matches(".bottleneck").to_string();
        let f0 = model.node(node.spec.sources[0]).shape[0];
        let f1x1 = node.shape[0];
        let next = model.nodes()[id + 1..]
            .iter()
            .find(|n| n.spec.name == format!("{module}.conv2"));
        if let Some(next) = next {
            let f1 = next.shape[0];
            out.push(SandwichEntry {
                module,
                f0,
                f1x1,
                f1,
                counts: count_sandwich(f0, f1x1, f1),
            });
        }
    }
    out
}
