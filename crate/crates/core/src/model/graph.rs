//! Declarative layer graph of MSAD-Net and its builder.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, DENSE_STAGES};
use crate::error::{Error, Result};
use crate::kernels::conv::{axis_output, effective_extent, ConvGeometry, Padding};
use crate::tensor::{Element, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Input,
    Conv3x3,
    Conv5x5,
    Conv1x1,
    Dwsc,
    DilConv,
    BatchNorm,
    Relu,
    MaxPool,
    Gap,
    Concat,
    Add,
    #[serde(rename = "dense_softmax")]
    DenseSoftmax,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv5x5 => "conv5x5",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::Dwsc => "dwsc",
            LayerKind::DilConv => "dilconv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Gap => "gap",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::DenseSoftmax => "dense_softmax",
        }
    }

    /// Kinds that are a plain multi-filter convolution.
    pub fn is_dense_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 | LayerKind::Conv5x5 | LayerKind::Conv1x1 | LayerKind::DilConv
        )
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which part of the network a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Base,
    Skip,
    Attention,
    Head,
}

/// One layer: what it computes and where its inputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Output channels (filters) for convolutional and dense layers.
    pub filters: Option<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub sources: Vec<NodeId>,
    pub branch: Branch,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, sources: Vec<NodeId>, branch: Branch) -> Self {
        Self {
            name: name.into(),
            kind,
            filters: None,
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
            dilation: 1,
            sources,
            branch,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding, self.dilation)
    }
}

/// A layer with its inferred per-sample output shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub spec: LayerSpec,
    /// `[C, H, W]` for feature maps, `[D]` for vectors.
    pub shape: Vec<usize>,
}

/// Incrementally assembles a topologically ordered layer graph.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<GraphNode>,
    taps: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new(channels: usize, size: usize) -> Self {
        let input = GraphNode {
            spec: LayerSpec::new("input", LayerKind::Input, vec![], Branch::Base),
            shape: vec![channels, size, size],
        };
        Self {
            nodes: vec![input],
            taps: BTreeMap::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn tap(&mut self, name: &str, id: NodeId) {
        self.taps.insert(name.to_string(), id);
    }

    fn spatial(&self, op: &'static str, id: NodeId) -> Result<(usize, usize, usize)> {
        match self.nodes[id].shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape(
                op,
                format!("`{}` is not a feature map (shape {other:?})", self.nodes[id].spec.name),
            )),
        }
    }

    /// Validates `spec`, infers its output shape and appends it.
    pub fn push(&mut self, spec: LayerSpec) -> Result<NodeId> {
        if spec.kind != LayerKind::Input && spec.sources.is_empty() {
            return Err(Error::Config(format!("layer `{}` has no source", spec.name)));
        }
        if let Some(&s) = spec.sources.iter().find(|&&s| s >= self.nodes.len()) {
            return Err(Error::Config(format!(
                "layer `{}` references unknown node {s}",
                spec.name
            )));
        }
        if matches!(spec.kind, LayerKind::Concat | LayerKind::Add) && spec.sources.len() < 2 {
            return Err(Error::Config(format!("`{}` needs at least two sources", spec.name)));
        }
        if spec.kind == LayerKind::DilConv && (spec.dilation < 2 || spec.kernel != 3) {
            return Err(Error::Config(format!(
                "dilated layer `{}` needs a 3×3 kernel and dilation ≥ 2",
                spec.name
            )));
        }
        let src = spec.sources.first().copied().unwrap_or(0);
        let shape = match spec.kind {
            LayerKind::Input => {
                return Err(Error::Config("the graph already has an input".into()));
            }
            LayerKind::Conv3x3
            | LayerKind::Conv5x5
            | LayerKind::Conv1x1
            | LayerKind::DilConv
            | LayerKind::Dwsc => {
                let (_, h, w) = self.spatial("conv", src)?;
                let f = spec
                    .filters
                    .ok_or_else(|| Error::Config(format!("`{}` has no filter count", spec.name)))?;
                let (oh, _) = axis_output("conv", "height", h, spec.kernel, spec.geometry())
                    .map_err(|e| rename(e, &spec.name))?;
                let (ow, _) = axis_output("conv", "width", w, spec.kernel, spec.geometry())
                    .map_err(|e| rename(e, &spec.name))?;
                vec![f, oh, ow]
            }
            LayerKind::BatchNorm | LayerKind::Relu => self.nodes[src].shape.clone(),
            LayerKind::MaxPool => {
                let (c, h, w) = self.spatial("max_pool2d", src)?;
                if h < 2 || w < 2 {
                    return Err(Error::dim(
                        "max_pool2d",
                        format!("`{}` receives a {h}×{w} map, smaller than the 2×2 window", spec.name),
                    ));
                }
                vec![c, h / 2, w / 2]
            }
            LayerKind::Gap => {
                let (c, _, _) = self.spatial("global_avg_pool", src)?;
                vec![c]
            }
            LayerKind::Concat => {
                let first = &self.nodes[src].shape;
                let mut channels = 0;
                for &s in &spec.sources {
                    let sh = &self.nodes[s].shape;
                    if sh.len() != first.len() || sh[1..] != first[1..] {
                        return Err(Error::shape(
                            "concat_channels",
                            format!("`{}`: {sh:?} vs {first:?}", spec.name),
                        ));
                    }
                    channels += sh[0];
                }
                let mut shape = first.clone();
                shape[0] = channels;
                shape
            }
            LayerKind::Add => {
                let first = &self.nodes[src].shape;
                for &s in &spec.sources {
                    if &self.nodes[s].shape != first {
                        return Err(Error::shape(
                            "add",
                            format!("`{}`: {:?} vs {first:?}", spec.name, self.nodes[s].shape),
                        ));
                    }
                }
                first.clone()
            }
            LayerKind::DenseSoftmax => {
                if self.nodes[src].shape.len() != 1 {
                    return Err(Error::shape("dense_softmax", "input must be a feature vector"));
                }
                let k = spec.filters.unwrap_or(0);
                if k < 2 {
                    return Err(Error::Config("the classifier needs at least 2 classes".into()));
                }
                vec![k]
            }
        };
        self.nodes.push(GraphNode { spec, shape });
        Ok(self.nodes.len() - 1)
    }

    fn conv(
        &mut self,
        name: String,
        kind: LayerKind,
        src: NodeId,
        filters: usize,
        geom: (usize, Padding, usize),
        branch: Branch,
    ) -> Result<NodeId> {
        let (kernel, padding, dilation) = geom;
        let mut spec = LayerSpec::new(name, kind, vec![src], branch);
        spec.filters = Some(filters);
        spec.kernel = kernel;
        spec.padding = padding;
        spec.dilation = dilation;
        self.push(spec)
    }

    fn unary(&mut self, name: String, kind: LayerKind, src: NodeId, branch: Branch) -> Result<NodeId> {
        self.push(LayerSpec::new(name, kind, vec![src], branch))
    }

    /// Convolution followed by ReLU; returns the ReLU node.
    fn conv_relu(
        &mut self,
        name: &str,
        kind: LayerKind,
        src: NodeId,
        filters: usize,
        geom: (usize, Padding, usize),
        branch: Branch,
    ) -> Result<NodeId> {
        let c = self.conv(name.to_string(), kind, src, filters, geom, branch)?;
        self.unary(format!("{name}.relu"), LayerKind::Relu, c, branch)
    }

    /// Blocks 1–3: 3×3 conv (same) → ReLU → BN → optional 2×2 max pool.
    pub fn block123(&mut self, src: NodeId, filters: [usize; 3], pooling: [bool; 3]) -> Result<NodeId> {
        let mut x = src;
        for (b, (&f, &pool)) in filters.iter().zip(&pooling).enumerate() {
            let name = format!("block{}", b + 1);
            x = self.conv_relu(&format!("{name}.conv"), LayerKind::Conv3x3, x, f, (3, Padding::Same, 1), Branch::Base)?;
            x = self.unary(format!("{name}.bn"), LayerKind::BatchNorm, x, Branch::Base)?;
            if pool {
                x = self.unary(format!("{name}.pool"), LayerKind::MaxPool, x, Branch::Base)?;
            }
        }
        Ok(x)
    }

    /// Six-stage dense module (DWSC, 3×3, 1×1, 3×3, DWSC, DWSC), all with
    /// ReLU and same padding and no pooling. Returns the output node of every
    /// stage.
    pub fn dense_module(&mut self, src: NodeId, plan: &[usize], prefix: &str) -> Result<Vec<NodeId>> {
        if plan.len() != DENSE_STAGES {
            return Err(Error::Config(format!(
                "a dense module has {DENSE_STAGES} stages, plan lists {}",
                plan.len()
            )));
        }
        let kinds = [
            (LayerKind::Dwsc, "dwsc1", 3),
            (LayerKind::Conv3x3, "conv1", 3),
            (LayerKind::Conv1x1, "bottleneck", 1),
            (LayerKind::Conv3x3, "conv2", 3),
            (LayerKind::Dwsc, "dwsc2", 3),
            (LayerKind::Dwsc, "dwsc3", 3),
        ];
        let mut x = src;
        let mut outs = Vec::with_capacity(DENSE_STAGES);
        for (&(kind, stage, k), &f) in kinds.iter().zip(plan) {
            x = self.conv_relu(&format!("{prefix}.{stage}"), kind, x, f, (k, Padding::Same, 1), Branch::Base)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Attention branch: 5×5 DWSC → dilated 3×3 (rate 2, `filters` maps; or a
    /// plain 5×5 conv) → BN → 2×2 pool → 5×5 DWSC → BN, ReLU after every
    /// convolution and no sigmoid gate.
    pub fn sam(&mut self, src: NodeId, filters: usize, use_dilated: bool, padding: Padding) -> Result<NodeId> {
        let (c, _, _) = self.spatial("sam", src)?;
        let a = Branch::Attention;
        let x = self.conv_relu("sam.dwsc1", LayerKind::Dwsc, src, c, (5, padding, 1), a)?;
        let x = if use_dilated {
            self.conv_relu("sam.dilconv", LayerKind::DilConv, x, filters, (3, Padding::Same, 2), a)?
        } else {
            self.conv_relu("sam.conv5x5", LayerKind::Conv5x5, x, filters, (5, Padding::Same, 1), a)?
        };
        let x = self.unary("sam.bn1".into(), LayerKind::BatchNorm, x, a)?;
        let x = self.unary("sam.pool".into(), LayerKind::MaxPool, x, a)?;
        let x = self.conv_relu("sam.dwsc2", LayerKind::Dwsc, x, filters, (5, padding, 1), a)?;
        self.unary("sam.bn2".into(), LayerKind::BatchNorm, x, a)
    }

    /// Allocates and initializes parameters for every layer.
    pub fn finish<T: Element>(self, config: ModelConfig) -> Result<ModelGraph<T>> {
        let output = self.nodes.len() - 1;
        let outputs = self
            .nodes
            .iter()
            .filter(|n| n.spec.kind == LayerKind::DenseSoftmax)
            .count();
        if outputs != 1 || self.nodes[output].spec.kind != LayerKind::DenseSoftmax {
            return Err(Error::Config(
                "graph must end in exactly one dense_softmax layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut node_params = Vec::with_capacity(self.nodes.len());
        let mut node_buffers = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let spec = &node.spec;
            let in_shape = spec.sources.first().map(|&s| self.nodes[s].shape.clone());
            let mut ids = Vec::new();
            let mut bufs = Vec::new();
            let mut add = |params: &mut Vec<NamedTensor<T>>, suffix: &str, t: Tensor<T>| {
                ids.push(params.len());
                params.push(NamedTensor::new(format!("{}.{suffix}", spec.name), t));
            };
            match spec.kind {
                k if k.is_dense_conv() => {
                    let c = in_shape.as_ref().unwrap()[0];
                    let f = node.shape[0];
                    let fan_in = c * spec.kernel * spec.kernel;
                    add(&mut params, "weight", he_uniform(&[f, c, spec.kernel, spec.kernel], fan_in, &mut rng));
                    add(&mut params, "bias", Tensor::zeros(&[f]));
                }
                LayerKind::Dwsc => {
                    let c = in_shape.as_ref().unwrap()[0];
                    let f = node.shape[0];
                    let k = spec.kernel;
                    add(&mut params, "depthwise", he_uniform(&[c, k, k], k * k, &mut rng));
                    add(&mut params, "pointwise", he_uniform(&[f, c, 1, 1], c, &mut rng));
                    add(&mut params, "bias", Tensor::zeros(&[f]));
                }
                LayerKind::BatchNorm => {
                    let c = node.shape[0];
                    add(&mut params, "gamma", Tensor::ones(&[c]));
                    add(&mut params, "beta", Tensor::zeros(&[c]));
                    bufs.push(buffers.len());
                    buffers.push(NamedTensor::new(format!("{}.running_mean", spec.name), Tensor::zeros(&[c])));
                    bufs.push(buffers.len());
                    buffers.push(NamedTensor::new(format!("{}.running_var", spec.name), Tensor::ones(&[c])));
                }
                LayerKind::DenseSoftmax => {
                    let d = in_shape.as_ref().unwrap()[0];
                    let k = node.shape[0];
                    // Kept small so the softmax starts near uniform even when
                    // the pooled features are large.
                    let limit = CLASSIFIER_INIT / (d as f64).sqrt();
                    add(&mut params, "weight", Tensor::uniform(&[k, d], -limit, limit, &mut rng));
                    add(&mut params, "bias", Tensor::zeros(&[k]));
                }
                _ => {}
            }
            node_params.push(ids);
            node_buffers.push(bufs);
        }
        Ok(ModelGraph {
            config,
            nodes: self.nodes,
            node_params,
            node_buffers,
            params,
            buffers,
            taps: self.taps,
            output,
        })
    }
}

fn rename(e: Error, layer: &str) -> Error {
    match e {
        Error::Dimension { op, detail } => Error::Dimension {
            op,
            detail: format!("layer `{layer}`: {detail}"),
        },
        other => other,
    }
}

/// Classifier weights are uniform in `±CLASSIFIER_INIT / sqrt(fan_in)`.
const CLASSIFIER_INIT: f64 = 0.05;

/// Uniform in `±sqrt(6 / fan_in)`, the fan-in scaling for ReLU layers.
fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T> NamedTensor<T> {
    pub fn new(name: String, tensor: Tensor<T>) -> Self {
        Self { name, tensor }
    }
}

/// Assembled network: layers in topological order, their parameters, batch
/// norm running statistics and named taps.
#[derive(Clone)]
pub struct ModelGraph<T> {
    pub(crate) config: ModelConfig,
    pub(crate) nodes: Vec<GraphNode>,
    pub(crate) node_params: Vec<Vec<usize>>,
    pub(crate) node_buffers: Vec<Vec<usize>>,
    pub(crate) params: Vec<NamedTensor<T>>,
    pub(crate) buffers: Vec<NamedTensor<T>>,
    pub(crate) taps: BTreeMap<String, NodeId>,
    pub(crate) output: NodeId,
}

impl<T: Element> fmt::Debug for ModelGraph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelGraph")
            .field("layers", &self.nodes.len())
            .field("params", &self.params)
            .field("output", &self.output)
            .finish()
    }
}

impl<T: Element> ModelGraph<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id]
    }

    /// Indices into [`Self::params`] owned by layer `id`.
    pub fn node_params(&self, id: NodeId) -> &[usize] {
        &self.node_params[id]
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.buffers
    }

    pub fn taps(&self) -> &BTreeMap<String, NodeId> {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Result<NodeId> {
        self.taps.get(name).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown tap `{name}`; available taps: {}",
                self.taps.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn num_classes(&self) -> usize {
        self.nodes[self.output].shape[0]
    }

    /// Width of the feature vector entering the classifier.
    pub fn classifier_width(&self) -> usize {
        let src = self.nodes[self.output].spec.sources[0];
        self.nodes[src].shape[0]
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Per-sample input shape `[C, H, W]`.
    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    /// Output spatial sizes of the pooling layers on the base path, in order.
    pub fn base_pool_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.nodes[0].shape[1]];
        trace.extend(
            self.nodes
                .iter()
                .filter(|n| n.spec.kind == LayerKind::MaxPool && n.spec.branch == Branch::Base)
                .map(|n| n.shape[1]),
        );
        trace
    }

    /// Overwrites every parameter with zero.
    pub fn zero_params(&mut self) {
        for p in &mut self.params {
            p.tensor.data_mut().fill(T::zero());
        }
    }

    /// Copies parameter and buffer values from another graph of the same topology.
    pub fn load_state_from(&mut self, other: &ModelGraph<T>) -> Result<()> {
        if other.params.len() != self.params.len() || other.buffers.len() != self.buffers.len() {
            return Err(Error::Config("models have different topologies".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params).chain(self.buffers.iter_mut().zip(&other.buffers)) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Config(format!("state `{}` does not match `{}`", dst.name, src.name)));
            }
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

/// Assembles the full network described by `config`:
///
/// blocks 1–3, dense module 1 (block 4), the residual merge of the block-3
/// output into the block-5 input, dense module 2 (block 5), global average
/// pooling, the attention branch with its own pooling, channel concatenation
/// and the softmax classifier.
pub fn build_msadnet<T: Element>(config: &ModelConfig) -> Result<ModelGraph<T>> {
    config.validate()?;
    let mut g = GraphBuilder::new(config.input_channels, config.input_size);
    let pools = config.block_pooling;
    let block3 = g.block123(g.input(), config.block_filters, [pools[0], pools[1], pools[2]])?;
    g.tap("block3_out", block3);

    let dense1 = g.dense_module(block3, &config.dense_module1, "block4")?;
    let mut block4 = *dense1.last().unwrap();
    if pools[3] {
        block4 = g.unary("block4.pool".into(), LayerKind::MaxPool, block4, Branch::Base)?;
    }
    g.tap("block4_out", block4);
    let sam_tap = if config.sam_tap_stage == 0 {
        block3
    } else {
        dense1[config.sam_tap_stage - 1]
    };
    g.tap("block4_mid", sam_tap);

    let mut block5_in = block4;
    if config.enable_skip1 {
        let mut s = block3;
        if pools[3] {
            s = g.unary("skip1.pool".into(), LayerKind::MaxPool, s, Branch::Skip)?;
        }
        let target = g.shape(block4)[0];
        s = g.conv("skip1.proj".into(), LayerKind::Conv1x1, s, target, (1, Padding::Valid, 1), Branch::Skip)?;
        block5_in = g.push(LayerSpec::new("skip1.add", LayerKind::Add, vec![block4, s], Branch::Skip))?;
    }
    g.tap("block5_in", block5_in);

    let dense2 = g.dense_module(block5_in, &config.dense_module2, "block5")?;
    let mut block5 = *dense2.last().unwrap();
    g.tap("block5_out", block5);
    if pools[4] {
        block5 = g.unary("block5.pool".into(), LayerKind::MaxPool, block5, Branch::Base)?;
    }
    let base_gap = g.unary("gap".into(), LayerKind::Gap, block5, Branch::Base)?;
    g.tap("gap_out", base_gap);

    let features = if config.enable_sam {
        let sam = g.sam(
            sam_tap,
            config.sam_filters,
            !config.sam_uses_plain_conv5x5,
            config.sam_stage_padding,
        )?;
        g.tap("sam_out", sam);
        let sam_gap = g.unary("sam.gap".into(), LayerKind::Gap, sam, Branch::Attention)?;
        g.push(LayerSpec::new("concat", LayerKind::Concat, vec![base_gap, sam_gap], Branch::Head))?
    } else {
        base_gap
    };
    g.tap("features", features);
    let mut head = LayerSpec::new("classifier", LayerKind::DenseSoftmax, vec![features], Branch::Head);
    head.filters = Some(config.num_classes);
    g.push(head)?;
    g.finish(config.clone())
}

/// Effective receptive extent of a layer's kernel.
pub fn receptive_extent(spec: &LayerSpec) -> usize {
    effective_extent(spec.kernel, spec.dilation)
}
