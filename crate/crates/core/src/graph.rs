//! Networks as ordered sequential layers of typed nodes.
//!
//! A [`ModelGraph`] is a frame-level trunk (a list of [`SequentialLayer`]s,
//! each an ordered list of [`Node`]s) followed by an optional pooling head
//! (statistics pooling and a chain of fully connected layers). Multi-branch
//! sets are represented by [`Node::BranchGroup`], whose branches all see the
//! same input and are summed in declaration order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::runtime::{
    activation, batchnorm_infer, conv1d, fc, se_block, stats_pool, Activation, BatchNormParams,
    Linear, SeParams, TdnnLayer,
};
use crate::tensor::{Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub enum BranchOp<F> {
    Conv(TdnnLayer<F>),
    /// Shortcut connection. Kept as a marker until re-parameterization
    /// materializes it as an identity kernel.
    Identity,
}

/// One branch of a multi-branch set, optionally preceded by its own batch
/// norm (the state after cross-sequential migration).
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<F> {
    pub pre_bn: Option<BatchNormParams<F>>,
    pub op: BranchOp<F>,
}

impl<F: Element> Branch<F> {
    pub fn conv(layer: TdnnLayer<F>) -> Self {
        Self {
            pre_bn: None,
            op: BranchOp::Conv(layer),
        }
    }

    pub fn identity() -> Self {
        Self {
            pre_bn: None,
            op: BranchOp::Identity,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.op, BranchOp::Identity)
    }

    pub fn as_conv(&self) -> Option<&TdnnLayer<F>> {
        match &self.op {
            BranchOp::Conv(l) => Some(l),
            BranchOp::Identity => None,
        }
    }

    pub fn forward(&self, x: &Tensor3<F>) -> Result<Tensor3<F>> {
        let normed;
        let input = match &self.pre_bn {
            Some(bn) => {
                normed = batchnorm_infer(x, bn)?;
                &normed
            }
            None => x,
        };
        match &self.op {
            BranchOp::Conv(l) => conv1d(input, l),
            BranchOp::Identity => Ok(input.clone()),
        }
    }

    fn cast<G: Element>(&self) -> Branch<G> {
        Branch {
            pre_bn: self.pre_bn.as_ref().map(BatchNormParams::cast),
            op: match &self.op {
                BranchOp::Conv(l) => BranchOp::Conv(l.cast()),
                BranchOp::Identity => BranchOp::Identity,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<F> {
    Conv(TdnnLayer<F>),
    BatchNorm(BatchNormParams<F>),
    Activation(Activation),
    Se(SeParams<F>),
    BranchGroup(Vec<Branch<F>>),
}

impl<F: Element> Node<F> {
    pub fn kind(&self) -> &'static str {
        match self {
            Node::Conv(_) => "conv",
            Node::BatchNorm(_) => "batchnorm",
            Node::Activation(_) => "activation",
            Node::Se(_) => "se",
            Node::BranchGroup(_) => "branch_group",
        }
    }

    pub fn forward(&self, x: &Tensor3<F>) -> Result<Tensor3<F>> {
        match self {
            Node::Conv(l) => conv1d(x, l),
            Node::BatchNorm(bn) => batchnorm_infer(x, bn),
            Node::Activation(a) => Ok(activation(x, *a)),
            Node::Se(se) => se_block(x, se),
            Node::BranchGroup(branches) => {
                let mut iter = branches.iter();
                let first = iter
                    .next()
                    .ok_or_else(|| Error::InvalidLayer("empty branch group".into()))?;
                let mut acc = first.forward(x)?;
                for b in iter {
                    acc.add_assign(&b.forward(x)?)?;
                }
                Ok(acc)
            }
        }
    }

    fn is_convlike(&self) -> bool {
        matches!(self, Node::Conv(_) | Node::BranchGroup(_))
    }

    fn any_pre_bn(&self) -> bool {
        matches!(self, Node::BranchGroup(bs) if bs.iter().any(|b| b.pre_bn.is_some()))
    }

    fn all_pre_bn(&self) -> bool {
        matches!(self, Node::BranchGroup(bs) if !bs.is_empty() && bs.iter().all(|b| b.pre_bn.is_some()))
    }

    fn cast<G: Element>(&self) -> Node<G> {
        match self {
            Node::Conv(l) => Node::Conv(l.cast()),
            Node::BatchNorm(bn) => Node::BatchNorm(bn.cast()),
            Node::Activation(a) => Node::Activation(*a),
            Node::Se(se) => Node::Se(se.cast()),
            Node::BranchGroup(bs) => Node::BranchGroup(bs.iter().map(Branch::cast).collect()),
        }
    }
}

/// Module ordering inside a sequential layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    /// `conv, activation, bn`
    ConvActivationBn,
    /// `bn, conv, activation` (the bn may live at the head of every branch),
    /// optionally followed by a retained trailing bn.
    BnConvActivation,
    /// `conv, bn, activation`
    ConvBnActivation,
    /// No batch norm adjacent to a convolution.
    Plain,
}

impl LayerOrder {
    pub const ALL: [LayerOrder; 4] = [
        LayerOrder::ConvActivationBn,
        LayerOrder::BnConvActivation,
        LayerOrder::ConvBnActivation,
        LayerOrder::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerOrder::ConvActivationBn => "conv_activation_bn",
            LayerOrder::BnConvActivation => "bn_conv_activation",
            LayerOrder::ConvBnActivation => "conv_bn_activation",
            LayerOrder::Plain => "plain",
        }
    }

    pub fn matches<F: Element>(self, nodes: &[Node<F>]) -> bool {
        use Node::{Activation as Act, BatchNorm as Bn};
        let plain_conv = |n: &Node<F>| n.is_convlike() && !n.any_pre_bn();
        match self {
            LayerOrder::ConvActivationBn => {
                matches!(nodes, [c, Act(_), Bn(_)] if plain_conv(c))
            }
            LayerOrder::BnConvActivation => {
                let body = match nodes {
                    [Bn(_), c, Act(_), rest @ ..] if plain_conv(c) => rest,
                    [g, Act(_), rest @ ..] if g.all_pre_bn() => rest,
                    _ => return false,
                };
                matches!(body, [] | [Bn(_)])
            }
            LayerOrder::ConvBnActivation => {
                matches!(nodes, [c, Bn(_), Act(_)] if plain_conv(c))
            }
            LayerOrder::Plain => {
                !nodes.iter().any(Node::any_pre_bn)
                    && !nodes.windows(2).any(|w| {
                        (w[0].is_convlike() && matches!(w[1], Bn(_)))
                            || (matches!(w[0], Bn(_)) && w[1].is_convlike())
                    })
            }
        }
    }

    /// First tag (in declaration order) consistent with `nodes`.
    pub fn infer<F: Element>(nodes: &[Node<F>]) -> Option<LayerOrder> {
        Self::ALL.into_iter().find(|o| o.matches(nodes))
    }
}

impl fmt::Display for LayerOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequentialLayer<F> {
    pub order: LayerOrder,
    pub nodes: Vec<Node<F>>,
}

impl<F: Element> SequentialLayer<F> {
    pub fn new(order: LayerOrder, nodes: Vec<Node<F>>) -> Self {
        Self { order, nodes }
    }

    /// Tags the layer with the first consistent order, falling back to `Plain`.
    pub fn inferred(nodes: Vec<Node<F>>) -> Self {
        let order = LayerOrder::infer(&nodes).unwrap_or(LayerOrder::Plain);
        Self { order, nodes }
    }
}

/// Segment-level head: statistics pooling followed by fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingHead<F> {
    pub var_floor: f64,
    pub fcs: Vec<Linear<F>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelMeta {
    pub name: String,
    pub seed: u64,
    /// Training-mode models carry batch statistics that cannot be folded.
    pub training: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<F> {
    pub meta: ModelMeta,
    pub layers: Vec<SequentialLayer<F>>,
    pub head: Option<PoolingHead<F>>,
}

/// One violated constraint found by [`ModelGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub layer: Option<usize>,
    pub node: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.node) {
            (Some(l), Some(n)) => write!(f, "layer {l}, node {n}: {}", self.message),
            (Some(l), None) => write!(f, "layer {l}: {}", self.message),
            _ => write!(f, "head: {}", self.message),
        }
    }
}

impl<F: Element> ModelGraph<F> {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<SequentialLayer<F>>,
        head: Option<PoolingHead<F>>,
    ) -> Self {
        Self {
            meta: ModelMeta {
                name: name.into(),
                ..Default::default()
            },
            layers,
            head,
        }
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node<F>> {
        self.layers.iter().flat_map(|l| l.nodes.iter())
    }

    /// Input channel count declared by the first channel-bearing node.
    pub fn input_channels(&self) -> Option<usize> {
        self.nodes().find_map(node_in_channels)
    }

    /// Channel count of the last frame-level tensor, if determinable.
    pub fn frame_channels(&self) -> Option<usize> {
        let mut ch = None;
        for n in self.nodes() {
            if let Some(out) = node_out_channels(n) {
                ch = Some(out);
            }
        }
        ch
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        let head = self.head.as_ref()?;
        match head.fcs.last() {
            Some(l) => Some(l.out_features()),
            None => self.frame_channels().map(|c| 2 * c),
        }
    }

    /// Frame-level forward pass, stopping before pooling.
    pub fn forward_frames(&self, x: &Tensor3<F>) -> Result<Tensor3<F>> {
        if let Some(expected) = self.input_channels() {
            if expected != x.channels() {
                return Err(Error::ChannelMismatch {
                    op: "model input",
                    expected,
                    found: x.channels(),
                });
            }
        }
        let mut cur: Option<Tensor3<F>> = None;
        for (li, layer) in self.layers.iter().enumerate() {
            for (ni, node) in layer.nodes.iter().enumerate() {
                let input = cur.as_ref().unwrap_or(x);
                cur = Some(node.forward(input).map_err(|e| e.at_node(li, ni))?);
            }
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    /// Full forward pass. Without a pooling head the frame-level output is
    /// returned flattened to `[batch, channels * frames]`.
    pub fn forward(&self, x: &Tensor3<F>) -> Result<Matrix<F>> {
        let frames = self.forward_frames(x)?;
        let Some(head) = &self.head else {
            let (b, n, t) = (frames.batch(), frames.channels(), frames.frames());
            return Matrix::new(frames.into_data(), b, n * t);
        };
        let head_layer = self.layers.len();
        let mut out = stats_pool(&frames, head.var_floor).map_err(|e| e.at_node(head_layer, 0))?;
        for (i, l) in head.fcs.iter().enumerate() {
            out = fc(&out, l).map_err(|e| e.at_node(head_layer, i + 1))?;
        }
        Ok(out)
    }

    /// Every violated type invariant, order tag or inter-layer shape constraint.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut channels: Option<usize> = None;
        for (li, layer) in self.layers.iter().enumerate() {
            if !layer.order.matches(&layer.nodes) {
                diags.push(Diagnostic {
                    layer: Some(li),
                    node: None,
                    message: format!(
                        "order tag {} inconsistent with nodes [{}]",
                        layer.order,
                        layer
                            .nodes
                            .iter()
                            .map(Node::kind)
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                });
            }
            for (ni, node) in layer.nodes.iter().enumerate() {
                let mut push = |message: String| {
                    diags.push(Diagnostic {
                        layer: Some(li),
                        node: Some(ni),
                        message,
                    })
                };
                for msg in node_issues(node) {
                    push(msg);
                }
                if let (Some(have), Some(need)) = (channels, node_in_channels(node)) {
                    if have != need {
                        push(format!(
                            "expects {need} input channels, previous node produces {have}"
                        ));
                    }
                }
                if let Some(out) = node_out_channels(node) {
                    channels = Some(out);
                }
            }
        }
        if let Some(head) = &self.head {
            if !(head.var_floor.is_finite() && head.var_floor > 0.0) {
                diags.push(Diagnostic {
                    layer: None,
                    node: None,
                    message: format!(
                        "pooling variance floor must be positive, got {}",
                        head.var_floor
                    ),
                });
            }
            let mut width = channels.map(|c| 2 * c);
            for (i, l) in head.fcs.iter().enumerate() {
                if let Some(w) = width {
                    if w != l.in_features() {
                        diags.push(Diagnostic {
                            layer: None,
                            node: None,
                            message: format!(
                                "fc {i} expects {} features, receives {w}",
                                l.in_features()
                            ),
                        });
                    }
                }
                width = Some(l.out_features());
            }
        }
        diags
    }

    pub fn count_params(&self) -> usize {
        self.param_report().total()
    }

    pub fn param_report(&self) -> ParamReport {
        let mut r = ParamReport::default();
        let add_bn = |r: &mut ParamReport, bn: &BatchNormParams<F>| {
            r.bn_stats += 2 * bn.channels();
            r.bn_affine += 2 * bn.channels();
        };
        let add_conv = |r: &mut ParamReport, l: &TdnnLayer<F>| {
            r.conv_weights += l.weight().len();
            r.conv_biases += l.bias().len();
            r.pad_buffers += l.pad_value().map_or(0, <[F]>::len);
        };
        for node in self.nodes() {
            match node {
                Node::Conv(l) => add_conv(&mut r, l),
                Node::BatchNorm(bn) => add_bn(&mut r, bn),
                Node::Activation(_) => {}
                Node::Se(se) => r.se += se.param_count(),
                Node::BranchGroup(bs) => {
                    for b in bs {
                        if let Some(bn) = &b.pre_bn {
                            add_bn(&mut r, bn);
                        }
                        if let BranchOp::Conv(l) = &b.op {
                            add_conv(&mut r, l);
                        }
                    }
                }
            }
        }
        if let Some(head) = &self.head {
            r.fc = head.fcs.iter().map(Linear::param_count).sum();
        }
        r
    }

    /// FLOPs for one utterance of `frames` frames.
    pub fn count_flops(&self, frames: usize) -> u64 {
        self.flop_report(frames).total()
    }

    pub fn flop_report(&self, frames: usize) -> FlopReport {
        let t = frames as u64;
        let mut r = FlopReport::default();
        let conv = |r: &mut FlopReport, l: &TdnnLayer<F>| {
            r.conv_mac += 2 * (l.out_channels() * l.in_per_group() * l.context()) as u64 * t;
            r.conv_bias += l.out_channels() as u64 * t;
        };
        let bn = |r: &mut FlopReport, b: &BatchNormParams<F>| r.bn += 2 * b.channels() as u64 * t;
        let mut channels = 0u64;
        for node in self.nodes() {
            match node {
                Node::Conv(l) => {
                    conv(&mut r, l);
                    channels = l.out_channels() as u64;
                }
                Node::BatchNorm(b) => {
                    bn(&mut r, b);
                    channels = b.channels() as u64;
                }
                Node::Activation(_) => r.activation += channels * t,
                Node::Se(se) => {
                    let (n, nb) = (se.channels() as u64, se.bottleneck() as u64);
                    // squeeze, two affine maps with relu and sigmoid, channel scaling
                    r.se += n * t + (2 * n * nb + nb) + nb + (2 * nb * n + n) + n + n * t;
                    channels = n;
                }
                Node::BranchGroup(bs) => {
                    for b in bs {
                        if let Some(p) = &b.pre_bn {
                            bn(&mut r, p);
                            channels = p.channels() as u64;
                        }
                        if let BranchOp::Conv(l) = &b.op {
                            conv(&mut r, l);
                            channels = l.out_channels() as u64;
                        }
                    }
                    r.branch_add += bs.len().saturating_sub(1) as u64 * channels * t;
                }
            }
        }
        if let Some(head) = &self.head {
            // mean (n·t), variance (3·n·t), sqrt (n)
            r.pooling = 4 * channels * t + channels;
            r.fc = head
                .fcs
                .iter()
                .map(|l| (2 * l.in_features() * l.out_features() + l.out_features()) as u64)
                .sum();
        }
        r
    }

    pub fn conv_node_count(&self) -> usize {
        self.nodes().filter(|n| matches!(n, Node::Conv(_))).count()
    }

    pub fn branch_group_count(&self) -> usize {
        self.nodes()
            .filter(|n| matches!(n, Node::BranchGroup(_)))
            .count()
    }

    pub fn batchnorm_count(&self) -> usize {
        self.nodes()
            .map(|n| match n {
                Node::BatchNorm(_) => 1,
                Node::BranchGroup(bs) => bs.iter().filter(|b| b.pre_bn.is_some()).count(),
                _ => 0,
            })
            .sum()
    }

    pub fn cast<G: Element>(&self) -> ModelGraph<G> {
        ModelGraph {
            meta: self.meta.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| SequentialLayer {
                    order: l.order,
                    nodes: l.nodes.iter().map(Node::cast).collect(),
                })
                .collect(),
            head: self.head.as_ref().map(|h| PoolingHead {
                var_floor: h.var_floor,
                fcs: h.fcs.iter().map(Linear::cast).collect(),
            }),
        }
    }
}

fn node_in_channels<F: Element>(node: &Node<F>) -> Option<usize> {
    match node {
        Node::Conv(l) => Some(l.in_channels()),
        Node::BatchNorm(bn) => Some(bn.channels()),
        Node::Activation(_) => None,
        Node::Se(se) => Some(se.channels()),
        Node::BranchGroup(bs) => bs.iter().find_map(|b| {
            b.pre_bn
                .as_ref()
                .map(BatchNormParams::channels)
                .or_else(|| b.as_conv().map(TdnnLayer::in_channels))
        }),
    }
}

fn node_out_channels<F: Element>(node: &Node<F>) -> Option<usize> {
    match node {
        Node::Conv(l) => Some(l.out_channels()),
        Node::BatchNorm(bn) => Some(bn.channels()),
        Node::Activation(_) => None,
        Node::Se(se) => Some(se.channels()),
        Node::BranchGroup(bs) => bs
            .iter()
            .find_map(|b| b.as_conv().map(TdnnLayer::out_channels))
            .or_else(|| node_in_channels(node)),
    }
}

fn node_issues<F: Element>(node: &Node<F>) -> Vec<String> {
    let mut issues = Vec::new();
    match node {
        Node::Activation(a) => {
            if let Err(e) = a.validate() {
                issues.push(e.to_string());
            }
        }
        Node::BranchGroup(bs) => {
            if bs.is_empty() {
                issues.push("branch group has no branches".into());
                return issues;
            }
            let identities = bs.iter().filter(|b| b.is_identity()).count();
            if identities > 1 {
                issues.push(format!(
                    "branch group has {identities} identity branches (at most 1)"
                ));
            }
            let convs: Vec<&TdnnLayer<F>> = bs.iter().filter_map(Branch::as_conv).collect();
            if let Some(first) = convs.first() {
                let key = |l: &TdnnLayer<F>| {
                    (l.in_channels(), l.out_channels(), l.dilation(), l.groups())
                };
                for (i, l) in convs.iter().enumerate().skip(1) {
                    if key(l) != key(first) {
                        issues.push(format!(
                            "conv branch {i} has (in, out, dilation, groups) {:?}, branch 0 has {:?}",
                            key(l),
                            key(first)
                        ));
                    }
                }
                if identities > 0 && first.in_channels() != first.out_channels() {
                    issues.push(format!(
                        "identity branch requires equal in/out channels, convs map {} -> {}",
                        first.in_channels(),
                        first.out_channels()
                    ));
                }
            }
            let input = node_in_channels(node);
            for (i, b) in bs.iter().enumerate() {
                if let (Some(bn), Some(n)) = (&b.pre_bn, input) {
                    if bn.channels() != n {
                        issues.push(format!(
                            "branch {i} batch norm has {} channels, branch input has {n}",
                            bn.channels()
                        ));
                    }
                }
                if let (Some(l), Some(n)) = (b.as_conv(), input) {
                    if l.in_channels() != n {
                        issues.push(format!(
                            "branch {i} conv expects {} channels, branch input has {n}",
                            l.in_channels()
                        ));
                    }
                }
            }
        }
        _ => {}
    }
    issues
}

/// Parameter totals by category. Batch-norm running statistics (mean and
/// std) are kept apart from the learned affine pair so both counting
/// conventions can be reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub conv_weights: usize,
    pub conv_biases: usize,
    pub bn_stats: usize,
    pub bn_affine: usize,
    pub se: usize,
    pub fc: usize,
    /// Per-channel padding fills of folded convolutions; not counted as parameters.
    pub pad_buffers: usize,
}

impl ParamReport {
    /// All parameters with batch norm counted as 4 per channel.
    pub fn total(&self) -> usize {
        self.conv_weights + self.conv_biases + self.bn_stats + self.bn_affine + self.se + self.fc
    }

    /// Batch norm counted as 2 per channel (scale and shift only).
    pub fn total_affine_bn(&self) -> usize {
        self.total() - self.bn_stats
    }

    pub fn conv(&self) -> usize {
        self.conv_weights + self.conv_biases
    }
}

/// FLOPs by category for a batch of one. A multiply-accumulate is 2 FLOPs;
/// bias adds, activations, batch-norm affine maps (2 per element) and branch
/// sums are itemized separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub conv_mac: u64,
    pub conv_bias: u64,
    pub bn: u64,
    pub activation: u64,
    pub branch_add: u64,
    pub se: u64,
    pub pooling: u64,
    pub fc: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.conv_mac
            + self.conv_bias
            + self.bn
            + self.activation
            + self.branch_add
            + self.se
            + self.pooling
            + self.fc
    }

    /// Multiply-accumulates only, counted as 2 FLOPs each.
    pub fn mac_only(&self) -> u64 {
        self.conv_mac
    }
}
