//! Cross-sequential re-parameterization of multi-branch TDNN networks.
//!
//! The rewrite turns a network built from "conv, activation, bn" sequential
//! layers with multi-branch sets into a plain chain of convolutions and
//! activations with identical outputs. It runs in four steps:
//!
//! 1. **Cross-sequential shift.** The trailing batch norm of layer `j - 1` is
//!    moved to the head of every branch of layer `j`. Only node ownership
//!    changes, so outputs are bitwise identical.
//! 2. **Batch-norm fusion.** Each batch norm adjacent to a convolution is
//!    folded into it, either before it ([`fuse_bn_first`]) or after it
//!    ([`fuse_conv_first`]). Shortcut branches are first materialized as
//!    identity kernels.
//! 3. **Context alignment.** The branches of a set are brought to one group
//!    count and zero-padded to the widest context ([`pad_context`]).
//! 4. **Branch merge.** Branch kernels and biases are summed
//!    ([`merge_branches`]).
//!
//! # Boundary frames
//!
//! Same-padded convolutions read out-of-range frames. In the multi-branch
//! network those frames are zeros of the *normalized* signal. After a
//! preceding batch norm is folded away the convolution sees the raw signal,
//! so [`fuse_bn_first`] records a per-channel fill value `μ + (p - β)·σ/γ`
//! (with `p` the previous fill, normally zero). Feeding that fill through the
//! batch norm gives back `p`, so boundary frames match exactly.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Branch, BranchOp, ModelGraph, Node, SequentialLayer};
use crate::runtime::{BatchNormParams, TdnnLayer};
use crate::tensor::Tensor3;

fn check_bn_channels(
    op: &'static str,
    expected: usize,
    bn: &BatchNormParams<impl Element>,
) -> Result<()> {
    if bn.channels() != expected {
        return Err(Error::ChannelMismatch {
            op,
            expected,
            found: bn.channels(),
        });
    }
    Ok(())
}

/// Folds a batch norm that *precedes* `conv` into its weights and bias.
///
/// The gain `γ/σ` scales the kernel along the input-channel axis and the
/// normalized image of zero, `β - γμ/σ`, is convolved with the kernel into the
/// bias. See the module docs for the boundary fill.
pub fn fuse_bn_first<F: Element>(
    bn: &BatchNormParams<F>,
    conv: &TdnnLayer<F>,
) -> Result<TdnnLayer<F>> {
    check_bn_channels("fuse_bn_first", conv.in_channels(), bn)?;
    let gain = bn.gain();
    let offset = bn.offset();
    let ipg = conv.in_per_group();
    let ctx = conv.context();

    let mut weight = conv.weight().to_vec();
    let mut bias = conv.bias().to_vec();
    for (o, b) in bias.iter_mut().enumerate() {
        let g = conv.group_of_output(o);
        let mut extra = F::zero();
        for il in 0..ipg {
            let i = g * ipg + il;
            for c in 0..ctx {
                let idx = (o * ipg + il) * ctx + c;
                extra = extra + weight[idx] * offset[i];
                weight[idx] = weight[idx] * gain[i];
            }
        }
        *b = *b + extra;
    }

    let invertible = bn.scale().iter().all(|g| !g.is_zero());
    let pad_value = if invertible {
        let prev = conv.pad_value();
        Some(
            (0..conv.in_channels())
                .map(|i| {
                    let p = prev.map_or(F::zero(), |p| p[i]);
                    bn.mean()[i] + (p - bn.shift()[i]) * bn.std()[i] / bn.scale()[i]
                })
                .collect(),
        )
    } else if conv.half_width() == 0 {
        None
    } else {
        return Err(Error::InvalidLayer(
            "cannot fold a batch norm with zero scale into a padded convolution".into(),
        ));
    };

    TdnnLayer::with_padding(
        weight,
        bias,
        conv.in_channels(),
        conv.out_channels(),
        ctx,
        conv.dilation(),
        conv.groups(),
        pad_value,
    )
}

/// Folds a batch norm that *follows* `conv` into it: per output channel
/// `W' = W·γ/σ`, `b' = (b - μ)·γ/σ + β`.
pub fn fuse_conv_first<F: Element>(
    conv: &TdnnLayer<F>,
    bn: &BatchNormParams<F>,
) -> Result<TdnnLayer<F>> {
    check_bn_channels("fuse_conv_first", conv.out_channels(), bn)?;
    let gain = bn.gain();
    let row = conv.in_per_group() * conv.context();
    let mut out = conv.clone();
    for (o, w) in out.weight_mut().chunks_exact_mut(row).enumerate() {
        w.iter_mut().for_each(|v| *v = *v * gain[o]);
    }
    for (o, b) in out.bias_mut().iter_mut().enumerate() {
        *b = (*b - bn.mean()[o]) * gain[o] + bn.shift()[o];
    }
    Ok(out)
}

/// Context-1, single-group, zero-bias convolution with an identity kernel.
pub fn identity_to_conv<F: Element>(channels: usize) -> TdnnLayer<F> {
    identity_conv(channels, 1, 1).expect("identity kernel is valid")
}

/// Identity kernel expressed with `groups` groups (block-diagonal), so it can
/// be merged with grouped branches without widening them.
pub fn identity_conv<F: Element>(
    channels: usize,
    groups: usize,
    dilation: usize,
) -> Result<TdnnLayer<F>> {
    let mut l = TdnnLayer::zeros(channels, channels, 1, dilation, groups)?;
    let ipg = l.in_per_group();
    for o in 0..channels {
        let il = o - l.group_of_output(o) * ipg;
        l.weight_mut()[o * ipg + il] = F::one();
    }
    Ok(l)
}

/// Re-centres `conv` inside a zero kernel of width `target_context`.
pub fn pad_context<F: Element>(conv: &TdnnLayer<F>, target_context: usize) -> Result<TdnnLayer<F>> {
    if target_context.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "target context must be odd, got {target_context}"
        )));
    }
    if target_context < conv.context() {
        return Err(Error::InvalidArgument(format!(
            "target context {target_context} is smaller than current context {}",
            conv.context()
        )));
    }
    let (old, new) = (conv.context(), target_context);
    let shift = (new - old) / 2;
    let rows = conv.out_channels() * conv.in_per_group();
    let mut weight = vec![F::zero(); rows * new];
    for r in 0..rows {
        weight[r * new + shift..r * new + shift + old]
            .copy_from_slice(&conv.weight()[r * old..(r + 1) * old]);
    }
    TdnnLayer::with_padding(
        weight,
        conv.bias().to_vec(),
        conv.in_channels(),
        conv.out_channels(),
        new,
        conv.dilation(),
        conv.groups(),
        conv.pad_value().map(<[F]>::to_vec),
    )
}

/// Rewrites a grouped convolution with fewer groups by embedding its
/// block-diagonal structure; `groups` must divide the current group count.
pub fn regroup<F: Element>(conv: &TdnnLayer<F>, groups: usize) -> Result<TdnnLayer<F>> {
    if groups == 0 || !conv.groups().is_multiple_of(groups) {
        return Err(Error::InvalidArgument(format!(
            "cannot regroup {} groups into {groups}",
            conv.groups()
        )));
    }
    if groups == conv.groups() {
        return Ok(conv.clone());
    }
    let ctx = conv.context();
    let old_ipg = conv.in_per_group();
    let new_ipg = conv.in_channels() / groups;
    let new_opg = conv.out_channels() / groups;
    let mut weight = vec![F::zero(); conv.out_channels() * new_ipg * ctx];
    for o in 0..conv.out_channels() {
        let old_base = conv.group_of_output(o) * old_ipg;
        let new_base = (o / new_opg) * new_ipg;
        for il in 0..old_ipg {
            let dst = (o * new_ipg + old_base - new_base + il) * ctx;
            let src = (o * old_ipg + il) * ctx;
            weight[dst..dst + ctx].copy_from_slice(&conv.weight()[src..src + ctx]);
        }
    }
    TdnnLayer::with_padding(
        weight,
        conv.bias().to_vec(),
        conv.in_channels(),
        conv.out_channels(),
        ctx,
        conv.dilation(),
        groups,
        conv.pad_value().map(<[F]>::to_vec),
    )
}

/// Sums kernels and biases of same-shaped branches.
pub fn merge_branches<F: Element>(branches: &[TdnnLayer<F>]) -> Result<TdnnLayer<F>> {
    let (first, rest) = branches
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("merge_branches needs at least one branch".into()))?;
    let key = |l: &TdnnLayer<F>| {
        (
            l.in_channels(),
            l.out_channels(),
            l.context(),
            l.dilation(),
            l.groups(),
        )
    };
    let mut merged = first.clone();
    for (i, b) in rest.iter().enumerate() {
        if key(b) != key(first) {
            return Err(Error::ShapeMismatch(format!(
                "branch {} has (in, out, context, dilation, groups) {:?}, branch 0 has {:?}",
                i + 1,
                key(b),
                key(first)
            )));
        }
        if b.pad_value() != first.pad_value() {
            return Err(Error::ShapeMismatch(format!(
                "branch {} pads with different fill values than branch 0",
                i + 1
            )));
        }
        for (a, &v) in merged.weight_mut().iter_mut().zip(b.weight()) {
            *a = *a + v;
        }
        for (a, &v) in merged.bias_mut().iter_mut().zip(b.bias()) {
            *a = *a + v;
        }
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    CrossSequentialShift = 1,
    FuseBatchNorm = 2,
    AlignContext = 3,
    MergeBranches = 4,
}

impl Step {
    pub const ALL: [Step; 4] = [
        Step::CrossSequentialShift,
        Step::FuseBatchNorm,
        Step::AlignContext,
        Step::MergeBranches,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Step::CrossSequentialShift => "cross_sequential_shift",
            Step::FuseBatchNorm => "fuse_batchnorm",
            Step::AlignContext => "align_context",
            Step::MergeBranches => "merge_branches",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.number(), self.name())
    }
}

/// Structural counts of a graph, recorded before and after every step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GraphCounts {
    pub layers: usize,
    pub conv_nodes: usize,
    pub branch_groups: usize,
    pub branches: usize,
    pub batchnorms: usize,
    pub params: usize,
}

impl GraphCounts {
    pub fn of<F: Element>(m: &ModelGraph<F>) -> Self {
        Self {
            layers: m.layers.len(),
            conv_nodes: m.conv_node_count(),
            branch_groups: m.branch_group_count(),
            branches: m
                .nodes()
                .map(|n| match n {
                    Node::BranchGroup(bs) => bs.len(),
                    _ => 0,
                })
                .sum(),
            batchnorms: m.batchnorm_count(),
            params: m.count_params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: Step,
    pub rewrites: usize,
    pub before: GraphCounts,
    pub after: GraphCounts,
}

/// A layer (or node) left as-is, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Untransformed {
    pub step: Step,
    pub layer: usize,
    pub node: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelfCheckResult {
    pub trials: usize,
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RewriteReport {
    pub steps: Vec<StepRecord>,
    pub merged_groups: usize,
    pub untransformed: Vec<Untransformed>,
    pub self_check: Option<SelfCheckResult>,
}

impl RewriteReport {
    /// Total rewrites across all applied steps; zero for an already-plain model.
    pub fn rewrites(&self) -> usize {
        self.steps.iter().map(|s| s.rewrites).sum()
    }

    fn flag(&mut self, step: Step, layer: usize, node: Option<usize>, reason: impl Into<String>) {
        self.untransformed.push(Untransformed {
            step,
            layer,
            node,
            reason: reason.into(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfCheckOptions {
    pub trials: usize,
    pub batch: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            trials: 4,
            batch: 2,
            frames: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformOptions {
    /// Last step to apply.
    pub stop_after: Step,
    pub self_check: Option<SelfCheckOptions>,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            stop_after: Step::MergeBranches,
            self_check: None,
        }
    }
}

fn retag<F: Element>(layer: &mut SequentialLayer<F>) {
    *layer = SequentialLayer::inferred(std::mem::take(&mut layer.nodes));
}

fn starts_with_bare_conv<F: Element>(layer: &SequentialLayer<F>) -> bool {
    match layer.nodes.first() {
        Some(Node::Conv(_)) => true,
        Some(Node::BranchGroup(bs)) => !bs.is_empty() && bs.iter().all(|b| b.pre_bn.is_none()),
        _ => false,
    }
}

fn successor_name<F: Element>(layer: Option<&SequentialLayer<F>>) -> String {
    match layer.and_then(|l| l.nodes.first()) {
        None => "end of trunk".into(),
        Some(n) => n.kind().into(),
    }
}

/// Step 1: moves every trailing batch norm into the head of the next layer's
/// branches. Returns the rewritten model and a report of what moved.
pub fn cross_sequential_shift<F: Element>(model: &ModelGraph<F>) -> (ModelGraph<F>, RewriteReport) {
    let mut out = model.clone();
    let mut report = RewriteReport::default();
    let before = GraphCounts::of(&out);
    let mut moved = 0;
    for j in 0..out.layers.len() {
        if !matches!(out.layers[j].nodes.last(), Some(Node::BatchNorm(_))) {
            continue;
        }
        let node = out.layers[j].nodes.len() - 1;
        let next = out.layers.get(j + 1);
        if !next.is_some_and(starts_with_bare_conv) {
            let reason = format!("trailing batch norm precedes {}", successor_name(next));
            report.flag(Step::CrossSequentialShift, j, Some(node), reason);
            continue;
        }
        let Some(Node::BatchNorm(bn)) = out.layers[j].nodes.pop() else {
            unreachable!("checked above");
        };
        let next = &mut out.layers[j + 1];
        match &mut next.nodes[0] {
            Node::BranchGroup(bs) => {
                for b in bs.iter_mut() {
                    b.pre_bn = Some(bn.clone());
                }
            }
            _ => next.nodes.insert(0, Node::BatchNorm(bn)),
        }
        retag(&mut out.layers[j]);
        retag(&mut out.layers[j + 1]);
        moved += 1;
    }
    report.steps.push(StepRecord {
        step: Step::CrossSequentialShift,
        rewrites: moved,
        before,
        after: GraphCounts::of(&out),
    });
    (out, report)
}

/// Group count shared by the conv branches, or 1 when there are none.
fn branch_groups<F: Element>(bs: &[Branch<F>]) -> usize {
    bs.iter()
        .filter_map(Branch::as_conv)
        .map(TdnnLayer::groups)
        .fold(0, gcd)
        .max(1)
}

fn branch_dilation<F: Element>(bs: &[Branch<F>]) -> usize {
    bs.iter()
        .filter_map(Branch::as_conv)
        .map(TdnnLayer::dilation)
        .next()
        .unwrap_or(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn group_channels<F: Element>(bs: &[Branch<F>]) -> Option<usize> {
    bs.iter().find_map(|b| {
        b.as_conv()
            .map(TdnnLayer::in_channels)
            .or_else(|| b.pre_bn.as_ref().map(BatchNormParams::channels))
    })
}

/// Folds every branch's leading batch norm. All-or-nothing per group.
fn fuse_group_bn_first<F: Element>(bs: &[Branch<F>], channels: usize) -> Result<Vec<Branch<F>>> {
    let groups = branch_groups(bs);
    let dilation = branch_dilation(bs);
    bs.iter()
        .map(|b| {
            let Some(bn) = &b.pre_bn else {
                return Ok(b.clone());
            };
            let conv = match &b.op {
                BranchOp::Conv(l) => l.clone(),
                BranchOp::Identity => identity_conv(channels, groups, dilation)?,
            };
            Ok(Branch::conv(fuse_bn_first(bn, &conv)?))
        })
        .collect()
}

/// Folds a batch norm that follows a whole branch set: every branch is scaled
/// and the normalized image of zero is added once, to the first branch.
fn fuse_group_conv_first<F: Element>(
    bs: &[Branch<F>],
    bn: &BatchNormParams<F>,
    channels: usize,
) -> Result<Vec<Branch<F>>> {
    let groups = branch_groups(bs);
    let dilation = branch_dilation(bs);
    let gain_only = BatchNormParams::new(
        vec![F::zero(); bn.channels()],
        bn.std().to_vec(),
        bn.scale().to_vec(),
        vec![F::zero(); bn.channels()],
        bn.eps(),
    )?;
    bs.iter()
        .enumerate()
        .map(|(i, b)| {
            if b.pre_bn.is_some() {
                return Err(Error::InvalidLayer(
                    "branch still carries a leading batch norm".into(),
                ));
            }
            let conv = match &b.op {
                BranchOp::Conv(l) => l.clone(),
                BranchOp::Identity => identity_conv(channels, groups, dilation)?,
            };
            let fused = if i == 0 {
                fuse_conv_first(&conv, bn)?
            } else {
                fuse_conv_first(&conv, &gain_only)?
            };
            Ok(Branch::conv(fused))
        })
        .collect()
}

/// Step 2 for one layer. Returns the number of batch norms folded.
fn fuse_layer<F: Element>(
    layer: &mut SequentialLayer<F>,
    li: usize,
    report: &mut RewriteReport,
) -> usize {
    let mut folded = 0;
    let mut nodes = std::mem::take(&mut layer.nodes);

    // A bare batch norm directly in front of a branch set becomes a leading
    // batch norm of every branch, which is then handled below.
    let mut i = 0;
    while i + 1 < nodes.len() {
        if let (Node::BatchNorm(_), Node::BranchGroup(bs)) = (&nodes[i], &nodes[i + 1]) {
            if bs.iter().all(|b| b.pre_bn.is_none()) {
                let Node::BatchNorm(bn) = nodes.remove(i) else {
                    unreachable!()
                };
                if let Node::BranchGroup(bs) = &mut nodes[i] {
                    bs.iter_mut().for_each(|b| b.pre_bn = Some(bn.clone()));
                }
                continue;
            }
        }
        i += 1;
    }

    // bn-first
    let mut i = 0;
    while i < nodes.len() {
        match (&nodes[i], nodes.get(i + 1)) {
            (Node::BatchNorm(bn), Some(Node::Conv(conv))) => match fuse_bn_first(bn, conv) {
                Ok(fused) => {
                    nodes.splice(i..i + 2, [Node::Conv(fused)]);
                    folded += 1;
                }
                Err(e) => report.flag(Step::FuseBatchNorm, li, Some(i), e.to_string()),
            },
            (Node::BranchGroup(bs), _) if bs.iter().any(|b| b.pre_bn.is_some()) => {
                let channels = group_channels(bs).unwrap_or(0);
                match fuse_group_bn_first(bs, channels) {
                    Ok(fused) => {
                        folded += bs.iter().filter(|b| b.pre_bn.is_some()).count();
                        nodes[i] = Node::BranchGroup(fused);
                    }
                    Err(e) => report.flag(Step::FuseBatchNorm, li, Some(i), e.to_string()),
                }
            }
            _ => {}
        }
        i += 1;
    }

    // conv-first
    let mut i = 0;
    while i + 1 < nodes.len() {
        let fused = match (&nodes[i], &nodes[i + 1]) {
            (Node::Conv(conv), Node::BatchNorm(bn)) => {
                Some(fuse_conv_first(conv, bn).map(Node::Conv))
            }
            (Node::BranchGroup(bs), Node::BatchNorm(bn))
                if bs.iter().all(|b| b.pre_bn.is_none()) =>
            {
                let channels = group_channels(bs).unwrap_or(0);
                Some(fuse_group_conv_first(bs, bn, channels).map(Node::BranchGroup))
            }
            _ => None,
        };
        match fused {
            Some(Ok(node)) => {
                nodes.splice(i..i + 2, [node]);
                folded += 1;
            }
            Some(Err(e)) => report.flag(Step::FuseBatchNorm, li, Some(i), e.to_string()),
            None => {}
        }
        i += 1;
    }

    layer.nodes = nodes;
    retag(layer);
    folded
}

/// Step 3 for one branch set: identity kernels, common group count, common context.
fn align_group<F: Element>(bs: &[Branch<F>]) -> Result<Vec<TdnnLayer<F>>> {
    if bs.iter().any(|b| b.pre_bn.is_some()) {
        return Err(Error::InvalidLayer(
            "branch carries an unfolded batch norm".into(),
        ));
    }
    let channels = group_channels(bs)
        .ok_or_else(|| Error::InvalidLayer("branch set has no channel information".into()))?;
    let groups = branch_groups(bs);
    let dilation = branch_dilation(bs);
    let pad = bs
        .iter()
        .filter_map(Branch::as_conv)
        .find_map(|l| l.pad_value().map(<[F]>::to_vec));
    let convs = bs
        .iter()
        .map(|b| match &b.op {
            BranchOp::Conv(l) => regroup(l, groups),
            BranchOp::Identity => {
                let id = identity_conv(channels, groups, dilation)?;
                // a context-1 kernel never reads padding, so it can adopt the set's fill
                TdnnLayer::with_padding(
                    id.weight().to_vec(),
                    id.bias().to_vec(),
                    channels,
                    channels,
                    1,
                    dilation,
                    groups,
                    pad.clone(),
                )
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let context = convs.iter().map(TdnnLayer::context).max().unwrap_or(1);
    convs.iter().map(|l| pad_context(l, context)).collect()
}

fn branches_of<F: Element>(convs: Vec<TdnnLayer<F>>) -> Vec<Branch<F>> {
    convs.into_iter().map(Branch::conv).collect()
}

/// Runs the full four-step rewrite (or stops early per `options`).
///
/// Layers that cannot be rewritten are left intact and listed in the report;
/// the result is never a non-equivalent graph.
pub fn csrep_transform<F: Element>(
    model: &ModelGraph<F>,
    options: &TransformOptions,
) -> Result<(ModelGraph<F>, RewriteReport)> {
    if model.meta.training {
        return Err(Error::TrainingMode);
    }
    let diags = model.validate();
    if !diags.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "model does not validate: {}",
            diags
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }

    let (mut out, mut report) = cross_sequential_shift(model);

    if options.stop_after >= Step::FuseBatchNorm {
        let before = GraphCounts::of(&out);
        let mut folded = 0;
        for (li, layer) in out.layers.iter_mut().enumerate() {
            folded += fuse_layer(layer, li, &mut report);
        }
        report.steps.push(StepRecord {
            step: Step::FuseBatchNorm,
            rewrites: folded,
            before,
            after: GraphCounts::of(&out),
        });
    }

    if options.stop_after >= Step::AlignContext {
        let before = GraphCounts::of(&out);
        let mut aligned = 0;
        for (li, layer) in out.layers.iter_mut().enumerate() {
            for (ni, node) in layer.nodes.iter_mut().enumerate() {
                let Node::BranchGroup(bs) = node else {
                    continue;
                };
                let already = bs.iter().all(|b| b.pre_bn.is_none())
                    && bs.iter().filter_map(Branch::as_conv).count() == bs.len()
                    && bs.windows(2).all(|w| {
                        let (a, b) = (w[0].as_conv().unwrap(), w[1].as_conv().unwrap());
                        a.context() == b.context() && a.groups() == b.groups()
                    });
                if already {
                    continue;
                }
                match align_group(bs) {
                    Ok(convs) => {
                        *bs = branches_of(convs);
                        aligned += 1;
                    }
                    Err(e) => report.flag(Step::AlignContext, li, Some(ni), e.to_string()),
                }
            }
        }
        report.steps.push(StepRecord {
            step: Step::AlignContext,
            rewrites: aligned,
            before,
            after: GraphCounts::of(&out),
        });
    }

    if options.stop_after >= Step::MergeBranches {
        let before = GraphCounts::of(&out);
        let mut merged = 0;
        for (li, layer) in out.layers.iter_mut().enumerate() {
            for (ni, node) in layer.nodes.iter_mut().enumerate() {
                let Node::BranchGroup(bs) = node else {
                    continue;
                };
                let convs: Option<Vec<TdnnLayer<F>>> = bs
                    .iter()
                    .map(|b| match (&b.pre_bn, &b.op) {
                        (None, BranchOp::Conv(l)) => Some(l.clone()),
                        _ => None,
                    })
                    .collect();
                let result = convs
                    .ok_or_else(|| Error::InvalidLayer("branch set was not aligned".into()))
                    .and_then(|c| merge_branches(&c));
                match result {
                    Ok(conv) => {
                        *node = Node::Conv(conv);
                        merged += 1;
                    }
                    Err(e) => report.flag(Step::MergeBranches, li, Some(ni), e.to_string()),
                }
            }
            retag(layer);
        }
        report.merged_groups = merged;
        report.steps.push(StepRecord {
            step: Step::MergeBranches,
            rewrites: merged,
            before,
            after: GraphCounts::of(&out),
        });
    }

    if report.rewrites() == 0 {
        // keep the caller's layer tags untouched on a no-op
        out = model.clone();
    }

    if let Some(check) = options.self_check {
        report.self_check = Some(self_check(model, &out, &check)?);
    }
    Ok((out, report))
}

/// Max frame-level deviation between two models on seeded random inputs.
pub fn self_check<F: Element>(
    a: &ModelGraph<F>,
    b: &ModelGraph<F>,
    options: &SelfCheckOptions,
) -> Result<SelfCheckResult> {
    let channels = a
        .input_channels()
        .ok_or_else(|| Error::InvalidArgument("model has no input channel count".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut max_abs: f64 = 0.0;
    let mut max_ref: f64 = 0.0;
    for _ in 0..options.trials {
        let x =
            Tensor3::<f64>::random(&mut rng, options.batch, channels, options.frames).cast::<F>();
        let ya = a.forward_frames(&x)?;
        let yb = b.forward_frames(&x)?;
        max_abs = max_abs.max(ya.max_abs_diff(&yb));
        max_ref = max_ref.max(ya.max_abs());
    }
    Ok(SelfCheckResult {
        trials: options.trials,
        max_abs_deviation: max_abs,
        max_rel_deviation: if max_ref > 0.0 {
            max_abs / max_ref
        } else {
            max_abs
        },
    })
}

/// Per-step conv/bn/branch counts, keyed by step number, for display.
pub fn step_summary(report: &RewriteReport) -> BTreeMap<u8, (GraphCounts, GraphCounts)> {
    report
        .steps
        .iter()
        .map(|s| (s.step.number(), (s.before, s.after)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{batchnorm_infer, conv1d};

    fn scalar_conv(w: f64, b: f64) -> TdnnLayer<f64> {
        TdnnLayer::new(vec![w], vec![b], 1, 1, 1, 1, 1).unwrap()
    }

    fn scalar_bn() -> BatchNormParams<f64> {
        BatchNormParams::new(vec![1.0], vec![2.0], vec![4.0], vec![0.5], 1e-5).unwrap()
    }

    #[test]
    fn bn_first_scalar() {
        let fused = fuse_bn_first(&scalar_bn(), &scalar_conv(2.0, 0.0)).unwrap();
        assert_eq!(fused.weight(), &[4.0]);
        assert_eq!(fused.bias(), &[-3.0]);
        for x in [-1.5, 0.0, 0.3, 7.0] {
            let t = Tensor3::new(vec![x], 1, 1, 1).unwrap();
            let y = conv1d(&t, &fused).unwrap().data()[0];
            assert!((y - (4.0 * x - 3.0)).abs() < 1e-12);
            assert!((y - 2.0 * ((x - 1.0) * 4.0 / 2.0 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_first_scalar() {
        let fused = fuse_conv_first(&scalar_conv(2.0, 0.0), &scalar_bn()).unwrap();
        assert_eq!(fused.weight(), &[4.0]);
        assert_eq!(fused.bias(), &[-1.5]);
    }

    #[test]
    fn identity_bn_leaves_layer_alone() {
        let conv = TdnnLayer::new(
            vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0],
            vec![0.1, 0.2],
            1,
            2,
            3,
            1,
            1,
        )
        .unwrap();
        let id = BatchNormParams::identity(1);
        let a = fuse_bn_first(&id, &conv).unwrap();
        assert_eq!(a.weight(), conv.weight());
        assert_eq!(a.bias(), conv.bias());
        let b = fuse_conv_first(&conv, &BatchNormParams::identity(2)).unwrap();
        assert_eq!(b, conv);
    }

    #[test]
    fn fusion_rejects_channel_mismatch() {
        let conv = TdnnLayer::<f64>::zeros(2, 3, 1, 1, 1).unwrap();
        assert!(fuse_bn_first(&BatchNormParams::identity(3), &conv).is_err());
        assert!(fuse_conv_first(&conv, &BatchNormParams::identity(2)).is_err());
    }

    #[test]
    fn zero_scale_bn_cannot_fold_into_padded_conv() {
        let bn = BatchNormParams::new(vec![0.0], vec![1.0], vec![0.0], vec![0.5], 1e-5).unwrap();
        assert!(fuse_bn_first(&bn, &TdnnLayer::<f64>::zeros(1, 1, 3, 1, 1).unwrap()).is_err());
        let narrow = fuse_bn_first(&bn, &scalar_conv(2.0, 0.0)).unwrap();
        assert_eq!(narrow.pad_value(), None);
        assert_eq!(narrow.bias(), &[1.0]);
    }

    #[test]
    fn identity_kernel_shape() {
        let l = identity_to_conv::<f64>(2);
        assert_eq!(l.weight(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            (l.context(), l.groups(), l.param_count()),
            (1, 1, 2 * 2 + 2)
        );
        let g = identity_conv::<f64>(4, 2, 1).unwrap();
        assert_eq!(g.weight(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pad_context_centers_kernel() {
        let l = scalar_conv(5.0, 1.0);
        let p = pad_context(&l, 3).unwrap();
        assert_eq!(p.weight(), &[0.0, 5.0, 0.0]);
        assert_eq!(p.bias(), &[1.0]);
        assert_eq!(pad_context(&p, 3).unwrap(), p);
        assert!(pad_context(&p, 4).is_err());
        assert!(pad_context(&p, 1).is_err());
    }

    #[test]
    fn merge_example() {
        let mk = |w: [f64; 3], b: f64| TdnnLayer::new(w.to_vec(), vec![b], 1, 1, 3, 1, 1).unwrap();
        let m = merge_branches(&[
            mk([1.0, 2.0, 3.0], 1.0),
            mk([0.0, 5.0, 0.0], 2.0),
            mk([0.0, 1.0, 0.0], 3.0),
        ])
        .unwrap();
        assert_eq!(m.weight(), &[1.0, 8.0, 3.0]);
        assert_eq!(m.bias(), &[6.0]);
        let single = mk([1.0, 2.0, 3.0], 1.0);
        assert_eq!(
            merge_branches(std::slice::from_ref(&single)).unwrap(),
            single
        );
        assert!(merge_branches(&[single.clone(), scalar_conv(1.0, 0.0)]).is_err());
        assert!(merge_branches::<f64>(&[]).is_err());
    }

    #[test]
    fn regroup_preserves_output() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = (0..8 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = TdnnLayer::new(w, vec![0.5; 8], 8, 8, 3, 1, 4).unwrap();
        let x = Tensor3::<f64>::random(&mut rng, 2, 8, 7);
        let y = conv1d(&x, &l).unwrap();
        for g in [1, 2, 4] {
            let r = regroup(&l, g).unwrap();
            assert_eq!(r.groups(), g);
            assert!(conv1d(&x, &r).unwrap().max_abs_diff(&y) < 1e-12);
        }
        assert!(regroup(&l, 3).is_err());
    }

    #[test]
    fn bn_first_exact_at_boundaries() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = (0..3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conv = TdnnLayer::new(w, vec![0.1, -0.2, 0.3], 3, 3, 3, 2, 1).unwrap();
        let bn = BatchNormParams::new(
            vec![0.3, -0.2, 0.1],
            vec![0.7, 1.3, 1.9],
            vec![1.2, 0.6, -0.9],
            vec![0.05, -0.4, 0.2],
            1e-5,
        )
        .unwrap();
        let fused = fuse_bn_first(&bn, &conv).unwrap();
        let x = Tensor3::<f64>::random(&mut rng, 2, 3, 5);
        let reference = conv1d(&batchnorm_infer(&x, &bn).unwrap(), &conv).unwrap();
        assert!(conv1d(&x, &fused).unwrap().max_abs_diff(&reference) < 1e-12);
    }
}
