//! The Rep-TDNN speaker-embedding architecture.
//!
//! Training topology: a stack of blocks, each a head TDNN followed by
//! three-branch sequential layers (context-3 conv, context-1 conv, shortcut),
//! every layer ordered conv → activation → bn, and a squeeze-excitation gate
//! closing the block. The trunk is followed by statistics pooling and two
//! fully connected layers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::AnyModel;
use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::graph::{Branch, BranchOp, LayerOrder, ModelGraph, Node, PoolingHead, SequentialLayer};
use crate::runtime::{
    Activation, BatchNormParams, Linear, SeParams, TdnnLayer, STATS_POOL_VAR_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub head_context: usize,
    pub head_groups: usize,
    pub layers: usize,
    /// Groups of every branch convolution in the block.
    pub groups: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            head_context: 5,
            head_groups: 1,
            layers: 4,
            groups: 1,
        }
    }
}

impl BlockConfig {
    fn with_head(head_context: usize) -> Self {
        Self {
            head_context,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepTdnnConfig {
    pub name: String,
    pub input_channels: usize,
    pub channels: usize,
    pub blocks: Vec<BlockConfig>,
    /// Contexts of the convolutional branches in each sequential layer.
    pub branch_contexts: Vec<usize>,
    pub identity_branch: bool,
    pub dilation: usize,
    pub se_bottleneck: usize,
    pub fc_hidden: usize,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub bn_eps: f64,
    pub pool_var_floor: f64,
    pub dtype: DType,
    pub seed: u64,
}

impl Default for RepTdnnConfig {
    fn default() -> Self {
        Self {
            name: "rep-tdnn".into(),
            input_channels: 161,
            channels: 512,
            blocks: [5, 1, 1, 5]
                .into_iter()
                .map(BlockConfig::with_head)
                .collect(),
            branch_contexts: vec![3, 1],
            identity_branch: true,
            dilation: 1,
            se_bottleneck: 128,
            fc_hidden: 512,
            embedding_dim: 512,
            activation: Activation::default(),
            bn_eps: 1e-5,
            pool_var_floor: STATS_POOL_VAR_FLOOR,
            dtype: DType::Fp32,
            seed: 0,
        }
    }
}

impl RepTdnnConfig {
    /// Parses a JSON config; unknown fields are rejected and syntax errors
    /// carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every invalid field, one message each.
    pub fn issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                issues.push(msg)
            }
        };
        need(
            self.input_channels > 0,
            "input_channels must be positive".into(),
        );
        need(self.channels > 0, "channels must be positive".into());
        need(
            !self.blocks.is_empty(),
            "blocks must contain at least one block".into(),
        );
        for (i, b) in self.blocks.iter().enumerate() {
            let in_ch = if i == 0 {
                self.input_channels
            } else {
                self.channels
            };
            need(
                b.head_context % 2 == 1,
                format!(
                    "blocks[{i}].head_context must be odd, got {}",
                    b.head_context
                ),
            );
            need(
                b.head_groups > 0
                    && in_ch % b.head_groups == 0
                    && self.channels.is_multiple_of(b.head_groups),
                format!(
                    "blocks[{i}].head_groups {} must divide {in_ch} and {}",
                    b.head_groups, self.channels
                ),
            );
            need(
                b.groups > 0 && self.channels.is_multiple_of(b.groups),
                format!(
                    "blocks[{i}].groups {} must divide channels {}",
                    b.groups, self.channels
                ),
            );
        }
        need(
            !self.branch_contexts.is_empty() || self.identity_branch,
            "a sequential layer needs at least one branch".into(),
        );
        for (i, &c) in self.branch_contexts.iter().enumerate() {
            need(
                c % 2 == 1,
                format!("branch_contexts[{i}] must be odd, got {c}"),
            );
        }
        need(self.dilation > 0, "dilation must be positive".into());
        need(
            self.se_bottleneck > 0,
            "se_bottleneck must be positive".into(),
        );
        need(self.fc_hidden > 0, "fc_hidden must be positive".into());
        need(
            self.embedding_dim > 0,
            "embedding_dim must be positive".into(),
        );
        if let Err(e) = self.activation.validate() {
            need(false, format!("activation: {e}"));
        }
        need(
            self.bn_eps > 0.0,
            format!("bn_eps must be positive, got {}", self.bn_eps),
        );
        need(
            self.pool_var_floor > 0.0,
            format!(
                "pool_var_floor must be positive, got {}",
                self.pool_var_floor
            ),
        );
        issues
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(issues))
        }
    }

    pub fn branch_groups(&self) -> usize {
        self.blocks.iter().map(|b| b.layers).sum()
    }

    /// Parameter count of the multi-branch training topology (batch norm
    /// counted as 4 per channel).
    pub fn training_param_count(&self) -> usize {
        let n = self.channels;
        let mut total = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            let in_ch = if i == 0 { self.input_channels } else { n };
            total += n * (in_ch / b.head_groups) * b.head_context + n + 4 * n;
            let branches: usize = self
                .branch_contexts
                .iter()
                .map(|c| n * (n / b.groups) * c + n)
                .sum();
            total += b.layers * (branches + 4 * n);
            total += 2 * n * self.se_bottleneck + self.se_bottleneck + n;
        }
        total + self.head_param_count()
    }

    /// Parameter count after re-parameterization: every branch set becomes one
    /// convolution of the widest context, migrated batch norms vanish and the
    /// batch norm in front of each squeeze-excitation gate is retained.
    pub fn plain_param_count(&self) -> usize {
        let n = self.channels;
        let widest = self
            .branch_contexts
            .iter()
            .copied()
            .chain(self.identity_branch.then_some(1))
            .max()
            .unwrap_or(1);
        let mut total = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            let in_ch = if i == 0 { self.input_channels } else { n };
            total += n * (in_ch / b.head_groups) * b.head_context + n;
            let groups = if self.branch_contexts.is_empty() {
                1
            } else {
                b.groups
            };
            total += b.layers * (n * (n / groups) * widest + n);
            total += 4 * n;
            total += 2 * n * self.se_bottleneck + self.se_bottleneck + n;
        }
        total + self.head_param_count()
    }

    fn head_param_count(&self) -> usize {
        2 * self.channels * self.fc_hidden
            + self.fc_hidden
            + self.fc_hidden * self.embedding_dim
            + self.embedding_dim
    }
}

/// Builds the multi-branch training topology with parameters drawn from
/// `config.seed` (see [`random_init`]).
pub fn build_rep_tdnn<F: Element>(config: &RepTdnnConfig) -> Result<ModelGraph<F>> {
    config.validate()?;
    let n = config.channels;
    let act = Node::Activation(config.activation);
    let eps = F::from_f64_lossy(config.bn_eps);
    let bn_node = || {
        Node::BatchNorm(
            BatchNormParams::new(
                vec![F::zero(); n],
                vec![F::one(); n],
                vec![F::one(); n],
                vec![F::zero(); n],
                eps,
            )
            .expect("unit std"),
        )
    };

    let mut layers = Vec::new();
    for (i, block) in config.blocks.iter().enumerate() {
        let in_ch = if i == 0 { config.input_channels } else { n };
        let head = TdnnLayer::zeros(
            in_ch,
            n,
            block.head_context,
            config.dilation,
            block.head_groups,
        )?;
        layers.push(SequentialLayer::new(
            LayerOrder::ConvActivationBn,
            vec![Node::Conv(head), act.clone(), bn_node()],
        ));
        for _ in 0..block.layers {
            let mut branches = config
                .branch_contexts
                .iter()
                .map(|&c| {
                    TdnnLayer::zeros(n, n, c, config.dilation, block.groups).map(Branch::conv)
                })
                .collect::<Result<Vec<_>>>()?;
            if config.identity_branch {
                branches.push(Branch::identity());
            }
            layers.push(SequentialLayer::new(
                LayerOrder::ConvActivationBn,
                vec![Node::BranchGroup(branches), act.clone(), bn_node()],
            ));
        }
        layers.push(SequentialLayer::new(
            LayerOrder::Plain,
            vec![Node::Se(SeParams::zeros(n, config.se_bottleneck)?)],
        ));
    }
    let head = PoolingHead {
        var_floor: config.pool_var_floor,
        fcs: vec![
            Linear::zeros(2 * n, config.fc_hidden)?,
            Linear::zeros(config.fc_hidden, config.embedding_dim)?,
        ],
    };
    let mut model = ModelGraph::new(config.name.clone(), layers, Some(head));
    random_init(&mut model, config.seed);
    Ok(model)
}

/// Builds with the element type named in the config.
pub fn build_any(config: &RepTdnnConfig) -> Result<AnyModel> {
    Ok(match config.dtype {
        DType::Fp32 => AnyModel::F32(build_rep_tdnn(config)?),
        DType::Fp64 => AnyModel::F64(build_rep_tdnn(config)?),
    })
}

fn uniform<F: Element>(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<F> {
    (0..len)
        .map(|_| F::from_f64_lossy(rng.gen_range(lo..hi)))
        .collect()
}

fn init_conv<F: Element>(rng: &mut ChaCha8Rng, l: &mut TdnnLayer<F>) {
    let bound = 1.0 / ((l.in_per_group() * l.context()) as f64).sqrt();
    let w = uniform(rng, l.weight().len(), -bound, bound);
    let b = uniform(rng, l.bias().len(), -bound, bound);
    l.weight_mut().copy_from_slice(&w);
    l.bias_mut().copy_from_slice(&b);
}

fn init_bn<F: Element>(rng: &mut ChaCha8Rng, bn: &BatchNormParams<F>) -> BatchNormParams<F> {
    let n = bn.channels();
    let mean = uniform(rng, n, -0.1, 0.1);
    let std = uniform(rng, n, 0.5, 2.0);
    let scale = uniform(rng, n, 0.5, 1.5);
    let shift = uniform(rng, n, -0.1, 0.1);
    BatchNormParams::new(mean, std, scale, shift, bn.eps()).expect("std drawn from [0.5, 2)")
}

/// Redraws every parameter from a ChaCha8 stream seeded with `seed`, in
/// container order. Same seed, same bits.
///
/// Convolution, SE and FC weights and biases are uniform in `±1/sqrt(fan_in)`.
/// Batch-norm statistics: mean and shift uniform in `[-0.1, 0.1)`, std in
/// `[0.5, 2)`, scale in `[0.5, 1.5)`. Values are drawn in f64 and rounded to
/// the element type.
pub fn random_init<F: Element>(model: &mut ModelGraph<F>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for node in model.layers.iter_mut().flat_map(|l| l.nodes.iter_mut()) {
        match node {
            Node::Conv(l) => init_conv(&mut rng, l),
            Node::BatchNorm(bn) => *bn = init_bn(&mut rng, bn),
            Node::Activation(_) => {}
            Node::Se(se) => {
                let reduce_bound = 1.0 / (se.channels() as f64).sqrt();
                let expand_bound = 1.0 / (se.bottleneck() as f64).sqrt();
                for (t, bound) in se.tensors_mut().into_iter().zip([
                    reduce_bound,
                    reduce_bound,
                    expand_bound,
                    expand_bound,
                ]) {
                    let len = t.len();
                    *t = uniform(&mut rng, len, -bound, bound);
                }
            }
            Node::BranchGroup(bs) => {
                for b in bs {
                    if let Some(bn) = &mut b.pre_bn {
                        *bn = init_bn(&mut rng, bn);
                    }
                    if let BranchOp::Conv(l) = &mut b.op {
                        init_conv(&mut rng, l);
                    }
                }
            }
        }
    }
    if let Some(head) = &mut model.head {
        for l in &mut head.fcs {
            let bound = 1.0 / (l.in_features() as f64).sqrt();
            let (w, b) = l.tensors_mut();
            let wl = w.len();
            w.copy_from_slice(&uniform::<F>(&mut rng, wl, -bound, bound));
            let bl = b.len();
            b.copy_from_slice(&uniform::<F>(&mut rng, bl, -bound, bound));
        }
    }
    model.meta.seed = seed;
}

/// Target parameter count of the re-parameterized model.
pub const TARGET_PLAIN_PARAMS: f64 = 6.9e6;
/// Target FLOPs of the re-parameterized model.
pub const TARGET_PLAIN_FLOPS: f64 = 1.4e9;

/// One point of the target-match grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchCandidate {
    pub config: RepTdnnConfig,
    pub plain_params: usize,
    pub gap: f64,
}

/// Exhaustive search over the unpublished architecture knobs for the
/// configuration whose plain parameter count is closest to 6.9e6.
///
/// Grid: branch groups `g ∈ {1, 2, 4, 8, 16}` shared by all blocks; head
/// groups `∈ {1, 2, 4}` for blocks after the first (the first head sees 161
/// input channels and stays ungrouped); `fc_hidden ∈ {256, 512}`;
/// `embedding_dim ∈ {192, 256, 512}`. Everything else is the default.
/// Results are sorted by absolute gap, ties broken by grid order.
pub fn target_match_search() -> Vec<MatchCandidate> {
    let mut out = Vec::new();
    for groups in [1, 2, 4, 8, 16] {
        for head_groups in [1, 2, 4] {
            for fc_hidden in [256, 512] {
                for embedding_dim in [192, 256, 512] {
                    let mut config = RepTdnnConfig {
                        name: "rep-tdnn-target-match".into(),
                        fc_hidden,
                        embedding_dim,
                        ..RepTdnnConfig::default()
                    };
                    for (i, b) in config.blocks.iter_mut().enumerate() {
                        b.groups = groups;
                        b.head_groups = if i == 0 { 1 } else { head_groups };
                    }
                    let plain_params = config.plain_param_count();
                    out.push(MatchCandidate {
                        gap: plain_params as f64 - TARGET_PLAIN_PARAMS,
                        config,
                        plain_params,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| a.gap.abs().total_cmp(&b.gap.abs()));
    out
}

/// The configuration selected by [`target_match_search`]: branch groups 4,
/// ungrouped heads, `fc_hidden = 512`, `embedding_dim = 512`.
pub fn target_match_config() -> RepTdnnConfig {
    let mut config = RepTdnnConfig {
        name: "rep-tdnn-target-match".into(),
        ..RepTdnnConfig::default()
    };
    for b in &mut config.blocks {
        b.groups = 4;
    }
    config
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::to_bytes;

    fn small() -> RepTdnnConfig {
        RepTdnnConfig {
            input_channels: 6,
            channels: 8,
            se_bottleneck: 2,
            fc_hidden: 5,
            embedding_dim: 3,
            blocks: [5, 1]
                .into_iter()
                .map(BlockConfig::with_head)
                .map(|mut b| {
                    b.layers = 2;
                    b
                })
                .collect(),
            ..RepTdnnConfig::default()
        }
    }

    #[test]
    fn default_config_structure() {
        let config = RepTdnnConfig::default();
        assert!(config.issues().is_empty());
        let heads: Vec<_> = config.blocks.iter().map(|b| b.head_context).collect();
        assert_eq!(heads, [5, 1, 1, 5]);
        assert_eq!(config.branch_groups(), 16);
    }

    #[test]
    fn default_model_validates() {
        let m: ModelGraph<f32> = build_rep_tdnn(&RepTdnnConfig::default()).unwrap();
        assert!(m.validate().is_empty(), "{:?}", m.validate());
        assert_eq!(m.branch_group_count(), 16);
        assert_eq!(
            m.count_params(),
            RepTdnnConfig::default().training_param_count()
        );
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = small();
        let a = to_bytes(&build_rep_tdnn::<f32>(&c).unwrap());
        let b = to_bytes(&build_rep_tdnn::<f32>(&c).unwrap());
        assert_eq!(a, b);
        let other = to_bytes(&build_rep_tdnn::<f32>(&RepTdnnConfig { seed: 1, ..c }).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn bn_std_is_bounded_below() {
        let m: ModelGraph<f64> = build_rep_tdnn(&small()).unwrap();
        for node in m.nodes() {
            if let Node::BatchNorm(bn) = node {
                assert!(bn.std().iter().all(|&s| s >= 0.5));
            }
        }
    }

    #[test]
    fn config_errors_are_itemized() {
        let mut c = RepTdnnConfig::default();
        c.blocks[1].head_context = 4;
        c.blocks[2].groups = 3;
        let issues = c.issues();
        assert_eq!(issues.len(), 2, "{issues:?}");
        assert!(issues[0].contains("blocks[1].head_context"));
        assert!(issues[1].contains("blocks[2].groups"));
        assert!(build_rep_tdnn::<f32>(&c).is_err());
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let err =
            RepTdnnConfig::from_json("{\n  \"channels\": 16,\n  \"chanels\": 4\n}").unwrap_err();
        match err {
            Error::ConfigParse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("chanels"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
        let round = RepTdnnConfig::from_json(&small().to_json()).unwrap();
        assert_eq!(round, small());
    }

    #[test]
    fn target_match_is_search_optimum() {
        let best = &target_match_search()[0];
        assert_eq!(best.config, target_match_config());
        assert!(target_match_config().issues().is_empty());
        assert!(target_match_config()
            .blocks
            .iter()
            .all(|b| 512 % b.groups == 0));
    }
}
