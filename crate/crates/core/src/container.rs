//! The CSRP v1 model container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `43 53 52 50` (`"CSRP"`)            |
//! | 4..8         | `u32` version, currently 1                |
//! | 8..16        | `u64` length `L` of the topology document |
//! | 16..16+L     | UTF-8 JSON topology document              |
//! | 16+L..       | tensor payload                            |
//!
//! The topology lists layers and nodes in order with their hyperparameters
//! and, for each tensor, its name, shape and byte offset into the payload.
//! Tensors are stored back to back in declaration order as row-major
//! IEEE-754 values of the model's element type. Output is deterministic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::graph::{
    Branch, BranchOp, LayerOrder, ModelGraph, ModelMeta, Node, PoolingHead, SequentialLayer,
};
use crate::runtime::{Activation, BatchNormParams, Linear, SeParams, TdnnLayer};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"CSRP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRef {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    name: String,
    dtype: DType,
    seed: u64,
    training: bool,
    layers: Vec<LayerDoc>,
    head: Option<HeadDoc>,
    payload_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    order: LayerOrder,
    nodes: Vec<NodeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum NodeDoc {
    Conv(ConvDoc),
    Batchnorm(BnDoc),
    Activation { activation: Activation },
    Se(SeDoc),
    BranchGroup { branches: Vec<BranchDoc> },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvDoc {
    in_channels: usize,
    out_channels: usize,
    context: usize,
    dilation: usize,
    groups: usize,
    weight: TensorRef,
    bias: TensorRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad_value: Option<TensorRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnDoc {
    channels: usize,
    eps: f64,
    mean: TensorRef,
    std: TensorRef,
    scale: TensorRef,
    shift: TensorRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeDoc {
    channels: usize,
    bottleneck: usize,
    w_reduce: TensorRef,
    b_reduce: TensorRef,
    w_expand: TensorRef,
    b_expand: TensorRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pre_bn: Option<BnDoc>,
    op: BranchOpDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum BranchOpDoc {
    Conv(Box<ConvDoc>),
    Identity,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDoc {
    var_floor: f64,
    fcs: Vec<FcDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FcDoc {
    in_features: usize,
    out_features: usize,
    weight: TensorRef,
    bias: TensorRef,
}

struct PayloadWriter<F> {
    bytes: Vec<u8>,
    _elem: std::marker::PhantomData<F>,
}

impl<F: Element> PayloadWriter<F> {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[F]) -> TensorRef {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self.bytes.len() as u64;
        for &v in data {
            v.extend_le_bytes(&mut self.bytes);
        }
        TensorRef {
            name,
            shape,
            offset,
        }
    }

    fn conv(&mut self, prefix: &str, l: &TdnnLayer<F>) -> ConvDoc {
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![l.out_channels(), l.in_per_group(), l.context()],
            l.weight(),
        );
        let bias = self.push(format!("{prefix}.bias"), vec![l.out_channels()], l.bias());
        let pad_value = l
            .pad_value()
            .map(|p| self.push(format!("{prefix}.pad_value"), vec![p.len()], p));
        ConvDoc {
            in_channels: l.in_channels(),
            out_channels: l.out_channels(),
            context: l.context(),
            dilation: l.dilation(),
            groups: l.groups(),
            weight,
            bias,
            pad_value,
        }
    }

    fn bn(&mut self, prefix: &str, bn: &BatchNormParams<F>) -> BnDoc {
        let n = bn.channels();
        BnDoc {
            channels: n,
            eps: bn.eps().as_f64(),
            mean: self.push(format!("{prefix}.mean"), vec![n], bn.mean()),
            std: self.push(format!("{prefix}.std"), vec![n], bn.std()),
            scale: self.push(format!("{prefix}.scale"), vec![n], bn.scale()),
            shift: self.push(format!("{prefix}.shift"), vec![n], bn.shift()),
        }
    }

    fn node(&mut self, prefix: &str, node: &Node<F>) -> NodeDoc {
        match node {
            Node::Conv(l) => NodeDoc::Conv(self.conv(prefix, l)),
            Node::BatchNorm(bn) => NodeDoc::Batchnorm(self.bn(prefix, bn)),
            Node::Activation(a) => NodeDoc::Activation { activation: *a },
            Node::Se(se) => {
                let (n, nb) = (se.channels(), se.bottleneck());
                NodeDoc::Se(SeDoc {
                    channels: n,
                    bottleneck: nb,
                    w_reduce: self.push(format!("{prefix}.w_reduce"), vec![nb, n], se.w_reduce()),
                    b_reduce: self.push(format!("{prefix}.b_reduce"), vec![nb], se.b_reduce()),
                    w_expand: self.push(format!("{prefix}.w_expand"), vec![n, nb], se.w_expand()),
                    b_expand: self.push(format!("{prefix}.b_expand"), vec![n], se.b_expand()),
                })
            }
            Node::BranchGroup(bs) => NodeDoc::BranchGroup {
                branches: bs
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        let bp = format!("{prefix}.branches.{i}");
                        BranchDoc {
                            pre_bn: b
                                .pre_bn
                                .as_ref()
                                .map(|bn| self.bn(&format!("{bp}.pre_bn"), bn)),
                            op: match &b.op {
                                BranchOp::Conv(l) => {
                                    BranchOpDoc::Conv(Box::new(self.conv(&format!("{bp}.conv"), l)))
                                }
                                BranchOp::Identity => BranchOpDoc::Identity,
                            },
                        }
                    })
                    .collect(),
            },
        }
    }
}

/// Serializes `model` into CSRP v1 bytes.
pub fn to_bytes<F: Element>(model: &ModelGraph<F>) -> Vec<u8> {
    let mut w = PayloadWriter::<F> {
        bytes: Vec::new(),
        _elem: std::marker::PhantomData,
    };
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(li, layer)| LayerDoc {
            order: layer.order,
            nodes: layer
                .nodes
                .iter()
                .enumerate()
                .map(|(ni, n)| w.node(&format!("layers.{li}.nodes.{ni}"), n))
                .collect(),
        })
        .collect();
    let head = model.head.as_ref().map(|h| HeadDoc {
        var_floor: h.var_floor,
        fcs: h
            .fcs
            .iter()
            .enumerate()
            .map(|(i, l)| FcDoc {
                in_features: l.in_features(),
                out_features: l.out_features(),
                weight: w.push(
                    format!("head.fc.{i}.weight"),
                    vec![l.out_features(), l.in_features()],
                    l.weight().data(),
                ),
                bias: w.push(
                    format!("head.fc.{i}.bias"),
                    vec![l.out_features()],
                    l.bias(),
                ),
            })
            .collect(),
    });
    let doc = TopologyDoc {
        name: model.meta.name.clone(),
        dtype: F::DTYPE,
        seed: model.meta.seed,
        training: model.meta.training,
        layers,
        head,
        payload_bytes: w.bytes.len() as u64,
    };
    let topology = serde_json::to_vec_pretty(&doc).expect("topology serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + topology.len() + w.bytes.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(topology.len() as u64).to_le_bytes());
    out.extend_from_slice(&topology);
    out.extend_from_slice(&w.bytes);
    out
}

struct PayloadReader<'a, F> {
    bytes: &'a [u8],
    cursor: usize,
    _elem: std::marker::PhantomData<F>,
}

impl<F: Element> PayloadReader<'_, F> {
    fn take(&mut self, r: &TensorRef, shape: &[usize]) -> Result<Vec<F>> {
        if r.shape != shape {
            return Err(Error::PayloadMismatch(format!(
                "tensor {} declared with shape {:?}, hyperparameters imply {:?}",
                r.name, r.shape, shape
            )));
        }
        if r.offset != self.cursor as u64 {
            return Err(Error::PayloadMismatch(format!(
                "tensor {} at offset {}, expected {}",
                r.name, r.offset, self.cursor
            )));
        }
        let size = F::DTYPE.size_of();
        let len = shape.iter().product::<usize>() * size;
        let end = self.cursor + len;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                needed: end,
                found: self.bytes.len(),
            });
        }
        let data = self.bytes[self.cursor..end]
            .chunks_exact(size)
            .map(F::from_le_slice)
            .collect();
        self.cursor = end;
        Ok(data)
    }

    fn conv(&mut self, d: &ConvDoc) -> Result<TdnnLayer<F>> {
        let ipg = d.in_channels.checked_div(d.groups).unwrap_or(0);
        let weight = self.take(&d.weight, &[d.out_channels, ipg, d.context])?;
        let bias = self.take(&d.bias, &[d.out_channels])?;
        let pad = d
            .pad_value
            .as_ref()
            .map(|p| self.take(p, &[d.in_channels]))
            .transpose()?;
        TdnnLayer::with_padding(
            weight,
            bias,
            d.in_channels,
            d.out_channels,
            d.context,
            d.dilation,
            d.groups,
            pad,
        )
    }

    fn bn(&mut self, d: &BnDoc) -> Result<BatchNormParams<F>> {
        let n = [d.channels];
        let mean = self.take(&d.mean, &n)?;
        let std = self.take(&d.std, &n)?;
        let scale = self.take(&d.scale, &n)?;
        let shift = self.take(&d.shift, &n)?;
        BatchNormParams::new(mean, std, scale, shift, F::from_f64_lossy(d.eps))
    }

    fn node(&mut self, d: &NodeDoc) -> Result<Node<F>> {
        Ok(match d {
            NodeDoc::Conv(c) => Node::Conv(self.conv(c)?),
            NodeDoc::Batchnorm(b) => Node::BatchNorm(self.bn(b)?),
            NodeDoc::Activation { activation } => Node::Activation(*activation),
            NodeDoc::Se(s) => {
                let (n, nb) = (s.channels, s.bottleneck);
                let w_reduce = self.take(&s.w_reduce, &[nb, n])?;
                let b_reduce = self.take(&s.b_reduce, &[nb])?;
                let w_expand = self.take(&s.w_expand, &[n, nb])?;
                let b_expand = self.take(&s.b_expand, &[n])?;
                Node::Se(SeParams::new(
                    w_reduce, b_reduce, w_expand, b_expand, n, nb,
                )?)
            }
            NodeDoc::BranchGroup { branches } => Node::BranchGroup(
                branches
                    .iter()
                    .map(|b| {
                        Ok(Branch {
                            pre_bn: b.pre_bn.as_ref().map(|bn| self.bn(bn)).transpose()?,
                            op: match &b.op {
                                BranchOpDoc::Conv(c) => BranchOp::Conv(self.conv(c)?),
                                BranchOpDoc::Identity => BranchOp::Identity,
                            },
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

/// Parses the header and topology, returning the document and payload slice.
fn split(bytes: &[u8]) -> Result<(TopologyDoc, &[u8])> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(Error::TruncatedPayload {
                needed: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    need(8)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    need(HEADER_LEN)?;
    let topo_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let topo_end = usize::try_from(topo_len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Topology(format!("topology length {topo_len} overflows")))?;
    need(topo_end)?;
    let text = std::str::from_utf8(&bytes[HEADER_LEN..topo_end])
        .map_err(|e| Error::Topology(format!("not UTF-8: {e}")))?;
    let doc: TopologyDoc =
        serde_json::from_str(text).map_err(|e| Error::Topology(e.to_string()))?;
    Ok((doc, &bytes[topo_end..]))
}

/// Element type recorded in a container, without decoding tensors.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    split(bytes).map(|(doc, _)| doc.dtype)
}

/// Decodes CSRP v1 bytes into a model of element type `F`.
pub fn from_bytes<F: Element>(bytes: &[u8]) -> Result<ModelGraph<F>> {
    let (doc, payload) = split(bytes)?;
    if doc.dtype != F::DTYPE {
        return Err(Error::DtypeMismatch {
            found: doc.dtype.name(),
            requested: F::DTYPE.name(),
        });
    }
    let declared = usize::try_from(doc.payload_bytes).unwrap_or(usize::MAX);
    if payload.len() < declared {
        return Err(Error::TruncatedPayload {
            needed: declared,
            found: payload.len(),
        });
    }
    let mut r = PayloadReader::<F> {
        bytes: payload,
        cursor: 0,
        _elem: std::marker::PhantomData,
    };
    let layers = doc
        .layers
        .iter()
        .map(|l| {
            Ok(SequentialLayer {
                order: l.order,
                nodes: l.nodes.iter().map(|n| r.node(n)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = doc
        .head
        .as_ref()
        .map(|h| {
            let fcs = h
                .fcs
                .iter()
                .map(|f| {
                    let w = r.take(&f.weight, &[f.out_features, f.in_features])?;
                    let b = r.take(&f.bias, &[f.out_features])?;
                    Linear::new(Matrix::new(w, f.out_features, f.in_features)?, b)
                })
                .collect::<Result<_>>()?;
            Ok::<_, Error>(PoolingHead {
                var_floor: h.var_floor,
                fcs,
            })
        })
        .transpose()?;
    if r.cursor != payload.len() || r.cursor != declared {
        return Err(Error::PayloadMismatch(format!(
            "topology accounts for {} payload bytes, header declares {}, file holds {}",
            r.cursor,
            declared,
            payload.len()
        )));
    }
    Ok(ModelGraph {
        meta: ModelMeta {
            name: doc.name,
            seed: doc.seed,
            training: doc.training,
        },
        layers,
        head,
    })
}

pub fn save<F: Element>(model: &ModelGraph<F>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<F: Element>(path: impl AsRef<Path>) -> Result<ModelGraph<F>> {
    from_bytes(&fs::read(path)?)
}

/// A model of either element type, as read from a container.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(ModelGraph<f32>),
    F64(ModelGraph<f64>),
}

impl AnyModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(match peek_dtype(bytes)? {
            DType::Fp32 => AnyModel::F32(from_bytes(bytes)?),
            DType::Fp64 => AnyModel::F64(from_bytes(bytes)?),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyModel::F32(m) => to_bytes(m),
            AnyModel::F64(m) => to_bytes(m),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyModel::F32(_) => DType::Fp32,
            AnyModel::F64(_) => DType::Fp64,
        }
    }

    pub fn meta(&self) -> &ModelMeta {
        match self {
            AnyModel::F32(m) => &m.meta,
            AnyModel::F64(m) => &m.meta,
        }
    }
}

impl From<ModelGraph<f32>> for AnyModel {
    fn from(m: ModelGraph<f32>) -> Self {
        AnyModel::F32(m)
    }
}

impl From<ModelGraph<f64>> for AnyModel {
    fn from(m: ModelGraph<f64>) -> Self {
        AnyModel::F64(m)
    }
}

/// Runs `$body` with `$m` bound to the concrete `ModelGraph` inside an [`AnyModel`].
#[macro_export]
macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            $crate::container::AnyModel::F32($m) => $body,
            $crate::container::AnyModel::F64($m) => $body,
        }
    };
}
