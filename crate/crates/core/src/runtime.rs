//! Forward-inference kernels: TDNN convolution, inference batch norm,
//! activations, squeeze-excitation, statistics pooling and affine layers.
//!
//! Every op is a pure function of its inputs. Convolutions use symmetric
//! "same" padding of `(context - 1) / 2 * dilation` frames per side, so the
//! frame count never changes inside the frame-level trunk.

use serde::{Deserialize, Serialize};

use crate::element::{cast_vec, Element};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor3};

/// A 1-D convolution over frames, weight layout `[out, in / groups, context]`.
///
/// `pad_value`, when present, holds one fill value per input channel used for
/// the out-of-range frames instead of zero. Plain convolutions never carry one;
/// it appears when a preceding batch norm is folded into the layer, where the
/// fill is the input whose normalized value is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TdnnLayer<F> {
    weight: Vec<F>,
    bias: Vec<F>,
    in_channels: usize,
    out_channels: usize,
    context: usize,
    dilation: usize,
    groups: usize,
    pad_value: Option<Vec<F>>,
}

impl<F: Element> TdnnLayer<F> {
    pub fn new(
        weight: Vec<F>,
        bias: Vec<F>,
        in_channels: usize,
        out_channels: usize,
        context: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        Self::with_padding(
            weight,
            bias,
            in_channels,
            out_channels,
            context,
            dilation,
            groups,
            None,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_padding(
        weight: Vec<F>,
        bias: Vec<F>,
        in_channels: usize,
        out_channels: usize,
        context: usize,
        dilation: usize,
        groups: usize,
        pad_value: Option<Vec<F>>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidLayer(
                "channel counts must be positive".into(),
            ));
        }
        if context == 0 || context.is_multiple_of(2) {
            return Err(Error::InvalidLayer(format!(
                "context must be odd and positive, got {context}"
            )));
        }
        if dilation == 0 {
            return Err(Error::InvalidLayer("dilation must be positive".into()));
        }
        if groups == 0
            || !in_channels.is_multiple_of(groups)
            || !out_channels.is_multiple_of(groups)
        {
            return Err(Error::InvalidLayer(format!(
                "groups {groups} must divide in_channels {in_channels} and out_channels {out_channels}"
            )));
        }
        let expected = out_channels * (in_channels / groups) * context;
        if weight.len() != expected {
            return Err(Error::InvalidLayer(format!(
                "weight has {} elements, expected {expected} for [{out_channels}, {}, {context}]",
                weight.len(),
                in_channels / groups
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::InvalidLayer(format!(
                "bias has {} elements, expected {out_channels}",
                bias.len()
            )));
        }
        if let Some(pad) = &pad_value {
            if pad.len() != in_channels {
                return Err(Error::InvalidLayer(format!(
                    "pad value has {} elements, expected {in_channels}",
                    pad.len()
                )));
            }
        }
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            context,
            dilation,
            groups,
            pad_value,
        })
    }

    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        context: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        Self::new(
            vec![F::zero(); out_channels * (in_channels / groups.max(1)) * context],
            vec![F::zero(); out_channels],
            in_channels,
            out_channels,
            context,
            dilation,
            groups,
        )
    }

    pub fn weight(&self) -> &[F] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [F] {
        &mut self.weight
    }

    pub fn bias(&self) -> &[F] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [F] {
        &mut self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn pad_value(&self) -> Option<&[F]> {
        self.pad_value.as_deref()
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Frames of padding on each side.
    pub fn half_width(&self) -> usize {
        (self.context - 1) / 2 * self.dilation
    }

    /// Group that output channel `o` belongs to.
    pub fn group_of_output(&self, o: usize) -> usize {
        o / self.out_per_group()
    }

    #[inline]
    pub fn weight_at(&self, o: usize, i_local: usize, c: usize) -> F {
        self.weight[(o * self.in_per_group() + i_local) * self.context + c]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<G: Element>(&self) -> TdnnLayer<G> {
        TdnnLayer {
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            context: self.context,
            dilation: self.dilation,
            groups: self.groups,
            pad_value: self.pad_value.as_deref().map(cast_vec),
        }
    }

    fn fill_for(&self, channel: usize) -> F {
        self.pad_value.as_ref().map_or(F::zero(), |p| p[channel])
    }
}

/// Inference-mode batch norm. `std` is the running standard deviation with
/// eps already folded in, `sqrt(var + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<F> {
    mean: Vec<F>,
    std: Vec<F>,
    scale: Vec<F>,
    shift: Vec<F>,
    eps: F,
}

impl<F: Element> BatchNormParams<F> {
    pub fn new(mean: Vec<F>, std: Vec<F>, scale: Vec<F>, shift: Vec<F>, eps: F) -> Result<Self> {
        let n = mean.len();
        if n == 0 || std.len() != n || scale.len() != n || shift.len() != n {
            return Err(Error::InvalidLayer(format!(
                "batch norm arrays must share a positive length (mean {}, std {}, scale {}, shift {})",
                mean.len(),
                std.len(),
                scale.len(),
                shift.len()
            )));
        }
        if let Some((channel, value)) = std
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > F::zero()))
        {
            return Err(Error::NonPositiveStd {
                channel,
                value: value.as_f64(),
            });
        }
        if !(eps.is_finite() && eps > F::zero()) {
            return Err(Error::InvalidLayer(format!(
                "eps must be positive, got {eps}"
            )));
        }
        Ok(Self {
            mean,
            std,
            scale,
            shift,
            eps,
        })
    }

    /// Builds from running variance: `std = sqrt(var + eps)`.
    pub fn from_running_var(
        mean: Vec<F>,
        var: Vec<F>,
        scale: Vec<F>,
        shift: Vec<F>,
        eps: F,
    ) -> Result<Self> {
        let std = var.iter().map(|&v| (v + eps).sqrt()).collect();
        Self::new(mean, std, scale, shift, eps)
    }

    pub fn identity(channels: usize) -> Self {
        Self::new(
            vec![F::zero(); channels],
            vec![F::one(); channels],
            vec![F::one(); channels],
            vec![F::zero(); channels],
            F::from_f64_lossy(1e-5),
        )
        .expect("identity batch norm is valid")
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[F] {
        &self.mean
    }

    pub fn std(&self) -> &[F] {
        &self.std
    }

    pub fn scale(&self) -> &[F] {
        &self.scale
    }

    pub fn shift(&self) -> &[F] {
        &self.shift
    }

    pub fn eps(&self) -> F {
        self.eps
    }

    /// `scale / std` per channel.
    pub fn gain(&self) -> Vec<F> {
        self.scale
            .iter()
            .zip(&self.std)
            .map(|(&g, &s)| g / s)
            .collect()
    }

    /// `shift - scale * mean / std` per channel, the image of zero.
    pub fn offset(&self) -> Vec<F> {
        self.mean
            .iter()
            .zip(&self.std)
            .zip(self.scale.iter().zip(&self.shift))
            .map(|((&m, &s), (&g, &b))| b - g * m / s)
            .collect()
    }

    pub fn cast<G: Element>(&self) -> BatchNormParams<G> {
        BatchNormParams {
            mean: cast_vec(&self.mean),
            std: cast_vec(&self.std),
            scale: cast_vec(&self.scale),
            shift: cast_vec(&self.shift),
            eps: G::from_f64_lossy(self.eps.as_f64()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::Relu => Ok(()),
            Activation::LeakyRelu { slope } if (0.0..1.0).contains(&slope) => Ok(()),
            Activation::LeakyRelu { slope } => Err(Error::InvalidLayer(format!(
                "leaky relu slope must lie in [0, 1), got {slope}"
            ))),
        }
    }

    #[inline]
    pub fn apply<F: Element>(&self, v: F) -> F {
        match *self {
            Activation::Relu => v.max(F::zero()),
            Activation::LeakyRelu { slope } => {
                if v < F::zero() {
                    v * F::from_f64_lossy(slope)
                } else {
                    v
                }
            }
        }
    }
}

/// Squeeze-excitation gate parameters for `channels` channels and a
/// `bottleneck`-wide hidden layer. Weights are row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams<F> {
    w_reduce: Vec<F>,
    b_reduce: Vec<F>,
    w_expand: Vec<F>,
    b_expand: Vec<F>,
    channels: usize,
    bottleneck: usize,
}

impl<F: Element> SeParams<F> {
    pub fn new(
        w_reduce: Vec<F>,
        b_reduce: Vec<F>,
        w_expand: Vec<F>,
        b_expand: Vec<F>,
        channels: usize,
        bottleneck: usize,
    ) -> Result<Self> {
        if channels == 0 || bottleneck == 0 {
            return Err(Error::InvalidLayer(
                "SE channels and bottleneck must be positive".into(),
            ));
        }
        if w_reduce.len() != bottleneck * channels
            || b_reduce.len() != bottleneck
            || w_expand.len() != channels * bottleneck
            || b_expand.len() != channels
        {
            return Err(Error::InvalidLayer(format!(
                "SE parameter shapes inconsistent with channels {channels}, bottleneck {bottleneck}"
            )));
        }
        Ok(Self {
            w_reduce,
            b_reduce,
            w_expand,
            b_expand,
            channels,
            bottleneck,
        })
    }

    pub fn zeros(channels: usize, bottleneck: usize) -> Result<Self> {
        Self::new(
            vec![F::zero(); bottleneck * channels],
            vec![F::zero(); bottleneck],
            vec![F::zero(); channels * bottleneck],
            vec![F::zero(); channels],
            channels,
            bottleneck,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn w_reduce(&self) -> &[F] {
        &self.w_reduce
    }

    pub fn b_reduce(&self) -> &[F] {
        &self.b_reduce
    }

    pub fn w_expand(&self) -> &[F] {
        &self.w_expand
    }

    pub fn b_expand(&self) -> &[F] {
        &self.b_expand
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<F>; 4] {
        [
            &mut self.w_reduce,
            &mut self.b_reduce,
            &mut self.w_expand,
            &mut self.b_expand,
        ]
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.bottleneck + self.bottleneck + self.channels
    }

    pub fn cast<G: Element>(&self) -> SeParams<G> {
        SeParams {
            w_reduce: cast_vec(&self.w_reduce),
            b_reduce: cast_vec(&self.b_reduce),
            w_expand: cast_vec(&self.w_expand),
            b_expand: cast_vec(&self.b_expand),
            channels: self.channels,
            bottleneck: self.bottleneck,
        }
    }
}

/// Fully connected layer, `weight` is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    weight: Matrix<F>,
    bias: Vec<F>,
}

impl<F: Element> Linear<F> {
    pub fn new(weight: Matrix<F>, bias: Vec<F>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::InvalidLayer(format!(
                "fc bias has {} elements, weight has {} rows",
                bias.len(),
                weight.rows()
            )));
        }
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(Error::InvalidLayer("fc dimensions must be positive".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Result<Self> {
        Self::new(
            Matrix::zeros(out_features, in_features),
            vec![F::zero(); out_features],
        )
    }

    pub fn weight(&self) -> &Matrix<F> {
        &self.weight
    }

    pub fn bias(&self) -> &[F] {
        &self.bias
    }

    pub(crate) fn tensors_mut(&mut self) -> (&mut [F], &mut [F]) {
        (self.weight.data_mut(), &mut self.bias)
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn cast<G: Element>(&self) -> Linear<G> {
        Linear {
            weight: self.weight.cast(),
            bias: cast_vec(&self.bias),
        }
    }
}

fn check_channels(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::ChannelMismatch {
            op,
            expected,
            found,
        });
    }
    Ok(())
}

/// Copies `row` shifted by `offset` frames into `dst`, filling out-of-range
/// frames with `fill`.
fn shifted_copy<F: Element>(dst: &mut [F], row: &[F], offset: isize, fill: F) {
    let t = row.len() as isize;
    let lo = (-offset).clamp(0, t) as usize;
    let hi = (t - offset).clamp(0, t) as usize;
    dst[..lo].fill(fill);
    if lo < hi {
        let src_lo = (lo as isize + offset) as usize;
        dst[lo..hi].copy_from_slice(&row[src_lo..src_lo + (hi - lo)]);
    }
    dst[hi.max(lo)..].fill(fill);
}

/// Same-padded grouped 1-D convolution, lowered to one GEMM per
/// `(batch item, group)` over an unfolded `[in/groups * context, frames]` buffer.
pub fn conv1d<F: Element>(x: &Tensor3<F>, layer: &TdnnLayer<F>) -> Result<Tensor3<F>> {
    check_channels("conv1d", layer.in_channels(), x.channels())?;
    let frames = x.frames();
    let ctx = layer.context();
    let ipg = layer.in_per_group();
    let opg = layer.out_per_group();
    let k = ipg * ctx;
    let half = layer.half_width() as isize;
    let dil = layer.dilation() as isize;

    let mut out = Tensor3::zeros(x.batch(), layer.out_channels(), frames);
    let direct = ctx == 1;
    let mut cols = if direct {
        Vec::new()
    } else {
        vec![F::zero(); k * frames]
    };

    for b in 0..x.batch() {
        let item = x.item(b);
        let out_item = out.item_mut(b);
        for g in 0..layer.groups() {
            let rhs: &[F] = if direct {
                &item[g * ipg * frames..(g + 1) * ipg * frames]
            } else {
                for il in 0..ipg {
                    let ch = g * ipg + il;
                    let row = &item[ch * frames..(ch + 1) * frames];
                    let fill = layer.fill_for(ch);
                    for c in 0..ctx {
                        let dst = &mut cols[(il * ctx + c) * frames..(il * ctx + c + 1) * frames];
                        shifted_copy(dst, row, c as isize * dil - half, fill);
                    }
                }
                &cols
            };
            let out_rows = &mut out_item[g * opg * frames..(g + 1) * opg * frames];
            for (ol, row) in out_rows.chunks_exact_mut(frames).enumerate() {
                row.fill(layer.bias()[g * opg + ol]);
            }
            let w = &layer.weight()[g * opg * k..(g + 1) * opg * k];
            F::gemm(opg, k, frames, w, rhs, F::one(), out_rows);
        }
    }
    Ok(out)
}

/// Literal nested-loop convolution with the same contract as [`conv1d`].
pub fn conv1d_naive<F: Element>(x: &Tensor3<F>, layer: &TdnnLayer<F>) -> Result<Tensor3<F>> {
    check_channels("conv1d_naive", layer.in_channels(), x.channels())?;
    let frames = x.frames() as isize;
    let half = layer.half_width() as isize;
    let ipg = layer.in_per_group();
    let mut out = Vec::with_capacity(x.batch() * layer.out_channels() * x.frames());
    for b in 0..x.batch() {
        for o in 0..layer.out_channels() {
            let g = layer.group_of_output(o);
            for t in 0..frames {
                let mut acc = layer.bias()[o];
                for il in 0..ipg {
                    let i = g * ipg + il;
                    for c in 0..layer.context() {
                        let src = t + (c * layer.dilation()) as isize - half;
                        let v = if (0..frames).contains(&src) {
                            x.at(b, i, src as usize)
                        } else {
                            layer.fill_for(i)
                        };
                        acc = acc + layer.weight_at(o, il, c) * v;
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor3::new(out, x.batch(), layer.out_channels(), x.frames())
}

pub fn batchnorm_infer<F: Element>(x: &Tensor3<F>, bn: &BatchNormParams<F>) -> Result<Tensor3<F>> {
    check_channels("batchnorm", bn.channels(), x.channels())?;
    let gain = bn.gain();
    let mut out = x.clone();
    for b in 0..x.batch() {
        for (n, row) in out.item_mut(b).chunks_exact_mut(x.frames()).enumerate() {
            let (m, k, s) = (bn.mean()[n], gain[n], bn.shift()[n]);
            for v in row {
                *v = (*v - m) * k + s;
            }
        }
    }
    Ok(out)
}

pub fn activation<F: Element>(x: &Tensor3<F>, kind: Activation) -> Tensor3<F> {
    x.map(|v| kind.apply(v))
}

fn sigmoid<F: Element>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Temporal mean per `(batch, channel)`, `[batch, channels]`.
fn temporal_mean<F: Element>(x: &Tensor3<F>) -> Matrix<F> {
    let inv_t = F::one() / F::from_usize(x.frames()).expect("frame count fits");
    Matrix::from_fn(x.batch(), x.channels(), |b, n| {
        x.row(b, n).iter().copied().sum::<F>() * inv_t
    })
}

/// Per-`(batch, channel)` gate in (0, 1) computed by the SE bottleneck.
pub fn se_gate<F: Element>(x: &Tensor3<F>, se: &SeParams<F>) -> Result<Matrix<F>> {
    check_channels("se_block", se.channels(), x.channels())?;
    let squeezed = temporal_mean(x);
    let (n, nb) = (se.channels(), se.bottleneck());
    let mut gate = Matrix::zeros(x.batch(), n);
    let mut hidden = vec![F::zero(); nb];
    for b in 0..x.batch() {
        let s = squeezed.row(b);
        for (j, h) in hidden.iter_mut().enumerate() {
            let w = &se.w_reduce()[j * n..(j + 1) * n];
            let z = w.iter().zip(s).map(|(&a, &v)| a * v).sum::<F>() + se.b_reduce()[j];
            *h = z.max(F::zero());
        }
        for c in 0..n {
            let w = &se.w_expand()[c * nb..(c + 1) * nb];
            let z = w.iter().zip(&hidden).map(|(&a, &v)| a * v).sum::<F>() + se.b_expand()[c];
            gate.data_mut()[b * n + c] = sigmoid(z);
        }
    }
    Ok(gate)
}

pub fn se_block<F: Element>(x: &Tensor3<F>, se: &SeParams<F>) -> Result<Tensor3<F>> {
    let gate = se_gate(x, se)?;
    let mut out = x.clone();
    for b in 0..x.batch() {
        for (n, row) in out.item_mut(b).chunks_exact_mut(x.frames()).enumerate() {
            let g = gate.at(b, n);
            for v in row {
                *v = *v * g;
            }
        }
    }
    Ok(out)
}

/// Default variance floor applied before the square root in statistics pooling.
pub const STATS_POOL_VAR_FLOOR: f64 = 1e-10;

/// Concatenated temporal mean and population standard deviation, `[batch, 2 * channels]`.
pub fn stats_pool<F: Element>(x: &Tensor3<F>, var_floor: f64) -> Result<Matrix<F>> {
    if x.frames() == 0 {
        return Err(Error::EmptyFrames);
    }
    let n = x.channels();
    let inv_t = F::one() / F::from_usize(x.frames()).expect("frame count fits");
    let floor = F::from_f64_lossy(var_floor);
    let mut out = Matrix::zeros(x.batch(), 2 * n);
    for b in 0..x.batch() {
        for c in 0..n {
            let row = x.row(b, c);
            let mean = row.iter().copied().sum::<F>() * inv_t;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_t;
            let cols = 2 * n;
            out.data_mut()[b * cols + c] = mean;
            out.data_mut()[b * cols + n + c] = var.max(floor).sqrt();
        }
    }
    Ok(out)
}

/// `x · wᵀ + b`.
pub fn fc<F: Element>(x: &Matrix<F>, layer: &Linear<F>) -> Result<Matrix<F>> {
    if x.cols() != layer.in_features() {
        return Err(Error::ShapeMismatch(format!(
            "fc expects {} input features, got {}",
            layer.in_features(),
            x.cols()
        )));
    }
    let w = layer.weight();
    Ok(Matrix::from_fn(x.rows(), layer.out_features(), |r, o| {
        w.row(o)
            .iter()
            .zip(x.row(r))
            .map(|(&a, &v)| a * v)
            .sum::<F>()
            + layer.bias()[o]
    }))
}
