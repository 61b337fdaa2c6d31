//! Layers, network specifications and whole-network forward/backward.
//!
//! A [`NetworkSpec`] is a declarative stack of blocks: plain layers or
//! pre-activation residual blocks. [`Network`] instantiates it with parameters
//! and runs hand-derived backpropagation through every layer, ending in a
//! softmax cross-entropy loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::acu::{AcuCache, AcuConfig, AcuLayer, PositionInit, Synapse, SynapsePositions};
use crate::error::{Error, Result};
use crate::refconv::{conv2d_gemm, conv2d_gemm_backward, ConvParams};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Acu {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        init: PositionInit,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
}

impl LayerSpec {
    fn conv3(in_ch: usize, out_ch: usize, stride: usize, use_acu: bool) -> Self {
        if use_acu {
            LayerSpec::Acu {
                in_ch,
                out_ch,
                stride,
                pad: 1,
                groups: 1,
                init: PositionInit::Grid3x3,
            }
        } else {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel: 3,
                stride,
                pad: 1,
            }
        }
    }

    fn conv1(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    fn is_weight_layer(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Acu { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shortcut {
    Identity,
    /// 1×1 convolution applied to the pre-activated input.
    Projection {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockSpec {
    Layer(LayerSpec),
    /// `out = branch(preact(x)) + shortcut`, where the shortcut is `x` itself
    /// or a projection of `preact(x)`.
    Residual {
        preact: Vec<LayerSpec>,
        branch: Vec<LayerSpec>,
        shortcut: Shortcut,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualKind {
    Basic,
    Bottleneck,
}

fn scaled(c: usize, m: f64) -> usize {
    ((c as f64 * m).round() as usize).max(4)
}

fn push_conv_bn_relu(blocks: &mut Vec<BlockSpec>, conv: LayerSpec, out_ch: usize) {
    blocks.push(BlockSpec::Layer(conv));
    blocks.push(BlockSpec::Layer(LayerSpec::BatchNorm { channels: out_ch }));
    blocks.push(BlockSpec::Layer(LayerSpec::Relu));
}

/// The plain all-convolutional network on 3 × 32 × 32 inputs.
pub fn build_plain_network(width_multiplier: f64, classes: usize, use_acu: bool) -> NetworkSpec {
    build_plain_network_for(3, (32, 32), width_multiplier, classes, use_acu)
}

/// Plain network: a 1×1 stem, three pairs of 3×3 layers (the first of the
/// second and third pairs at stride 2), a 1×1 classifier and global average
/// pooling. Batch norm and ReLU follow every layer except the classifier.
pub fn build_plain_network_for(
    input_channels: usize,
    input_hw: (usize, usize),
    width_multiplier: f64,
    classes: usize,
    use_acu: bool,
) -> NetworkSpec {
    let m = width_multiplier;
    let stem = scaled(16, m);
    let mut blocks = Vec::new();
    push_conv_bn_relu(&mut blocks, LayerSpec::conv1(input_channels, stem), stem);
    let mut ch = stem;
    for (width, stride) in [(48, 1), (96, 2), (192, 2)] {
        let out = scaled(width, m);
        push_conv_bn_relu(&mut blocks, LayerSpec::conv3(ch, out, stride, use_acu), out);
        push_conv_bn_relu(&mut blocks, LayerSpec::conv3(out, out, 1, use_acu), out);
        ch = out;
    }
    blocks.push(BlockSpec::Layer(LayerSpec::conv1(ch, classes)));
    blocks.push(BlockSpec::Layer(LayerSpec::GlobalAvgPool));
    NetworkSpec {
        input_channels,
        input_hw,
        classes,
        blocks,
    }
}

/// Two-layer network: one 3×3 layer (ACU or fixed), batch norm, ReLU, a 1×1
/// classifier and global average pooling.
pub fn build_shallow_network(
    input_channels: usize,
    input_hw: (usize, usize),
    width: usize,
    classes: usize,
    use_acu: bool,
) -> NetworkSpec {
    let mut blocks = Vec::new();
    push_conv_bn_relu(
        &mut blocks,
        LayerSpec::conv3(input_channels, width, 1, use_acu),
        width,
    );
    blocks.push(BlockSpec::Layer(LayerSpec::conv1(width, classes)));
    blocks.push(BlockSpec::Layer(LayerSpec::GlobalAvgPool));
    NetworkSpec {
        input_channels,
        input_hw,
        classes,
        blocks,
    }
}

/// Pre-activation residual network on 3 × 32 × 32 inputs with stage widths
/// 16/32/64.
pub fn build_residual_network(
    kind: ResidualKind,
    blocks_per_stage: usize,
    classes: usize,
    use_acu: bool,
) -> NetworkSpec {
    build_residual_network_for(3, (32, 32), kind, blocks_per_stage, 1.0, classes, use_acu)
}

/// Three stages of residual blocks (stride 1, 2, 2). Bottleneck blocks expand
/// to four times the stage width. Projection shortcuts appear exactly where
/// the channel count or stride changes.
pub fn build_residual_network_for(
    input_channels: usize,
    input_hw: (usize, usize),
    kind: ResidualKind,
    blocks_per_stage: usize,
    width_multiplier: f64,
    classes: usize,
    use_acu: bool,
) -> NetworkSpec {
    let m = width_multiplier;
    let stem = scaled(16, m);
    let mut blocks = vec![BlockSpec::Layer(LayerSpec::Conv {
        in_ch: input_channels,
        out_ch: stem,
        kernel: 3,
        stride: 1,
        pad: 1,
    })];
    let mut ch = stem;
    for (stage, base) in [16, 32, 64].into_iter().enumerate() {
        let mid = scaled(base, m);
        let out = match kind {
            ResidualKind::Basic => mid,
            ResidualKind::Bottleneck => 4 * mid,
        };
        for b in 0..blocks_per_stage.max(1) {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let preact = vec![LayerSpec::BatchNorm { channels: ch }, LayerSpec::Relu];
            let branch = match kind {
                ResidualKind::Basic => vec![
                    LayerSpec::conv3(ch, out, stride, use_acu),
                    LayerSpec::BatchNorm { channels: out },
                    LayerSpec::Relu,
                    LayerSpec::conv3(out, out, 1, use_acu),
                ],
                ResidualKind::Bottleneck => vec![
                    LayerSpec::conv1(ch, mid),
                    LayerSpec::BatchNorm { channels: mid },
                    LayerSpec::Relu,
                    LayerSpec::conv3(mid, mid, stride, use_acu),
                    LayerSpec::BatchNorm { channels: mid },
                    LayerSpec::Relu,
                    LayerSpec::conv1(mid, out),
                ],
            };
            let shortcut = if ch != out || stride != 1 {
                Shortcut::Projection {
                    in_ch: ch,
                    out_ch: out,
                    stride,
                }
            } else {
                Shortcut::Identity
            };
            blocks.push(BlockSpec::Residual {
                preact,
                branch,
                shortcut,
            });
            ch = out;
        }
    }
    blocks.push(BlockSpec::Layer(LayerSpec::BatchNorm { channels: ch }));
    blocks.push(BlockSpec::Layer(LayerSpec::Relu));
    blocks.push(BlockSpec::Layer(LayerSpec::GlobalAvgPool));
    blocks.push(BlockSpec::Layer(LayerSpec::conv1(ch, classes)));
    NetworkSpec {
        input_channels,
        input_hw,
        classes,
        blocks,
    }
}

impl NetworkSpec {
    fn main_path_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.blocks.iter().flat_map(|b| -> Box<dyn Iterator<Item = &LayerSpec>> {
            match b {
                BlockSpec::Layer(l) => Box::new(std::iter::once(l)),
                BlockSpec::Residual { preact, branch, .. } => {
                    Box::new(preact.iter().chain(branch.iter()))
                }
            }
        })
    }

    /// Convolution-type layers on the main path; projection shortcuts are not
    /// counted.
    pub fn weight_layer_count(&self) -> usize {
        self.main_path_layers().filter(|l| l.is_weight_layer()).count()
    }

    pub fn acu_layer_count(&self) -> usize {
        self.main_path_layers()
            .filter(|l| matches!(l, LayerSpec::Acu { .. }))
            .count()
    }

    /// Output widths of the main-path convolution-type layers, in order.
    pub fn layer_widths(&self) -> Vec<usize> {
        self.main_path_layers()
            .filter_map(|l| match l {
                LayerSpec::Conv { out_ch, .. } | LayerSpec::Acu { out_ch, .. } => Some(*out_ch),
                _ => None,
            })
            .collect()
    }

    pub fn projection_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| {
                matches!(
                    b,
                    BlockSpec::Residual {
                        shortcut: Shortcut::Projection { .. },
                        ..
                    }
                )
            })
            .count()
    }

    /// Checks channel and spatial arithmetic and returns the spatial input
    /// size seen by every ACU layer, in network order.
    pub fn validate(&self) -> Result<Vec<(usize, usize)>> {
        let mut acu_inputs = Vec::new();
        let shape = (self.input_channels, self.input_hw.0, self.input_hw.1);
        let mut shape = shape;
        for block in &self.blocks {
            match block {
                BlockSpec::Layer(l) => shape = layer_out(l, shape, &mut acu_inputs)?,
                BlockSpec::Residual {
                    preact,
                    branch,
                    shortcut,
                } => {
                    let mut a = shape;
                    for l in preact {
                        a = layer_out(l, a, &mut acu_inputs)?;
                    }
                    let mut b = a;
                    for l in branch {
                        b = layer_out(l, b, &mut acu_inputs)?;
                    }
                    let s = match shortcut {
                        Shortcut::Identity => shape,
                        Shortcut::Projection {
                            in_ch,
                            out_ch,
                            stride,
                        } => layer_out(
                            &LayerSpec::Conv {
                                in_ch: *in_ch,
                                out_ch: *out_ch,
                                kernel: 1,
                                stride: *stride,
                                pad: 0,
                            },
                            a,
                            &mut acu_inputs,
                        )?,
                    };
                    if s != b {
                        return Err(Error::InvalidConfig(format!(
                            "residual branch {b:?} does not match shortcut {s:?}"
                        )));
                    }
                    shape = b;
                }
            }
        }
        if shape != (self.classes, 1, 1) {
            return Err(Error::InvalidConfig(format!(
                "network ends in {shape:?}, expected ({}, 1, 1) logits",
                self.classes
            )));
        }
        Ok(acu_inputs)
    }
}

fn layer_out(
    l: &LayerSpec,
    (c, h, w): (usize, usize, usize),
    acu_inputs: &mut Vec<(usize, usize)>,
) -> Result<(usize, usize, usize)> {
    let mismatch = |expected: usize| {
        Err(Error::InvalidConfig(format!(
            "layer {l:?} expects {expected} channels, got {c}"
        )))
    };
    let spatial = |k: usize, stride: usize, pad: usize| -> Result<(usize, usize)> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InvalidConfig(format!("layer {l:?} does not fit {h}x{w}")));
        }
        Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
    };
    match l {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            if *in_ch != c {
                return mismatch(*in_ch);
            }
            let (oh, ow) = spatial(*kernel, *stride, *pad)?;
            Ok((*out_ch, oh, ow))
        }
        LayerSpec::Acu {
            in_ch,
            out_ch,
            stride,
            pad,
            ..
        } => {
            if *in_ch != c {
                return mismatch(*in_ch);
            }
            acu_inputs.push((h, w));
            let (oh, ow) = spatial(3, *stride, *pad)?;
            Ok((*out_ch, oh, ow))
        }
        LayerSpec::BatchNorm { channels } => {
            if *channels != c {
                return mismatch(*channels);
            }
            Ok((c, h, w))
        }
        LayerSpec::Relu => Ok((c, h, w)),
        LayerSpec::GlobalAvgPool => Ok((c, 1, 1)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Per-channel batch statistics from one training-mode pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Training-mode batch normalization.
pub fn batchnorm_forward_train(x: &Tensor, bn: &BatchNorm) -> Result<(Tensor, BnCache, BnStats)> {
    let [n, c, h, w] = x.shape();
    if c != bn.gamma.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch norm over {} channels got {c}",
            bn.gamma.len()
        )));
    }
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = (0..n).map(|i| x.plane(i, ch).iter().sum::<f64>()).sum();
        mean[ch] = s / m;
        let v: f64 = (0..n)
            .map(|i| x.plane(i, ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
            .sum();
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for p in 0..plane {
                let z = (x.data()[off + p] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[off + p] = z;
                y.data_mut()[off + p] = bn.gamma[ch] * z + bn.beta[ch];
            }
        }
    }
    let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let stats = BnStats {
        mean,
        var: var.iter().map(|v| v * unbiased).collect(),
    };
    Ok((y, BnCache { xhat, inv_std }, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    dy: &Tensor,
    cache: &BnCache,
    bn: &BatchNorm,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = dy.shape();
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::ShapeMismatch("batch norm upstream gradient".into()));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for p in 0..plane {
                let g = dy.data()[off + p];
                dgamma[ch] += g * cache.xhat.data()[off + p];
                dbeta[ch] += g;
            }
        }
    }
    let mut dx = dy.zeros_like();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let k = bn.gamma[ch] * cache.inv_std[ch] / m;
            for p in 0..plane {
                dx.data_mut()[off + p] = k
                    * (m * dy.data()[off + p] - dbeta[ch] - cache.xhat.data()[off + p] * dgamma[ch]);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn batchnorm_forward_eval(x: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if c != bn.gamma.len() {
        return Err(Error::ShapeMismatch("batch norm channels".into()));
    }
    let mut y = x.clone();
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let k = bn.gamma[ch] / (bn.running_var[ch] + BN_EPS).sqrt();
            let off = (i * c + ch) * plane;
            for v in &mut y.data_mut()[off..off + plane] {
                *v = k * (*v - bn.running_mean[ch]) + bn.beta[ch];
            }
        }
    }
    Ok(y)
}

/// Mean softmax cross-entropy over a batch of `N × classes × 1 × 1` logits.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, classes, h, w] = logits.shape();
    if h != 1 || w != 1 || n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let mut grad = logits.zeros_like();
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidConfig(format!("label {label} >= {classes} classes")));
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = ((row[j] - log_z).exp() - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(dy: &Tensor, x: &Tensor) -> Result<Tensor> {
    dy.zip_with(x, |g, v| if v > 0.0 { g } else { 0.0 })
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let plane = (h * w) as f64;
    let data = (0..n)
        .flat_map(|i| (0..c).map(move |ch| (i, ch)))
        .map(|(i, ch)| x.plane(i, ch).iter().sum::<f64>() / plane)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(dy: &Tensor, input_shape: [usize; 4]) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    if dy.shape() != [n, c, 1, 1] {
        return Err(Error::ShapeMismatch("pool upstream gradient".into()));
    }
    let plane = h * w;
    let mut dx = Tensor::zeros(input_shape)?;
    for i in 0..n {
        for ch in 0..c {
            let g = dy.data()[i * c + ch] / plane as f64;
            let off = (i * c + ch) * plane;
            dx.data_mut()[off..off + plane].fill(g);
        }
    }
    Ok(dx)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    Acu(AcuLayer),
    BatchNorm(BatchNorm),
    Relu,
    GlobalAvgPool,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Layer(Layer),
    Residual {
        preact: Vec<Layer>,
        branch: Vec<Layer>,
        projection: Option<ConvParams>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub values: &'a mut [f64],
}

pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub values: &'a [f64],
}

/// Gradients of every learnable tensor, in parameter order, the raw
/// position gradients of every ACU layer (per group) and the input gradient.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub params: Vec<Vec<f64>>,
    pub positions: Vec<Vec<Vec<Synapse>>>,
    pub input: Tensor,
}

/// Batch statistics of every batch norm layer, in network order.
#[derive(Debug, Clone)]
pub struct BnUpdates(pub Vec<BnStats>);

enum Cache {
    Conv(Tensor),
    Acu(AcuCache),
    BatchNorm(BnCache),
    Relu(Tensor),
    Pool([usize; 4]),
    None,
}

enum NodeCache {
    Layer(Cache),
    Residual {
        preact: Vec<Cache>,
        branch: Vec<Cache>,
        projection: Option<Tensor>,
        input_shape: [usize; 4],
    },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
}

#[derive(Default)]
struct Collect {
    params: Vec<Vec<f64>>,
    positions: Vec<Vec<Vec<Synapse>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    nodes: Vec<Node>,
}

fn he_conv<R: Rng + ?Sized>(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    rng: &mut R,
) -> Result<ConvParams> {
    let fan_in = in_ch * kernel * kernel;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n = out_ch * fan_in;
    let w = Tensor::from_vec(
        [out_ch, in_ch, kernel, kernel],
        (0..n).map(|_| normal.sample(rng)).collect(),
    )?;
    ConvParams::new(w, vec![0.0; out_ch], stride, pad, 1)
}

fn build_layer<R: Rng + ?Sized>(
    spec: &LayerSpec,
    acu_inputs: &mut std::slice::Iter<'_, (usize, usize)>,
    rng: &mut R,
) -> Result<Layer> {
    Ok(match spec {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => Layer::Conv(he_conv(*in_ch, *out_ch, *kernel, *stride, *pad, rng)?),
        LayerSpec::Acu {
            in_ch,
            out_ch,
            stride,
            pad,
            groups,
            init,
        } => {
            let hw = *acu_inputs
                .next()
                .ok_or_else(|| Error::InvalidConfig("ACU layer without input size".into()))?;
            let cfg = AcuConfig::new(*in_ch, *out_ch, hw)
                .with_stride(*stride)
                .with_pad(*pad)
                .with_groups(*groups);
            Layer::Acu(AcuLayer::new(cfg, init, rng)?)
        }
        LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(*channels)),
        LayerSpec::Relu => Layer::Relu,
        LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
    })
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let acu_inputs = spec.validate()?;
        let mut acu_iter = acu_inputs.iter();
        let mut nodes = Vec::with_capacity(spec.blocks.len());
        for block in &spec.blocks {
            nodes.push(match block {
                BlockSpec::Layer(l) => Node::Layer(build_layer(l, &mut acu_iter, rng)?),
                BlockSpec::Residual {
                    preact,
                    branch,
                    shortcut,
                } => {
                    let preact = preact
                        .iter()
                        .map(|l| build_layer(l, &mut acu_iter, rng))
                        .collect::<Result<Vec<_>>>()?;
                    let branch = branch
                        .iter()
                        .map(|l| build_layer(l, &mut acu_iter, rng))
                        .collect::<Result<Vec<_>>>()?;
                    let projection = match shortcut {
                        Shortcut::Identity => None,
                        Shortcut::Projection {
                            in_ch,
                            out_ch,
                            stride,
                        } => Some(he_conv(*in_ch, *out_ch, 1, *stride, 0, rng)?),
                    };
                    Node::Residual {
                        preact,
                        branch,
                        projection,
                    }
                }
            });
        }
        Ok(Self { spec, nodes })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn layers(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node {
                Node::Layer(l) => out.push(l),
                Node::Residual { preact, branch, .. } => out.extend(preact.iter().chain(branch)),
            }
        }
        out
    }

    pub fn acu_layers(&self) -> Vec<&AcuLayer> {
        self.layers()
            .into_iter()
            .filter_map(|l| match l {
                Layer::Acu(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    pub fn acu_layers_mut(&mut self) -> Vec<&mut AcuLayer> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            let layers: Box<dyn Iterator<Item = &mut Layer>> = match node {
                Node::Layer(l) => Box::new(std::iter::once(l)),
                Node::Residual { preact, branch, .. } => {
                    Box::new(preact.iter_mut().chain(branch.iter_mut()))
                }
            };
            for l in layers {
                if let Layer::Acu(a) = l {
                    out.push(a);
                }
            }
        }
        out
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            let layers: Box<dyn Iterator<Item = &mut Layer>> = match node {
                Node::Layer(l) => Box::new(std::iter::once(l)),
                Node::Residual { preact, branch, .. } => {
                    Box::new(preact.iter_mut().chain(branch.iter_mut()))
                }
            };
            for l in layers {
                if let Layer::BatchNorm(b) = l {
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn set_position_lr_scale(&mut self, scale: f64) -> Result<()> {
        for a in self.acu_layers_mut() {
            a.set_position_lr_scale(scale)?;
        }
        Ok(())
    }

    /// Every learnable tensor except synapse positions, in a fixed order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Layer(l) => layer_params(l, format!("b{i}"), &mut out),
                Node::Residual {
                    preact,
                    branch,
                    projection,
                } => {
                    for (j, l) in preact.iter().enumerate() {
                        layer_params(l, format!("b{i}.pre{j}"), &mut out);
                    }
                    for (j, l) in branch.iter().enumerate() {
                        layer_params(l, format!("b{i}.br{j}"), &mut out);
                    }
                    if let Some(p) = projection {
                        conv_params(p, format!("b{i}.proj"), &mut out);
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            match node {
                Node::Layer(l) => layer_params_mut(l, format!("b{i}"), &mut out),
                Node::Residual {
                    preact,
                    branch,
                    projection,
                } => {
                    for (j, l) in preact.iter_mut().enumerate() {
                        layer_params_mut(l, format!("b{i}.pre{j}"), &mut out);
                    }
                    for (j, l) in branch.iter_mut().enumerate() {
                        layer_params_mut(l, format!("b{i}.br{j}"), &mut out);
                    }
                    if let Some(p) = projection {
                        conv_params_mut(p, format!("b{i}.proj"), &mut out);
                    }
                }
            }
        }
        out
    }

    /// Learnable scalars: weights, biases, batch-norm scale/shift and movable
    /// synapse coordinates.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum::<usize>() + self.position_param_count()
    }

    pub fn position_param_count(&self) -> usize {
        self.acu_layers().iter().map(|a| a.position_param_count()).sum()
    }

    fn run(
        &self,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Vec<NodeCache>, Vec<BnStats>)> {
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut stats = Vec::new();
        let mut h = x.clone();
        for node in &self.nodes {
            match node {
                Node::Layer(l) => {
                    let (y, c) = layer_forward(l, h, mode, &mut stats)?;
                    caches.push(NodeCache::Layer(c));
                    h = y;
                }
                Node::Residual {
                    preact,
                    branch,
                    projection,
                } => {
                    let input_shape = h.shape();
                    let identity = projection.is_none().then(|| h.clone());
                    let mut a = h;
                    let mut pre_c = Vec::new();
                    for l in preact {
                        let (y, c) = layer_forward(l, a, mode, &mut stats)?;
                        pre_c.push(c);
                        a = y;
                    }
                    let shortcut = match (projection, identity) {
                        (Some(p), _) => conv2d_gemm(&a, p)?,
                        (None, Some(x)) => x,
                        (None, None) => unreachable!(),
                    };
                    let proj_input = projection.as_ref().map(|_| a.clone());
                    let mut b = a;
                    let mut br_c = Vec::new();
                    for l in branch {
                        let (y, c) = layer_forward(l, b, mode, &mut stats)?;
                        br_c.push(c);
                        b = y;
                    }
                    b.add_assign(&shortcut)?;
                    caches.push(NodeCache::Residual {
                        preact: pre_c,
                        branch: br_c,
                        projection: proj_input,
                        input_shape,
                    });
                    h = b;
                }
            }
        }
        Ok((h, caches, stats))
    }

    /// Inference-mode logits (batch norm uses running statistics).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.run(x, Mode::Eval)?.0)
    }

    /// Training-mode loss only.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        self.check_input(x)?;
        let (logits, _, _) = self.run(x, Mode::Train)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape()[1] != self.spec.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.spec.input_channels,
                x.shape()[1]
            )));
        }
        Ok(())
    }

    /// Training-mode loss, gradients for every learnable tensor (including
    /// positions), and the batch statistics to fold into the running averages.
    pub fn forward_backward(
        &self,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, NetGradients, BnUpdates)> {
        self.check_input(x)?;
        let (logits, caches, stats) = self.run(x, Mode::Train)?;
        let (loss, mut g) = softmax_cross_entropy(&logits, labels)?;

        // Backward in reverse, collecting gradients in reverse parameter order.
        let mut rev = Collect::default();
        for (node, cache) in self.nodes.iter().zip(caches).rev() {
            match (node, cache) {
                (Node::Layer(l), NodeCache::Layer(c)) => {
                    g = layer_backward(l, g, c, &mut rev)?;
                }
                (
                    Node::Residual {
                        preact,
                        branch,
                        projection,
                    },
                    NodeCache::Residual {
                        preact: pre_c,
                        branch: br_c,
                        projection: proj_in,
                        input_shape,
                    },
                ) => {
                    let d_out = g;
                    if let (Some(p), Some(a)) = (projection, proj_in.as_ref()) {
                        let pg = conv2d_gemm_backward(a, p, &d_out)?;
                        rev.params.push(pg.d_bias);
                        rev.params.push(pg.d_weights.into_data());
                        let mut da = d_out.clone();
                        for (l, c) in branch.iter().zip(br_c).rev() {
                            da = layer_backward(l, da, c, &mut rev)?;
                        }
                        da.add_assign(&pg.d_input)?;
                        for (l, c) in preact.iter().zip(pre_c).rev() {
                            da = layer_backward(l, da, c, &mut rev)?;
                        }
                        g = da;
                    } else {
                        let mut da = d_out.clone();
                        for (l, c) in branch.iter().zip(br_c).rev() {
                            da = layer_backward(l, da, c, &mut rev)?;
                        }
                        for (l, c) in preact.iter().zip(pre_c).rev() {
                            da = layer_backward(l, da, c, &mut rev)?;
                        }
                        da.add_assign(&d_out)?;
                        g = da;
                    }
                    debug_assert_eq!(g.shape(), input_shape);
                }
                _ => unreachable!("cache out of step with network"),
            }
        }
        rev.params.reverse();
        rev.positions.reverse();
        Ok((
            loss,
            NetGradients {
                params: rev.params,
                positions: rev.positions,
                input: g,
            },
            BnUpdates(stats),
        ))
    }

    /// Folds one step's batch statistics into the running averages.
    pub fn commit_bn(&mut self, updates: &BnUpdates) -> Result<()> {
        let mut bns = self.batchnorms_mut();
        if bns.len() != updates.0.len() {
            return Err(Error::ShapeMismatch("batch statistics do not match network".into()));
        }
        for (bn, s) in bns.iter_mut().zip(&updates.0) {
            for c in 0..bn.running_mean.len() {
                bn.running_mean[c] = BN_MOMENTUM * bn.running_mean[c] + (1.0 - BN_MOMENTUM) * s.mean[c];
                bn.running_var[c] = BN_MOMENTUM * bn.running_var[c] + (1.0 - BN_MOMENTUM) * s.var[c];
            }
        }
        Ok(())
    }

    /// Top-1 error in percent, evaluated in inference mode in chunks.
    pub fn error_rate(&self, images: &Tensor, labels: &[usize], chunk: usize) -> Result<f64> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::ShapeMismatch("images and labels differ in length".into()));
        }
        if n == 0 {
            return Ok(0.0);
        }
        let mut wrong = 0usize;
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk.max(1)) {
            let logits = self.predict(&images.select(part)?)?;
            let classes = logits.shape()[1];
            for (row, &i) in part.iter().enumerate() {
                let r = &logits.data()[row * classes..(row + 1) * classes];
                let best = r
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0;
                if best != labels[i] {
                    wrong += 1;
                }
            }
        }
        Ok(100.0 * wrong as f64 / n as f64)
    }

    /// All state as named tensors: parameters, batch-norm running averages and
    /// synapse positions (`groups × K × 2 × 1`).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|p| {
                let t = Tensor::from_vec([1, 1, 1, p.values.len()], p.values.to_vec())
                    .expect("flat tensor");
                (p.name, t)
            })
            .collect();
        let mut bn_index = 0;
        let mut acu_index = 0;
        for l in self.layers() {
            match l {
                Layer::BatchNorm(b) => {
                    let c = b.running_mean.len();
                    out.push((
                        format!("bn{bn_index}.running_mean"),
                        Tensor::from_vec([1, 1, 1, c], b.running_mean.clone()).expect("flat"),
                    ));
                    out.push((
                        format!("bn{bn_index}.running_var"),
                        Tensor::from_vec([1, 1, 1, c], b.running_var.clone()).expect("flat"),
                    ));
                    bn_index += 1;
                }
                Layer::Acu(a) => {
                    let k = a.synapse_count();
                    let data = a
                        .positions()
                        .iter()
                        .flat_map(|s| s.points().iter().flat_map(|p| [p.alpha, p.beta]))
                        .collect();
                    out.push((
                        format!("acu{acu_index}.positions"),
                        Tensor::from_vec([a.positions().len(), k, 2, 1], data).expect("positions"),
                    ));
                    acu_index += 1;
                }
                _ => {}
            }
        }
        out
    }

    /// Inverse of [`Network::state_tensors`]; every tensor must be present.
    pub fn load_state_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks tensor {name}")))
        };
        let names: Vec<String> = self.params().into_iter().map(|p| p.name).collect();
        for (p, name) in self.params_mut().into_iter().zip(&names) {
            let t = find(name)?;
            if t.len() != p.values.len() {
                return Err(Error::ShapeMismatch(format!("tensor {name} has wrong length")));
            }
            p.values.copy_from_slice(t.data());
        }
        for (i, bn) in self.batchnorms_mut().into_iter().enumerate() {
            let m = find(&format!("bn{i}.running_mean"))?;
            let v = find(&format!("bn{i}.running_var"))?;
            if m.len() != bn.running_mean.len() || v.len() != bn.running_var.len() {
                return Err(Error::ShapeMismatch(format!("bn{i} running statistics")));
            }
            bn.running_mean.copy_from_slice(m.data());
            bn.running_var.copy_from_slice(v.data());
        }
        for (i, a) in self.acu_layers_mut().into_iter().enumerate() {
            let t = find(&format!("acu{i}.positions"))?;
            let k = a.synapse_count();
            if t.shape() != [a.positions().len(), k, 2, 1] {
                return Err(Error::ShapeMismatch(format!("acu{i} positions")));
            }
            for g in 0..a.positions().len() {
                for s in 0..k {
                    let off = (g * k + s) * 2;
                    a.set_synapse(g, s, Synapse::new(t.data()[off], t.data()[off + 1]))?;
                }
            }
        }
        Ok(())
    }

    /// Current offsets of every ACU position set, flattened over groups.
    pub fn position_sets(&self) -> Vec<SynapsePositions> {
        self.acu_layers()
            .iter()
            .flat_map(|a| a.positions().iter().cloned())
            .collect()
    }
}

fn conv_params<'a>(p: &'a ConvParams, path: String, out: &mut Vec<ParamRef<'a>>) {
    out.push(ParamRef {
        name: format!("{path}.weight"),
        kind: ParamKind::Weight,
        values: p.weights.data(),
    });
    out.push(ParamRef {
        name: format!("{path}.bias"),
        kind: ParamKind::Bias,
        values: &p.bias,
    });
}

fn layer_params<'a>(l: &'a Layer, path: String, out: &mut Vec<ParamRef<'a>>) {
    match l {
        Layer::Conv(p) => conv_params(p, path, out),
        Layer::Acu(a) => {
            out.push(ParamRef {
                name: format!("{path}.weight"),
                kind: ParamKind::Weight,
                values: a.weights.data(),
            });
            out.push(ParamRef {
                name: format!("{path}.bias"),
                kind: ParamKind::Bias,
                values: &a.bias,
            });
        }
        Layer::BatchNorm(b) => {
            out.push(ParamRef {
                name: format!("{path}.gamma"),
                kind: ParamKind::BnScale,
                values: &b.gamma,
            });
            out.push(ParamRef {
                name: format!("{path}.beta"),
                kind: ParamKind::BnShift,
                values: &b.beta,
            });
        }
        Layer::Relu | Layer::GlobalAvgPool => {}
    }
}

fn conv_params_mut<'a>(p: &'a mut ConvParams, path: String, out: &mut Vec<ParamMut<'a>>) {
    out.push(ParamMut {
        name: format!("{path}.weight"),
        kind: ParamKind::Weight,
        values: p.weights.data_mut(),
    });
    out.push(ParamMut {
        name: format!("{path}.bias"),
        kind: ParamKind::Bias,
        values: &mut p.bias,
    });
}

fn layer_params_mut<'a>(l: &'a mut Layer, path: String, out: &mut Vec<ParamMut<'a>>) {
    match l {
        Layer::Conv(p) => conv_params_mut(p, path, out),
        Layer::Acu(a) => {
            out.push(ParamMut {
                name: format!("{path}.weight"),
                kind: ParamKind::Weight,
                values: a.weights.data_mut(),
            });
            out.push(ParamMut {
                name: format!("{path}.bias"),
                kind: ParamKind::Bias,
                values: &mut a.bias,
            });
        }
        Layer::BatchNorm(b) => {
            out.push(ParamMut {
                name: format!("{path}.gamma"),
                kind: ParamKind::BnScale,
                values: &mut b.gamma,
            });
            out.push(ParamMut {
                name: format!("{path}.beta"),
                kind: ParamKind::BnShift,
                values: &mut b.beta,
            });
        }
        Layer::Relu | Layer::GlobalAvgPool => {}
    }
}

fn layer_forward(
    l: &Layer,
    x: Tensor,
    mode: Mode,
    stats: &mut Vec<BnStats>,
) -> Result<(Tensor, Cache)> {
    Ok(match l {
        Layer::Conv(p) => {
            let y = conv2d_gemm(&x, p)?;
            (y, Cache::Conv(x))
        }
        Layer::Acu(a) => match mode {
            Mode::Train => {
                let (y, c) = a.forward_owned(x)?;
                (y, Cache::Acu(c))
            }
            Mode::Eval => (a.infer(&x)?, Cache::None),
        },
        Layer::BatchNorm(b) => match mode {
            Mode::Train => {
                let (y, c, s) = batchnorm_forward_train(&x, b)?;
                stats.push(s);
                (y, Cache::BatchNorm(c))
            }
            Mode::Eval => (batchnorm_forward_eval(&x, b)?, Cache::None),
        },
        Layer::Relu => {
            let y = relu_forward(&x);
            (y, Cache::Relu(x))
        }
        Layer::GlobalAvgPool => (global_avg_pool(&x)?, Cache::Pool(x.shape())),
    })
}

/// Backward through one layer. Parameter gradients are pushed in reverse
/// order (bias before weight) so the final list can simply be reversed.
fn layer_backward(l: &Layer, dy: Tensor, cache: Cache, rev: &mut Collect) -> Result<Tensor> {
    Ok(match (l, cache) {
        (Layer::Conv(p), Cache::Conv(x)) => {
            let g = conv2d_gemm_backward(&x, p, &dy)?;
            rev.params.push(g.d_bias);
            rev.params.push(g.d_weights.into_data());
            g.d_input
        }
        (Layer::Acu(a), Cache::Acu(c)) => {
            let g = a.backward(&dy, &c)?;
            rev.params.push(g.d_bias);
            rev.params.push(g.d_weights.into_data());
            rev.positions.push(g.d_positions);
            g.d_input
        }
        (Layer::BatchNorm(b), Cache::BatchNorm(c)) => {
            let (dx, dgamma, dbeta) = batchnorm_backward(&dy, &c, b)?;
            rev.params.push(dbeta);
            rev.params.push(dgamma);
            dx
        }
        (Layer::Relu, Cache::Relu(x)) => relu_backward(&dy, &x)?,
        (Layer::GlobalAvgPool, Cache::Pool(shape)) => global_avg_pool_backward(&dy, shape)?,
        _ => {
            return Err(Error::ShapeMismatch(
                "backward requires a training-mode forward pass".into(),
            ))
        }
    })
}
