//! The active convolution unit.
//!
//! An ACU layer is a convolution whose `K` taps ("synapses") sit at
//! continuous offsets `(alpha_k, beta_k)` relative to each output's base
//! position. One set of offsets is shared by every output unit and channel of
//! a group. Inputs at fractional offsets are read by bilinear interpolation,
//! so the output is differentiable in the offsets as well as in the weights,
//! bias and input.
//!
//! Output geometry is fixed when the layer is built: the bounding box of the
//! initial offsets (rounded out to the lattice) gives a nominal kernel extent
//! and anchor, and the usual `(H + 2·pad − extent) / stride + 1` rule applies.
//! Offsets that later drift outside that box simply sample zero-extended
//! input.
//!
//! Position learning uses the normalized gradient: every synapse's
//! `(∂L/∂alpha, ∂L/∂beta)` is rescaled to unit length, so each synapse moves
//! by exactly `lr · position_lr_scale` per step regardless of how large its
//! raw gradient was.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{corner_weights, fractional_parts, Fraction};
use crate::linalg;
use crate::refconv::lattice_positions;
use crate::tensor::Tensor;

/// Gradient norms below this are treated as zero by the normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Default ratio of the position learning rate to the weight learning rate.
pub const DEFAULT_POSITION_LR_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Synapse {
    /// Offset along the height axis, in pixels.
    pub alpha: f64,
    /// Offset along the width axis, in pixels.
    pub beta: f64,
}

impl Synapse {
    pub const ORIGIN: Synapse = Synapse {
        alpha: 0.0,
        beta: 0.0,
    };

    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    pub fn norm(&self) -> f64 {
        self.alpha.hypot(self.beta)
    }
}

/// An ordered set of synapse offsets. When `origin_fixed`, index 0 is pinned
/// at `(0, 0)` and carries no learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynapsePositions {
    points: Vec<Synapse>,
    origin_fixed: bool,
}

impl SynapsePositions {
    pub fn new(points: Vec<Synapse>, origin_fixed: bool) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidPositions("at least one synapse is required".into()));
        }
        if let Some(p) = points.iter().find(|p| !p.alpha.is_finite() || !p.beta.is_finite()) {
            return Err(Error::InvalidPositions(format!("non-finite synapse {p:?}")));
        }
        if origin_fixed && points[0] != Synapse::ORIGIN {
            return Err(Error::InvalidPositions(format!(
                "first synapse must be the origin when it is fixed, got {:?}",
                points[0]
            )));
        }
        Ok(Self {
            points,
            origin_fixed,
        })
    }

    pub fn points(&self) -> &[Synapse] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn origin_fixed(&self) -> bool {
        self.origin_fixed
    }

    /// Number of learnable scalars: two per movable synapse.
    pub fn learnable_count(&self) -> usize {
        2 * (self.points.len() - usize::from(self.origin_fixed))
    }

    pub fn max_abs_coordinate(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.alpha.abs().max(p.beta.abs()))
            .fold(0.0, f64::max)
    }

    fn is_movable(&self, k: usize) -> bool {
        !(self.origin_fixed && k == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PositionInit {
    Grid3x3,
    Dilated(usize),
    Custom(Vec<Synapse>),
}

/// Initial offsets. Generated sets keep the origin first and fixed.
pub fn init_positions(kind: &PositionInit) -> Result<SynapsePositions> {
    match kind {
        PositionInit::Grid3x3 => lattice_positions(3, 3, 1),
        PositionInit::Dilated(d) => lattice_positions(3, 3, *d),
        PositionInit::Custom(points) => SynapsePositions::new(points.clone(), true),
    }
}

/// Rescales each synapse's gradient pair to unit length.
///
/// Pairs with norm below [`NORM_EPS`] map to zero, as does index 0 when the
/// origin is fixed.
pub fn normalize_position_gradient(grad: &[Synapse], origin_fixed: bool) -> Vec<Synapse> {
    grad.iter()
        .enumerate()
        .map(|(k, g)| {
            let z = g.norm();
            if (origin_fixed && k == 0) || !(z >= NORM_EPS) {
                Synapse::ORIGIN
            } else {
                Synapse::new(g.alpha / z, g.beta / z)
            }
        })
        .collect()
}

/// Largest allowed |offset| for a layer reading an `h × w` input.
pub fn default_clamp_radius(h: usize, w: usize) -> f64 {
    (h.min(w) as f64 - 1.0).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcuConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub position_lr_scale: f64,
    pub clamp_radius: f64,
}

impl AcuConfig {
    /// Stride-1, padding-1 layer over an `h × w` input.
    pub fn new(in_channels: usize, out_channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            stride: 1,
            pad: 1,
            groups: 1,
            position_lr_scale: DEFAULT_POSITION_LR_SCALE,
            clamp_radius: default_clamp_radius(input_hw.0, input_hw.1),
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_clamp_radius(mut self, r: f64) -> Self {
        self.clamp_radius = r;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidConfig("stride and groups must be positive".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} -> {} channels do not split into {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if !(self.position_lr_scale >= 0.0) {
            return Err(Error::InvalidConfig("position_lr_scale must be >= 0".into()));
        }
        if !(self.clamp_radius > 0.0) {
            return Err(Error::InvalidConfig("clamp_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel bounding box frozen at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NominalExtent {
    pub height: usize,
    pub width: usize,
    /// Offset of the origin tap from the top-left of the box.
    pub anchor_h: usize,
    pub anchor_w: usize,
}

impl NominalExtent {
    fn of(sets: &[SynapsePositions]) -> Self {
        let (mut lo_a, mut hi_a, mut lo_b, mut hi_b) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for p in sets.iter().flat_map(|s| s.points()) {
            lo_a = lo_a.min(p.alpha.floor());
            hi_a = hi_a.max(p.alpha.ceil());
            lo_b = lo_b.min(p.beta.floor());
            hi_b = hi_b.max(p.beta.ceil());
        }
        Self {
            height: (hi_a - lo_a) as usize + 1,
            width: (hi_b - lo_b) as usize + 1,
            anchor_h: (-lo_a) as usize,
            anchor_w: (-lo_b) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcuLayer {
    /// `out_ch × (in_ch / groups) × K × 1`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    positions: Vec<SynapsePositions>,
    config: AcuConfig,
    extent: NominalExtent,
}

#[derive(Debug, Clone)]
pub struct AcuGradients {
    pub d_weights: Tensor,
    pub d_bias: Vec<f64>,
    /// Raw per-group position gradients; index 0 is zero when the origin is fixed.
    pub d_positions: Vec<Vec<Synapse>>,
    pub d_input: Tensor,
}

/// State kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct AcuCache {
    input: Tensor,
    fractions: Vec<Vec<Fraction>>,
    out_hw: (usize, usize),
}

impl AcuCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

impl AcuLayer {
    /// Builds a layer with He-initialized weights and zero bias. Every group
    /// starts from the same offsets.
    pub fn new<R: Rng + ?Sized>(config: AcuConfig, init: &PositionInit, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let positions = init_positions(init)?;
        let k = positions.len();
        let cg = config.in_channels / config.groups;
        let std = (2.0 / (cg * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let n = config.out_channels * cg * k;
        let weights = Tensor::from_vec(
            [config.out_channels, cg, k, 1],
            (0..n).map(|_| normal.sample(rng)).collect(),
        )?;
        let bias = vec![0.0; config.out_channels];
        let sets = vec![positions; config.groups];
        Self::from_parts(config, weights, bias, sets)
    }

    pub fn from_parts(
        config: AcuConfig,
        weights: Tensor,
        bias: Vec<f64>,
        positions: Vec<SynapsePositions>,
    ) -> Result<Self> {
        config.validate()?;
        if positions.len() != config.groups {
            return Err(Error::InvalidPositions(format!(
                "{} position sets for {} groups",
                positions.len(),
                config.groups
            )));
        }
        let k = positions[0].len();
        if positions.iter().any(|p| p.len() != k) {
            return Err(Error::InvalidPositions("groups disagree on synapse count".into()));
        }
        for set in &positions {
            if set.max_abs_coordinate() > config.clamp_radius {
                return Err(Error::InvalidPositions(format!(
                    "synapse beyond clamp radius {}",
                    config.clamp_radius
                )));
            }
        }
        let cg = config.in_channels / config.groups;
        if weights.shape() != [config.out_channels, cg, k, 1] {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?}, expected {:?}",
                weights.shape(),
                [config.out_channels, cg, k, 1]
            )));
        }
        if bias.len() != config.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                config.out_channels
            )));
        }
        let extent = NominalExtent::of(&positions);
        Ok(Self {
            weights,
            bias,
            positions,
            config,
            extent,
        })
    }

    pub fn config(&self) -> &AcuConfig {
        &self.config
    }

    pub fn extent(&self) -> NominalExtent {
        self.extent
    }

    pub fn synapse_count(&self) -> usize {
        self.positions[0].len()
    }

    pub fn positions(&self) -> &[SynapsePositions] {
        &self.positions
    }

    pub fn position_lr_scale(&self) -> f64 {
        self.config.position_lr_scale
    }

    pub fn set_position_lr_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidConfig("position_lr_scale must be >= 0".into()));
        }
        self.config.position_lr_scale = scale;
        Ok(())
    }

    /// Moves one synapse. The fixed origin cannot be moved and offsets must
    /// stay within the clamp radius.
    pub fn set_synapse(&mut self, group: usize, k: usize, s: Synapse) -> Result<()> {
        let r = self.config.clamp_radius;
        let set = self
            .positions
            .get_mut(group)
            .ok_or_else(|| Error::InvalidPositions(format!("no group {group}")))?;
        if k >= set.points.len() {
            return Err(Error::InvalidPositions(format!("no synapse {k}")));
        }
        if !set.is_movable(k) && s != Synapse::ORIGIN {
            return Err(Error::InvalidPositions("the origin synapse is fixed".into()));
        }
        if !s.alpha.is_finite() || !s.beta.is_finite() || s.alpha.abs() > r || s.beta.abs() > r {
            return Err(Error::InvalidPositions(format!("{s:?} outside radius {r}")));
        }
        set.points[k] = s;
        Ok(())
    }

    /// Learnable position scalars across all groups.
    pub fn position_param_count(&self) -> usize {
        self.positions.iter().map(|p| p.learnable_count()).sum()
    }

    pub fn weight_param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, layer expects {}",
                self.config.in_channels
            )));
        }
        let (p, s) = (self.config.pad, self.config.stride);
        if h + 2 * p < self.extent.height || w + 2 * p < self.extent.width {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} with pad {p} is smaller than nominal extent {}x{}",
                self.extent.height, self.extent.width
            )));
        }
        Ok([
            n,
            self.config.out_channels,
            (h + 2 * p - self.extent.height) / s + 1,
            (w + 2 * p - self.extent.width) / s + 1,
        ])
    }

    fn fractions(&self) -> Result<Vec<Vec<Fraction>>> {
        self.positions
            .iter()
            .map(|set| {
                set.points()
                    .iter()
                    .map(|p| fractional_parts(p.alpha, p.beta))
                    .collect()
            })
            .collect()
    }

    fn geometry(&self, in_hw: (usize, usize), out_hw: (usize, usize)) -> Geometry {
        Geometry {
            h: in_hw.0,
            w: in_hw.1,
            oh: out_hw.0,
            ow: out_hw.1,
            stride: self.config.stride,
            shift_h: self.extent.anchor_h as i64 - self.config.pad as i64,
            shift_w: self.extent.anchor_w as i64 - self.config.pad as i64,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AcuCache)> {
        self.forward_owned(x.clone())
    }

    /// Like [`forward`](Self::forward), keeping `x` in the cache without a copy.
    pub fn forward_owned(&self, x: Tensor) -> Result<(Tensor, AcuCache)> {
        let fractions = self.fractions()?;
        let y = self.output(&x, &fractions)?;
        let out_hw = (y.shape()[2], y.shape()[3]);
        Ok((
            y,
            AcuCache {
                input: x,
                fractions,
                out_hw,
            },
        ))
    }

    /// Forward pass without the state needed for backward.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.output(x, &self.fractions()?)
    }

    fn output(&self, x: &Tensor, fractions: &[Vec<Fraction>]) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let [_, c_in, h, w] = x.shape();
        let [_, d_out, oh, ow] = out_shape;
        let geo = self.geometry((h, w), (oh, ow));
        let k_count = self.synapse_count();
        let groups = self.config.groups;
        let (cg, dg) = (c_in / groups, d_out / groups);
        let plane = oh * ow;
        let wdata = self.weights.data();

        let ck = cg * k_count;

        let mut y = Tensor::zeros(out_shape)?;
        if plane > 0 {
            y.data_mut()
                .par_chunks_mut(d_out * plane)
                .enumerate()
                .for_each(|(n, ys)| {
                    for d in 0..d_out {
                        ys[d * plane..(d + 1) * plane].fill(self.bias[d]);
                    }
                    let mut cols = vec![0.0; ck * plane];
                    for g in 0..groups {
                        geo.gather(x, n, g * cg, cg, &fractions[g], &mut cols);
                        linalg::gemm_nn_acc(
                            &mut ys[g * dg * plane..(g + 1) * dg * plane],
                            &wdata[g * dg * ck..(g + 1) * dg * ck],
                            &cols,
                            dg,
                            ck,
                            plane,
                        );
                    }
                });
        }
        y.ensure_finite("acu output")?;
        Ok(y)
    }

    pub fn backward(&self, dy: &Tensor, cache: &AcuCache) -> Result<AcuGradients> {
        let x = &cache.input;
        let out_shape = self.output_shape(x.shape())?;
        if dy.shape() != out_shape || (out_shape[2], out_shape[3]) != cache.out_hw {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?}, expected {out_shape:?}",
                dy.shape()
            )));
        }
        let fractions = &cache.fractions;
        if fractions.len() != self.config.groups
            || fractions.iter().any(|f| f.len() != self.synapse_count())
        {
            return Err(Error::ShapeMismatch("cache does not match layer".into()));
        }
        let [n_batch, c_in, h, w] = x.shape();
        let [_, d_out, oh, ow] = out_shape;
        let geo = self.geometry((h, w), (oh, ow));
        let k_count = self.synapse_count();
        let groups = self.config.groups;
        let (cg, dg) = (c_in / groups, d_out / groups);
        let plane = oh * ow;
        let ck = cg * k_count;
        let wdata = self.weights.data();
        let wlen = wdata.len();

        struct Partial {
            dx: Vec<f64>,
            dw: Vec<f64>,
            dpos: Vec<Vec<Synapse>>,
        }

        let partials: Vec<Partial> = (0..n_batch)
            .into_par_iter()
            .map(|n| {
                let mut dx = vec![0.0; c_in * h * w];
                let mut dw = vec![0.0; wlen];
                let mut dpos = vec![vec![Synapse::ORIGIN; k_count]; groups];
                let mut cols = vec![0.0; ck * plane];
                let mut dcols = vec![0.0; ck * plane];
                let dys = &dy.data()[n * d_out * plane..(n + 1) * d_out * plane];
                for g in 0..groups {
                    let set = &self.positions[g];
                    let dyg = &dys[g * dg * plane..(g + 1) * dg * plane];
                    let wg = &wdata[g * dg * ck..(g + 1) * dg * ck];
                    geo.gather(x, n, g * cg, cg, &fractions[g], &mut cols);
                    linalg::gemm_nt_acc(&mut dw[g * dg * ck..(g + 1) * dg * ck], dyg, &cols, dg, plane, ck);
                    // gradient w.r.t. each sampled plane: Σ_d w[d,c,k]·dy[d]
                    linalg::gemm_tn(&mut dcols, wg, dyg, dg, ck, plane);
                    for ci in 0..cg {
                        let c = g * cg + ci;
                        let xp = x.plane(n, c);
                        let dxp = &mut dx[c * h * w..(c + 1) * h * w];
                        for (k, frac) in fractions[g].iter().enumerate() {
                            let row = (ci * k_count + k) * plane;
                            let (pa, pb) =
                                geo.backprop(xp, frac, &dcols[row..row + plane], dxp);
                            if set.is_movable(k) {
                                dpos[g][k].alpha += pa;
                                dpos[g][k].beta += pb;
                            }
                        }
                    }
                }
                Partial { dx, dw, dpos }
            })
            .collect();

        let mut d_input = x.zeros_like();
        let mut d_weights = self.weights.zeros_like();
        let mut d_positions = vec![vec![Synapse::ORIGIN; k_count]; groups];
        let sample = c_in * h * w;
        for (n, p) in partials.into_iter().enumerate() {
            d_input.data_mut()[n * sample..(n + 1) * sample].copy_from_slice(&p.dx);
            for (a, b) in d_weights.data_mut().iter_mut().zip(&p.dw) {
                *a += b;
            }
            for (acc, part) in d_positions.iter_mut().zip(&p.dpos) {
                for (a, b) in acc.iter_mut().zip(part) {
                    a.alpha += b.alpha;
                    a.beta += b.beta;
                }
            }
        }
        let mut d_bias = vec![0.0; d_out];
        for n in 0..n_batch {
            for (d, db) in d_bias.iter_mut().enumerate() {
                *db += dy.plane(n, d).iter().sum::<f64>();
            }
        }
        Ok(AcuGradients {
            d_weights,
            d_bias,
            d_positions,
            d_input,
        })
    }

    /// Applies a normalized position gradient.
    ///
    /// Before warm-up ends the offsets are untouched. Afterwards every movable
    /// synapse steps by `base_lr · position_lr_scale` along `-normalized`, and
    /// each coordinate is clamped to the layer's radius.
    pub fn apply_position_update(
        &mut self,
        normalized: &[Vec<Synapse>],
        base_lr: f64,
        warmed_up: bool,
    ) -> Result<()> {
        if normalized.len() != self.positions.len()
            || normalized
                .iter()
                .zip(&self.positions)
                .any(|(g, p)| g.len() != p.len())
        {
            return Err(Error::ShapeMismatch("position gradient does not match layer".into()));
        }
        if !warmed_up {
            return Ok(());
        }
        let step = base_lr * self.config.position_lr_scale;
        let r = self.config.clamp_radius;
        for (set, grad) in self.positions.iter_mut().zip(normalized) {
            for k in 0..set.points.len() {
                if !set.is_movable(k) {
                    continue;
                }
                let p = &mut set.points[k];
                p.alpha = (p.alpha - step * grad[k].alpha).clamp(-r, r);
                p.beta = (p.beta - step * grad[k].beta).clamp(-r, r);
            }
        }
        Ok(())
    }
}

pub fn acu_forward(x: &Tensor, layer: &AcuLayer) -> Result<(Tensor, AcuCache)> {
    layer.forward(x)
}

pub fn acu_backward(dy: &Tensor, cache: &AcuCache, layer: &AcuLayer) -> Result<AcuGradients> {
    layer.backward(dy, cache)
}

/// Input/output sizes plus the shift from output index to input row/col.
#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    shift_h: i64,
    shift_w: i64,
}

impl Geometry {
    #[inline]
    fn at(&self, plane: &[f64], r: i64, c: i64) -> f64 {
        if r < 0 || c < 0 || r as usize >= self.h || c as usize >= self.w {
            0.0
        } else {
            plane[r as usize * self.w + c as usize]
        }
    }

    /// Fills `cols` (`cg·K` rows of one output plane each) with the samples
    /// of channels `c0..c0+cg` of sample `n`.
    fn gather(&self, x: &Tensor, n: usize, c0: usize, cg: usize, fracs: &[Fraction], cols: &mut [f64]) {
        let plane = self.oh * self.ow;
        for ci in 0..cg {
            let xp = x.plane(n, c0 + ci);
            for (k, frac) in fracs.iter().enumerate() {
                let row = (ci * fracs.len() + k) * plane;
                self.sample(xp, frac, &mut cols[row..row + plane]);
            }
        }
    }

    /// Samples one synapse's offset for every output position.
    fn sample(&self, xp: &[f64], frac: &Fraction, out: &mut [f64]) {
        let s = self.stride as i64;
        if frac.d_alpha == 0.0 && frac.d_beta == 0.0 {
            let c0 = self.shift_w + frac.floor_beta;
            // output columns whose source column lies inside the input
            let q_lo = if c0 >= 0 { 0 } else { ((-c0 + s - 1) / s) as usize }.min(self.ow);
            let q_hi = if c0 >= self.w as i64 {
                0
            } else {
                (((self.w as i64 - 1 - c0) / s + 1) as usize).min(self.ow)
            }
            .max(q_lo);
            for m in 0..self.oh {
                let r = m as i64 * s + self.shift_h + frac.floor_alpha;
                let row = &mut out[m * self.ow..(m + 1) * self.ow];
                if r < 0 || r >= self.h as i64 {
                    row.fill(0.0);
                    continue;
                }
                let src = &xp[r as usize * self.w..(r as usize + 1) * self.w];
                row[..q_lo].fill(0.0);
                row[q_hi..].fill(0.0);
                for (q, o) in row[q_lo..q_hi].iter_mut().enumerate() {
                    *o = src[((q + q_lo) as i64 * s + c0) as usize];
                }
            }
            return;
        }
        let (w11, w12, w21, w22) = corner_weights(frac.d_alpha, frac.d_beta);
        for m in 0..self.oh {
            let r1 = m as i64 * s + self.shift_h + frac.floor_alpha;
            let row = &mut out[m * self.ow..(m + 1) * self.ow];
            for (q, o) in row.iter_mut().enumerate() {
                let c1 = q as i64 * s + self.shift_w + frac.floor_beta;
                *o = self.at(xp, r1, c1) * w11
                    + self.at(xp, r1 + 1, c1) * w21
                    + self.at(xp, r1, c1 + 1) * w12
                    + self.at(xp, r1 + 1, c1 + 1) * w22;
            }
        }
    }

    /// Given the upstream gradient of one sampled plane: scatters into `dx`
    /// and returns the position gradient contribution.
    fn backprop(
        &self,
        xp: &[f64],
        frac: &Fraction,
        upstream: &[f64],
        dx: &mut [f64],
    ) -> (f64, f64) {
        let (da, db) = (frac.d_alpha, frac.d_beta);
        let (w11, w12, w21, w22) = corner_weights(da, db);
        let s = self.stride as i64;
        let (mut ga, mut gb) = (0.0, 0.0);
        for m in 0..self.oh {
            let r1 = m as i64 * s + self.shift_h + frac.floor_alpha;
            for q in 0..self.ow {
                let p = m * self.ow + q;
                let c1 = q as i64 * s + self.shift_w + frac.floor_beta;
                let u = upstream[p];
                if u == 0.0 {
                    continue;
                }
                let q11 = self.at(xp, r1, c1);
                let q12 = self.at(xp, r1, c1 + 1);
                let q21 = self.at(xp, r1 + 1, c1);
                let q22 = self.at(xp, r1 + 1, c1 + 1);
                ga += u * ((1.0 - db) * (q21 - q11) + db * (q22 - q12));
                gb += u * ((1.0 - da) * (q12 - q11) + da * (q22 - q21));
                self.scatter(dx, r1, c1, u * w11);
                self.scatter(dx, r1, c1 + 1, u * w12);
                self.scatter(dx, r1 + 1, c1, u * w21);
                self.scatter(dx, r1 + 1, c1 + 1, u * w22);
            }
        }
        (ga, gb)
    }

    #[inline]
    fn scatter(&self, dx: &mut [f64], r: i64, c: i64, v: f64) {
        if r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w {
            dx[r as usize * self.w + c as usize] += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refconv::{conv2d, lattice_index, ConvParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn single(points: Vec<Synapse>, w: Vec<f64>, b: f64, pad: usize, fixed: bool) -> AcuLayer {
        let k = points.len();
        let cfg = AcuConfig::new(1, 1, (8, 8)).with_pad(pad);
        AcuLayer::from_parts(
            cfg,
            Tensor::from_vec([1, 1, k, 1], w).unwrap(),
            vec![b],
            vec![SynapsePositions::new(points, fixed).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn pointwise_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random([2, 1, 4, 3], &mut rng);
        let layer = single(vec![Synapse::ORIGIN], vec![2.0], 1.0, 0, true);
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * b + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn half_pixel_sampling_on_ramp() {
        let x = Tensor::from_vec([1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let layer = single(vec![Synapse::new(0.5, 0.5)], vec![1.0], 0.0, 0, false);
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        // each output is the mean of a 2x2 block of the ramp 3h+w
        assert_eq!(y.data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn grid_matches_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random([2, 3, 6, 5], &mut rng);
        let cfg = AcuConfig::new(3, 2, (6, 5)).with_stride(2);
        let layer = AcuLayer::new(cfg, &PositionInit::Grid3x3, &mut rng).unwrap();
        let mut w = Tensor::zeros([2, 3, 3, 3]).unwrap();
        for d in 0..2 {
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let k = lattice_index(3, 3, i as i64 - 1, j as i64 - 1);
                        w.set(d, c, i, j, layer.weights.index(d, c, k, 0).unwrap()).unwrap();
                    }
                }
            }
        }
        let conv = ConvParams::new(w, layer.bias.clone(), 2, 1, 1).unwrap();
        let (a, _) = layer.forward(&x).unwrap();
        let b = conv2d(&x, &conv).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 2, 5, 5], &mut rng);
        let mut layer =
            AcuLayer::new(AcuConfig::new(2, 3, (5, 5)), &PositionInit::Grid3x3, &mut rng).unwrap();
        layer.set_synapse(0, 3, Synapse::new(-0.7, 1.3)).unwrap();
        let (y, cache) = layer.forward(&x).unwrap();
        let g = layer.backward(&y.zeros_like(), &cache).unwrap();
        assert!(g.d_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.iter().all(|&v| v == 0.0));
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        assert!(g.d_positions[0].iter().all(|s| *s == Synapse::ORIGIN));
    }

    #[test]
    fn origin_gradient_is_zero_when_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 1, 5, 5], &mut rng);
        let layer =
            AcuLayer::new(AcuConfig::new(1, 1, (5, 5)), &PositionInit::Grid3x3, &mut rng).unwrap();
        let (y, cache) = layer.forward(&x).unwrap();
        let g = layer.backward(&y, &cache).unwrap();
        assert_eq!(g.d_positions[0][0], Synapse::ORIGIN);
        assert!(g.d_positions[0][1..].iter().any(|s| s.norm() > 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 1, 5, 5], &mut rng);
        let layer =
            AcuLayer::new(AcuConfig::new(1, 1, (5, 5)), &PositionInit::Grid3x3, &mut rng).unwrap();
        let (_, cache) = layer.forward(&x).unwrap();
        let wrong = Tensor::zeros([1, 1, 4, 5]).unwrap();
        assert!(layer.backward(&wrong, &cache).is_err());
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_position_gradient(
            &[Synapse::new(3.0, 4.0), Synapse::ORIGIN, Synapse::new(-1e-3, 0.0)],
            false,
        );
        assert!((n[0].alpha - 0.6).abs() < 1e-15 && (n[0].beta - 0.8).abs() < 1e-15);
        assert_eq!(n[1], Synapse::ORIGIN);
        assert_eq!(n[2], Synapse::new(-1.0, 0.0));
        let fixed = normalize_position_gradient(&[Synapse::new(3.0, 4.0)], true);
        assert_eq!(fixed[0], Synapse::ORIGIN);
    }

    #[test]
    fn init_kinds() {
        let g = init_positions(&PositionInit::Grid3x3).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.points()[0], Synapse::ORIGIN);
        assert_eq!(
            init_positions(&PositionInit::Dilated(2)).unwrap(),
            lattice_positions(3, 3, 2).unwrap()
        );
        let cross = vec![
            Synapse::ORIGIN,
            Synapse::new(-1.0, 0.0),
            Synapse::new(1.0, 0.0),
            Synapse::new(0.0, -1.0),
            Synapse::new(0.0, 1.0),
        ];
        assert_eq!(init_positions(&PositionInit::Custom(cross)).unwrap().len(), 5);
        let bad = vec![Synapse::new(1.0, 0.0), Synapse::ORIGIN];
        assert!(init_positions(&PositionInit::Custom(bad)).is_err());
        assert!(init_positions(&PositionInit::Custom(vec![])).is_err());
    }

    fn grid_layer(scale: f64, radius: f64) -> AcuLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = AcuConfig::new(1, 1, (8, 8)).with_clamp_radius(radius);
        cfg.position_lr_scale = scale;
        AcuLayer::new(cfg, &PositionInit::Grid3x3, &mut rng).unwrap()
    }

    #[test]
    fn warm_up_gate_leaves_positions() {
        let mut layer = grid_layer(0.01, 7.0);
        let before = layer.positions().to_vec();
        let g = vec![vec![Synapse::new(0.6, 0.8); 9]];
        layer.apply_position_update(&g, 0.1, false).unwrap();
        assert_eq!(layer.positions(), before.as_slice());
    }

    #[test]
    fn step_length_is_lr_times_scale() {
        let mut layer = grid_layer(0.01, 7.0);
        let before = layer.positions()[0].points()[1];
        let mut g = vec![vec![Synapse::ORIGIN; 9]];
        g[0][1] = Synapse::new(1.0, 0.0);
        layer.apply_position_update(&g, 0.1, true).unwrap();
        let after = layer.positions()[0].points()[1];
        assert!((before.alpha - after.alpha - 0.001).abs() < 1e-15);
        assert_eq!(before.beta, after.beta);
        assert_eq!(layer.positions()[0].points()[0], Synapse::ORIGIN);
    }

    #[test]
    fn clamp_radius_is_exact() {
        let mut layer = grid_layer(1.0, 1.05);
        let mut g = vec![vec![Synapse::ORIGIN; 9]];
        g[0][1] = Synapse::new(1.0, 0.0); // synapse 1 sits at (-1,-1); moves to -1.1
        layer.apply_position_update(&g, 0.1, true).unwrap();
        assert_eq!(layer.positions()[0].points()[1].alpha, -1.05);
    }

    #[test]
    fn parameter_count() {
        let layer = grid_layer(0.01, 7.0);
        assert_eq!(layer.position_param_count(), 16);
    }

    #[test]
    fn grouped_layer_equals_split_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random([2, 4, 6, 6], &mut rng);
        let cfg = AcuConfig::new(4, 2, (6, 6)).with_groups(2);
        let mut layer = AcuLayer::new(cfg, &PositionInit::Grid3x3, &mut rng).unwrap();
        layer.set_synapse(0, 2, Synapse::new(-1.4, 0.3)).unwrap();
        layer.set_synapse(1, 5, Synapse::new(0.2, 1.6)).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        for g in 0..2 {
            let xs = Tensor::from_vec(
                [2, 2, 6, 6],
                (0..2)
                    .flat_map(|n| (0..2).map(move |c| (n, 2 * g + c)))
                    .flat_map(|(n, c)| x.plane(n, c).to_vec())
                    .collect(),
            )
            .unwrap();
            let w = Tensor::from_vec([1, 2, 9, 1], layer.weights.sample(g).to_vec()).unwrap();
            let mut single = AcuLayer::from_parts(
                AcuConfig::new(2, 1, (6, 6)),
                w,
                vec![layer.bias[g]],
                vec![init_positions(&PositionInit::Grid3x3).unwrap()],
            )
            .unwrap();
            for (k, s) in layer.positions()[g].points().iter().enumerate() {
                single.set_synapse(0, k, *s).unwrap();
            }
            let (ys, _) = single.forward(&xs).unwrap();
            for n in 0..2 {
                let a = y.plane(n, g);
                let b = ys.plane(n, 0);
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
        assert_eq!(layer.position_param_count(), 32);
    }

    #[test]
    fn infer_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for stride in [1, 2] {
            let cfg = AcuConfig::new(2, 3, (7, 6)).with_stride(stride).with_pad(2);
            let mut layer = AcuLayer::new(cfg, &PositionInit::Grid3x3, &mut rng).unwrap();
            layer.set_synapse(0, 3, Synapse::new(-2.0, 3.0)).unwrap();
            layer.set_synapse(0, 5, Synapse::new(0.25, -1.5)).unwrap();
            let x = random([2, 2, 7, 6], &mut rng);
            let (y, _) = layer.forward(&x).unwrap();
            assert_eq!(layer.infer(&x).unwrap(), y);
        }
    }
}
