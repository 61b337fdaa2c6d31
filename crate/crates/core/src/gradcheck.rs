//! Finite-difference gradient checking.
//!
//! Numeric derivatives here call forward passes only; nothing is shared with
//! the analytic backward code they are compared against.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acu::{init_positions, AcuConfig, AcuLayer, PositionInit, Synapse, SynapsePositions};
use crate::error::{Error, Result};
use crate::interp::{bilerp, bilerp_position_partials, CornerSample};
use crate::nn::{
    build_plain_network_for, build_residual_network_for, Network, NetworkSpec, ResidualKind,
};
use crate::refconv::{conv2d, conv2d_backward, ConvParams};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Position coordinates closer than this many steps to a lattice point are
/// skipped in central mode.
pub const LATTICE_MARGIN_STEPS: f64 = 10.0;
pub const REL_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_at<F: FnMut(&[f64]) -> Result<f64>>(f: &mut F, theta: &mut [f64], coord: usize, v: f64) -> Result<f64> {
    let saved = theta[coord];
    theta[coord] = v;
    let out = f(theta);
    theta[coord] = saved;
    let out = out?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("objective at coordinate {coord}")));
    }
    Ok(out)
}

/// `(f(θ + h·e) − f(θ − h·e)) / 2h`.
pub fn central_diff<F: FnMut(&[f64]) -> Result<f64>>(mut f: F, theta: &[f64], coord: usize, h: f64) -> Result<f64> {
    let mut t = theta.to_vec();
    let plus = eval_at(&mut f, &mut t, coord, theta[coord] + h)?;
    let minus = eval_at(&mut f, &mut t, coord, theta[coord] - h)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Second-order forward difference `(−3f(θ) + 4f(θ+h) − f(θ+2h)) / 2h`.
pub fn forward_diff<F: FnMut(&[f64]) -> Result<f64>>(mut f: F, theta: &[f64], coord: usize, h: f64) -> Result<f64> {
    let mut t = theta.to_vec();
    let f0 = eval_at(&mut f, &mut t, coord, theta[coord])?;
    let f1 = eval_at(&mut f, &mut t, coord, theta[coord] + h)?;
    let f2 = eval_at(&mut f, &mut t, coord, theta[coord] + 2.0 * h)?;
    Ok((4.0 * (f1 - f0) - (f2 - f0)) / (2.0 * h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub suite: String,
    pub max_rel_err: f64,
    pub worst_coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn empty(suite: &str, tol: f64) -> Self {
        Self {
            suite: suite.to_string(),
            max_rel_err: 0.0,
            worst_coordinate: "-".to_string(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tol
    }

    /// Keeps the worse of the two worst cases and adds the counts.
    pub fn merge(mut self, other: GradReport) -> Self {
        if other.max_rel_err > self.max_rel_err || self.checked == 0 {
            self.max_rel_err = other.max_rel_err;
            self.worst_coordinate = other.worst_coordinate;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self
    }

    fn observe(&mut self, coordinate: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_err(analytic, numeric, floor);
        if e > self.max_rel_err || self.checked == 0 || e.is_nan() {
            self.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
            self.worst_coordinate = coordinate();
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {} max_rel_err={:.3e} tol={:.0e} checked={:<6} skipped={:<5} worst={} analytic={:+.9e} numeric={:+.9e}",
            self.suite,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.checked,
            self.skipped,
            self.worst_coordinate,
            self.analytic,
            self.numeric
        )
    }
}

/// One named group of scalars in a [`GradTarget`].
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub position: bool,
}

impl Block {
    fn new(name: impl Into<String>, shape: Vec<usize>, position: bool) -> Self {
        Self {
            name: name.into(),
            shape,
            position,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `name[i,j,...]` for flat index `i`.
    pub fn label(&self, mut flat: usize) -> String {
        let mut idx = vec![0; self.shape.len()];
        for (d, &s) in self.shape.iter().enumerate().rev() {
            idx[d] = flat % s.max(1);
            flat /= s.max(1);
        }
        let parts: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        format!("{}[{}]", self.name, parts.join(","))
    }
}

/// A differentiable scalar objective over named blocks of coordinates.
pub trait GradTarget {
    fn blocks(&self) -> Vec<Block>;
    fn get(&self, block: usize, i: usize) -> f64;
    fn set(&mut self, block: usize, i: usize, v: f64) -> Result<()>;
    /// Objective from a forward pass only.
    fn loss(&self) -> Result<f64>;
    /// Analytic gradient of [`GradTarget::loss`], one vector per block.
    fn analytic(&self) -> Result<Vec<Vec<f64>>>;
    /// False for coordinates that are not free parameters.
    fn checkable(&self, _block: usize, _i: usize) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sided {
    /// Central differences; positions near a lattice point are skipped.
    Central,
    /// Forward differences for positions (the cell on the positive side),
    /// central for everything else.
    OneSided,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    pub sided: Sided,
    /// Random sample of at most this many coordinates per block.
    pub max_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_STEP,
            tol: 1e-5,
            floor: REL_FLOOR,
            sided: Sided::Central,
            max_per_block: None,
            seed: 0,
        }
    }
}

fn perturbed<T: GradTarget>(t: &mut T, block: usize, i: usize, v: f64) -> Result<f64> {
    let saved = t.get(block, i);
    t.set(block, i, v)?;
    let out = t.loss();
    t.set(block, i, saved)?;
    let out = out?;
    if !out.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok(out)
}

fn near_lattice(v: f64, margin: f64) -> bool {
    (v - v.round()).abs() < margin
}

/// Compares analytic and numeric derivatives on the selected coordinates of
/// every block. A breach is reported, not raised.
pub fn check_target<T: GradTarget>(target: &mut T, suite: &str, opts: &CheckOptions) -> Result<GradReport> {
    let analytic = target.analytic()?;
    let blocks = target.blocks();
    if analytic.len() != blocks.len() || analytic.iter().zip(&blocks).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch("analytic gradient layout".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::empty(suite, opts.tol);
    let h = opts.h;
    for (b, block) in blocks.iter().enumerate() {
        let n = block.len();
        let coords: Vec<usize> = match opts.max_per_block {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            if !target.checkable(b, i) {
                report.skipped += 1;
                continue;
            }
            let x = target.get(b, i);
            let numeric = if block.position && opts.sided == Sided::OneSided {
                let f0 = target.loss()?;
                let f1 = perturbed(target, b, i, x + h)?;
                let f2 = perturbed(target, b, i, x + 2.0 * h)?;
                (4.0 * (f1 - f0) - (f2 - f0)) / (2.0 * h)
            } else {
                if block.position && near_lattice(x, LATTICE_MARGIN_STEPS * h) {
                    report.skipped += 1;
                    continue;
                }
                let plus = perturbed(target, b, i, x + h)?;
                let minus = perturbed(target, b, i, x - h)?;
                (plus - minus) / (2.0 * h)
            };
            report.observe(|| block.label(i), analytic[b][i], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Compensated `Σ r·y`.
fn weighted_sum(r: &Tensor, y: &Tensor) -> Result<f64> {
    if r.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", r.shape(), y.shape())));
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (a, b) in r.data().iter().zip(y.data()) {
        let v = a * b;
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    Ok(sum + comp)
}

fn uniform_tensor<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape and data agree")
}

/// Objective `Σ r·y` of a convolution for a fixed random `r`.
#[derive(Debug, Clone)]
pub struct ConvTarget {
    pub params: ConvParams,
    pub input: Tensor,
    pub upstream: Tensor,
}

impl ConvTarget {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (n, c, d) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let dilation = rng.random_range(1..=2);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=2) * dilation;
        let reach = dilation * (k - 1) + 1;
        let h = rng.random_range(reach.max(3)..=reach.max(8));
        let w = rng.random_range(reach.max(3)..=reach.max(8));
        let weights = uniform_tensor([d, c, k, k], &mut rng);
        let bias = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = ConvParams::new(weights, bias, stride, pad, dilation)?;
        let input = uniform_tensor([n, c, h, w], &mut rng);
        let upstream = uniform_tensor(params.output_shape(input.shape())?, &mut rng);
        Ok(Self {
            params,
            input,
            upstream,
        })
    }
}

impl GradTarget for ConvTarget {
    fn blocks(&self) -> Vec<Block> {
        vec![
            Block::new("weights", self.params.weights.shape().to_vec(), false),
            Block::new("bias", vec![self.params.bias.len()], false),
            Block::new("input", self.input.shape().to_vec(), false),
        ]
    }

    fn get(&self, block: usize, i: usize) -> f64 {
        match block {
            0 => self.params.weights.data()[i],
            1 => self.params.bias[i],
            _ => self.input.data()[i],
        }
    }

    fn set(&mut self, block: usize, i: usize, v: f64) -> Result<()> {
        match block {
            0 => self.params.weights.data_mut()[i] = v,
            1 => self.params.bias[i] = v,
            _ => self.input.data_mut()[i] = v,
        }
        Ok(())
    }

    fn loss(&self) -> Result<f64> {
        weighted_sum(&self.upstream, &conv2d(&self.input, &self.params)?)
    }

    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let g = conv2d_backward(&self.input, &self.params, &self.upstream)?;
        Ok(vec![g.d_weights.into_data(), g.d_bias, g.d_input.into_data()])
    }
}

/// Objective `Σ r·y` of one ACU layer for a fixed random `r`.
#[derive(Debug, Clone)]
pub struct AcuTarget {
    pub layer: AcuLayer,
    pub input: Tensor,
    pub upstream: Tensor,
}

fn position_coord(layer: &AcuLayer, i: usize) -> (usize, usize, bool) {
    let k = layer.synapse_count();
    (i / (2 * k), (i / 2) % k, i % 2 == 0)
}

impl AcuTarget {
    /// A random small instance: `N ≤ 2`, `C ≤ 3`, `D ≤ 2`, `K ∈ {1, 5, 9}`,
    /// `H, W ≤ 8`. With `lattice` every synapse sits on an integer offset;
    /// otherwise every coordinate is at least 0.05 from the lattice.
    pub fn random(seed: u64, lattice: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = [1usize, 5, 9][rng.random_range(0..3)];
        let (n, c, d) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=2));
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let stride = rng.random_range(1..=2);
        let init = match k {
            1 => SynapsePositions::new(vec![Synapse::ORIGIN], false)?,
            5 => init_positions(&PositionInit::Custom(vec![
                Synapse::ORIGIN,
                Synapse::new(-1.0, 0.0),
                Synapse::new(0.0, -1.0),
                Synapse::new(0.0, 1.0),
                Synapse::new(1.0, 0.0),
            ]))?,
            _ => init_positions(&PositionInit::Grid3x3)?,
        };
        let origin_fixed = k > 1 && rng.random_bool(0.5);
        let mut coord = |base: f64, movable: bool| -> f64 {
            if !movable {
                return base;
            }
            if lattice {
                base + rng.random_range(-1..=1) as f64
            } else {
                base.floor() + rng.random_range(-1..=1) as f64 + rng.random_range(0.05..0.95)
            }
        };
        let points: Vec<Synapse> = init
            .points()
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let movable = !(origin_fixed && j == 0);
                Synapse::new(coord(p.alpha, movable), coord(p.beta, movable))
            })
            .collect();
        let positions = SynapsePositions::new(points, origin_fixed)?;
        let weights = uniform_tensor([d, c, k, 1], &mut rng);
        let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut pad = rng.random_range(0..=2);
        let input = uniform_tensor([n, c, h, w], &mut rng);
        loop {
            let cfg = AcuConfig::new(c, d, (h, w))
                .with_stride(stride)
                .with_pad(pad)
                .with_clamp_radius(4.0);
            let layer = AcuLayer::from_parts(cfg, weights.clone(), bias.clone(), vec![positions.clone()])?;
            if let Ok(out) = layer.output_shape(input.shape()) {
                let upstream = uniform_tensor(out, &mut rng);
                return Ok(Self {
                    layer,
                    input,
                    upstream,
                });
            }
            pad += 1;
        }
    }
}

impl GradTarget for AcuTarget {
    fn blocks(&self) -> Vec<Block> {
        let l = &self.layer;
        vec![
            Block::new("weights", l.weights.shape().to_vec(), false),
            Block::new("bias", vec![l.bias.len()], false),
            Block::new("positions", vec![l.positions().len(), l.synapse_count(), 2], true),
            Block::new("input", self.input.shape().to_vec(), false),
        ]
    }

    fn get(&self, block: usize, i: usize) -> f64 {
        match block {
            0 => self.layer.weights.data()[i],
            1 => self.layer.bias[i],
            2 => {
                let (g, k, is_alpha) = position_coord(&self.layer, i);
                let p = self.layer.positions()[g].points()[k];
                if is_alpha {
                    p.alpha
                } else {
                    p.beta
                }
            }
            _ => self.input.data()[i],
        }
    }

    fn set(&mut self, block: usize, i: usize, v: f64) -> Result<()> {
        match block {
            0 => self.layer.weights.data_mut()[i] = v,
            1 => self.layer.bias[i] = v,
            2 => {
                let (g, k, is_alpha) = position_coord(&self.layer, i);
                let mut p = self.layer.positions()[g].points()[k];
                if is_alpha {
                    p.alpha = v;
                } else {
                    p.beta = v;
                }
                self.layer.set_synapse(g, k, p)?;
            }
            _ => self.input.data_mut()[i] = v,
        }
        Ok(())
    }

    fn loss(&self) -> Result<f64> {
        weighted_sum(&self.upstream, &self.layer.forward(&self.input)?.0)
    }

    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = self.layer.forward(&self.input)?;
        let g = self.layer.backward(&self.upstream, &cache)?;
        let pos = g
            .d_positions
            .iter()
            .flat_map(|set| set.iter().flat_map(|s| [s.alpha, s.beta]))
            .collect();
        Ok(vec![g.d_weights.into_data(), g.d_bias, pos, g.d_input.into_data()])
    }

    fn checkable(&self, block: usize, i: usize) -> bool {
        if block != 2 {
            return true;
        }
        let (g, k, _) = position_coord(&self.layer, i);
        !(k == 0 && self.layer.positions()[g].origin_fixed())
    }
}

/// [`AcuTarget`] whose analytic position gradient is deliberately wrong:
/// the beta component of the last synapse is scaled by 1.5.
#[derive(Debug, Clone)]
pub struct CorruptedAcuTarget(pub AcuTarget);

impl GradTarget for CorruptedAcuTarget {
    fn blocks(&self) -> Vec<Block> {
        self.0.blocks()
    }
    fn get(&self, block: usize, i: usize) -> f64 {
        self.0.get(block, i)
    }
    fn set(&mut self, block: usize, i: usize, v: f64) -> Result<()> {
        self.0.set(block, i, v)
    }
    fn loss(&self) -> Result<f64> {
        self.0.loss()
    }
    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut g = self.0.analytic()?;
        if let Some(last) = g[2].last_mut() {
            *last *= 1.5;
        }
        Ok(g)
    }
    fn checkable(&self, block: usize, i: usize) -> bool {
        self.0.checkable(block, i)
    }
}

/// Training-mode softmax cross-entropy of a whole network on a fixed batch.
#[derive(Debug, Clone)]
pub struct NetworkTarget {
    pub net: Network,
    pub input: Tensor,
    pub labels: Vec<usize>,
    names: Vec<String>,
}

impl NetworkTarget {
    pub fn new(net: Network, input: Tensor, labels: Vec<usize>) -> Self {
        let names = net.params().into_iter().map(|p| p.name).collect();
        Self {
            net,
            input,
            labels,
            names,
        }
    }

    /// Builds `spec`, moves every movable synapse to a random off-lattice
    /// offset within one pixel of its start, and draws a random batch.
    pub fn random(spec: NetworkSpec, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, (h, w), classes) = (spec.input_channels, spec.input_hw, spec.classes);
        let mut net = Network::new(spec, &mut rng)?;
        for layer in net.acu_layers_mut() {
            for g in 0..layer.positions().len() {
                for k in 0..layer.synapse_count() {
                    let set = &layer.positions()[g];
                    if k == 0 && set.origin_fixed() {
                        continue;
                    }
                    let p = set.points()[k];
                    let jitter = |rng: &mut ChaCha8Rng| {
                        let v: f64 = rng.random_range(0.1..0.9);
                        if rng.random_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    };
                    let r = layer.config().clamp_radius;
                    let mut moved = |v: f64| {
                        let j = jitter(&mut rng);
                        if (v + j).abs() <= r {
                            v + j
                        } else {
                            v - j
                        }
                    };
                    let s = Synapse::new(moved(p.alpha), moved(p.beta));
                    layer.set_synapse(g, k, s)?;
                }
            }
        }
        let input = uniform_tensor([batch, c, h, w], &mut rng);
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        Ok(Self::new(net, input, labels))
    }

    fn param_blocks(&self) -> usize {
        self.names.len()
    }

    fn acu_index(&self, block: usize) -> usize {
        block - self.param_blocks()
    }
}

impl GradTarget for NetworkTarget {
    fn blocks(&self) -> Vec<Block> {
        let mut out: Vec<Block> = self
            .net
            .params()
            .into_iter()
            .map(|p| Block::new(p.name, vec![p.values.len()], false))
            .collect();
        for (i, a) in self.net.acu_layers().iter().enumerate() {
            out.push(Block::new(
                format!("acu{i}.positions"),
                vec![a.positions().len(), a.synapse_count(), 2],
                true,
            ));
        }
        out.push(Block::new("input", self.input.shape().to_vec(), false));
        out
    }

    fn get(&self, block: usize, i: usize) -> f64 {
        let np = self.param_blocks();
        let na = self.net.acu_layers().len();
        if block < np {
            self.net.params()[block].values[i]
        } else if block < np + na {
            let layer = self.net.acu_layers()[self.acu_index(block)];
            let (g, k, is_alpha) = position_coord(layer, i);
            let p = layer.positions()[g].points()[k];
            if is_alpha {
                p.alpha
            } else {
                p.beta
            }
        } else {
            self.input.data()[i]
        }
    }

    fn set(&mut self, block: usize, i: usize, v: f64) -> Result<()> {
        let np = self.param_blocks();
        let na = self.net.acu_layers().len();
        if block < np {
            self.net.params_mut()[block].values[i] = v;
        } else if block < np + na {
            let idx = self.acu_index(block);
            let layer = &mut self.net.acu_layers_mut()[idx];
            let (g, k, is_alpha) = position_coord(layer, i);
            let mut p = layer.positions()[g].points()[k];
            if is_alpha {
                p.alpha = v;
            } else {
                p.beta = v;
            }
            layer.set_synapse(g, k, p)?;
        } else {
            self.input.data_mut()[i] = v;
        }
        Ok(())
    }

    fn loss(&self) -> Result<f64> {
        self.net.loss(&self.input, &self.labels)
    }

    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let (_, g, _) = self.net.forward_backward(&self.input, &self.labels)?;
        let mut out = g.params;
        for set in g.positions {
            out.push(set.iter().flat_map(|s| s.iter().flat_map(|p| [p.alpha, p.beta])).collect());
        }
        out.push(g.input.into_data());
        Ok(out)
    }

    fn checkable(&self, block: usize, i: usize) -> bool {
        let np = self.param_blocks();
        let na = self.net.acu_layers().len();
        if block < np || block >= np + na {
            return true;
        }
        let layer = self.net.acu_layers()[self.acu_index(block)];
        let (g, k, _) = position_coord(layer, i);
        !(k == 0 && layer.positions()[g].origin_fixed())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Interp,
    Conv,
    Acu,
    Network,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Interp => "interp",
            Suite::Conv => "conv",
            Suite::Acu => "acu",
            Suite::Network => "network",
        }
    }
}

/// Bilinear position partials against central differences at 1000 random
/// interior points.
pub fn interp_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::empty("interp", 1e-6);
    for trial in 0..1000 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let theta = [rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)];
        let f = |t: &[f64]| -> Result<f64> {
            Ok(bilerp(&CornerSample {
                q11: q[0],
                q12: q[1],
                q21: q[2],
                q22: q[3],
                d_alpha: t[0],
                d_beta: t[1],
            }))
        };
        let (da, db) = bilerp_position_partials(&CornerSample {
            q11: q[0],
            q12: q[1],
            q21: q[2],
            q22: q[3],
            d_alpha: theta[0],
            d_beta: theta[1],
        });
        for (coord, a) in [da, db].into_iter().enumerate() {
            let n = central_diff(f, &theta, coord, 1e-6)?;
            let name = if coord == 0 { "alpha" } else { "beta" };
            report.observe(|| format!("sample{trial}.{name}"), a, n, REL_FLOOR);
        }
    }
    Ok(report)
}

pub fn conv_suite(seeds: std::ops::Range<u64>) -> Result<GradReport> {
    // The objective is linear in every coordinate, so a wide step is exact.
    let opts = CheckOptions {
        tol: 1e-7,
        h: 1e-3,
        ..CheckOptions::default()
    };
    let reports: Vec<GradReport> = seeds
        .into_par_iter()
        .map(|s| {
            let mut t = ConvTarget::random(s)?;
            let r = check_target(&mut t, "conv", &opts)?;
            Ok(GradReport {
                worst_coordinate: format!("seed{s}/{}", r.worst_coordinate),
                ..r
            })
        })
        .collect::<Result<_>>()?;
    Ok(merge_all("conv", opts.tol, reports))
}

fn merge_all(suite: &str, tol: f64, reports: Vec<GradReport>) -> GradReport {
    reports
        .into_iter()
        .fold(GradReport::empty(suite, tol), GradReport::merge)
}

/// Random ACU instances: off-lattice with central differences and on-lattice
/// with one-sided differences. Returns `(off_lattice, on_lattice)`.
pub fn acu_suite(seeds: std::ops::Range<u64>) -> Result<(GradReport, GradReport)> {
    let run = |lattice: bool| -> Result<GradReport> {
        let opts = CheckOptions {
            sided: if lattice { Sided::OneSided } else { Sided::Central },
            ..CheckOptions::default()
        };
        let name = if lattice { "acu-lattice" } else { "acu" };
        let reports: Vec<GradReport> = seeds
            .clone()
            .into_par_iter()
            .map(|s| {
                let mut t = AcuTarget::random(s, lattice)?;
                let r = check_target(&mut t, name, &opts)?;
                Ok(GradReport {
                    worst_coordinate: format!("seed{s}/{}", r.worst_coordinate),
                    ..r
                })
            })
            .collect::<Result<_>>()?;
        Ok(merge_all(name, opts.tol, reports))
    };
    Ok((run(false)?, run(true)?))
}

/// The ACU suite against a deliberately broken backward; must fail.
pub fn corrupted_acu_suite(seed: u64) -> Result<GradReport> {
    let mut t = CorruptedAcuTarget(AcuTarget::random(seed, false)?);
    check_target(&mut t, "acu-corrupt", &CheckOptions::default())
}

/// Relative-error floor for whole networks: batch norm makes the loss
/// invariant to biases that feed it, so their true gradient is zero and the
/// numeric one is pure rounding noise around 1e-10.
pub const NETWORK_FLOOR: f64 = 1e-6;

/// Plain and both residual variants at width 0.25 on 8×8 inputs, sampling up
/// to 12 coordinates per block.
pub fn network_suite(seed: u64) -> Result<GradReport> {
    let specs = [
        build_plain_network_for(3, (8, 8), 0.25, 10, true),
        build_residual_network_for(3, (8, 8), ResidualKind::Basic, 1, 0.25, 10, true),
        build_residual_network_for(3, (8, 8), ResidualKind::Bottleneck, 1, 0.25, 10, true),
    ];
    let opts = CheckOptions {
        tol: 1e-3,
        floor: NETWORK_FLOOR,
        max_per_block: Some(12),
        seed,
        ..CheckOptions::default()
    };
    let reports: Vec<GradReport> = specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut t = NetworkTarget::random(spec, 3, seed + i as u64)?;
            let r = check_target(&mut t, "network", &opts)?;
            Ok(GradReport {
                worst_coordinate: format!("net{i}/{}", r.worst_coordinate),
                ..r
            })
        })
        .collect::<Result<_>>()?;
    Ok(merge_all("network", opts.tol, reports))
}

/// Default seeds for each suite, as run by the command-line tool.
pub fn run_suite(suite: Suite) -> Result<Vec<GradReport>> {
    Ok(match suite {
        Suite::Interp => vec![interp_suite(0)?],
        Suite::Conv => vec![conv_suite(0..40)?],
        Suite::Acu => {
            let (off, on) = acu_suite(0..60)?;
            vec![off, on]
        }
        Suite::Network => vec![network_suite(0)?],
    })
}
