//! Nesterov SGD, the step learning-rate schedule and position updates.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acu::{normalize_position_gradient, AcuLayer, Synapse, DEFAULT_POSITION_LR_SCALE};
use crate::error::{Error, Result};
use crate::nn::{NetGradients, Network, ParamKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_steps: Vec<usize>,
    pub lr_drop_factor: f64,
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub position_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_steps: vec![32_000, 48_000],
            lr_drop_factor: 0.1,
            total_iters: 64_000,
            warmup_iters: 10_000,
            batch_size: 64,
            position_lr_scale: DEFAULT_POSITION_LR_SCALE,
            seed: 0,
        }
    }
}

const KEYS: [&str; 10] = [
    "base_lr",
    "momentum",
    "weight_decay",
    "lr_drop_steps",
    "lr_drop_factor",
    "total_iters",
    "warmup_iters",
    "batch_size",
    "position_lr_scale",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor must be in (0, 1]".into());
        }
        if !(self.position_lr_scale >= 0.0) {
            return bad("position_lr_scale must be >= 0".into());
        }
        if self.total_iters == 0 || self.batch_size == 0 {
            return bad("total_iters and batch_size must be positive".into());
        }
        if self.warmup_iters >= self.total_iters {
            return bad(format!(
                "warmup_iters {} must be below total_iters {}",
                self.warmup_iters, self.total_iters
            ));
        }
        if self.lr_drop_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_drop_steps must be strictly ascending".into());
        }
        if self.lr_drop_steps.last().is_some_and(|&s| s >= self.total_iters) {
            return bad("lr_drop_steps must be below total_iters".into());
        }
        Ok(())
    }

    /// Flat `key=value` text, one field per line, in declaration order.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let drops: Vec<String> = self.lr_drop_steps.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "lr_drop_steps={}", drops.join(","));
        let _ = writeln!(s, "lr_drop_factor={}", self.lr_drop_factor);
        let _ = writeln!(s, "total_iters={}", self.total_iters);
        let _ = writeln!(s, "warmup_iters={}", self.warmup_iters);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "position_lr_scale={}", self.position_lr_scale);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are errors.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_drop_steps" => {
                self.lr_drop_steps = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_drop_factor" => self.lr_drop_factor = num(key, value)?,
            "total_iters" => self.total_iters = num(key, value)?,
            "warmup_iters" => self.warmup_iters = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "position_lr_scale" => self.position_lr_scale = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key {key:?}; expected one of {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string()).map_err(|e| Error::io(path, e))
    }
}

/// `base_lr · factor^(drops passed)`; a drop at step `s` applies from `s` on.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    let passed = cfg.lr_drop_steps.iter().filter(|&&s| iter >= s).count();
    cfg.base_lr * cfg.lr_drop_factor.powi(passed as i32)
}

/// One Nesterov step in place: `g = grad + decay·p`, `v ← m·v − lr·g`,
/// `p ← p + m·v − lr·g`.
pub fn sgd_nesterov_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + decay * *p;
        *v = momentum * *v - lr * g;
        *p += momentum * *v - lr * g;
    }
    Ok(())
}

/// Normalizes the raw position gradient of `layer` and applies it at
/// `lr_at(cfg, iter)`, gated by warm-up. No momentum, no decay.
pub fn position_step(
    layer: &mut AcuLayer,
    raw: &[Vec<Synapse>],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    if raw.len() != layer.positions().len() {
        return Err(Error::ShapeMismatch("position gradient group count".into()));
    }
    let normalized: Vec<Vec<Synapse>> = raw
        .iter()
        .zip(layer.positions())
        .map(|(g, set)| normalize_position_gradient(g, set.origin_fixed()))
        .collect();
    layer.apply_position_update(&normalized, lr_at(cfg, iter), iter >= cfg.warmup_iters)
}

/// Velocity buffers for every parameter tensor of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    velocities: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network) -> Self {
        Self {
            velocities: net.params().iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    pub fn from_velocities(velocities: Vec<Vec<f64>>) -> Self {
        Self { velocities }
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    /// Updates weights (Nesterov, decay on convolution weights only) and
    /// positions for iteration `iter`.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &NetGradients,
        cfg: &TrainConfig,
        iter: usize,
    ) -> Result<()> {
        let lr = lr_at(cfg, iter);
        let params = net.params_mut();
        if params.len() != grads.params.len() || params.len() != self.velocities.len() {
            return Err(Error::ShapeMismatch("gradients do not match network".into()));
        }
        for ((p, g), v) in params.into_iter().zip(&grads.params).zip(&mut self.velocities) {
            let decay = if p.kind == ParamKind::Weight {
                cfg.weight_decay
            } else {
                0.0
            };
            sgd_nesterov_step(p.values, g, v, lr, cfg.momentum, decay)?;
        }
        let layers = net.acu_layers_mut();
        if layers.len() != grads.positions.len() {
            return Err(Error::ShapeMismatch("position gradients do not match network".into()));
        }
        for (layer, g) in layers.into_iter().zip(&grads.positions) {
            position_step(layer, g, cfg, iter)?;
        }
        Ok(())
    }
}
