//! Training runs: data preparation, the iteration loop, metrics and position
//! history.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acu::SynapsePositions;
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{
    augment_batch, global_contrast_normalize, load_cifar10, synthetic_dilation_task, Dataset, Split,
    Zca, ZCA_EPS,
};
use crate::error::{Error, Result};
use crate::nn::{
    build_plain_network_for, build_residual_network_for, build_shallow_network, Network,
    NetworkSpec, ResidualKind,
};
use crate::optim::{lr_at, Sgd, TrainConfig};
use crate::tensor::Tensor;
use crate::trajectory::PositionTrajectory;

pub const DEFAULT_LOG_INTERVAL: usize = 100;
pub const EVAL_CHUNK: usize = 256;
pub const METRICS_HEADER: &str = "iter,lr,train_loss,test_error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Plain,
    ResBasic,
    ResBottleneck,
    /// One 3×3 layer, batch norm, ReLU and a 1×1 classifier.
    Shallow,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Plain => "plain",
            Arch::ResBasic => "res-basic",
            Arch::ResBottleneck => "res-bottleneck",
            Arch::Shallow => "shallow",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "plain" => Arch::Plain,
            "res-basic" => Arch::ResBasic,
            "res-bottleneck" => Arch::ResBottleneck,
            "shallow" => Arch::Shallow,
            _ => return Err(Error::InvalidConfig(format!("unknown architecture {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Cifar10 {
        dir: PathBuf,
        limit: Option<usize>,
        test_limit: Option<usize>,
        zca: bool,
    },
    Synthetic {
        train: usize,
        test: usize,
        size: usize,
        seed: u64,
    },
}

/// Everything besides the optimizer settings that defines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub arch: Arch,
    pub use_acu: bool,
    pub width: f64,
    pub blocks_per_stage: usize,
    pub log_interval: usize,
    pub augment: bool,
    pub data: DataSource,
}

impl RunSpec {
    pub fn new(arch: Arch, use_acu: bool, data: DataSource) -> Self {
        let augment = matches!(data, DataSource::Cifar10 { .. });
        Self {
            arch,
            use_acu,
            width: 1.0,
            blocks_per_stage: 5,
            log_interval: DEFAULT_LOG_INTERVAL,
            augment,
            data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::InvalidConfig(format!("width must be positive, got {}", self.width)));
        }
        if self.log_interval == 0 || self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig(
                "log_interval and blocks_per_stage must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The network for inputs of the given shape.
    pub fn network_spec(&self, channels: usize, hw: (usize, usize), classes: usize) -> NetworkSpec {
        match self.arch {
            Arch::Plain => build_plain_network_for(channels, hw, self.width, classes, self.use_acu),
            Arch::ResBasic => build_residual_network_for(
                channels,
                hw,
                ResidualKind::Basic,
                self.blocks_per_stage,
                self.width,
                classes,
                self.use_acu,
            ),
            Arch::ResBottleneck => build_residual_network_for(
                channels,
                hw,
                ResidualKind::Bottleneck,
                self.blocks_per_stage,
                self.width,
                classes,
                self.use_acu,
            ),
            Arch::Shallow => build_shallow_network(
                channels,
                hw,
                ((16.0 * self.width).round() as usize).max(1),
                classes,
                self.use_acu,
            ),
        }
    }
}

/// Loads and preprocesses `(train, test)`. CIFAR images get global contrast
/// normalization and, when requested, ZCA fitted on the training images.
pub fn prepare_data(source: &DataSource) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Cifar10 {
            dir,
            limit,
            test_limit,
            zca,
        } => {
            let train = global_contrast_normalize(&load_cifar10(dir, Split::Train, *limit)?);
            let test = global_contrast_normalize(&load_cifar10(dir, Split::Test, *test_limit)?);
            if !*zca {
                return Ok((train, test));
            }
            let w = Zca::fit(&train.images, ZCA_EPS)?;
            let train = Dataset {
                images: w.apply(&train.images)?,
                ..train
            };
            let test = Dataset {
                images: w.apply(&test.images)?,
                ..test
            };
            Ok((train, test))
        }
        DataSource::Synthetic {
            train,
            test,
            size,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let tr = synthetic_dilation_task(*train, *size, &mut rng)?;
            let mut te = synthetic_dilation_task(*test, *size, &mut rng)?;
            te.split = Split::Test;
            Ok((tr, te))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_error: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iter, r.lr, r.train_loss, r.test_error);
    }
    s
}

/// Top-1 test error in percent, inference mode.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    net.error_rate(&data.images, &data.labels, EVAL_CHUNK)
}

fn acu_positions(net: &Network) -> Vec<Vec<SynapsePositions>> {
    net.acu_layers().iter().map(|a| a.positions().to_vec()).collect()
}

/// Training state. One seeded stream drives initialization, batch sampling
/// and augmentation, so a run is a pure function of its inputs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub run: RunSpec,
    pub config: TrainConfig,
    pub net: Network,
    pub sgd: Sgd,
    pub iter: usize,
    pub history: PositionTrajectory,
    pub metrics: Vec<MetricRow>,
    rng: ChaCha8Rng,
    interval_loss: f64,
    interval_steps: usize,
}

impl Trainer {
    pub fn new(run: RunSpec, config: TrainConfig, spec: NetworkSpec) -> Result<Self> {
        run.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = Network::new(spec, &mut rng)?;
        net.set_position_lr_scale(config.position_lr_scale)?;
        let sgd = Sgd::new(&net);
        let mut history = PositionTrajectory::new();
        history.record(0, &acu_positions(&net))?;
        Ok(Self {
            run,
            config,
            net,
            sgd,
            iter: 0,
            history,
            metrics: Vec::new(),
            rng,
            interval_loss: 0.0,
            interval_steps: 0,
        })
    }

    /// Builds the network for `train`'s image shape and class count.
    pub fn for_data(run: RunSpec, config: TrainConfig, train: &Dataset) -> Result<Self> {
        let [_, c, h, w] = train.images.shape();
        let spec = run.network_spec(c, (h, w), train.class_count);
        Self::new(run, config, spec)
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.config.total_iters
    }

    /// One SGD iteration; returns the batch loss.
    pub fn step(&mut self, train: &Dataset) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::InvalidConfig("empty training set".into()));
        }
        let batch = self.config.batch_size.min(train.len());
        let indices = sample(&mut self.rng, train.len(), batch).into_vec();
        let (mut images, labels) = train.batch(&indices)?;
        if self.run.augment {
            images = augment_batch(&images, &mut self.rng);
        }
        let iter = self.iter;
        let (loss, grads, bn) = self
            .net
            .forward_backward(&images, &labels)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { iter },
                e => e,
            })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: self.iter });
        }
        self.net.commit_bn(&bn)?;
        self.sgd.step(&mut self.net, &grads, &self.config, self.iter)?;
        self.iter += 1;
        self.interval_loss += loss;
        self.interval_steps += 1;
        Ok(loss)
    }

    /// Appends a metrics row (mean loss since the previous row, test error)
    /// and a position snapshot for the current iteration.
    pub fn log(&mut self, test: &Dataset) -> Result<MetricRow> {
        let row = MetricRow {
            iter: self.iter,
            lr: lr_at(&self.config, self.iter.saturating_sub(1)),
            train_loss: self.interval_loss / self.interval_steps.max(1) as f64,
            test_error: evaluate(&self.net, test)?,
        };
        self.metrics.push(row);
        self.history.record(self.iter, &acu_positions(&self.net))?;
        self.interval_loss = 0.0;
        self.interval_steps = 0;
        Ok(row)
    }

    /// Trains until `until` iterations (capped at `total_iters`), logging
    /// every `log_interval` iterations and at the final iteration.
    pub fn train_until(&mut self, train: &Dataset, test: &Dataset, until: usize) -> Result<()> {
        let end = until.min(self.config.total_iters);
        while self.iter < end {
            self.step(train)?;
            if self.iter % self.run.log_interval == 0 || self.iter == self.config.total_iters {
                self.log(test)?;
            }
        }
        Ok(())
    }

    pub fn train(&mut self, train: &Dataset, test: &Dataset) -> Result<()> {
        self.train_until(train, test, self.config.total_iters)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.net.state_tensors();
        for (p, v) in self.net.params().iter().zip(self.sgd.velocities()) {
            tensors.push((format!("opt.velocity.{}", p.name), flat(v.clone())));
        }
        let rows = self.history.to_rows();
        tensors.push((
            "run.history".into(),
            Tensor::from_vec([rows.len(), 5, 1, 1], rows.concat()).expect("history rows"),
        ));
        let metrics: Vec<f64> = self
            .metrics
            .iter()
            .flat_map(|r| [r.iter as f64, r.lr, r.train_loss, r.test_error])
            .collect();
        tensors.push((
            "run.metrics".into(),
            Tensor::from_vec([self.metrics.len(), 4, 1, 1], metrics).expect("metric rows"),
        ));
        tensors.push((
            "run.interval".into(),
            flat(vec![self.interval_loss, self.interval_steps as f64]),
        ));
        Checkpoint {
            run: self.run.clone(),
            spec: self.net.spec().clone(),
            config: self.config.clone(),
            iter: self.iter,
            rng: RngState::of(&self.rng),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = Network::new(ck.spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        net.load_state_tensors(&ck.tensors)?;
        net.set_position_lr_scale(ck.config.position_lr_scale)?;
        let velocities = net
            .params()
            .iter()
            .map(|p| {
                let t = ck.tensor(&format!("opt.velocity.{}", p.name))?;
                if t.len() != p.values.len() {
                    return Err(Error::ShapeMismatch(format!("velocity for {}", p.name)));
                }
                Ok(t.data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let history = ck.tensor("run.history")?;
        let rows: Vec<[f64; 5]> = history
            .data()
            .chunks_exact(5)
            .map(|c| [c[0], c[1], c[2], c[3], c[4]])
            .collect();
        let metrics = ck
            .tensor("run.metrics")?
            .data()
            .chunks_exact(4)
            .map(|c| MetricRow {
                iter: c[0] as usize,
                lr: c[1],
                train_loss: c[2],
                test_error: c[3],
            })
            .collect();
        let interval = ck.tensor("run.interval")?;
        if interval.len() != 2 {
            return Err(Error::ShapeMismatch("run.interval".into()));
        }
        Ok(Self {
            run: ck.run.clone(),
            config: ck.config.clone(),
            net,
            sgd: Sgd::from_velocities(velocities),
            iter: ck.iter,
            history: PositionTrajectory::from_rows(&rows),
            metrics,
            rng: ck.rng.restore(),
            interval_loss: interval.data()[0],
            interval_steps: interval.data()[1] as usize,
        })
    }
}

fn flat(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::from_vec([1, 1, 1, n], v).expect("flat tensor")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run() -> (RunSpec, TrainConfig) {
        let data = DataSource::Synthetic {
            train: 64,
            test: 32,
            size: 9,
            seed: 5,
        };
        let mut run = RunSpec::new(Arch::Shallow, true, data);
        run.width = 0.25;
        run.log_interval = 4;
        let cfg = TrainConfig {
            total_iters: 10,
            warmup_iters: 2,
            lr_drop_steps: vec![6],
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        (run, cfg)
    }

    #[test]
    fn logs_at_interval_and_end() {
        let (run, cfg) = small_run();
        let (train, test) = prepare_data(&run.data).unwrap();
        let mut t = Trainer::for_data(run, cfg, &train).unwrap();
        t.train(&train, &test).unwrap();
        let iters: Vec<usize> = t.metrics.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![4, 8, 10]);
        assert!(t.metrics_csv().starts_with("iter,lr,train_loss,test_error\n"));
        let hist: Vec<usize> = t.history.points().iter().map(|p| p.iter).collect();
        assert_eq!(hist.first(), Some(&0));
        assert_eq!(hist.last(), Some(&10));
    }

    #[test]
    fn checkpoint_state_round_trip() {
        let (run, cfg) = small_run();
        let (train, test) = prepare_data(&run.data).unwrap();
        let mut t = Trainer::for_data(run, cfg, &train).unwrap();
        t.train_until(&train, &test, 5).unwrap();
        let ck = t.to_checkpoint();
        let back = Trainer::from_checkpoint(&ck).unwrap();
        assert_eq!(back.to_checkpoint(), ck);
        assert_eq!(back.net, t.net);
    }

    #[test]
    fn arch_names_round_trip() {
        for a in [Arch::Plain, Arch::ResBasic, Arch::ResBottleneck, Arch::Shallow] {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
        }
        assert!("vgg".parse::<Arch>().is_err());
    }
}
