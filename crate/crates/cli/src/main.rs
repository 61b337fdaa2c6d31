use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actconv_core::bench::{bench_csv, bench_shape, parse_shapes};
use actconv_core::checkpoint::{Checkpoint, MAGIC};
use actconv_core::gradcheck::{corrupted_acu_suite, run_suite, Suite};
use actconv_core::optim::TrainConfig;
use actconv_core::train::{evaluate, prepare_data, Arch, DataSource, RunSpec, Trainer};
use actconv_core::trajectory::PositionTrajectory;
use actconv_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "actconv", version, about = "Active convolution units: training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoint, metrics and trajectory files.
    Train(TrainArgs),
    /// Print the top-1 error of a checkpoint.
    Eval(EvalArgs),
    /// Export synapse trajectories as CSV and SVG.
    Positions(PositionsArgs),
    /// Run gradient-check suites.
    Gradcheck(GradcheckArgs),
    /// Time conv2d against the ACU forward pass.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Cifar10,
    Synthetic,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Plain,
    ResBasic,
    ResBottleneck,
    Shallow,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Plain => Arch::Plain,
            ArchArg::ResBasic => Arch::ResBasic,
            ArchArg::ResBottleneck => Arch::ResBottleneck,
            ArchArg::Shallow => Arch::Shallow,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, env = "ACTCONV_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Apply ZCA whitening after contrast normalization.
    #[arg(long)]
    zca: bool,
    #[arg(long, default_value_t = 2000)]
    synthetic_train: usize,
    #[arg(long, default_value_t = 1000)]
    synthetic_test: usize,
    #[arg(long, default_value_t = 16)]
    synthetic_size: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn source(&self, kind: DatasetKind) -> Result<DataSource> {
        Ok(match kind {
            DatasetKind::Cifar10 => DataSource::Cifar10 {
                dir: self.data_dir.clone().ok_or_else(|| {
                    Error::InvalidConfig("CIFAR-10 needs --data-dir or ACTCONV_DATA_DIR".into())
                })?,
                limit: self.limit,
                test_limit: self.test_limit,
                zca: self.zca,
            },
            DatasetKind::Synthetic => DataSource::Synthetic {
                train: self.limit.unwrap_or(self.synthetic_train),
                test: self.test_limit.unwrap_or(self.synthetic_test),
                size: self.synthetic_size,
                seed: self.data_seed,
            },
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration as key=value lines.
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "plain")]
    arch: ArchArg,
    #[arg(long, value_enum, default_value = "on")]
    acu: Toggle,
    /// Channel-width multiplier.
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Residual blocks per stage.
    #[arg(long, default_value_t = 5)]
    blocks: usize,
    #[arg(long, default_value_t = actconv_core::train::DEFAULT_LOG_INTERVAL)]
    log_interval: usize,
    /// Disable crop-and-flip augmentation (on by default for CIFAR-10).
    #[arg(long)]
    no_augment: bool,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many iterations (the schedule still uses total_iters).
    #[arg(long)]
    stop_at: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct PositionsArgs {
    /// Checkpoint or trajectory CSV.
    input: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Where to write the trajectory CSV when reading a checkpoint.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    Interp,
    Conv,
    Acu,
    Network,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    module: ModuleArg,
    /// Check a deliberately broken ACU backward instead.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Lines of C,D,K,H,W[,N].
    #[arg(long)]
    shapes: PathBuf,
    #[arg(long, default_value_t = actconv_core::bench::MIN_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Positions(a) => cmd_positions(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (mut trainer, train, test) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (train, test) = prepare_data(&ck.run.data)?;
            (Trainer::from_checkpoint(&ck)?, train, test)
        }
        None => {
            let config = TrainConfig::load(&a.config)?;
            let kind = a.data.dataset.unwrap_or(DatasetKind::Synthetic);
            let mut run = RunSpec::new(a.arch.into(), a.acu == Toggle::On, a.data.source(kind)?);
            run.width = a.width;
            run.blocks_per_stage = a.blocks;
            run.log_interval = a.log_interval;
            run.augment &= !a.no_augment;
            let (train, test) = prepare_data(&run.data)?;
            (Trainer::for_data(run, config, &train)?, train, test)
        }
    };
    let until = a.stop_at.unwrap_or(trainer.config.total_iters).min(trainer.config.total_iters);
    let interval = trainer.run.log_interval;
    let outcome = loop {
        let logged = trainer.metrics.len();
        let next = ((trainer.iter / interval + 1) * interval).min(until);
        let r = trainer.train_until(&train, &test, next);
        for m in &trainer.metrics[logged..] {
            println!(
                "iter={} lr={} train_loss={} test_error={}",
                m.iter, m.lr, m.train_loss, m.test_error
            );
        }
        if r.is_err() || trainer.iter >= until {
            break r;
        }
    };
    trainer.to_checkpoint().save(&a.out.join("checkpoint.bin"))?;
    write(&a.out.join("metrics.csv"), &trainer.metrics_csv())?;
    if trainer.net.spec().acu_layer_count() > 0 {
        trainer.history.save_csv(&a.out.join("trajectory.csv"))?;
    }
    outcome?;
    if trainer.metrics.is_empty() {
        println!("iter={} (no metrics logged)", trainer.iter);
    }
    Ok(true)
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let source = match a.data.dataset {
        Some(kind) => a.data.source(kind)?,
        None => ck.run.data.clone(),
    };
    let (train, test) = prepare_data(&source)?;
    let data = match a.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    let trainer = Trainer::from_checkpoint(&ck)?;
    let [_, c, h, w] = data.images.shape();
    let spec = trainer.net.spec();
    if (c, (h, w)) != (spec.input_channels, spec.input_hw) || data.class_count > spec.classes {
        return Err(Error::ShapeMismatch(format!(
            "network expects {}x{}x{} inputs and {} classes, data has {c}x{h}x{w} and {}",
            spec.input_channels, spec.input_hw.0, spec.input_hw.1, spec.classes, data.class_count
        )));
    }
    println!("error={}", evaluate(&trainer.net, &data)?);
    Ok(true)
}

fn is_checkpoint(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut head = [0u8; 8];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    Ok(n == 8 && &head == MAGIC)
}

fn cmd_positions(a: PositionsArgs) -> Result<bool> {
    let from_ck = is_checkpoint(&a.input)?;
    let history = if from_ck {
        let trainer = Trainer::from_checkpoint(&Checkpoint::load(&a.input)?)?;
        if trainer.net.spec().acu_layer_count() == 0 {
            return Err(Error::InvalidConfig("checkpoint has no ACU layers".into()));
        }
        trainer.history
    } else {
        PositionTrajectory::load_csv(&a.input)?
    };
    if history.is_empty() {
        return Err(Error::InvalidConfig("no synapse positions recorded".into()));
    }
    let svg = a.svg.unwrap_or_else(|| a.input.with_extension("svg"));
    write(&svg, &history.to_svg())?;
    if from_ck {
        let csv = a.csv.unwrap_or_else(|| a.input.with_extension("trajectory.csv"));
        history.save_csv(&csv)?;
        println!("wrote {} and {}", svg.display(), csv.display());
    } else {
        println!("wrote {}", svg.display());
    }
    Ok(true)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let reports = if a.corrupt {
        vec![corrupted_acu_suite(0)?]
    } else {
        run_suite(match a.module {
            ModuleArg::Interp => Suite::Interp,
            ModuleArg::Conv => Suite::Conv,
            ModuleArg::Acu => Suite::Acu,
            ModuleArg::Network => Suite::Network,
        })?
    };
    for r in &reports {
        println!("{r}");
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn cmd_bench(a: BenchArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&a.shapes).map_err(|e| Error::io(&a.shapes, e))?;
    let rows = parse_shapes(&text)?
        .iter()
        .map(|s| bench_shape(s, a.reps, a.seed))
        .collect::<Result<Vec<_>>>()?;
    let csv = bench_csv(&rows);
    match &a.out {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(true)
}
