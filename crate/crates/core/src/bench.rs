//! Forward-pass timing of the matrix-product convolution against the ACU on
//! matching lattice shapes.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acu::{default_clamp_radius, AcuConfig, AcuLayer, PositionInit};
use crate::error::{Error, Result};
use crate::refconv::{conv2d_gemm, lattice_positions, ConvParams};
use crate::tensor::Tensor;

pub const BENCH_HEADER: &str = "c,d,k,h,w,n,reps,conv_median_ms,acu_median_ms,ratio";
pub const MIN_REPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub c: usize,
    pub d: usize,
    /// Synapse count; must be the square of an odd side.
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub n: usize,
}

impl BenchShape {
    pub fn side(&self) -> Result<usize> {
        let s = (self.k as f64).sqrt().round() as usize;
        if s * s != self.k || s % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "k={} is not the square of an odd side",
                self.k
            )));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub shape: BenchShape,
    pub reps: usize,
    pub conv_median_ms: f64,
    pub acu_median_ms: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.acu_median_ms / self.conv_median_ms
    }
}

/// Parses lines of `C,D,K,H,W[,N]`; `N` defaults to 1. Blank lines and `#`
/// comments are skipped.
pub fn parse_shapes(text: &str) -> Result<Vec<BenchShape>> {
    let mut shapes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::InvalidConfig(format!("shapes line {}: {line:?}", i + 1));
        let v = line
            .split(',')
            .map(|f| f.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if !(5..=6).contains(&v.len()) || v.iter().any(|&x| x == 0) {
            return Err(bad());
        }
        let shape = BenchShape {
            c: v[0],
            d: v[1],
            k: v[2],
            h: v[3],
            w: v[4],
            n: v.get(5).copied().unwrap_or(1),
        };
        shape.side()?;
        shapes.push(shape);
    }
    Ok(shapes)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 0 {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

fn time_ms<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

/// Times one inference forward of each operator over `reps` repetitions
/// after a warm-up call. Both use `side/2` zero padding and stride 1.
pub fn bench_shape(shape: &BenchShape, reps: usize, seed: u64) -> Result<BenchRow> {
    let s = shape.side()?;
    let reps = reps.max(MIN_REPS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |dims: [usize; 4]| -> Result<Tensor> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let x = random([shape.n, shape.c, shape.h, shape.w])?;
    let conv = ConvParams::new(
        random([shape.d, shape.c, s, s])?,
        vec![0.0; shape.d],
        1,
        s / 2,
        1,
    )?;
    let lattice = lattice_positions(s, s, 1)?;
    let config = AcuConfig::new(shape.c, shape.d, (shape.h, shape.w))
        .with_pad(s / 2)
        .with_clamp_radius(default_clamp_radius(shape.h, shape.w).max((s / 2) as f64));
    let acu = AcuLayer::new(
        config,
        &PositionInit::Custom(lattice.points().to_vec()),
        &mut ChaCha8Rng::seed_from_u64(seed ^ 1),
    )?;
    let conv_median_ms = time_ms(reps, || conv2d_gemm(&x, &conv).map(drop))?;
    let acu_median_ms = time_ms(reps, || acu.infer(&x).map(drop))?;
    Ok(BenchRow {
        shape: *shape,
        reps,
        conv_median_ms,
        acu_median_ms,
    })
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        let s = r.shape;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.4}",
            s.c,
            s.d,
            s.k,
            s.h,
            s.w,
            s.n,
            r.reps,
            r.conv_median_ms,
            r.acu_median_ms,
            r.ratio()
        );
    }
    out
}
