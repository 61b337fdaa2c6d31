//! Conventional and dilated 2-D convolution, written as direct loops.
//!
//! This is the reference the active convolution must reproduce when its
//! synapses sit on integer positions. Kernel taps are centred: a `k × k`
//! kernel covers offsets `-(k-1)/2 ..= (k-1)/2`, scaled by the dilation.

use rayon::prelude::*;

use crate::acu::{Synapse, SynapsePositions};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `out_ch × in_ch × kh × kw`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGradients {
    pub d_weights: Tensor,
    pub d_bias: Vec<f64>,
    pub d_input: Tensor,
}

impl ConvParams {
    pub fn new(
        weights: Tensor,
        bias: Vec<f64>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Self> {
        let [d, _, kh, kw] = weights.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel {kh}x{kw} must have odd sides"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidConfig("stride and dilation must be positive".into()));
        }
        if bias.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries for {d} output channels",
                bias.len()
            )));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            pad,
            dilation,
        })
    }

    /// Stride-1 convolution with "same" padding for the given dilation.
    pub fn same(weights: Tensor, bias: Vec<f64>, dilation: usize) -> Result<Self> {
        let kh = weights.shape()[2];
        Self::new(weights, bias, 1, (kh - 1) / 2 * dilation, dilation)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        let [d, ci, kh, kw] = self.weights.shape();
        if c != ci {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, kernel expects {ci}"
            )));
        }
        let eff_h = self.dilation * (kh - 1) + 1;
        let eff_w = self.dilation * (kw - 1) + 1;
        if h + 2 * self.pad < eff_h || w + 2 * self.pad < eff_w {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} with pad {} is smaller than kernel extent {eff_h}x{eff_w}",
                self.pad
            )));
        }
        Ok([
            n,
            d,
            (h + 2 * self.pad - eff_h) / self.stride + 1,
            (w + 2 * self.pad - eff_w) / self.stride + 1,
        ])
    }
}

/// Output columns `q` for which `q·stride + shift` lands in `0..len`.
#[inline]
fn valid_range(shift: i64, stride: usize, out_len: usize, len: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let hi = if (len as i64) <= shift {
        0
    } else {
        ((len as i64 - 1 - shift) / s + 1).min(out_len as i64)
    };
    (lo.max(0) as usize, hi.max(lo) as usize)
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out_shape = p.output_shape(x.shape())?;
    let [_, c_in, h, w] = x.shape();
    let [_, d_out, oh, ow] = out_shape;
    let [_, _, kh, kw] = p.weights.shape();
    let mut y = Tensor::zeros(out_shape)?;
    let out_sample = d_out * oh * ow;
    if out_sample == 0 {
        return Ok(y);
    }
    let wdata = p.weights.data();
    y.data_mut()
        .par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(n, ys)| {
            for d in 0..d_out {
                let yp = &mut ys[d * oh * ow..(d + 1) * oh * ow];
                yp.fill(p.bias[d]);
                for c in 0..c_in {
                    let xp = x.plane(n, c);
                    for i in 0..kh {
                        let row_shift = (i * p.dilation) as i64 - p.pad as i64;
                        let (m_lo, m_hi) = valid_range(row_shift, p.stride, oh, h);
                        for j in 0..kw {
                            let wv = wdata[((d * c_in + c) * kh + i) * kw + j];
                            let col_shift = (j * p.dilation) as i64 - p.pad as i64;
                            let (q_lo, q_hi) = valid_range(col_shift, p.stride, ow, w);
                            for m in m_lo..m_hi {
                                let r = (m * p.stride) as i64 + row_shift;
                                let xrow = &xp[r as usize * w..(r as usize + 1) * w];
                                let yrow = &mut yp[m * ow..(m + 1) * ow];
                                for q in q_lo..q_hi {
                                    let col = (q * p.stride) as i64 + col_shift;
                                    yrow[q] += wv * xrow[col as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    y.ensure_finite("conv2d output")?;
    Ok(y)
}

pub fn conv2d_backward(x: &Tensor, p: &ConvParams, dy: &Tensor) -> Result<ConvGradients> {
    let out_shape = p.output_shape(x.shape())?;
    if dy.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?}, expected {out_shape:?}",
            dy.shape()
        )));
    }
    let [n_batch, c_in, h, w] = x.shape();
    let [_, d_out, oh, ow] = out_shape;
    let [_, _, kh, kw] = p.weights.shape();
    let wdata = p.weights.data();
    let wlen = wdata.len();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n_batch)
        .into_par_iter()
        .map(|n| {
            let mut dx = vec![0.0; c_in * h * w];
            let mut dw = vec![0.0; wlen];
            for d in 0..d_out {
                let g = dy.plane(n, d);
                for c in 0..c_in {
                    let xp = x.plane(n, c);
                    let dxp = &mut dx[c * h * w..(c + 1) * h * w];
                    for i in 0..kh {
                        let row_shift = (i * p.dilation) as i64 - p.pad as i64;
                        let (m_lo, m_hi) = valid_range(row_shift, p.stride, oh, h);
                        for j in 0..kw {
                            let widx = ((d * c_in + c) * kh + i) * kw + j;
                            let wv = wdata[widx];
                            let col_shift = (j * p.dilation) as i64 - p.pad as i64;
                            let (q_lo, q_hi) = valid_range(col_shift, p.stride, ow, w);
                            let mut acc = 0.0;
                            for m in m_lo..m_hi {
                                let r = ((m * p.stride) as i64 + row_shift) as usize;
                                for q in q_lo..q_hi {
                                    let col = ((q * p.stride) as i64 + col_shift) as usize;
                                    let gv = g[m * ow + q];
                                    acc += gv * xp[r * w + col];
                                    dxp[r * w + col] += gv * wv;
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut d_input = Tensor::zeros(x.shape())?;
    let mut d_weights = p.weights.zeros_like();
    let sample = c_in * h * w;
    for (n, (dx, dw)) in per_sample.into_iter().enumerate() {
        d_input.data_mut()[n * sample..(n + 1) * sample].copy_from_slice(&dx);
        for (a, b) in d_weights.data_mut().iter_mut().zip(&dw) {
            *a += b;
        }
    }
    let mut d_bias = vec![0.0; d_out];
    for n in 0..n_batch {
        for (d, db) in d_bias.iter_mut().enumerate() {
            *db += dy.plane(n, d).iter().sum::<f64>();
        }
    }
    Ok(ConvGradients {
        d_weights,
        d_bias,
        d_input,
    })
}

/// Unrolls sample `n` into `C·kh·kw` rows, one output plane each.
fn im2col(x: &Tensor, n: usize, p: &ConvParams, out_hw: (usize, usize), cols: &mut [f64]) {
    let [_, c_in, h, w] = x.shape();
    let [_, _, kh, kw] = p.weights.shape();
    let (oh, ow) = out_hw;
    let plane = oh * ow;
    for c in 0..c_in {
        let xp = x.plane(n, c);
        for i in 0..kh {
            let row_shift = (i * p.dilation) as i64 - p.pad as i64;
            let (m_lo, m_hi) = valid_range(row_shift, p.stride, oh, h);
            for j in 0..kw {
                let col_shift = (j * p.dilation) as i64 - p.pad as i64;
                let (q_lo, q_hi) = valid_range(col_shift, p.stride, ow, w);
                let base = ((c * kh + i) * kw + j) * plane;
                let dst = &mut cols[base..base + plane];
                dst.fill(0.0);
                for m in m_lo..m_hi {
                    let r = ((m * p.stride) as i64 + row_shift) as usize;
                    for q in q_lo..q_hi {
                        let col = ((q * p.stride) as i64 + col_shift) as usize;
                        dst[m * ow + q] = xp[r * w + col];
                    }
                }
            }
        }
    }
}

/// Adds the rows of `cols` back onto the input positions they were read from.
fn col2im(dcols: &[f64], p: &ConvParams, in_hw: (usize, usize), out_hw: (usize, usize), dx: &mut [f64]) {
    let [_, c_in, kh, kw] = p.weights.shape();
    let (h, w) = in_hw;
    let (oh, ow) = out_hw;
    let plane = oh * ow;
    for c in 0..c_in {
        let dxp = &mut dx[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            let row_shift = (i * p.dilation) as i64 - p.pad as i64;
            let (m_lo, m_hi) = valid_range(row_shift, p.stride, oh, h);
            for j in 0..kw {
                let col_shift = (j * p.dilation) as i64 - p.pad as i64;
                let (q_lo, q_hi) = valid_range(col_shift, p.stride, ow, w);
                let base = ((c * kh + i) * kw + j) * plane;
                let src = &dcols[base..base + plane];
                for m in m_lo..m_hi {
                    let r = ((m * p.stride) as i64 + row_shift) as usize;
                    for q in q_lo..q_hi {
                        let col = ((q * p.stride) as i64 + col_shift) as usize;
                        dxp[r * w + col] += src[m * ow + q];
                    }
                }
            }
        }
    }
}

/// [`conv2d`] computed as an unrolled matrix product. Agrees with the direct
/// loop up to summation order.
pub fn conv2d_gemm(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out_shape = p.output_shape(x.shape())?;
    let [_, c_in, _, _] = x.shape();
    let [_, d_out, oh, ow] = out_shape;
    let [_, _, kh, kw] = p.weights.shape();
    let plane = oh * ow;
    let ck = c_in * kh * kw;
    let mut y = Tensor::zeros(out_shape)?;
    if plane == 0 {
        return Ok(y);
    }
    y.data_mut()
        .par_chunks_mut(d_out * plane)
        .enumerate()
        .for_each(|(n, ys)| {
            for d in 0..d_out {
                ys[d * plane..(d + 1) * plane].fill(p.bias[d]);
            }
            let mut cols = vec![0.0; ck * plane];
            im2col(x, n, p, (oh, ow), &mut cols);
            linalg::gemm_nn_acc(ys, p.weights.data(), &cols, d_out, ck, plane);
        });
    y.ensure_finite("conv2d output")?;
    Ok(y)
}

/// Gradients of [`conv2d_gemm`].
pub fn conv2d_gemm_backward(x: &Tensor, p: &ConvParams, dy: &Tensor) -> Result<ConvGradients> {
    let out_shape = p.output_shape(x.shape())?;
    if dy.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?}, expected {out_shape:?}",
            dy.shape()
        )));
    }
    let [n_batch, c_in, h, w] = x.shape();
    let [_, d_out, oh, ow] = out_shape;
    let [_, _, kh, kw] = p.weights.shape();
    let plane = oh * ow;
    let ck = c_in * kh * kw;
    let wlen = p.weights.len();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n_batch)
        .into_par_iter()
        .map(|n| {
            let mut dx = vec![0.0; c_in * h * w];
            let mut dw = vec![0.0; wlen];
            if plane == 0 {
                return (dx, dw);
            }
            let dys = &dy.data()[n * d_out * plane..(n + 1) * d_out * plane];
            let mut cols = vec![0.0; ck * plane];
            im2col(x, n, p, (oh, ow), &mut cols);
            linalg::gemm_nt_acc(&mut dw, dys, &cols, d_out, plane, ck);
            linalg::gemm_tn(&mut cols, p.weights.data(), dys, d_out, ck, plane);
            col2im(&cols, p, (h, w), (oh, ow), &mut dx);
            (dx, dw)
        })
        .collect();

    let mut d_input = Tensor::zeros(x.shape())?;
    let mut d_weights = p.weights.zeros_like();
    let sample = c_in * h * w;
    for (n, (dx, dw)) in per_sample.into_iter().enumerate() {
        d_input.data_mut()[n * sample..(n + 1) * sample].copy_from_slice(&dx);
        for (a, b) in d_weights.data_mut().iter_mut().zip(&dw) {
            *a += b;
        }
    }
    let mut d_bias = vec![0.0; d_out];
    for n in 0..n_batch {
        for (d, db) in d_bias.iter_mut().enumerate() {
            *db += dy.plane(n, d).iter().sum::<f64>();
        }
    }
    Ok(ConvGradients {
        d_weights,
        d_bias,
        d_input,
    })
}

/// Integer synapse positions of a `kh × kw` kernel with the given dilation.
///
/// Index 0 is the origin; the remaining taps follow row-major grid order.
pub fn lattice_positions(kh: usize, kw: usize, dilation: usize) -> Result<SynapsePositions> {
    if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
        return Err(Error::InvalidConfig(format!(
            "kernel {kh}x{kw} must have odd sides"
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidConfig("dilation must be positive".into()));
    }
    let (hh, hw) = ((kh / 2) as i64, (kw / 2) as i64);
    let d = dilation as f64;
    let mut points = vec![Synapse::new(0.0, 0.0)];
    for i in -hh..=hh {
        for j in -hw..=hw {
            if i != 0 || j != 0 {
                points.push(Synapse::new(i as f64 * d, j as f64 * d));
            }
        }
    }
    SynapsePositions::new(points, true)
}

/// Index of synapse `(i, j)` (grid offsets, undilated) within
/// [`lattice_positions`] order.
pub fn lattice_index(kh: usize, kw: usize, i: i64, j: i64) -> usize {
    if i == 0 && j == 0 {
        return 0;
    }
    let (hh, hw) = ((kh / 2) as i64, (kw / 2) as i64);
    let row_major = ((i + hh) * kw as i64 + (j + hw)) as usize;
    let origin = (hh * kw as i64 + hw) as usize;
    if row_major < origin {
        row_major + 1
    } else {
        row_major
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 4, 5], &mut rng);
        let p = ConvParams::new(Tensor::new([1, 1, 1, 1], 1.0).unwrap(), vec![0.0], 1, 0, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhood() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = ConvParams::new(Tensor::new([1, 1, 3, 3], 1.0).unwrap(), vec![0.0], 1, 1, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[6.0; 4]);
    }

    /// Expands a dilated kernel into the equivalent dense kernel with zeros.
    fn inflate(w: &Tensor, dilation: usize) -> Tensor {
        let [d, c, kh, kw] = w.shape();
        let (eh, ew) = (dilation * (kh - 1) + 1, dilation * (kw - 1) + 1);
        let mut out = Tensor::zeros([d, c, eh, ew]).unwrap();
        for a in 0..d {
            for b in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        out.set(a, b, i * dilation, j * dilation, w.index(a, b, i, j).unwrap())
                            .unwrap();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dilation_matches_inflated_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ramp = Tensor::from_vec([1, 1, 5, 5], (0..25).map(f64::from).collect()).unwrap();
        let w = random([1, 1, 3, 3], &mut rng);
        let dil = ConvParams::new(w.clone(), vec![0.5], 1, 2, 2).unwrap();
        let dense = ConvParams::new(inflate(&w, 2), vec![0.5], 1, 2, 1).unwrap();
        let a = conv2d(&ramp, &dil).unwrap();
        let b = conv2d(&ramp, &dense).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);

        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let dilation = 1 + (seed as usize % 3);
            let stride = 1 + (seed as usize % 2);
            let x = random([2, 2, 7, 6], &mut rng);
            let w = random([3, 2, 3, 3], &mut rng);
            let bias = vec![0.1, -0.2, 0.3];
            let pad = dilation;
            let dil = ConvParams::new(w.clone(), bias.clone(), stride, pad, dilation).unwrap();
            let dense = ConvParams::new(inflate(&w, dilation), bias, stride, pad, 1).unwrap();
            let a = conv2d(&x, &dil).unwrap();
            let b = conv2d(&x, &dense).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = random([2, 3, 6, 6], &mut rng);
        let x2 = random([2, 3, 6, 6], &mut rng);
        let w = random([2, 3, 3, 3], &mut rng);
        let p = ConvParams::new(w, vec![0.0, 0.0], 2, 1, 1).unwrap();
        let a = 1.7;
        let lhs = conv2d(&x1.scale(a).add(&x2).unwrap(), &p).unwrap();
        let rhs = conv2d(&x1, &p).unwrap().scale(a).add(&conv2d(&x2, &p).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn output_shape_rule() {
        let p = ConvParams::new(Tensor::zeros([4, 3, 3, 3]).unwrap(), vec![0.0; 4], 2, 1, 1).unwrap();
        assert_eq!(p.output_shape([1, 3, 32, 32]).unwrap(), [1, 4, 16, 16]);
        assert!(p.output_shape([1, 2, 32, 32]).is_err());
        assert!(ConvParams::new(Tensor::zeros([1, 1, 2, 3]).unwrap(), vec![0.0], 1, 0, 1).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random([2, 2, 5, 5], &mut rng);
        let w = random([2, 2, 3, 3], &mut rng);
        let p = ConvParams::new(w, vec![0.1, -0.1], 2, 2, 2).unwrap();
        let y = conv2d(&x, &p).unwrap();
        // loss = ½Σy², so dy = y
        let g = conv2d_backward(&x, &p, &y).unwrap();
        let loss = |x: &Tensor, p: &ConvParams| {
            conv2d(x, p).unwrap().data().iter().map(|v| 0.5 * v * v).sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            let a = g.d_input.data()[i];
            assert!((num - a).abs() <= 1e-6 * a.abs().max(1.0), "dx[{i}] {a} vs {num}");
        }
        for i in 0..p.weights.len() {
            let mut pp = p.clone();
            pp.weights.data_mut()[i] += h;
            let mut pm = p.clone();
            pm.weights.data_mut()[i] -= h;
            let num = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            let a = g.d_weights.data()[i];
            assert!((num - a).abs() <= 1e-6 * a.abs().max(1.0), "dw[{i}] {a} vs {num}");
        }
        let sum_y: Vec<f64> = (0..2)
            .map(|d| (0..2).map(|n| y.plane(n, d).iter().sum::<f64>()).sum())
            .collect();
        for d in 0..2 {
            assert!((g.d_bias[d] - sum_y[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_positions_order() {
        let p = lattice_positions(3, 3, 1).unwrap();
        let pts: Vec<(f64, f64)> = p.points().iter().map(|s| (s.alpha, s.beta)).collect();
        assert_eq!(
            pts,
            vec![
                (0.0, 0.0),
                (-1.0, -1.0),
                (-1.0, 0.0),
                (-1.0, 1.0),
                (0.0, -1.0),
                (0.0, 1.0),
                (1.0, -1.0),
                (1.0, 0.0),
                (1.0, 1.0)
            ]
        );
        assert_eq!(lattice_positions(1, 1, 1).unwrap().points(), &[Synapse::new(0.0, 0.0)]);
        let d2 = lattice_positions(3, 3, 2).unwrap();
        assert!(d2.points().contains(&Synapse::new(-2.0, -2.0)));
        assert!(d2.points().contains(&Synapse::new(0.0, 2.0)));
        assert!(lattice_positions(2, 3, 1).is_err());
        for i in -1..=1 {
            for j in -1..=1 {
                let k = lattice_index(3, 3, i, j);
                assert_eq!(p.points()[k], Synapse::new(i as f64, j as f64));
            }
        }
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad, dil, k) in [(1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (1, 0, 1, 1), (2, 0, 1, 1)] {
            let x = random([2, 3, 7, 6], &mut rng);
            let p = ConvParams::new(random([4, 3, k, k], &mut rng), vec![0.3, -0.1, 0.0, 0.7], stride, pad, dil).unwrap();
            let a = conv2d(&x, &p).unwrap();
            let b = conv2d_gemm(&x, &p).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
            let dy = random(a.shape(), &mut rng);
            let ga = conv2d_backward(&x, &p, &dy).unwrap();
            let gb = conv2d_gemm_backward(&x, &p, &dy).unwrap();
            for (u, v) in ga.d_weights.data().iter().zip(gb.d_weights.data()) {
                assert!((u - v).abs() < 1e-12);
            }
            for (u, v) in ga.d_input.data().iter().zip(gb.d_input.data()) {
                assert!((u - v).abs() < 1e-12);
            }
            assert_eq!(ga.d_bias, gb.d_bias);
        }
    }
}
