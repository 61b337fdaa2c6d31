//! Bilinear sampling at fractional offsets.
//!
//! The first offset (`alpha`) moves along the height axis and the second
//! (`beta`) along the width axis. Lattice points outside the feature map read
//! as zero. At an exact lattice point the sample belongs to the cell whose
//! lower corner is that point, so position derivatives there are the
//! one-sided derivatives toward the positive cell.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fractional decomposition of one synapse offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fraction {
    pub d_alpha: f64,
    pub d_beta: f64,
    pub floor_alpha: i64,
    pub floor_beta: i64,
}

/// The four lattice values around a fractional sample point plus the
/// fractional parts. `q12` is one step along width from `q11`, `q21` one step
/// along height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSample {
    pub q11: f64,
    pub q12: f64,
    pub q21: f64,
    pub q22: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

pub fn fractional_parts(alpha: f64, beta: f64) -> Result<Fraction> {
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::NonFinite(format!("offset ({alpha}, {beta})")));
    }
    let fa = alpha.floor();
    let fb = beta.floor();
    Ok(Fraction {
        d_alpha: alpha - fa,
        d_beta: beta - fb,
        floor_alpha: fa as i64,
        floor_beta: fb as i64,
    })
}

/// Corner weights `(w11, w12, w21, w22)`; they always sum to one.
#[inline]
pub fn corner_weights(d_alpha: f64, d_beta: f64) -> (f64, f64, f64, f64) {
    (
        (1.0 - d_alpha) * (1.0 - d_beta),
        (1.0 - d_alpha) * d_beta,
        d_alpha * (1.0 - d_beta),
        d_alpha * d_beta,
    )
}

/// Reads the corners around `(m + alpha, nn + beta)` in plane `(n, c)` of `x`.
///
/// `(m, nn)` is the base position already expressed in input coordinates.
pub fn gather_corners(
    x: &Tensor,
    n: usize,
    c: usize,
    m: i64,
    nn: i64,
    alpha: f64,
    beta: f64,
) -> Result<CornerSample> {
    let [sn, sc, _, _] = x.shape();
    if n >= sn || c >= sc {
        return Err(Error::IndexOutOfRange {
            index: [n, c, 0, 0],
            shape: x.shape(),
        });
    }
    let f = fractional_parts(alpha, beta)?;
    let r1 = m + f.floor_alpha;
    let c1 = nn + f.floor_beta;
    Ok(CornerSample {
        q11: x.get_or_zero(n, c, r1, c1),
        q12: x.get_or_zero(n, c, r1, c1 + 1),
        q21: x.get_or_zero(n, c, r1 + 1, c1),
        q22: x.get_or_zero(n, c, r1 + 1, c1 + 1),
        d_alpha: f.d_alpha,
        d_beta: f.d_beta,
    })
}

#[inline]
pub fn bilerp(s: &CornerSample) -> f64 {
    let (w11, w12, w21, w22) = corner_weights(s.d_alpha, s.d_beta);
    s.q11 * w11 + s.q21 * w21 + s.q12 * w12 + s.q22 * w22
}

/// Derivatives of [`bilerp`] with respect to the two offsets.
#[inline]
pub fn bilerp_position_partials(s: &CornerSample) -> (f64, f64) {
    let d_alpha = (1.0 - s.d_beta) * (s.q21 - s.q11) + s.d_beta * (s.q22 - s.q12);
    let d_beta = (1.0 - s.d_alpha) * (s.q12 - s.q11) + s.d_alpha * (s.q22 - s.q21);
    (d_alpha, d_beta)
}

/// Bilinear value of a plane at `(row, col)`, zero outside.
pub fn sample_plane(plane: &[f64], height: usize, width: usize, row: f64, col: f64) -> f64 {
    let fr = row.floor();
    let fc = col.floor();
    let (r, c) = (fr as i64, fc as i64);
    let at = |i: i64, j: i64| {
        if i < 0 || j < 0 || i as usize >= height || j as usize >= width {
            0.0
        } else {
            plane[i as usize * width + j as usize]
        }
    };
    bilerp(&CornerSample {
        q11: at(r, c),
        q12: at(r, c + 1),
        q21: at(r + 1, c),
        q22: at(r + 1, c + 1),
        d_alpha: row - fr,
        d_beta: col - fc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(q: [f64; 4], d: (f64, f64)) -> CornerSample {
        CornerSample {
            q11: q[0],
            q12: q[1],
            q21: q[2],
            q22: q[3],
            d_alpha: d.0,
            d_beta: d.1,
        }
    }

    fn x22() -> Tensor {
        Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn floors_toward_negative_infinity() {
        let f = fractional_parts(1.25, -0.75).unwrap();
        assert_eq!((f.d_alpha, f.d_beta, f.floor_alpha, f.floor_beta), (0.25, 0.25, 1, -1));
        let f = fractional_parts(2.0, 3.0).unwrap();
        assert_eq!((f.d_alpha, f.d_beta, f.floor_alpha, f.floor_beta), (0.0, 0.0, 2, 3));
        let f = fractional_parts(-0.1, 0.9).unwrap();
        assert!((f.d_alpha - 0.9).abs() < 1e-15 && (f.d_beta - 0.9).abs() < 1e-15);
        assert_eq!((f.floor_alpha, f.floor_beta), (-1, 0));
    }

    #[test]
    fn non_finite_offset_rejected() {
        assert!(fractional_parts(f64::NAN, 0.0).is_err());
        assert!(fractional_parts(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn gather_at_origin() {
        let s = gather_corners(&x22(), 0, 0, 0, 0, 0.0, 0.0).unwrap();
        assert_eq!((s.q11, s.q12, s.q21, s.q22), (0.0, 1.0, 2.0, 3.0));
        assert_eq!((s.d_alpha, s.d_beta), (0.0, 0.0));
    }

    #[test]
    fn gather_zero_extends() {
        let s = gather_corners(&x22(), 0, 0, 0, 0, 1.5, 0.0).unwrap();
        assert_eq!((s.q11, s.q12, s.q21, s.q22), (2.0, 3.0, 0.0, 0.0));
        assert_eq!(s.d_alpha, 0.5);
    }

    #[test]
    fn gather_negative_offsets() {
        // base (1,1), offset (-0.5,-0.5): floor -1 on both axes, so the cell is
        // rows 0..1, cols 0..1.
        let s = gather_corners(&x22(), 0, 0, 1, 1, -0.5, -0.5).unwrap();
        assert_eq!((s.q11, s.q12, s.q21, s.q22), (0.0, 1.0, 2.0, 3.0));
        assert_eq!((s.d_alpha, s.d_beta), (0.5, 0.5));
    }

    #[test]
    fn bilerp_examples() {
        assert_eq!(bilerp(&sample([0.0, 1.0, 2.0, 3.0], (0.0, 0.0))), 0.0);
        assert_eq!(bilerp(&sample([0.0, 1.0, 2.0, 3.0], (0.5, 0.5))), 1.5);
        // scalar expansion: 1·.75·.25 + 4·.25·.25 + 2·.75·.75 + 8·.25·.75
        let brute = 1.0 * 0.75 * 0.25 + 4.0 * 0.25 * 0.25 + 2.0 * 0.75 * 0.75 + 8.0 * 0.25 * 0.75;
        assert_eq!(brute, 3.0625);
        assert!((bilerp(&sample([1.0, 2.0, 4.0, 8.0], (0.25, 0.75))) - 3.0625).abs() < 1e-15);
    }

    #[test]
    fn partials_examples() {
        assert_eq!(bilerp_position_partials(&sample([0.0, 0.0, 1.0, 1.0], (0.3, 0.0))), (1.0, 0.0));
        assert_eq!(bilerp_position_partials(&sample([5.0; 4], (0.7, 0.2))), (0.0, 0.0));
        let (da, db) = bilerp_position_partials(&sample([1.0, 2.0, 4.0, 8.0], (0.25, 0.75)));
        assert!((da - 5.25).abs() < 1e-15 && (db - 1.75).abs() < 1e-15);
        // central differences inside the unit cell
        let f = |a: f64, b: f64| bilerp(&sample([1.0, 2.0, 4.0, 8.0], (a, b)));
        let h = 1e-6;
        let na = (f(0.25 + h, 0.75) - f(0.25 - h, 0.75)) / (2.0 * h);
        let nb = (f(0.25, 0.75 + h) - f(0.25, 0.75 - h)) / (2.0 * h);
        assert!((na - da).abs() < 1e-6 && (nb - db).abs() < 1e-6);
    }

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn continuous_across_lattice_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane = random_plane(&mut rng, 5, 5);
        for r in 0..5 {
            for c in 0..5 {
                let exact = plane[r * 5 + c];
                let (rf, cf) = (r as f64, c as f64);
                assert_eq!(sample_plane(&plane, 5, 5, rf, cf), exact);
                for eps in [1e-3, 1e-6, 1e-10] {
                    for (sr, sc) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                        let v = sample_plane(&plane, 5, 5, rf + sr * eps, cf + sc * eps);
                        assert!((v - exact).abs() < 4.0 * eps + 1e-9, "{r},{c} {eps}");
                    }
                }
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let (w11, w12, w21, w22) = corner_weights(a, b);
            assert!((w11 + w12 + w21 + w22 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..1000 {
            let q = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            let a = rng.random_range(0.01..0.99);
            let b = rng.random_range(0.01..0.99);
            let f = |a: f64, b: f64| bilerp(&sample(q, (a, b)));
            let (da, db) = bilerp_position_partials(&sample(q, (a, b)));
            let na = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
            let nb = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
            let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
            assert!(rel(da, na) < 1e-6, "{da} vs {na}");
            assert!(rel(db, nb) < 1e-6, "{db} vs {nb}");
        }
    }
}
