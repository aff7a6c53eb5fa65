//! Conversions between Cartesian and hyperspherical coordinates.
//!
//! In `n` dimensions a point is a radius `r` plus `n − 1` angles. The first
//! `n − 2` angles lie in `[0, π]`, the last one in `[0, 2π)`:
//!
//! ```text
//! x_1 = r cos φ_1
//! x_k = r sin φ_1 ⋯ sin φ_{k−1} cos φ_k        (1 < k < n)
//! x_n = r sin φ_1 ⋯ sin φ_{n−2} sin φ_{n−1}
//! ```
//!
//! The losses only need `cos φ_k = x_k / ‖x_{k..n}‖`, which is what
//! [`cart_to_cos_sph`] computes on the tape without any arccos. Note that
//! the cosine form cannot tell `x_n` from `−x_n`; only [`cart_to_hypersph`]
//! recovers the sign through the last angle.

use std::f64::consts::{PI, TAU};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Shift added under the square root of the suffix norms during training.
pub const DEFAULT_EPSILON: f64 = 0.001;

/// Differentiable batch transform `m×n → m×(n−1)` of angle cosines:
/// `out[l][k] = x[l][k] / sqrt(Σ_{j≥k} x[l][j]² + epsilon)`.
///
/// With `epsilon = 0` any vanishing suffix among the first `n − 1`
/// columns is a domain error rather than a silent zero.
pub fn cart_to_cos_sph(tape: &mut Tape, x: Var, epsilon: f64) -> Result<Var> {
    let (_, n) = tape.value(x).shape();
    if n < 2 {
        return Err(Error::dim(format!(
            "hyperspherical transform needs n >= 2, got {n}"
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let sq = tape.square(x)?;
    let suffix = tape.suffix_sum(sq)?;
    let head = tape.slice_cols(suffix, 0, n - 1)?;
    if epsilon == 0.0 && tape.value(head).data().contains(&0.0) {
        return Err(Error::domain(
            "zero suffix norm in hyperspherical transform with epsilon = 0",
        ));
    }
    let denom = tape.sqrt_shift(head, epsilon)?;
    let num = tape.slice_cols(x, 0, n - 1)?;
    tape.div(num, denom)
}

/// Non-differentiable convenience wrapper around [`cart_to_cos_sph`].
pub fn cos_sph(x: &DenseMatrix, epsilon: f64) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = cart_to_cos_sph(&mut tape, v, epsilon)?;
    Ok(tape.value(out).clone())
}

/// Radii and angle cosines of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HypersphericalBatch {
    /// `m × 1`, nonnegative.
    pub radius: DenseMatrix,
    /// `m × (n−1)`, each entry in `[−1, 1]`.
    pub cosines: DenseMatrix,
}

impl HypersphericalBatch {
    pub fn from_cartesian(x: &DenseMatrix, epsilon: f64) -> Result<Self> {
        let cosines = cos_sph(x, epsilon)?;
        for &c in cosines.data() {
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&c) {
                return Err(Error::domain(format!("cosine {c} outside [-1, 1]")));
            }
        }
        let cosines = cosines.map(|c| c.clamp(-1.0, 1.0));
        let radius = DenseMatrix::new(
            x.rows(),
            1,
            x.row_iter().map(norm).collect(),
        )?;
        Ok(Self { radius, cosines })
    }

    pub fn len(&self) -> usize {
        self.radius.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.radius.rows() == 0
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Full inverse transform, returning `(r, [φ_1, …, φ_{n−1}])`.
///
/// When the tail `x_{k..n}` is entirely zero, every angle from `φ_k` on is
/// set to 0 by convention; the reconstruction is unaffected because the
/// preceding sine factor is already zero.
pub fn cart_to_hypersph(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::dim(format!("need n >= 2, got {n}")));
    }
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::domain("zero vector has no hyperspherical angles"));
    }
    // tail[k] = ‖x_{k..n}‖, accumulated from the back.
    let mut tail = vec![0.0; n + 1];
    for k in (0..n).rev() {
        tail[k] = x[k].hypot(tail[k + 1]);
    }
    let mut angles = vec![0.0; n - 1];
    for k in 0..n - 1 {
        if tail[k] == 0.0 {
            break;
        }
        if k < n - 2 {
            // atan2(‖x_{k+1..}‖, x_k) = arccos(x_k / ‖x_{k..}‖), but stable near 0 and π.
            angles[k] = tail[k + 1].atan2(x[k]);
        } else {
            let a = x[n - 1].atan2(x[n - 2]);
            angles[k] = if a < 0.0 { a + TAU } else { a };
            if angles[k] >= TAU {
                angles[k] = 0.0;
            }
        }
    }
    Ok((r, angles))
}

/// Forward transform from `(r, angles)` to Cartesian coordinates.
pub fn hypersph_to_cart(r: f64, angles: &[f64]) -> Result<Vec<f64>> {
    if r < 0.0 || !r.is_finite() {
        return Err(Error::pre(format!("radius must be finite and >= 0, got {r}")));
    }
    if angles.is_empty() {
        return Err(Error::dim("need at least one angle"));
    }
    let last = angles.len() - 1;
    for (k, &a) in angles.iter().enumerate() {
        let ok = if k < last {
            (0.0..=PI).contains(&a)
        } else {
            (0.0..TAU).contains(&a)
        };
        if !ok {
            return Err(Error::pre(format!("angle {} = {a} out of range", k + 1)));
        }
    }
    let n = angles.len() + 1;
    let mut out = Vec::with_capacity(n);
    let mut sines = r;
    for &a in &angles[..last] {
        out.push(sines * a.cos());
        sines *= a.sin();
    }
    out.push(sines * angles[last].cos());
    out.push(sines * angles[last].sin());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Entrywise loop over the defining formula.
    fn cos_oracle(x: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len();
        (0..n - 1)
            .map(|k| {
                let mut s = 0.0;
                for v in &x[k..] {
                    s += v * v;
                }
                x[k] / (s + eps).sqrt()
            })
            .collect()
    }

    #[test]
    fn ones_direction_gives_inverse_sqrt() {
        let c = cos_sph(&DenseMatrix::row_vector(&[1.0, 1.0, 1.0]), 0.0).unwrap();
        assert!((c.get(0, 0) - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((c.get(0, 1) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn north_pole_with_shift() {
        for r in [0.5, 1.0, 7.0] {
            let mut v = vec![0.0; 6];
            v[0] = r;
            let c = cos_sph(&DenseMatrix::row_vector(&v), DEFAULT_EPSILON).unwrap();
            assert!((c.get(0, 0) - r / (r * r + 0.001f64).sqrt()).abs() < 1e-15);
            assert!(c.data()[1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Streams::new(5).stream("t");
        let rows: Vec<Vec<f64>> = (0..5).map(|_| gaussian(7, &mut rng)).collect();
        let x = DenseMatrix::from_rows(&rows).unwrap();
        for eps in [0.0, DEFAULT_EPSILON] {
            let c = cos_sph(&x, eps).unwrap();
            for (l, row) in rows.iter().enumerate() {
                for (k, want) in cos_oracle(row, eps).into_iter().enumerate() {
                    assert!((c.get(l, k) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let x = DenseMatrix::row_vector(&[1.0, 0.0, 0.0]);
        assert!(matches!(cos_sph(&x, 0.0), Err(Error::Domain(_))));
        assert!(cos_sph(&x, DEFAULT_EPSILON).is_ok());
        // The last column's suffix is never a denominator.
        assert!(cos_sph(&DenseMatrix::row_vector(&[1.0, 1.0, 0.0]), 0.0).is_ok());
        assert!(matches!(
            cos_sph(&DenseMatrix::row_vector(&[1.0]), 0.0),
            Err(Error::Dimension(_))
        ));
        assert!(cart_to_hypersph(&[0.0, 0.0]).is_err());
        assert!(cart_to_hypersph(&[1.0]).is_err());
    }

    #[test]
    fn two_dimensional_examples() {
        let (r, a) = cart_to_hypersph(&[0.0, 1.0]).unwrap();
        assert_eq!(r, 1.0);
        assert!((a[0] - PI / 2.0).abs() < 1e-15);
        let (_, a) = cart_to_hypersph(&[0.0, -1.0]).unwrap();
        assert!((a[0] - 1.5 * PI).abs() < 1e-15);

        let x = hypersph_to_cart(2.0, &[PI]).unwrap();
        assert!((x[0] + 2.0).abs() < 1e-15 && x[1].abs() < 1e-15);
        assert_eq!(hypersph_to_cart(1.0, &[0.0; 4]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_tail_convention() {
        let (r, a) = cart_to_hypersph(&[3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, 5.0);
        assert_eq!(&a[1..], &[0.0, 0.0]);
        let back = hypersph_to_cart(r, &a).unwrap();
        assert!((back[0] - 3.0).abs() < 1e-12 && (back[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_angles_rejected() {
        assert!(hypersph_to_cart(1.0, &[-0.1, 0.0]).is_err());
        assert!(hypersph_to_cart(1.0, &[4.0, 0.0]).is_err());
        assert!(hypersph_to_cart(1.0, &[1.0, TAU]).is_err());
        assert!(hypersph_to_cart(-1.0, &[1.0]).is_err());
    }

    #[test]
    fn unit_round_trip_six() {
        let mut rng = Streams::new(1).stream("t");
        let mut v = gaussian(6, &mut rng);
        let r = norm(&v);
        v.iter_mut().for_each(|x| *x /= r);
        let (r, a) = cart_to_hypersph(&v).unwrap();
        let back = hypersph_to_cart(r, &a).unwrap();
        for (x, y) in v.iter().zip(&back) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn hypersph_cosines_agree_with_batch_transform() {
        let mut rng = Streams::new(2).stream("t");
        for n in [2, 3, 9, 40] {
            let v = gaussian(n, &mut rng);
            let (_, a) = cart_to_hypersph(&v).unwrap();
            let c = cos_sph(&DenseMatrix::row_vector(&v), 0.0).unwrap();
            for (k, ak) in a.iter().enumerate() {
                assert!((ak.cos() - c.get(0, k)).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn norm_identity(r in 0.0f64..50.0, seed in any::<u64>()) {
            let mut rng = Streams::new(seed).stream("angles");
            let mut angles: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..PI)).collect();
            angles.push(rng.random_range(0.0..TAU));
            let x = hypersph_to_cart(r, &angles).unwrap();
            prop_assert!((norm(&x) - r).abs() < 1e-12 * r.max(1.0));
        }

        #[test]
        fn scale_equivariance(c in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = Streams::new(seed).stream("x");
            let v = gaussian(8, &mut rng);
            let x = DenseMatrix::row_vector(&v);
            let a = cos_sph(&x, 0.0).unwrap();
            let b = cos_sph(&x.map(|t| c * t), 0.0).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
