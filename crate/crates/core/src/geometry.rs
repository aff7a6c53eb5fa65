//! High-dimensional geometry: the hypersphere volume element, angular vs.
//! radial volume-reduction schedules, and Monte-Carlo experiments showing
//! concentration of measure.
//!
//! Uniform points on the sphere are drawn as normalised Gaussians. Every
//! simulator splits its samples into fixed-size chunks, each with its own
//! PRNG substream, so results are identical regardless of thread count.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypersphere::{cart_to_hypersph, norm};
use crate::rng::{Rng, Streams};
use crate::stats::{self, Histogram, Summary, DEFAULT_BINS};

const CHUNK: usize = 1024;

/// Density multiplying `dφ_1 ⋯ dφ_{n−1}` on the sphere of radius `radius`:
/// `R^{n−1} · Π_{k=1}^{n−2} sin^{n−1−k}(φ_k)`.
pub fn hypervolume_element(radius: f64, angles: &[f64]) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::domain(format!("radius must be > 0, got {radius}")));
    }
    if angles.is_empty() {
        return Err(Error::dim("need n >= 2 (at least one angle)"));
    }
    let n = angles.len() + 1;
    let mut v = radius.powi((n - 1) as i32);
    for (idx, &phi) in angles[..n - 2].iter().enumerate() {
        let k = idx + 1;
        v *= phi.sin().powi((n - 1 - k) as i32);
    }
    Ok(v)
}

/// Volume ratios `v_t / v_0` when shrinking the angular cube vs. the radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeCurve {
    pub dimension: usize,
    pub t: Vec<f64>,
    /// `(1 − t)^{n(n−1)/2}`
    pub angular: Vec<f64>,
    /// `(1 − t)^{n−1}`
    pub radial: Vec<f64>,
}

impl VolumeCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,angular_ratio,radial_ratio\n");
        for i in 0..self.t.len() {
            let _ = writeln!(s, "{},{},{}", self.t[i], self.angular[i], self.radial[i]);
        }
        s
    }
}

pub fn volume_reduction_curves(n: usize, t_grid: &[f64]) -> Result<VolumeCurve> {
    if n < 2 {
        return Err(Error::pre(format!("volume curves need n >= 2, got {n}")));
    }
    if let Some(t) = t_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::pre(format!("schedule value {t} outside [0, 1]")));
    }
    let angular_exp = (n * (n - 1) / 2) as f64;
    let radial_exp = (n - 1) as f64;
    Ok(VolumeCurve {
        dimension: n,
        t: t_grid.to_vec(),
        angular: t_grid.iter().map(|t| (1.0 - t).powf(angular_exp)).collect(),
        radial: t_grid.iter().map(|t| (1.0 - t).powf(radial_exp)).collect(),
    })
}

/// Lower bound on the uniform mass of the equatorial slice
/// `{z ∈ S^{n−1} : |⟨z, y⟩| ≤ ε/2}`: `1 − √(2π)·exp(−nε²/2)`, clamped at 0.
///
/// The constant is loose: for moderate `n·ε²` the bound can exceed the
/// mass actually measured by [`simulate_equatorial_mass`]. It is reliable
/// as a trend and in the large-`n` regime.
pub fn equatorial_slice_bound(n: usize, eps: f64) -> f64 {
    let b = 1.0 - (2.0 * PI).sqrt() * (-(n as f64) * eps * eps / 2.0).exp();
    b.max(0.0)
}

fn gaussian_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Runs `per_sample` over `samples` draws in deterministic chunks.
fn chunked<T: Send>(
    seed: u64,
    name: &str,
    samples: usize,
    per_sample: impl Fn(&mut Rng) -> T + Sync,
) -> Vec<T> {
    let streams = Streams::new(seed);
    let chunks = samples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = streams.replica(name, c as u64);
            let len = CHUNK.min(samples - c * CHUNK);
            (0..len).map(|_| per_sample(&mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormConcentration {
    pub dimension: usize,
    pub samples: usize,
    pub norms: Summary,
    /// `std / mean` of the norms: the shell thickness relative to its radius.
    pub relative_width: f64,
}

/// Norms of standard Gaussian vectors in `n` dimensions.
pub fn simulate_gaussian_norms(n: usize, samples: usize, seed: u64) -> Result<NormConcentration> {
    if samples < 2 {
        return Err(Error::pre("need at least two samples"));
    }
    if n == 0 {
        return Err(Error::pre("dimension must be >= 1"));
    }
    let norms = chunked(seed, "norms", samples, |rng| norm(&gaussian_vec(n, rng)));
    let summary = Summary::of(&norms);
    Ok(NormConcentration {
        dimension: n,
        samples,
        relative_width: summary.std / summary.mean,
        norms: summary,
    })
}

/// Raw norm samples, for tail-probability checks.
pub fn gaussian_norm_samples(n: usize, samples: usize, seed: u64) -> Vec<f64> {
    chunked(seed, "norms", samples, |rng| norm(&gaussian_vec(n, rng)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleConcentration {
    pub dimension: usize,
    pub pairs: usize,
    pub cosines: Summary,
    /// Angles in radians, `[0, π]`.
    pub angles: Summary,
}

/// Cosines and angles between independent Gaussian pairs.
pub fn simulate_pairwise_angles(n: usize, pairs: usize, seed: u64) -> Result<AngleConcentration> {
    if pairs < 1 {
        return Err(Error::pre("need at least one pair"));
    }
    if n == 0 {
        return Err(Error::pre("dimension must be >= 1"));
    }
    let cosines = chunked(seed, "pairs", pairs, |rng| {
        let a = gaussian_vec(n, rng);
        let b = gaussian_vec(n, rng);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        (dot / (norm(&a) * norm(&b))).clamp(-1.0, 1.0)
    });
    let angles: Vec<f64> = cosines.iter().map(|c| c.acos()).collect();
    Ok(AngleConcentration {
        dimension: n,
        pairs,
        cosines: Summary::of(&cosines),
        angles: Summary::of(&angles),
    })
}

/// Fraction of uniform sphere points `z` with `|⟨z, y⟩| ≤ ε/2` for a fixed
/// unit `y` drawn from the same seed.
pub fn simulate_equatorial_mass(n: usize, eps: f64, samples: usize, seed: u64) -> Result<f64> {
    if samples < 1 {
        return Err(Error::pre("need at least one sample"));
    }
    if n == 0 {
        return Err(Error::pre("dimension must be >= 1"));
    }
    let mut y = gaussian_vec(n, &mut Streams::new(seed).stream("slice-axis"));
    let ny = norm(&y);
    y.iter_mut().for_each(|v| *v /= ny);
    let half = eps / 2.0;
    let inside = chunked(seed, "slice", samples, |rng| {
        let z = gaussian_vec(n, rng);
        let dot: f64 = z.iter().zip(&y).map(|(a, b)| a * b).sum();
        (dot / norm(&z)).abs() <= half
    });
    Ok(inside.iter().filter(|&&b| b).count() as f64 / samples as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleProfile {
    /// 1-based angle index `k`.
    pub index: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Gaussian samples seen in hyperspherical coordinates, one histogram per
/// angle index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypersphericalProfile {
    pub dimension: usize,
    pub samples: usize,
    pub radius: Summary,
    pub per_angle: Vec<AngleProfile>,
    /// Mean over indices of the per-angle means.
    pub overall_mean: f64,
    /// Mean over indices of the per-angle standard deviations.
    pub overall_std: f64,
}

impl HypersphericalProfile {
    /// One row per (angle index, bin).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,mean,std,bin_center,mass\n");
        for a in &self.per_angle {
            for (b, m) in a.histogram.masses.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    a.index,
                    a.mean,
                    a.std,
                    a.histogram.bin_center(b),
                    m
                );
            }
        }
        s
    }
}

pub fn gaussian_hyperspherical_histograms(
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<HypersphericalProfile> {
    if n < 2 {
        return Err(Error::pre(format!("need n >= 2, got {n}")));
    }
    if samples < 2 {
        return Err(Error::pre("need at least two samples"));
    }
    let draws: Vec<(f64, Vec<f64>)> = chunked(seed, "hsph", samples, |rng| loop {
        // A zero Gaussian draw has probability zero, but never fail on it.
        if let Ok(v) = cart_to_hypersph(&gaussian_vec(n, rng)) {
            break v;
        }
    });
    let radii: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let mut per_angle = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let col: Vec<f64> = draws.iter().map(|d| d.1[k]).collect();
        let hi = if k == n - 2 { 2.0 * PI } else { PI };
        per_angle.push(AngleProfile {
            index: k + 1,
            mean: stats::mean(&col),
            std: stats::std_dev(&col),
            histogram: Histogram::with_range(&col, DEFAULT_BINS, 0.0, hi),
        });
    }
    let overall_mean = stats::mean(&per_angle.iter().map(|a| a.mean).collect::<Vec<_>>());
    let overall_std = stats::mean(&per_angle.iter().map(|a| a.std).collect::<Vec<_>>());
    Ok(HypersphericalProfile {
        dimension: n,
        samples,
        radius: Summary::of(&radii),
        per_angle,
        overall_mean,
        overall_std,
    })
}

/// Empirical vs. bounded mass of one equatorial slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMass {
    pub eps: f64,
    pub empirical: f64,
    pub bound: f64,
}

/// Everything measured for one dimension; absent parts were not requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub dimension: usize,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norms: Option<NormConcentration>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairwise: Option<AngleConcentration>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angles: Option<HypersphericalProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice: Option<SliceMass>,
}

impl ConcentrationReport {
    pub fn new(dimension: usize, samples: usize) -> Self {
        Self {
            dimension,
            samples,
            norms: None,
            pairwise: None,
            angles: None,
            slice: None,
        }
    }
}

/// `bin_center,mass` rows of a histogram.
pub fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("bin_center,mass,count\n");
    for (i, (m, c)) in h.masses.iter().zip(&h.counts).enumerate() {
        let _ = writeln!(s, "{},{},{}", h.bin_center(i), m, c);
    }
    s
}
