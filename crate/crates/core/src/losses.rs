//! KLD objectives: the Cartesian closed forms and the batch-statistics
//! hyperspherical objective with compression priors.
//!
//! The hyperspherical objective works on batch statistics of the angle
//! cosines and radii of both `μ` and `σ`. For each angle index `k`:
//!
//! ```text
//! α_{σ,k}(E_b[cos φ_k^σ] − a_{σ,k})² + β_{σ,k}(σ_b[cos φ_k^σ] − b_{σ,k})²
//! + α_{μ,k}(E_b[cos φ_k^μ] − a_{μ,k})² + β_{μ,k}(σ_b[cos φ_k^μ] − b_{μ,k})²
//! ```
//!
//! and the same four terms on the radii `r^σ`, `r^μ`. `E_b` and `σ_b` are
//! the batch mean and population standard deviation. Compressed indices
//! use the north-pole prior `a_{μ,k} = 1`; per-index gains are the base
//! gains scaled by `1/√(k+1)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hypersphere::{cart_to_cos_sph, DEFAULT_EPSILON};
use crate::matrix::DenseMatrix;

pub const SPEC_VERSION: u32 = 1;

/// Which objective regularises the latent posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Batch statistics of hyperspherical cosines and radii.
    #[default]
    Hyperspherical,
    /// The textbook per-sample KLD against `N(0, I)`.
    Cartesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionPreset {
    /// Every angle.
    All,
    /// Only `φ_1` (the von Mises-Fisher sub-case).
    Vmf,
    /// No angle.
    None,
}

/// Set of angle indices pulled to the north pole.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Compression {
    Preset(CompressionPreset),
    /// Explicit 1-based angle indices.
    Indices(Vec<usize>),
}

impl Default for Compression {
    fn default() -> Self {
        Compression::Preset(CompressionPreset::All)
    }
}

impl Compression {
    /// `mask[k − 1]` is true when angle `k` is compressed.
    pub fn mask(&self, latent_dim: usize) -> Vec<bool> {
        let angles = latent_dim.saturating_sub(1);
        match self {
            Compression::Preset(CompressionPreset::All) => vec![true; angles],
            Compression::Preset(CompressionPreset::None) => vec![false; angles],
            Compression::Preset(CompressionPreset::Vmf) => {
                (0..angles).map(|k| k == 0).collect()
            }
            Compression::Indices(idx) => (1..=angles).map(|k| idx.contains(&k)).collect(),
        }
    }
}

/// A prior or gain given once for every angle index, or per index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAngle {
    Uniform(f64),
    PerIndex(Vec<f64>),
}

impl PerAngle {
    fn expand(&self, angles: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            PerAngle::Uniform(v) => Ok(vec![*v; angles]),
            PerAngle::PerIndex(v) if v.len() == angles => Ok(v.clone()),
            PerAngle::PerIndex(v) => Err(Error::config(
                field,
                format!("expected {angles} per-angle values, got {}", v.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnglePriors {
    /// Batch-mean cosine targets for `μ`. Defaults to 1 on compressed
    /// indices and 0 (the equator) elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_mu: Option<PerAngle>,
    #[serde(default = "zero_angle")]
    pub a_sigma: PerAngle,
    #[serde(default = "small_angle")]
    pub b_mu: PerAngle,
    #[serde(default = "small_angle")]
    pub b_sigma: PerAngle,
    /// Factor applied to `α_{μ,k}`, `β_{μ,k}` on uncompressed indices.
    #[serde(default = "uncompressed_gain")]
    pub uncompressed_gain: f64,
}

impl Default for AnglePriors {
    fn default() -> Self {
        Self {
            a_mu: None,
            a_sigma: zero_angle(),
            b_mu: small_angle(),
            b_sigma: small_angle(),
            uncompressed_gain: uncompressed_gain(),
        }
    }
}

fn zero_angle() -> PerAngle {
    PerAngle::Uniform(0.0)
}

fn small_angle() -> PerAngle {
    PerAngle::Uniform(0.05)
}

fn uncompressed_gain() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialPriors {
    /// Defaults to `√n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_mu: Option<f64>,
    /// Defaults to `0.1·√n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_sigma: Option<f64>,
    #[serde(default = "small")]
    pub b_mu: f64,
    #[serde(default = "small")]
    pub b_sigma: f64,
}

fn small() -> f64 {
    0.05
}

fn one() -> f64 {
    1.0
}

/// Base gains. Angle gains are expanded per index as `gain / √(k+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gains {
    #[serde(default = "one")]
    pub alpha_mu: f64,
    #[serde(default = "one")]
    pub beta_mu: f64,
    #[serde(default = "one")]
    pub alpha_sigma: f64,
    #[serde(default = "one")]
    pub beta_sigma: f64,
    #[serde(default = "one")]
    pub alpha_mu_r: f64,
    #[serde(default = "one")]
    pub beta_mu_r: f64,
    #[serde(default = "one")]
    pub alpha_sigma_r: f64,
    #[serde(default = "one")]
    pub beta_sigma_r: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            alpha_mu: 1.0,
            beta_mu: 1.0,
            alpha_sigma: 1.0,
            beta_sigma: 1.0,
            alpha_mu_r: 1.0,
            beta_mu_r: 1.0,
            alpha_sigma_r: 1.0,
            beta_sigma_r: 1.0,
        }
    }
}

/// Full configuration of the KLD part of the loss.
///
/// Serialised as JSON; every field except `spec_version` and `latent_dim`
/// has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub spec_version: u32,
    pub latent_dim: usize,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub compression: Compression,
    #[serde(default)]
    pub angle_priors: AnglePriors,
    #[serde(default)]
    pub radial_priors: RadialPriors,
    #[serde(default)]
    pub gains: Gains,
    #[serde(default = "one")]
    pub beta_max: f64,
    #[serde(default = "anneal_epochs")]
    pub anneal_epochs: usize,
    /// Shift under the square root of the cosine transform.
    #[serde(default = "epsilon")]
    pub epsilon: f64,
    /// Project sampled latents onto the sphere of radius `√n`.
    #[serde(default = "yes")]
    pub normalize_latent: bool,
}

fn anneal_epochs() -> usize {
    100
}

fn epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn yes() -> bool {
    true
}

impl LossSpec {
    /// Defaults with the given compression.
    pub fn new(latent_dim: usize, compression: Compression) -> Self {
        Self {
            spec_version: SPEC_VERSION,
            latent_dim,
            objective: Objective::Hyperspherical,
            compression,
            angle_priors: AnglePriors::default(),
            radial_priors: RadialPriors::default(),
            gains: Gains::default(),
            beta_max: 1.0,
            anneal_epochs: anneal_epochs(),
            epsilon: DEFAULT_EPSILON,
            normalize_latent: true,
        }
    }

    /// All angles compressed.
    pub fn compressed(latent_dim: usize) -> Self {
        Self::new(latent_dim, Compression::Preset(CompressionPreset::All))
    }

    /// Only `φ_1` compressed.
    pub fn vmf(latent_dim: usize) -> Self {
        Self::new(latent_dim, Compression::Preset(CompressionPreset::Vmf))
    }

    /// Hyperspherical objective with no compressed angle.
    pub fn uncompressed(latent_dim: usize) -> Self {
        Self::new(latent_dim, Compression::Preset(CompressionPreset::None))
    }

    /// Plain VAE: Cartesian KLD and no latent normalisation.
    pub fn plain(latent_dim: usize) -> Self {
        Self {
            objective: Objective::Cartesian,
            normalize_latent: false,
            ..Self::uncompressed(latent_dim)
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)
            .map_err(|e| Error::config("loss spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("LossSpec is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::config(
                "spec_version",
                format!("unsupported version {}", self.spec_version),
            ));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("latent_dim", "must be >= 2"));
        }
        if let Compression::Indices(idx) = &self.compression {
            if let Some(bad) = idx.iter().find(|&&k| k == 0 || k >= self.latent_dim) {
                return Err(Error::config(
                    "compression",
                    format!("angle index {bad} outside 1..={}", self.latent_dim - 1),
                ));
            }
        }
        let g = &self.gains;
        for (name, v) in [
            ("gains.alpha_mu", g.alpha_mu),
            ("gains.beta_mu", g.beta_mu),
            ("gains.alpha_sigma", g.alpha_sigma),
            ("gains.beta_sigma", g.beta_sigma),
            ("gains.alpha_mu_r", g.alpha_mu_r),
            ("gains.beta_mu_r", g.beta_mu_r),
            ("gains.alpha_sigma_r", g.alpha_sigma_r),
            ("gains.beta_sigma_r", g.beta_sigma_r),
            ("beta_max", self.beta_max),
            ("angle_priors.uncompressed_gain", self.angle_priors.uncompressed_gain),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        let e = self.expand()?;
        for (name, vals) in [("angle_priors.a_mu", &e.a_mu), ("angle_priors.a_sigma", &e.a_sigma)] {
            if let Some(v) = vals.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::config(name, format!("cosine prior {v} outside [-1, 1]")));
            }
        }
        for (name, vals) in [("angle_priors.b_mu", &e.b_mu), ("angle_priors.b_sigma", &e.b_sigma)] {
            if let Some(v) = vals.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::config(name, format!("std prior {v} must be >= 0")));
            }
        }
        if !(e.a_mu_r > 0.0 && e.a_mu_r.is_finite()) {
            return Err(Error::config("radial_priors.a_mu", "must be > 0"));
        }
        if !(e.a_sigma_r >= 0.0 && e.b_mu_r >= 0.0 && e.b_sigma_r >= 0.0) {
            return Err(Error::config("radial_priors", "priors must be >= 0"));
        }
        Ok(())
    }

    /// Per-index priors and gains.
    pub fn expand(&self) -> Result<ExpandedSpec> {
        let n = self.latent_dim;
        let angles = n.saturating_sub(1);
        let mask = self.compression.mask(n);
        let p = &self.angle_priors;
        let a_mu = match &p.a_mu {
            Some(v) => v.expand(angles, "angle_priors.a_mu")?,
            None => mask.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
        };
        let ladder: Vec<f64> = (1..=angles).map(|k| 1.0 / ((k + 1) as f64).sqrt()).collect();
        let mu_factor: Vec<f64> = mask
            .iter()
            .map(|&c| if c { 1.0 } else { p.uncompressed_gain })
            .collect();
        let g = &self.gains;
        let root_n = (n as f64).sqrt();
        Ok(ExpandedSpec {
            mask: mask.clone(),
            a_mu,
            a_sigma: p.a_sigma.expand(angles, "angle_priors.a_sigma")?,
            b_mu: p.b_mu.expand(angles, "angle_priors.b_mu")?,
            b_sigma: p.b_sigma.expand(angles, "angle_priors.b_sigma")?,
            alpha_mu: ladder.iter().zip(&mu_factor).map(|(l, f)| g.alpha_mu * l * f).collect(),
            beta_mu: ladder.iter().zip(&mu_factor).map(|(l, f)| g.beta_mu * l * f).collect(),
            alpha_sigma: ladder.iter().map(|l| g.alpha_sigma * l).collect(),
            beta_sigma: ladder.iter().map(|l| g.beta_sigma * l).collect(),
            a_mu_r: self.radial_priors.a_mu.unwrap_or(root_n),
            a_sigma_r: self.radial_priors.a_sigma.unwrap_or(0.1 * root_n),
            b_mu_r: self.radial_priors.b_mu,
            b_sigma_r: self.radial_priors.b_sigma,
            alpha_mu_r: g.alpha_mu_r,
            beta_mu_r: g.beta_mu_r,
            alpha_sigma_r: g.alpha_sigma_r,
            beta_sigma_r: g.beta_sigma_r,
        })
    }
}

/// [`LossSpec`] resolved into per-index vectors of length `n − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedSpec {
    pub mask: Vec<bool>,
    pub a_mu: Vec<f64>,
    pub a_sigma: Vec<f64>,
    pub b_mu: Vec<f64>,
    pub b_sigma: Vec<f64>,
    pub alpha_mu: Vec<f64>,
    pub beta_mu: Vec<f64>,
    pub alpha_sigma: Vec<f64>,
    pub beta_sigma: Vec<f64>,
    pub a_mu_r: f64,
    pub a_sigma_r: f64,
    pub b_mu_r: f64,
    pub b_sigma_r: f64,
    pub alpha_mu_r: f64,
    pub beta_mu_r: f64,
    pub alpha_sigma_r: f64,
    pub beta_sigma_r: f64,
}

fn check_same_shape(mu: &DenseMatrix, sigma: &DenseMatrix) -> Result<()> {
    if mu.shape() != sigma.shape() {
        return Err(Error::dim(format!(
            "mu is {:?} but sigma is {:?}",
            mu.shape(),
            sigma.shape()
        )));
    }
    if mu.rows() == 0 {
        return Err(Error::pre("empty batch"));
    }
    Ok(())
}

fn check_positive(m: &DenseMatrix, name: &str) -> Result<()> {
    if let Some(v) = m.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::domain(format!("{name} must be > 0, got {v}")));
    }
    Ok(())
}

fn check_prior(mu: &DenseMatrix, mu_p: &[f64], sigma_p: &[f64]) -> Result<()> {
    if mu_p.len() != mu.cols() || sigma_p.len() != mu.cols() {
        return Err(Error::dim(format!(
            "priors must have {} entries (got {}, {})",
            mu.cols(),
            mu_p.len(),
            sigma_p.len()
        )));
    }
    if let Some(v) = sigma_p.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::domain(format!("sigma prior must be > 0, got {v}")));
    }
    Ok(())
}

/// Batch mean of `−½ Σ_k (1 + log σ_k² − σ_k²) + ½‖μ‖²`.
pub fn kld_cartesian_closed_form(mu: &DenseMatrix, sigma: &DenseMatrix) -> Result<f64> {
    check_same_shape(mu, sigma)?;
    check_positive(sigma, "sigma")?;
    let mut total = 0.0;
    for (m, s) in mu.row_iter().zip(sigma.row_iter()) {
        let mut row = 0.0;
        for (&mk, &sk) in m.iter().zip(s) {
            let s2 = sk * sk;
            row += -0.5 * (1.0 + s2.ln() - s2) + 0.5 * mk * mk;
        }
        total += row;
    }
    Ok(total / mu.rows() as f64)
}

/// Batch mean of
/// `½ Σ_k [(σ_k/σ_k^p)² − log (σ_k/σ_k^p)² − 1 + (μ_k − μ_k^p)²/(σ_k^p)²]`.
pub fn kld_cartesian_with_prior(
    mu: &DenseMatrix,
    sigma: &DenseMatrix,
    mu_p: &[f64],
    sigma_p: &[f64],
) -> Result<f64> {
    check_same_shape(mu, sigma)?;
    check_positive(sigma, "sigma")?;
    check_prior(mu, mu_p, sigma_p)?;
    let mut total = 0.0;
    for (m, s) in mu.row_iter().zip(sigma.row_iter()) {
        for k in 0..m.len() {
            let ratio2 = (s[k] / sigma_p[k]).powi(2);
            let dm = m[k] - mu_p[k];
            total += 0.5 * (ratio2 - ratio2.ln() - 1.0 + dm * dm / (sigma_p[k] * sigma_p[k]));
        }
    }
    Ok(total / mu.rows() as f64)
}

/// Batch-statistics form with constants dropped:
/// `Σ_k (E_b[σ_k] − σ_k^p)² + σ_b[σ_k]² + (E_b[μ_k] − μ_k^p)² + σ_b[μ_k]²`.
pub fn kld_cartesian_batch(
    mu: &DenseMatrix,
    sigma: &DenseMatrix,
    mu_p: &[f64],
    sigma_p: &[f64],
) -> Result<f64> {
    check_same_shape(mu, sigma)?;
    if mu.rows() < 2 {
        return Err(Error::pre("batch statistics need at least two samples"));
    }
    check_positive(sigma, "sigma")?;
    check_prior(mu, mu_p, sigma_p)?;
    let mean_mu = crate::autodiff::column_sums(mu).map(|s| s / mu.rows() as f64);
    let mean_sigma = crate::autodiff::column_sums(sigma).map(|s| s / mu.rows() as f64);
    let std_mu = crate::autodiff::column_std(mu);
    let std_sigma = crate::autodiff::column_std(sigma);
    let mut total = 0.0;
    for k in 0..mu.cols() {
        total += (mean_sigma.data()[k] - sigma_p[k]).powi(2)
            + std_sigma.data()[k].powi(2)
            + (mean_mu.data()[k] - mu_p[k]).powi(2)
            + std_mu.data()[k].powi(2);
    }
    Ok(total)
}

/// Differentiable [`kld_cartesian_closed_form`], used by the plain-VAE objective.
pub fn kld_cartesian_graph(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    let m = tape.value(mu).rows() as f64;
    let s2 = tape.square(sigma)?;
    let log_s2 = tape.log(s2)?;
    let inner = tape.sub(log_s2, s2)?; // log σ² − σ²
    let inner = tape.add_scalar(inner, 1.0)?;
    let mu2 = tape.square(mu)?;
    let per = tape.sub(mu2, inner)?; // μ² − (1 + log σ² − σ²)
    let total = tape.sum_all(per)?;
    tape.scale(total, 0.5 / m)
}

/// The four term classes of one objective part, in the order
/// `μ`-mean, `μ`-std, `σ`-mean, `σ`-std.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub mu_mean: Var,
    pub mu_std: Var,
    pub sigma_mean: Var,
    pub sigma_std: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HypersphericalKld {
    pub angle: TermVars,
    pub radial: TermVars,
}

/// `Σ_k gain_k (stat_k − prior_k)²` for row vectors.
fn weighted_deviation(tape: &mut Tape, stat: Var, prior: &[f64], gain: &[f64]) -> Result<Var> {
    let p = tape.leaf(DenseMatrix::row_vector(prior));
    let g = tape.leaf(DenseMatrix::row_vector(gain));
    let d = tape.sub(stat, p)?;
    let d2 = tape.square(d)?;
    let w = tape.mul(d2, g)?;
    tape.sum_all(w)
}

fn sum_terms(tape: &mut Tape, terms: [Var; 4]) -> Result<TermVars> {
    let a = tape.add(terms[0], terms[1])?;
    let b = tape.add(terms[2], terms[3])?;
    let total = tape.add(a, b)?;
    Ok(TermVars {
        mu_mean: terms[0],
        mu_std: terms[1],
        sigma_mean: terms[2],
        sigma_std: terms[3],
        total,
    })
}

fn row_norms(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let s = tape.sum_rows(sq)?;
    tape.sqrt_shift(s, 0.0)
}

/// Angle and radial objectives on batches `mu`, `sigma` (`m × n`, `m ≥ 2`).
pub fn kld_hyperspherical(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    spec: &LossSpec,
    epsilon: f64,
) -> Result<HypersphericalKld> {
    let (m, n) = tape.value(mu).shape();
    if tape.value(sigma).shape() != (m, n) {
        return Err(Error::dim(format!(
            "mu is {m}x{n} but sigma is {:?}",
            tape.value(sigma).shape()
        )));
    }
    if n != spec.latent_dim {
        return Err(Error::dim(format!(
            "loss spec is for n = {}, batch has n = {n}",
            spec.latent_dim
        )));
    }
    if m < 2 {
        return Err(Error::pre("hyperspherical KLD needs a batch of at least two"));
    }
    if let Some(v) = tape.value(sigma).data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::domain(format!("sigma must be > 0, got {v}")));
    }
    let e = spec.expand()?;

    let cos_mu = cart_to_cos_sph(tape, mu, epsilon)?;
    let cos_sigma = cart_to_cos_sph(tape, sigma, epsilon)?;
    let mean_mu = tape.mean_cols(cos_mu)?;
    let std_mu = tape.std_cols(cos_mu)?;
    let mean_sigma = tape.mean_cols(cos_sigma)?;
    let std_sigma = tape.std_cols(cos_sigma)?;
    let angle_terms = [
        weighted_deviation(tape, mean_mu, &e.a_mu, &e.alpha_mu)?,
        weighted_deviation(tape, std_mu, &e.b_mu, &e.beta_mu)?,
        weighted_deviation(tape, mean_sigma, &e.a_sigma, &e.alpha_sigma)?,
        weighted_deviation(tape, std_sigma, &e.b_sigma, &e.beta_sigma)?,
    ];
    let angle = sum_terms(tape, angle_terms)?;

    let r_mu = row_norms(tape, mu)?;
    let r_sigma = row_norms(tape, sigma)?;
    let rm_mean = tape.mean_cols(r_mu)?;
    let rm_std = tape.std_cols(r_mu)?;
    let rs_mean = tape.mean_cols(r_sigma)?;
    let rs_std = tape.std_cols(r_sigma)?;
    let radial_terms = [
        weighted_deviation(tape, rm_mean, &[e.a_mu_r], &[e.alpha_mu_r])?,
        weighted_deviation(tape, rm_std, &[e.b_mu_r], &[e.beta_mu_r])?,
        weighted_deviation(tape, rs_mean, &[e.a_sigma_r], &[e.alpha_sigma_r])?,
        weighted_deviation(tape, rs_std, &[e.b_sigma_r], &[e.beta_sigma_r])?,
    ];
    let radial = sum_terms(tape, radial_terms)?;
    Ok(HypersphericalKld { angle, radial })
}

/// Annealed global gain: `β_max · √(epoch / E)`, held at `β_max` past `E`.
pub fn beta_at_epoch(spec: &LossSpec, epoch: usize) -> f64 {
    if spec.anneal_epochs == 0 {
        return spec.beta_max;
    }
    let frac = epoch.min(spec.anneal_epochs) as f64 / spec.anneal_epochs as f64;
    spec.beta_max * frac.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub mu_mean: f64,
    pub mu_std: f64,
    pub sigma_mean: f64,
    pub sigma_std: f64,
    pub total: f64,
}

impl TermBreakdown {
    fn read(tape: &Tape, t: &TermVars) -> Self {
        Self {
            mu_mean: tape.scalar(t.mu_mean),
            mu_std: tape.scalar(t.mu_std),
            sigma_mean: tape.scalar(t.sigma_mean),
            sigma_std: tape.scalar(t.sigma_std),
            total: tape.scalar(t.total),
        }
    }
}

/// Scalar values of every part of [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub angle: TermBreakdown,
    pub radial: TermBreakdown,
    /// Only nonzero under [`Objective::Cartesian`].
    pub cartesian_kld: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(name, value)` for every component, for diagnostics.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("mse", self.mse),
            ("angle.mu_mean", self.angle.mu_mean),
            ("angle.mu_std", self.angle.mu_std),
            ("angle.sigma_mean", self.angle.sigma_mean),
            ("angle.sigma_std", self.angle.sigma_std),
            ("radial.mu_mean", self.radial.mu_mean),
            ("radial.mu_std", self.radial.mu_std),
            ("radial.sigma_mean", self.radial.sigma_mean),
            ("radial.sigma_std", self.radial.sigma_std),
            ("cartesian_kld", self.cartesian_kld),
            ("total", self.total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// `MSE(x, x̂) + β(epoch)·(angle + radial)` (or the Cartesian KLD under
/// [`Objective::Cartesian`]). The MSE is averaged over every entry.
pub fn total_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    mu: Var,
    sigma: Var,
    spec: &LossSpec,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    let (m, d) = tape.value(x).shape();
    if tape.value(x_hat).shape() != (m, d) {
        return Err(Error::dim(format!(
            "x is {m}x{d} but x_hat is {:?}",
            tape.value(x_hat).shape()
        )));
    }
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.square(diff)?;
    let sse = tape.sum_all(sq)?;
    let mse = tape.scale(sse, 1.0 / (m * d) as f64)?;
    let beta = beta_at_epoch(spec, epoch);

    let mut breakdown = LossBreakdown {
        beta,
        ..Default::default()
    };
    let kld = match spec.objective {
        Objective::Hyperspherical => {
            let h = kld_hyperspherical(tape, mu, sigma, spec, spec.epsilon)?;
            breakdown.angle = TermBreakdown::read(tape, &h.angle);
            breakdown.radial = TermBreakdown::read(tape, &h.radial);
            tape.add(h.angle.total, h.radial.total)?
        }
        Objective::Cartesian => {
            let k = kld_cartesian_graph(tape, mu, sigma)?;
            breakdown.cartesian_kld = tape.scalar(k);
            k
        }
    };
    let weighted = tape.scale(kld, beta)?;
    let total = tape.add(mse, weighted)?;
    breakdown.mse = tape.scalar(mse);
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::rng::Streams;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = Streams::new(seed).stream("losses");
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn positive(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = Streams::new(seed).stream("pos");
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.2..2.0))
    }

    fn kld_value(mu: &DenseMatrix, sigma: &DenseMatrix, spec: &LossSpec, eps: f64) -> (f64, f64) {
        let mut t = Tape::new();
        let m = t.leaf(mu.clone());
        let s = t.leaf(sigma.clone());
        let h = kld_hyperspherical(&mut t, m, s, spec, eps).unwrap();
        (t.scalar(h.angle.total), t.scalar(h.radial.total))
    }

    #[test]
    fn closed_form_examples() {
        let zero = DenseMatrix::zeros(3, 4);
        let ones = DenseMatrix::filled(3, 4, 1.0);
        assert_eq!(kld_cartesian_closed_form(&zero, &ones).unwrap(), 0.0);
        let mut mu = DenseMatrix::zeros(2, 4);
        mu.set(0, 0, 1.0);
        mu.set(1, 0, 1.0);
        assert_eq!(kld_cartesian_closed_form(&mu, &DenseMatrix::filled(2, 4, 1.0)).unwrap(), 0.5);
        assert!(kld_cartesian_closed_form(&zero, &zero).is_err());
    }

    #[test]
    fn closed_form_matches_loop_and_prior_reduction() {
        let mu = random(6, 5, 1);
        let sigma = positive(6, 5, 2);
        let mut oracle = 0.0;
        for l in 0..6 {
            for k in 0..5 {
                let s = sigma.get(l, k);
                oracle += 0.5 * (s * s - 2.0 * s.ln() - 1.0 + mu.get(l, k).powi(2));
            }
        }
        oracle /= 6.0;
        let cf = kld_cartesian_closed_form(&mu, &sigma).unwrap();
        assert!((cf - oracle).abs() < 1e-12);
        let wp = kld_cartesian_with_prior(&mu, &sigma, &[0.0; 5], &[1.0; 5]).unwrap();
        assert!((wp - cf).abs() < 1e-12);

        let mut t = Tape::new();
        let m = t.leaf(mu.clone());
        let s = t.leaf(sigma.clone());
        let g = kld_cartesian_graph(&mut t, m, s).unwrap();
        assert!((t.scalar(g) - cf).abs() < 1e-12);
    }

    #[test]
    fn with_prior_examples() {
        let mu_p = [0.3, -1.0, 2.0];
        let sigma_p = [0.5, 1.5, 2.0];
        let mu = DenseMatrix::from_rows(&[mu_p, mu_p]).unwrap();
        let sigma = DenseMatrix::from_rows(&[sigma_p, sigma_p]).unwrap();
        assert!(kld_cartesian_with_prior(&mu, &sigma, &mu_p, &sigma_p).unwrap().abs() < 1e-15);

        let mu = random(4, 3, 7);
        let sigma = positive(4, 3, 8);
        let mut oracle = 0.0;
        for l in 0..4 {
            for k in 0..3 {
                let ratio = sigma.get(l, k) / sigma_p[k];
                oracle += 0.5
                    * (ratio * ratio - (ratio * ratio).ln() - 1.0
                        + (mu.get(l, k) - mu_p[k]).powi(2) / sigma_p[k].powi(2));
            }
        }
        let v = kld_cartesian_with_prior(&mu, &sigma, &mu_p, &sigma_p).unwrap();
        assert!((v - oracle / 4.0).abs() < 1e-12);
        assert!(kld_cartesian_with_prior(&mu, &sigma, &mu_p, &[1.0, 0.0, 1.0]).is_err());
        assert!(kld_cartesian_with_prior(&mu, &sigma, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn batch_examples() {
        let mu_p = [0.5, -0.5];
        let sigma_p = [1.0, 2.0];
        let mu = DenseMatrix::from_rows(&[mu_p, mu_p, mu_p]).unwrap();
        let sigma = DenseMatrix::from_rows(&[sigma_p, sigma_p, sigma_p]).unwrap();
        assert!(kld_cartesian_batch(&mu, &sigma, &mu_p, &sigma_p).unwrap().abs() < 1e-15);

        let d = [0.3, 1.2];
        let mu = DenseMatrix::from_rows(&[
            [mu_p[0] + d[0], mu_p[1] + d[1]],
            [mu_p[0] - d[0], mu_p[1] - d[1]],
        ])
        .unwrap();
        let sigma = DenseMatrix::from_rows(&[sigma_p, sigma_p]).unwrap();
        let v = kld_cartesian_batch(&mu, &sigma, &mu_p, &sigma_p).unwrap();
        assert!((v - (d[0] * d[0] + d[1] * d[1])).abs() < 1e-12);

        let one_row = DenseMatrix::from_rows(&[mu_p]).unwrap();
        let one_sig = DenseMatrix::from_rows(&[sigma_p]).unwrap();
        assert!(matches!(
            kld_cartesian_batch(&one_row, &one_sig, &mu_p, &sigma_p),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn batch_matches_second_moment_route() {
        // E_b[(X − p)²] = (E_b[X] − p)² + σ_b[X]², summed over both μ and σ.
        let mu = random(9, 4, 21);
        let sigma = positive(9, 4, 22);
        let mu_p = [0.1, 0.2, -0.3, 0.0];
        let sigma_p = [1.0, 0.5, 2.0, 1.5];
        let mut oracle = 0.0;
        for l in 0..9 {
            for k in 0..4 {
                oracle += (sigma.get(l, k) - sigma_p[k]).powi(2) + (mu.get(l, k) - mu_p[k]).powi(2);
            }
        }
        oracle /= 9.0;
        let v = kld_cartesian_batch(&mu, &sigma, &mu_p, &sigma_p).unwrap();
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
    }

    #[test]
    fn priors_at_batch_statistics_give_zero() {
        let mu = random(6, 5, 3);
        let sigma = positive(6, 5, 4);
        let cm = crate::hypersphere::cos_sph(&mu, 0.0).unwrap();
        let cs = crate::hypersphere::cos_sph(&sigma, 0.0).unwrap();
        let mean = |m: &DenseMatrix| crate::autodiff::column_sums(m).map(|s| s / 6.0).into_data();
        let std = |m: &DenseMatrix| crate::autodiff::column_std(m).into_data();
        let radii = |m: &DenseMatrix| {
            DenseMatrix::new(6, 1, m.row_iter().map(crate::hypersphere::norm).collect()).unwrap()
        };
        let (rm, rs) = (radii(&mu), radii(&sigma));
        let mut spec = LossSpec::compressed(5);
        spec.angle_priors.a_mu = Some(PerAngle::PerIndex(mean(&cm)));
        spec.angle_priors.b_mu = PerAngle::PerIndex(std(&cm));
        spec.angle_priors.a_sigma = PerAngle::PerIndex(mean(&cs));
        spec.angle_priors.b_sigma = PerAngle::PerIndex(std(&cs));
        spec.radial_priors = RadialPriors {
            a_mu: Some(mean(&rm)[0]),
            a_sigma: Some(mean(&rs)[0]),
            b_mu: std(&rm)[0],
            b_sigma: std(&rs)[0],
        };
        let (a, r) = kld_value(&mu, &sigma, &spec, 0.0);
        assert!(a.abs() < 1e-24 && r.abs() < 1e-24, "{a} {r}");
    }

    #[test]
    fn ones_batch_mu_mean_terms() {
        let n = 6;
        let c = 2.5;
        let mu = DenseMatrix::filled(4, n, c);
        let sigma = DenseMatrix::filled(4, n, 0.3);
        let mut spec = LossSpec::compressed(n);
        spec.angle_priors.b_mu = PerAngle::Uniform(0.0);
        let mut t = Tape::new();
        let m = t.leaf(mu);
        let s = t.leaf(sigma);
        let h = kld_hyperspherical(&mut t, m, s, &spec, 0.0).unwrap();
        // Column k of the ones direction has cosine 1/√(n − k + 1); its gain is 1/√(k + 1).
        let expected: f64 = (1..n)
            .map(|k| {
                let w = 1.0 / ((k + 1) as f64).sqrt();
                let cos = 1.0 / ((n - k + 1) as f64).sqrt();
                w * (cos - 1.0).powi(2)
            })
            .sum();
        assert!((t.scalar(h.angle.mu_mean) - expected).abs() < 1e-12);
        assert!(t.scalar(h.angle.mu_std).abs() < 1e-24);
    }

    #[test]
    fn gain_ladder() {
        let e = LossSpec::compressed(12).expand().unwrap();
        let base = e.alpha_mu[0] * 2f64.sqrt();
        for (i, a) in e.alpha_mu.iter().enumerate() {
            let k = i + 1;
            assert!((a * ((k + 1) as f64).sqrt() - base).abs() < 1e-15);
        }
        let v = LossSpec::vmf(12).expand().unwrap();
        assert_eq!(v.a_mu[0], 1.0);
        assert!(v.a_mu[1..].iter().all(|&a| a == 0.0));
        assert!((v.alpha_mu[1] - 0.1 / 3f64.sqrt()).abs() < 1e-15);
        assert!((v.a_mu_r - 12f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn vmf_first_term_matches_full_compression() {
        let mu = random(8, 6, 31);
        let sigma = positive(8, 6, 32);
        let mut full = LossSpec::compressed(6);
        full.gains.beta_mu = 0.0;
        let mut vmf = LossSpec::vmf(6);
        vmf.gains.beta_mu = 0.0;
        vmf.angle_priors.uncompressed_gain = 0.0;
        let only_first = |spec: &LossSpec| {
            let mut s = spec.clone();
            s.gains.alpha_sigma = 0.0;
            s.gains.beta_sigma = 0.0;
            let mut t = Tape::new();
            let m = t.leaf(mu.clone());
            let sg = t.leaf(sigma.clone());
            let h = kld_hyperspherical(&mut t, m, sg, &s, 0.0).unwrap();
            t.scalar(h.angle.mu_mean)
        };
        let cos = crate::hypersphere::cos_sph(&mu, 0.0).unwrap();
        let mean1 = (0..8).map(|l| cos.get(l, 0)).sum::<f64>() / 8.0;
        let k1 = (mean1 - 1.0).powi(2) / 2f64.sqrt();
        assert!((only_first(&vmf) - k1).abs() < 1e-12);
        let full_total = only_first(&full);
        assert!(full_total > k1);
    }

    #[test]
    fn nonnegative_permutation_and_scale_invariance() {
        let mu = random(7, 5, 41);
        let sigma = positive(7, 5, 42);
        let mut spec = LossSpec::compressed(5);
        spec.angle_priors.b_mu = PerAngle::Uniform(0.0);
        spec.angle_priors.b_sigma = PerAngle::Uniform(0.0);
        spec.radial_priors.b_mu = 0.0;
        spec.radial_priors.b_sigma = 0.0;
        let (a, r) = kld_value(&mu, &sigma, &spec, 0.0);
        assert!(a >= 0.0 && r >= 0.0);

        let perm = [3, 0, 6, 1, 5, 2, 4];
        let (ap, rp) = kld_value(&mu.select_rows(&perm), &sigma.select_rows(&perm), &spec, 0.0);
        assert!((a - ap).abs() < 1e-12 && (r - rp).abs() < 1e-12);

        let mu_terms = |mu: &DenseMatrix| {
            let mut t = Tape::new();
            let m = t.leaf(mu.clone());
            let s = t.leaf(sigma.clone());
            let h = kld_hyperspherical(&mut t, m, s, &spec, 0.0).unwrap();
            t.scalar(h.angle.mu_mean) + t.scalar(h.angle.mu_std)
        };
        assert!((mu_terms(&mu) - mu_terms(&mu.map(|v| 3.7 * v))).abs() < 1e-12);

        let cart = kld_cartesian_batch(&mu, &sigma, &[0.0; 5], &[1.0; 5]).unwrap();
        assert!(cart >= 0.0);
        let cp = kld_cartesian_batch(&mu.select_rows(&perm), &sigma.select_rows(&perm), &[0.0; 5], &[1.0; 5]).unwrap();
        assert!((cart - cp).abs() < 1e-12);
    }

    #[test]
    fn hyperspherical_gradients() {
        for seed in 0..5 {
            let mu = random(4, 6, 50 + seed);
            let sigma = positive(4, 6, 60 + seed);
            let spec = LossSpec::compressed(6);
            for part in 0..2 {
                let f_mu = |t: &mut Tape, m: Var| {
                    let s = t.leaf(sigma.clone());
                    let h = kld_hyperspherical(t, m, s, &spec, DEFAULT_EPSILON)?;
                    Ok(if part == 0 { h.angle.total } else { h.radial.total })
                };
                let err = gradient_check(f_mu, &mu, 1e-5).unwrap();
                assert!(err < 1e-4, "mu part {part} seed {seed}: {err}");
                let f_sigma = |t: &mut Tape, s: Var| {
                    let m = t.leaf(mu.clone());
                    let h = kld_hyperspherical(t, m, s, &spec, DEFAULT_EPSILON)?;
                    Ok(if part == 0 { h.angle.total } else { h.radial.total })
                };
                let err = gradient_check(f_sigma, &sigma, 1e-5).unwrap();
                assert!(err < 1e-4, "sigma part {part} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn beta_schedule() {
        let mut spec = LossSpec::compressed(4);
        spec.beta_max = 2.0;
        assert_eq!(beta_at_epoch(&spec, 0), 0.0);
        assert_eq!(beta_at_epoch(&spec, 100), 2.0);
        assert_eq!(beta_at_epoch(&spec, 25), 1.0);
        assert_eq!(beta_at_epoch(&spec, 400), 2.0);
    }

    fn total_for(
        x: &DenseMatrix,
        x_hat: &DenseMatrix,
        mu: &DenseMatrix,
        sigma: &DenseMatrix,
        spec: &LossSpec,
        epoch: usize,
    ) -> LossBreakdown {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let xh = t.leaf(x_hat.clone());
        let m = t.leaf(mu.clone());
        let s = t.leaf(sigma.clone());
        total_loss(&mut t, xv, xh, m, s, spec, epoch).unwrap().1
    }

    #[test]
    fn total_loss_composition() {
        let x = random(5, 7, 70).map(f64::tanh);
        let x_hat = random(5, 7, 71).map(f64::tanh);
        let mu = random(5, 4, 72);
        let sigma = positive(5, 4, 73);
        let spec = LossSpec::compressed(4);
        let b = total_for(&x, &x_hat, &mu, &sigma, &spec, 30);
        let recomposed = b.mse + b.beta * (b.angle.total + b.radial.total);
        assert!((b.total - recomposed).abs() < 1e-12);
        let sum4 = |t: &TermBreakdown| t.mu_mean + t.mu_std + t.sigma_mean + t.sigma_std;
        assert!((sum4(&b.angle) - b.angle.total).abs() < 1e-12);
        assert!((sum4(&b.radial) - b.radial.total).abs() < 1e-12);
        for (name, v) in b.components() {
            assert!(v >= 0.0, "{name}");
        }

        let zero_beta = total_for(&x, &x_hat, &mu, &sigma, &spec, 0);
        assert_eq!(zero_beta.total, zero_beta.mse);

        let mut mse = 0.0;
        for (a, b) in x.data().iter().zip(x_hat.data()) {
            mse += (a - b) * (a - b);
        }
        assert!((b.mse - mse / 35.0).abs() < 1e-12);

        let plain = total_for(&x, &x_hat, &mu, &sigma, &LossSpec::plain(4), 100);
        let cf = kld_cartesian_closed_form(&mu, &sigma).unwrap();
        assert!((plain.total - plain.mse - cf).abs() < 1e-12);
    }

    #[test]
    fn matched_everything_gives_zero_total() {
        let x = random(4, 3, 80);
        let mu = random(4, 5, 81);
        let sigma = positive(4, 5, 82);
        let mut spec = LossSpec::compressed(5);
        spec.beta_max = 0.0;
        assert_eq!(total_for(&x, &x, &mu, &sigma, &spec, 50).total, 0.0);
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let spec = LossSpec::vmf(8);
        let back = LossSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, back);

        let minimal = LossSpec::from_json(r#"{"spec_version": 1, "latent_dim": 4}"#).unwrap();
        assert_eq!(minimal, LossSpec::compressed(4));
        let idx = LossSpec::from_json(
            r#"{"spec_version": 1, "latent_dim": 5, "compression": [1, 3]}"#,
        )
        .unwrap();
        assert_eq!(idx.compression.mask(5), vec![true, false, true, false]);

        let field_of = |json: &str| match LossSpec::from_json(json) {
            Err(Error::Config { field, reason }) => format!("{field}: {reason}"),
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(field_of(r#"{"spec_version": 2, "latent_dim": 4}"#).starts_with("spec_version"));
        assert!(field_of(r#"{"spec_version": 1, "latent_dim": 4, "gains": {"alpha_mu": -1}}"#)
            .starts_with("gains.alpha_mu"));
        assert!(field_of(r#"{"spec_version": 1, "latent_dim": 4, "compression": [4]}"#)
            .starts_with("compression"));
        assert!(field_of(r#"{"spec_version": 1, "latent_dim": 4, "bogus": 1}"#).contains("bogus"));
        assert!(field_of(
            r#"{"spec_version": 1, "latent_dim": 4, "angle_priors": {"a_mu": 1.5}}"#
        )
        .starts_with("angle_priors.a_mu"));
        assert!(field_of(r#"{"spec_version": 1, "latent_dim": 4, "radial_priors": {"a_mu": 0}}"#)
            .starts_with("radial_priors.a_mu"));
        assert!(field_of(
            r#"{"spec_version": 1, "latent_dim": 4, "angle_priors": {"b_mu": [0.1, 0.1]}}"#
        )
        .starts_with("angle_priors.b_mu"));
    }
}
