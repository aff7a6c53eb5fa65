//! A small MLP VAE whose KLD term is any [`LossSpec`] objective.
//!
//! Encoder `d → h₁ → … → 2n` (μ head and log-variance head), decoder
//! `n → … → h₁ → d` with a sigmoid output. Hidden layers use
//! [`Tape::leaky_softplus`] with slope [`LEAKY_SLOPE`]. Sampled latents are
//! projected onto the sphere of radius `√n` when the spec asks for it; the
//! KLD sees `μ` and `σ` after the optional roll reorientation.

pub mod checkpoint;
pub mod optim;

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{roll_left, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossSpec};
use crate::matrix::DenseMatrix;
use crate::rng::{Rng, Streams};

pub use checkpoint::{CheckpointMeta, VaeCheckpoint};
pub use optim::{Adam, AdamConfig};

pub const LEAKY_SLOPE: f64 = 0.1;
/// Log-variance head is clamped to `[−LOGVAR_BOUND, LOGVAR_BOUND]`.
pub const LOGVAR_BOUND: f64 = 10.0;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_ROLL_SPACING: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: DenseMatrix,
    /// `1 × fan_out`.
    pub bias: DenseMatrix,
}

impl Layer {
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)),
            bias: DenseMatrix::zeros(1, fan_out),
        }
    }
}

/// Network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
}

/// Tape handles of every weight and bias, in [`Vae::parameters`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

impl ParamVars {
    fn all(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

impl Vae {
    /// Uniform `±1/√fan_in` weights and zero biases from the `init` stream.
    pub fn new(input_dim: usize, latent_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("input_dim", "must be > 0"));
        }
        if latent_dim < 2 {
            return Err(Error::config("latent_dim", "must be >= 2"));
        }
        if hidden.contains(&0) {
            return Err(Error::config("hidden", "widths must be > 0"));
        }
        let mut rng = Streams::new(seed).stream("init");
        let mut enc_widths = vec![input_dim];
        enc_widths.extend_from_slice(hidden);
        enc_widths.push(2 * latent_dim);
        let mut dec_widths = vec![latent_dim];
        dec_widths.extend(hidden.iter().rev());
        dec_widths.push(input_dim);
        let encoder = enc_widths
            .windows(2)
            .map(|w| Layer::init(&mut rng, w[0], w[1]))
            .collect();
        let decoder = dec_widths
            .windows(2)
            .map(|w| Layer::init(&mut rng, w[0], w[1]))
            .collect();
        Ok(Self {
            input_dim,
            latent_dim,
            hidden: hidden.to_vec(),
            encoder,
            decoder,
        })
    }

    /// Encoder layers then decoder layers, weight before bias.
    pub fn parameters(&self) -> Vec<&DenseMatrix> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut reg = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect()
        };
        ParamVars {
            encoder: reg(&self.encoder),
            decoder: reg(&self.decoder),
        }
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::dim(format!(
                "model expects {} input features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        Ok(())
    }

    /// `(μ, σ)` with `σ = exp(½·clamp(logvar))`.
    pub fn encode(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let (mu, sigma) = encode_vars(&mut tape, &p, xv, self.latent_dim)?;
        Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
    }

    /// Latent means.
    pub fn embed(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.encode(x)?.0)
    }

    pub fn decode(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        if z.cols() != self.latent_dim {
            return Err(Error::dim(format!(
                "model expects {} latent coordinates, got {}",
                self.latent_dim,
                z.cols()
            )));
        }
        let mut tape = Tape::new();
        let p = self.register(&mut tape);
        let zv = tape.leaf(z.clone());
        let out = decode_vars(&mut tape, &p, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Decodes the means, projected to radius `√n` when `normalize` is set.
    pub fn reconstruct_mean(&self, x: &DenseMatrix, normalize: bool) -> Result<DenseMatrix> {
        let mu = self.embed(x)?;
        let z = if normalize { project_to_sphere(&mu)? } else { mu };
        self.decode(&z)
    }
}

fn mlp(tape: &mut Tape, mut h: Var, layers: &[(Var, Var)]) -> Result<Var> {
    for (i, &(w, b)) in layers.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.add(lin, b)?;
        if i + 1 < layers.len() {
            h = tape.leaky_softplus(h, LEAKY_SLOPE)?;
        }
    }
    Ok(h)
}

/// `(μ, σ)` nodes for input `x`.
pub fn encode_vars(tape: &mut Tape, p: &ParamVars, x: Var, latent_dim: usize) -> Result<(Var, Var)> {
    let out = mlp(tape, x, &p.encoder)?;
    let mu = tape.slice_cols(out, 0, latent_dim)?;
    let logvar = tape.slice_cols(out, latent_dim, 2 * latent_dim)?;
    let logvar = tape.clamp(logvar, -LOGVAR_BOUND, LOGVAR_BOUND)?;
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    Ok((mu, sigma))
}

pub fn decode_vars(tape: &mut Tape, p: &ParamVars, z: Var) -> Result<Var> {
    let out = mlp(tape, z, &p.decoder)?;
    tape.sigmoid(out)
}

/// `√n · z / ‖z‖` row-wise.
pub fn project_to_sphere(z: &DenseMatrix) -> Result<DenseMatrix> {
    let radius = (z.cols() as f64).sqrt();
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let r = crate::hypersphere::norm(row);
        if r == 0.0 {
            return Err(Error::domain(format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v *= radius / r);
    }
    Ok(out)
}

/// Standard normal noise for `μ + σ⊙η`. When `normalize` is set, a row whose
/// sample has zero norm is redrawn once; a second zero is an error.
pub fn draw_noise(mu: &DenseMatrix, sigma: &DenseMatrix, rng: &mut Rng, normalize: bool) -> Result<DenseMatrix> {
    if mu.shape() != sigma.shape() {
        return Err(Error::dim(format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape())));
    }
    if let Some(v) = sigma.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::domain(format!("sigma must be > 0, got {v}")));
    }
    let (m, n) = mu.shape();
    let mut eta = DenseMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng));
    if normalize {
        for i in 0..m {
            for attempt in 0..2 {
                let zero = (0..n).all(|j| mu.get(i, j) + sigma.get(i, j) * eta.get(i, j) == 0.0);
                if !zero {
                    break;
                }
                if attempt == 1 {
                    return Err(Error::domain(format!("sampled latent row {i} has zero norm twice")));
                }
                for j in 0..n {
                    eta.set(i, j, StandardNormal.sample(rng));
                }
            }
        }
    }
    Ok(eta)
}

/// `z = μ + σ⊙η`, projected to radius `√n` when `normalize` is set.
pub fn latent_vars(tape: &mut Tape, mu: Var, sigma: Var, eta: &DenseMatrix, normalize: bool) -> Result<Var> {
    let e = tape.leaf(eta.clone());
    let noise = tape.mul(sigma, e)?;
    let z0 = tape.add(mu, noise)?;
    if !normalize {
        return Ok(z0);
    }
    let n = tape.value(mu).cols() as f64;
    let sq = tape.square(z0)?;
    let s = tape.sum_rows(sq)?;
    let r = tape.sqrt_shift(s, 0.0)?;
    let unit = tape.div(z0, r)?;
    tape.scale(unit, n.sqrt())
}

/// Reparameterised sample projected onto the sphere of radius `√n`,
/// drawn from the `reparam` stream of `seed`.
pub fn reparameterize_and_normalize(mu: &DenseMatrix, sigma: &DenseMatrix, seed: u64) -> Result<DenseMatrix> {
    let mut rng = Streams::new(seed).stream("reparam");
    let eta = draw_noise(mu, sigma, &mut rng, true)?;
    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone());
    let s = tape.leaf(sigma.clone());
    let z = latent_vars(&mut tape, m, s, &eta, true)?;
    Ok(tape.value(z).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RollDirection {
    Forward,
    Inverse,
}

/// Per-row shift `label·(1 + spacing)`; each must be `< n`.
pub fn roll_shifts(labels: &[usize], spacing: usize, n: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            let s = l.checked_mul(spacing + 1).filter(|&s| s < n);
            s.ok_or_else(|| {
                Error::pre(format!(
                    "label {l} with spacing {spacing} needs a shift >= latent dimension {n}"
                ))
            })
        })
        .collect()
}

/// Left-rolls row `i` by `labels[i]·(1 + spacing)` so the label's axis
/// becomes the first coordinate; [`RollDirection::Inverse`] undoes it.
pub fn roll_reorient(
    z: &DenseMatrix,
    labels: &[usize],
    spacing: usize,
    direction: RollDirection,
) -> Result<DenseMatrix> {
    if labels.len() != z.rows() {
        return Err(Error::dim(format!("{} labels for {} rows", labels.len(), z.rows())));
    }
    let n = z.cols();
    let mut shifts = roll_shifts(labels, spacing, n)?;
    if direction == RollDirection::Inverse {
        shifts.iter_mut().for_each(|s| *s = (n - *s) % n);
    }
    Ok(roll_left(z, &shifts))
}

/// Builds the full training loss for one batch.
///
/// `noise` receives the batch `(μ, σ)` values and returns `η`. With `shifts`
/// the KLD sees the rolled `μ` and `σ`; the decoder always sees the unrolled
/// sample.
pub fn loss_vars(
    tape: &mut Tape,
    p: &ParamVars,
    x: &DenseMatrix,
    noise: impl FnOnce(&DenseMatrix, &DenseMatrix) -> Result<DenseMatrix>,
    shifts: Option<&[usize]>,
    spec: &LossSpec,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    let xv = tape.leaf(x.clone());
    let (mu, sigma) = encode_vars(tape, p, xv, spec.latent_dim)?;
    let eta = noise(tape.value(mu), tape.value(sigma))?;
    let z = latent_vars(tape, mu, sigma, &eta, spec.normalize_latent)?;
    let x_hat = decode_vars(tape, p, z)?;
    let (kmu, ksigma) = match shifts {
        Some(s) => (tape.roll_rows(mu, s)?, tape.roll_rows(sigma, s)?),
        None => (mu, sigma),
    };
    total_loss(tape, xv, x_hat, kmu, ksigma, spec, epoch)
}

fn default_epochs() -> usize {
    100
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-3
}

fn default_hidden() -> Vec<usize> {
    vec![DEFAULT_HIDDEN, DEFAULT_HIDDEN]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Roll each sample by `label·(1 + spacing)` before the KLD. Requires labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roll_spacing: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            hidden: default_hidden(),
            roll_spacing: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn epochs_trained(&self) -> usize {
        self.epochs.len()
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    /// Per-epoch losses. Wall-clock times are left out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,beta,total,mse,angle,angle_mu_mean,angle_mu_std,angle_sigma_mean,angle_sigma_std,\
             radial,radial_mu_mean,radial_mu_std,radial_sigma_mean,radial_sigma_std,cartesian_kld\n",
        );
        for r in &self.epochs {
            let l = &r.loss;
            let cells = [
                l.beta,
                l.total,
                l.mse,
                l.angle.total,
                l.angle.mu_mean,
                l.angle.mu_std,
                l.angle.sigma_mean,
                l.angle.sigma_std,
                l.radial.total,
                l.radial.mu_mean,
                l.radial.mu_std,
                l.radial.sigma_mean,
                l.radial.sigma_std,
                l.cartesian_kld,
            ];
            out.push_str(&r.epoch.to_string());
            for c in cells {
                out.push_str(&format!(",{c:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Batch boundaries; a trailing single row joins the previous batch.
fn batches(m: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < m {
        let mut end = (start + size).min(m);
        if m - end == 1 {
            end = m;
        }
        out.push((start, end));
        start = end;
    }
    out
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    let add = |a: &mut crate::losses::TermBreakdown, t: &crate::losses::TermBreakdown| {
        a.mu_mean += w * t.mu_mean;
        a.mu_std += w * t.mu_std;
        a.sigma_mean += w * t.sigma_mean;
        a.sigma_std += w * t.sigma_std;
        a.total += w * t.total;
    };
    acc.mse += w * b.mse;
    add(&mut acc.angle, &b.angle);
    add(&mut acc.radial, &b.radial);
    acc.cartesian_kld += w * b.cartesian_kld;
    acc.total += w * b.total;
    acc.beta = b.beta;
}

fn non_finite(term: impl Into<String>, epoch: usize) -> Error {
    Error::NonFinite {
        term: term.into(),
        epoch,
    }
}

/// Trains a fresh model with Adam on `total_loss`, epoch `e` (1-based)
/// using `β(e)`. Fully determined by `data`, `labels`, `spec` and `config`.
pub fn train(
    data: &DenseMatrix,
    labels: Option<&[usize]>,
    spec: &LossSpec,
    config: &TrainConfig,
) -> Result<(VaeCheckpoint, TrainReport)> {
    spec.validate()?;
    if config.batch_size < 2 {
        return Err(Error::config("batch_size", "must be >= 2"));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::config("learning_rate", "must be > 0"));
    }
    if data.rows() < 2 {
        return Err(Error::pre("training needs at least two samples"));
    }
    let shifts = match (config.roll_spacing, labels) {
        (Some(s), Some(l)) => {
            if l.len() != data.rows() {
                return Err(Error::dim(format!("{} labels for {} rows", l.len(), data.rows())));
            }
            Some(roll_shifts(l, s, spec.latent_dim)?)
        }
        (Some(_), None) => return Err(Error::config("roll_spacing", "requires class labels")),
        (None, _) => None,
    };

    let mut vae = Vae::new(data.cols(), spec.latent_dim, &config.hidden, config.seed)?;
    let streams = Streams::new(config.seed);
    let mut shuffle_rng = streams.stream("shuffle");
    let mut noise_rng = streams.stream("reparam");
    let shapes: Vec<_> = vae.parameters().iter().map(|p| p.shape()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
        &shapes,
    );
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut report = TrainReport::default();

    for e in 0..config.epochs {
        let epoch = e + 1;
        let started = Instant::now();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.random_range(0..=i));
        }
        let mut acc = LossBreakdown::default();
        for (start, end) in batches(order.len(), config.batch_size) {
            let idx = &order[start..end];
            let x = data.select_rows(idx);
            let batch_shifts: Option<Vec<usize>> =
                shifts.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect());
            let mut tape = Tape::new();
            let p = vae.register(&mut tape);
            let normalize = spec.normalize_latent;
            let rng = &mut noise_rng;
            let (loss, breakdown) = loss_vars(
                &mut tape,
                &p,
                &x,
                |mu, sigma| draw_noise(mu, sigma, rng, normalize),
                batch_shifts.as_deref(),
                spec,
                epoch,
            )
            .map_err(|err| match err {
                Error::Domain(msg) => non_finite(format!("forward pass: {msg}"), epoch),
                other => other,
            })?;
            if let Some(term) = breakdown.first_non_finite() {
                return Err(non_finite(term, epoch));
            }
            tape.backward(loss)?;
            let grads: Vec<DenseMatrix> = p.all().iter().map(|&v| tape.grad_or_zeros(v)).collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(non_finite("gradient", epoch));
            }
            adam.update(&mut vae.parameters_mut(), &grads);
            accumulate(&mut acc, &breakdown, 1.0);
        }
        let nb = batches(order.len(), config.batch_size).len() as f64;
        let mut mean = LossBreakdown::default();
        accumulate(&mut mean, &acc, 1.0 / nb);
        report.epochs.push(EpochRecord {
            epoch,
            loss: mean,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let checkpoint = VaeCheckpoint {
        model: vae,
        spec: spec.clone(),
        config: config.clone(),
        epochs: config.epochs,
        input_scaling: None,
    };
    Ok((checkpoint, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;

    #[test]
    fn batch_boundaries() {
        assert_eq!(batches(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(batches(9, 4), vec![(0, 4), (4, 9)]);
        assert_eq!(batches(3, 4), vec![(0, 3)]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut vae = Vae::new(3, 2, &[4], 0).unwrap();
        for p in vae.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        let last = vae.encoder.last_mut().unwrap();
        last.bias = DenseMatrix::row_vector(&[0.5, -1.0, 2.0, -4.0]);
        let x = DenseMatrix::filled(2, 3, 0.3);
        let (mu, sigma) = vae.encode(&x).unwrap();
        assert_eq!(mu.row(1), &[0.5, -1.0]);
        assert_eq!(sigma.row(0), &[1f64.exp(), (-2f64).exp()]);
    }

    #[test]
    fn roll_example() {
        let z = DenseMatrix::row_vector(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = roll_reorient(&z, &[2], 1, RollDirection::Forward).unwrap();
        assert_eq!(f.row(0), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(roll_reorient(&f, &[2], 1, RollDirection::Inverse).unwrap(), z);
        assert_eq!(roll_reorient(&z, &[0], 10, RollDirection::Forward).unwrap(), z);
        assert!(matches!(
            roll_reorient(&z, &[3], 1, RollDirection::Forward),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn end_to_end_encoder_gradient() {
        let vae = Vae::new(8, 4, &[6, 6], 3).unwrap();
        let mut rng = Streams::new(5).stream("x");
        let x = DenseMatrix::from_fn(4, 8, |_, _| rng.random_range(0.0..1.0));
        let eta = DenseMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng));
        let spec = LossSpec::compressed(4);
        for layer in 0..vae.encoder.len() {
            let f = |t: &mut Tape, w: Var| {
                let mut p = vae.register(t);
                p.encoder[layer].0 = w;
                Ok(loss_vars(t, &p, &x, |_, _| Ok(eta.clone()), None, &spec, 40)?.0)
            };
            let err = gradient_check(f, &vae.encoder[layer].weight, 1e-5).unwrap();
            assert!(err < 1e-3, "layer {layer}: {err}");
        }
    }
}
