use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hyperlat::anomaly::{replica_angle, roc_metrics, score_dataset, scores_csv};
use hyperlat::datasets::{self, LabeledDataset, Scaling};
use hyperlat::geometry::{
    equatorial_slice_bound, gaussian_hyperspherical_histograms, simulate_equatorial_mass,
    simulate_gaussian_norms, simulate_pairwise_angles, volume_reduction_curves, ConcentrationReport,
    SliceMass,
};
use hyperlat::model::{self, VaeCheckpoint};
use hyperlat::stats::Histogram;
use hyperlat::{DenseMatrix, Error, Result};
use serde::Serialize;

use crate::config::{
    DatasetSpec, EvalConfig, SimKind, SimulateConfig, TrainCommandConfig, VisualizeConfig,
};
use crate::svg::{self, ScatterPoint, Series};

/// Shared per-invocation settings.
pub struct Ctx {
    pub out: PathBuf,
    pub seed: u64,
    /// Embedded into SVGs as a comment when present.
    pub timestamp: Option<String>,
}

impl Ctx {
    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn ts(&self) -> Option<&str> {
        self.timestamp.as_deref()
    }
}

/// Prints a line, ignoring a closed stdout.
pub fn say(line: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn simulate(cfg: &SimulateConfig, ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let dims = cfg.dims();
    if dims.is_empty() {
        return Err(Error::Config {
            field: "dims".into(),
            reason: "need at least one dimension".into(),
        });
    }
    let mut written = Vec::new();
    let mut reports = Vec::new();
    match cfg.kind {
        SimKind::Norms => {
            let mut csv =
                String::from("dimension,samples,mean,std,relative_width,bin_center,mass,count\n");
            let mut hists = Vec::new();
            for &n in &dims {
                let r = simulate_gaussian_norms(n, cfg.samples, ctx.seed)?;
                let h = &r.norms.histogram;
                for b in 0..h.counts.len() {
                    let _ = writeln!(
                        csv,
                        "{n},{},{:?},{:?},{:?},{:?},{:?},{}",
                        r.samples,
                        r.norms.mean,
                        r.norms.std,
                        r.relative_width,
                        h.bin_center(b),
                        h.masses[b],
                        h.counts[b]
                    );
                }
                hists.push((format!("n = {n}"), h.clone()));
                let mut rep = ConcentrationReport::new(n, cfg.samples);
                rep.norms = Some(r);
                reports.push(rep);
            }
            written.push(ctx.write("norms.csv", csv)?);
            written.push(ctx.write("norms.svg", histogram_svg("Norms of standard Gaussian vectors", "norm", &hists, ctx))?);
        }
        SimKind::Angles => {
            let mut csv = String::from(
                "dimension,pairs,mean_cos,std_cos,mean_angle,std_angle,bin_center,mass,count\n",
            );
            let mut hists = Vec::new();
            for &n in &dims {
                let r = simulate_pairwise_angles(n, cfg.samples, ctx.seed)?;
                let h = &r.cosines.histogram;
                for b in 0..h.counts.len() {
                    let _ = writeln!(
                        csv,
                        "{n},{},{:?},{:?},{:?},{:?},{:?},{:?},{}",
                        r.pairs,
                        r.cosines.mean,
                        r.cosines.std,
                        r.angles.mean,
                        r.angles.std,
                        h.bin_center(b),
                        h.masses[b],
                        h.counts[b]
                    );
                }
                hists.push((format!("n = {n}"), h.clone()));
                let mut rep = ConcentrationReport::new(n, cfg.samples);
                rep.pairwise = Some(r);
                reports.push(rep);
            }
            written.push(ctx.write("angles.csv", csv)?);
            written.push(ctx.write(
                "angles.svg",
                histogram_svg("Cosine between independent Gaussian pairs", "cosine", &hists, ctx),
            )?);
        }
        SimKind::Slice => {
            if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
                return Err(Error::Config {
                    field: "eps".into(),
                    reason: "must be > 0".into(),
                });
            }
            let mut csv = String::from("dimension,eps,empirical,bound\n");
            let (mut emp, mut bound) = (Vec::new(), Vec::new());
            for &n in &dims {
                let m = SliceMass {
                    eps: cfg.eps,
                    empirical: simulate_equatorial_mass(n, cfg.eps, cfg.samples, ctx.seed)?,
                    bound: equatorial_slice_bound(n, cfg.eps),
                };
                let _ = writeln!(csv, "{n},{:?},{:?},{:?}", m.eps, m.empirical, m.bound);
                let x = (n as f64).log10();
                emp.push((x, m.empirical));
                bound.push((x, m.bound));
                let mut rep = ConcentrationReport::new(n, cfg.samples);
                rep.slice = Some(m);
                reports.push(rep);
            }
            written.push(ctx.write("slice.csv", csv)?);
            let series = [
                Series { name: "empirical", points: emp },
                Series { name: "lower bound", points: bound },
            ];
            let title = format!("Mass of the equatorial slice, eps = {}", cfg.eps);
            written.push(ctx.write(
                "slice.svg",
                svg::line_plot(&title, "log10 n", "mass", &series, false, ctx.ts()),
            )?);
        }
        SimKind::VolumeCurves => {
            let t: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
            for &n in &dims {
                let c = volume_reduction_curves(n, &t)?;
                written.push(ctx.write(&format!("volume_n{n}.csv"), c.to_csv())?);
                let radial = format!("(1-t)^{}", n - 1);
                let angular = format!("(1-t)^{}", n * (n - 1) / 2);
                let series = [
                    Series {
                        name: &radial,
                        points: c.t.iter().copied().zip(c.radial.iter().copied()).collect(),
                    },
                    Series {
                        name: &angular,
                        points: c.t.iter().copied().zip(c.angular.iter().copied()).collect(),
                    },
                ];
                let title = format!("Volume element reduction, n = {n}");
                written.push(ctx.write(
                    &format!("volume_n{n}.svg"),
                    svg::line_plot(&title, "t", "v_t / v_0", &series, true, ctx.ts()),
                )?);
            }
        }
        SimKind::HsphHistograms => {
            for &n in &dims {
                let p = gaussian_hyperspherical_histograms(n, cfg.samples, ctx.seed)?;
                written.push(ctx.write(&format!("hsph_n{n}.csv"), p.to_csv())?);
                let shown = shown_indices(p.per_angle.len(), 8);
                let hists: Vec<(String, Histogram)> = shown
                    .iter()
                    .map(|&i| (format!("phi_{}", i + 1), p.per_angle[i].histogram.clone()))
                    .collect();
                let title = format!("Gaussian samples in hyperspherical coordinates, n = {n}");
                written.push(ctx.write(
                    &format!("hsph_n{n}.svg"),
                    histogram_svg(&title, "angle (rad)", &hists, ctx),
                )?);
                let mut rep = ConcentrationReport::new(n, cfg.samples);
                rep.angles = Some(p);
                reports.push(rep);
            }
        }
    }
    if !reports.is_empty() {
        written.push(ctx.write("report.json", json(&reports)?)?);
    }
    Ok(written)
}

/// At most `max` indices of `0..len`, evenly spread and including both ends.
fn shown_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max)
        .map(|i| (i * (len - 1) + (max - 1) / 2) / (max - 1))
        .collect();
    idx.dedup();
    idx
}

fn histogram_svg(title: &str, xlabel: &str, hists: &[(String, Histogram)], ctx: &Ctx) -> String {
    let refs: Vec<(&str, &Histogram)> = hists.iter().map(|(n, h)| (n.as_str(), h)).collect();
    svg::histogram_plot(title, xlabel, &refs, ctx.ts())
}

fn generated(
    train: LabeledDataset,
    test: LabeledDataset,
    ctx: &Ctx,
    written: &mut Vec<PathBuf>,
) -> Result<(PathBuf, PathBuf)> {
    let (train_path, test_path) = (ctx.out.join("train.csv"), ctx.out.join("test.csv"));
    datasets::save_csv(&train, &train_path)?;
    datasets::save_csv(&test, &test_path)?;
    written.extend([train_path.clone(), test_path.clone()]);
    Ok((train_path, test_path))
}

#[derive(Serialize)]
struct Timing {
    total_seconds: f64,
    epoch_seconds: Vec<f64>,
}

pub fn train(cfg: &TrainCommandConfig, ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let spec = cfg.resolve_loss_spec()?;
    let mut written = vec![ctx.write("loss_spec.json", spec.to_json() + "\n")?];

    let (train_path, labels) = match &cfg.dataset {
        DatasetSpec::Csv { train, labels, .. } => (train.clone(), *labels),
        DatasetSpec::Unsup { .. } => {
            let p = cfg.dataset.unsup_params(ctx.seed).expect("unsup variant");
            let (tr, te) = datasets::gen_unsup_benchmark(&p)?;
            (generated(tr, te, ctx, &mut written)?.0, true)
        }
        DatasetSpec::Ood { .. } => {
            let p = cfg.dataset.ood_params(ctx.seed).expect("ood variant");
            let (tr, te) = datasets::gen_ood_benchmark(&p)?;
            (generated(tr, te, ctx, &mut written)?.0, true)
        }
    };
    let data = datasets::load_csv(&train_path, labels)?;
    let roll_labels = match cfg.roll_spacing {
        Some(_) if data.labels.is_empty() => {
            return Err(Error::Config {
                field: "roll_spacing".into(),
                reason: "needs a labelled training set".into(),
            })
        }
        Some(_) => Some(data.labels.as_slice()),
        None => None,
    };

    let (mut checkpoint, report) =
        model::train(&data.features, roll_labels, &spec, &cfg.train_config(ctx.seed))?;
    checkpoint.input_scaling = data.meta.scaling.clone();
    let model_path = ctx.out.join("model.bin");
    checkpoint.save(&model_path)?;
    written.push(model::checkpoint::sidecar_path(&model_path));
    written.push(model_path);

    written.push(ctx.write("loss.csv", report.to_csv())?);
    let curve: Vec<(f64, f64)> = report
        .epochs
        .iter()
        .map(|r| (r.epoch as f64, r.loss.total))
        .collect();
    let series = [Series { name: "total", points: curve }];
    written.push(ctx.write(
        "loss.svg",
        svg::line_plot("Training loss", "epoch", "loss", &series, false, ctx.ts()),
    )?);
    let timing = Timing {
        total_seconds: report.total_seconds(),
        epoch_seconds: report.epochs.iter().map(|r| r.seconds).collect(),
    };
    written.push(ctx.write("timing.json", json(&timing)?)?);

    if let Some(last) = report.epochs.last() {
        say(format!("epoch {}: loss {:.6}", last.epoch, last.loss.total));
    }
    say(format!("weights sha256 {}", checkpoint.sha256()?));
    Ok(written)
}

fn input_scaling(checkpoint: &VaeCheckpoint) -> Scaling {
    checkpoint
        .input_scaling
        .clone()
        .unwrap_or_else(|| Scaling::identity(checkpoint.model.input_dim))
}

pub fn eval(cfg: &EvalConfig, ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let checkpoint = VaeCheckpoint::load(&cfg.checkpoint)?;
    let scaling = input_scaling(&checkpoint);
    let train = datasets::load_csv_with_scaling(&cfg.train, cfg.train_labels, &scaling)?;
    let test = datasets::load_csv_with_scaling(&cfg.test, true, &scaling)?;
    let mu_train = checkpoint.embed(&train.features)?;
    let mu_test = checkpoint.embed(&test.features)?;
    let anomalous = test.anomalous();
    let scored = score_dataset(&mu_train, &mu_test, &anomalous, cfg.k)?;
    let normal: Vec<usize> = (0..anomalous.len()).filter(|&i| !anomalous[i]).collect();
    let mut report = roc_metrics(&scored)?;
    report = report.with_replica(&replica_angle(&mu_test, &mu_test.select_rows(&normal))?);

    let mut written = vec![
        ctx.write("scores.csv", scores_csv(&scored))?,
        ctx.write("roc.json", report.to_json() + "\n")?,
    ];
    let roc = [Series {
        name: "ROC",
        points: report.roc.iter().map(|p| (p.fpr, p.tpr)).collect(),
    }, Series {
        name: "chance",
        points: vec![(0.0, 0.0), (1.0, 1.0)],
    }];
    let title = format!("ROC, AUROC = {:.4}", report.auroc);
    written.push(ctx.write(
        "roc.svg",
        svg::line_plot(&title, "false positive rate", "true positive rate", &roc, false, ctx.ts()),
    )?);
    let hists = [
        ("normal", &report.normal_histogram),
        ("anomalous", &report.anomalous_histogram),
    ];
    written.push(ctx.write(
        "scores_hist.svg",
        svg::histogram_plot(&format!("{}-NN anomaly scores", cfg.k), "score", &hists, ctx.ts()),
    )?);
    say(format!("AUROC {:.6}  FPR95 {:.6}", report.auroc, report.fpr95));
    Ok(written)
}

/// Balanced contiguous thirds of `n`; the remainder goes to the last groups.
pub fn group_sizes(n: usize) -> [usize; 3] {
    let (base, rem) = (n / 3, n % 3);
    [base, base + usize::from(rem >= 2), base + usize::from(rem >= 1)]
}

/// Averages each row within the three groups and normalizes to unit length.
pub fn sphere_points(latent: &DenseMatrix) -> Result<Vec<[f64; 3]>> {
    let n = latent.cols();
    if n < 3 {
        return Err(Error::Precondition(format!(
            "sphere projection needs latent dim >= 3, got {n}"
        )));
    }
    let sizes = group_sizes(n);
    latent
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut p = [0.0; 3];
            let mut start = 0;
            for (g, &len) in sizes.iter().enumerate() {
                p[g] = row[start..start + len].iter().sum::<f64>() / len as f64;
                start += len;
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Domain(format!("row {i} averages to a zero vector")));
            }
            Ok(p.map(|v| v / norm))
        })
        .collect()
}

/// Orthographic view along `(1, 1, 1)/√3`: screen axes `(1, −1, 0)/√2` and
/// `(−1, −1, 2)/√6`, plus the depth toward the viewer.
pub fn oblique_view(p: &[f64; 3]) -> (f64, f64, f64) {
    let x = (p[0] - p[1]) / 2f64.sqrt();
    let y = (2.0 * p[2] - p[0] - p[1]) / 6f64.sqrt();
    let depth = (p[0] + p[1] + p[2]) / 3f64.sqrt();
    (x, y, depth)
}

/// Mean cosine over distinct pairs of unit vectors, via `‖Σu‖²`.
pub fn mean_pairwise_cosine(points: &[[f64; 3]]) -> f64 {
    let m = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let mut s = [0.0; 3];
    for p in points {
        for j in 0..3 {
            s[j] += p[j];
        }
    }
    let sq: f64 = s.iter().map(|v| v * v).sum();
    let diag: f64 = points.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum();
    (sq - diag) / (m * (m - 1.0))
}

#[derive(Serialize)]
struct SphereSummary {
    latent_dim: usize,
    group_sizes: [usize; 3],
    points: usize,
    mean_pairwise_cosine: f64,
}

pub fn visualize(cfg: &VisualizeConfig, ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let checkpoint = VaeCheckpoint::load(&cfg.checkpoint)?;
    let n = checkpoint.model.latent_dim;
    if n < 3 {
        return Err(Error::Precondition(format!(
            "sphere projection needs latent dim >= 3, got {n}"
        )));
    }
    let data = datasets::load_csv_with_scaling(&cfg.data, cfg.labels, &input_scaling(&checkpoint))?;
    let points = sphere_points(&checkpoint.embed(&data.features)?)?;
    let label = |i: usize| data.labels.get(i).copied().unwrap_or(0);

    let mut csv = String::from("x,y,z,label\n");
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(csv, "{:?},{:?},{:?},{}", p[0], p[1], p[2], label(i));
    }
    let mut groups: Vec<usize> = (0..points.len()).map(label).collect();
    groups.sort_unstable();
    groups.dedup();
    let scatter: Vec<ScatterPoint> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (x, y, depth) = oblique_view(p);
            ScatterPoint {
                x,
                y,
                group: groups.binary_search(&label(i)).expect("label collected above"),
                hidden: depth < 0.0,
            }
        })
        .collect();
    let names: Vec<String> = groups.iter().map(|l| format!("label {l}")).collect();
    let summary = SphereSummary {
        latent_dim: n,
        group_sizes: group_sizes(n),
        points: points.len(),
        mean_pairwise_cosine: mean_pairwise_cosine(&points),
    };
    let title = format!(
        "Latent means on the sphere, groups {:?}, viewed from (1,1,1)",
        summary.group_sizes
    );
    let written = vec![
        ctx.write("sphere.csv", csv)?,
        ctx.write("sphere.svg", svg::sphere_projection(&title, &scatter, &names, ctx.ts()))?,
        ctx.write("sphere_summary.json", json(&summary)?)?,
    ];
    say(format!("mean pairwise cosine {:.6}", summary.mean_pairwise_cosine));
    Ok(written)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sizes_balance_thirds() {
        assert_eq!(group_sizes(256), [85, 85, 86]);
        assert_eq!(group_sizes(3), [1, 1, 1]);
        assert_eq!(group_sizes(16), [5, 5, 6]);
        assert_eq!(group_sizes(17), [5, 6, 6]);
        for n in 3..300 {
            let g = group_sizes(n);
            assert_eq!(g.iter().sum::<usize>(), n);
            assert!(g[2] - g[0] <= 1);
        }
    }

    #[test]
    fn identity_grouping_lands_on_sphere() {
        let m = DenseMatrix::from_rows(&[[3.0, 4.0, 12.0], [-1.0, 0.5, 2.0]]).unwrap();
        let p = sphere_points(&m).unwrap();
        assert!((p[0][0] - 3.0 / 13.0).abs() < 1e-15);
        for q in &p {
            assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pairwise_cosine_matches_brute_force() {
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.7;
                let v = [t.cos(), t.sin(), (0.3 * t).cos()];
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.map(|x| x / n)
            })
            .collect();
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                if i != j {
                    sum += pts[i].iter().zip(&pts[j]).map(|(a, b)| a * b).sum::<f64>();
                    count += 1.0;
                }
            }
        }
        assert!((mean_pairwise_cosine(&pts) - sum / count).abs() < 1e-12);
    }

    #[test]
    fn oblique_view_is_orthonormal() {
        for p in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, -0.8, 0.0]] {
            let (x, y, d) = oblique_view(&p);
            assert!((x * x + y * y + d * d - 1.0).abs() < 1e-12);
        }
        let (x, y, d) = oblique_view(&[1.0 / 3f64.sqrt(); 3]);
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12 && (d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shown_indices_keep_ends() {
        assert_eq!(shown_indices(5, 8), vec![0, 1, 2, 3, 4]);
        let s = shown_indices(255, 8);
        assert_eq!((s[0], *s.last().unwrap(), s.len()), (0, 254, 8));
    }
}
