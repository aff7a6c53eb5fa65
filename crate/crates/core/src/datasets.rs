//! Synthetic benchmarks and CSV ingestion.
//!
//! Both generators draw low-dimensional latent points, embed them with a
//! fixed random linear map and squash the result into `[0, 1]^d` with
//! `x = (tanh(M v) + 1) / 2`. Structure (the map, cluster centres and shift
//! direction), train samples and test samples come from disjoint RNG
//! substreams of the same seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{Rng, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-column min-max scaling fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Columns with `max == min`; they scale to 0.
    pub degenerate: Vec<bool>,
}

impl Scaling {
    pub fn identity(cols: usize) -> Self {
        Self {
            min: vec![0.0; cols],
            max: vec![1.0; cols],
            degenerate: vec![false; cols],
        }
    }

    pub fn fit(features: &DenseMatrix) -> Self {
        let cols = features.cols();
        let mut min = vec![f64::INFINITY; cols];
        let mut max = vec![f64::NEG_INFINITY; cols];
        for row in features.row_iter() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let degenerate = min.iter().zip(&max).map(|(a, b)| a == b).collect();
        Self {
            min,
            max,
            degenerate,
        }
    }

    pub fn cols(&self) -> usize {
        self.min.len()
    }

    /// Maps each column to `[0, 1]`; values outside the fitted range clamp.
    pub fn apply(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        if features.cols() != self.cols() {
            return Err(Error::dim(format!(
                "scaling has {} columns, data has {}",
                self.cols(),
                features.cols()
            )));
        }
        let mut out = features.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = if self.degenerate[j] {
                    0.0
                } else {
                    ((*v - self.min[j]) / (self.max[j] - self.min[j])).clamp(0.0, 1.0)
                };
            }
        }
        Ok(out)
    }
}

/// Generator name, seed and parameters, plus the scaling applied on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
    pub split: Split,
    pub scaling: Option<Scaling>,
}

/// Features in `[0, 1]` with one label per row.
///
/// Train labels are class ids. Test labels are 0 for normal (in-distribution)
/// rows and 1 for anomalous ones.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn anomalous(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Rows whose label is `label`.
    pub fn rows_with_label(&self, label: usize) -> DenseMatrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == label).collect();
        self.features.select_rows(&idx)
    }
}

/// Parameters of [`gen_unsup_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsupParams {
    pub d: usize,
    pub clusters: usize,
    /// Intrinsic dimension of the normal manifold.
    #[serde(default = "intrinsic")]
    pub intrinsic: usize,
    /// Anomaly displacement in units of `cluster_std`.
    pub anomaly_shift: f64,
    #[serde(default = "cluster_std")]
    pub cluster_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

fn intrinsic() -> usize {
    4
}

fn cluster_std() -> f64 {
    0.25
}

impl UnsupParams {
    pub fn new(d: usize, clusters: usize, anomaly_shift: f64, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            d,
            clusters,
            intrinsic: intrinsic(),
            anomaly_shift,
            cluster_std: cluster_std(),
            n_train,
            n_test,
            seed,
        }
    }
}

/// Parameters of [`gen_ood_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodParams {
    pub d: usize,
    pub classes: usize,
    #[serde(default = "intrinsic")]
    pub intrinsic: usize,
    /// Displacement of each out-of-distribution class in units of `cluster_std`.
    pub offset: f64,
    #[serde(default = "cluster_std")]
    pub cluster_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl OodParams {
    pub fn new(d: usize, classes: usize, offset: f64, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            d,
            classes,
            intrinsic: intrinsic(),
            offset,
            cluster_std: cluster_std(),
            n_train,
            n_test,
            seed,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| normal(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Fixed embedding `v ↦ (tanh(M v) + 1) / 2` with `M` of shape `d × q`.
struct Embedding {
    map: DenseMatrix,
}

impl Embedding {
    fn new(rng: &mut Rng, d: usize, q: usize) -> Self {
        let scale = 1.0 / (q as f64).sqrt();
        Self {
            map: DenseMatrix::from_fn(d, q, |_, _| scale * normal(rng)),
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.map.rows())
            .map(|i| {
                let s: f64 = self.map.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
                0.5 * (s.tanh() + 1.0)
            })
            .collect()
    }
}

fn check_sizes(d: usize, n_train: usize, n_test: usize, std: f64) -> Result<()> {
    if d < 4 {
        return Err(Error::config("d", "must be >= 4"));
    }
    if n_train == 0 {
        return Err(Error::config("n_train", "must be > 0"));
    }
    if n_test < 2 || !n_test.is_multiple_of(2) {
        return Err(Error::config("n_test", "must be a positive even count"));
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::config("cluster_std", "must be > 0"));
    }
    Ok(())
}

/// Normal data: `clusters` Gaussian clusters in a `q`-dimensional latent
/// space, embedded through an extra held-out latent coordinate that is
/// centred at 0. Anomalies move `anomaly_shift · cluster_std` along it.
/// The test split is half normal and half anomalous.
pub fn gen_unsup_benchmark(p: &UnsupParams) -> Result<(LabeledDataset, LabeledDataset)> {
    check_sizes(p.d, p.n_train, p.n_test, p.cluster_std)?;
    if p.clusters == 0 {
        return Err(Error::config("clusters", "must be >= 1"));
    }
    if p.intrinsic == 0 {
        return Err(Error::config("intrinsic", "must be >= 1"));
    }
    if !p.anomaly_shift.is_finite() {
        return Err(Error::config("anomaly_shift", "must be finite"));
    }
    let streams = Streams::new(p.seed);
    let mut structure = streams.stream("dataset-structure");
    let q = p.intrinsic;
    let embed = Embedding::new(&mut structure, p.d, q + 1);
    let centres: Vec<Vec<f64>> = (0..p.clusters).map(|_| gaussian_vec(&mut structure, q)).collect();

    let draw = |rng: &mut Rng, shift: f64| -> (Vec<f64>, usize) {
        let c = rng.random_range(0..p.clusters);
        let mut v: Vec<f64> = centres[c]
            .iter()
            .map(|&m| m + p.cluster_std * normal(rng))
            .collect();
        let held_out: f64 = StandardNormal.sample(rng);
        v.push(p.cluster_std * (held_out + shift));
        (embed.apply(&v), c)
    };

    let mut train_rng = streams.stream("dataset-train");
    let mut rows = Vec::with_capacity(p.n_train);
    let mut labels = Vec::with_capacity(p.n_train);
    for _ in 0..p.n_train {
        let (x, c) = draw(&mut train_rng, 0.0);
        rows.push(x);
        labels.push(c);
    }

    let mut test_rng = streams.stream("dataset-test");
    let half = p.n_test / 2;
    let mut test_rows = Vec::with_capacity(p.n_test);
    for i in 0..p.n_test {
        let shift = if i < half { 0.0 } else { p.anomaly_shift };
        test_rows.push(draw(&mut test_rng, shift).0);
    }
    let test_labels = (0..p.n_test).map(|i| usize::from(i >= half)).collect();

    let params = serde_json::to_value(p)?;
    Ok((
        dataset("unsup", p.seed, &params, Split::Train, rows, labels)?,
        dataset("unsup", p.seed, &params, Split::Test, test_rows, test_labels)?,
    ))
}

/// One Gaussian cluster per in-distribution class. Each out-of-distribution
/// class is the matching cluster displaced by `offset · cluster_std` along a
/// fixed random unit direction of the latent space.
///
/// The test split is half in-distribution (label 0) and half displaced
/// (label 1); train labels are class ids `0..classes`.
pub fn gen_ood_benchmark(p: &OodParams) -> Result<(LabeledDataset, LabeledDataset)> {
    check_sizes(p.d, p.n_train, p.n_test, p.cluster_std)?;
    if p.classes < 2 {
        return Err(Error::config("classes", "must be >= 2"));
    }
    if p.n_train < p.classes {
        return Err(Error::config("n_train", "must cover every class"));
    }
    if p.intrinsic == 0 {
        return Err(Error::config("intrinsic", "must be >= 1"));
    }
    if !p.offset.is_finite() {
        return Err(Error::config("offset", "must be finite"));
    }
    let streams = Streams::new(p.seed);
    let mut structure = streams.stream("dataset-structure");
    let q = p.intrinsic;
    let embed = Embedding::new(&mut structure, p.d, q);
    let centres: Vec<Vec<f64>> = (0..p.classes).map(|_| gaussian_vec(&mut structure, q)).collect();
    let direction = unit(gaussian_vec(&mut structure, q));

    let draw = |rng: &mut Rng, class: usize, offset: f64| -> Vec<f64> {
        let v: Vec<f64> = centres[class]
            .iter()
            .zip(&direction)
            .map(|(&m, &u)| {
                m + p.cluster_std * (offset * u + normal(rng))
            })
            .collect();
        embed.apply(&v)
    };

    let mut train_rng = streams.stream("dataset-train");
    let mut rows = Vec::with_capacity(p.n_train);
    let mut labels = Vec::with_capacity(p.n_train);
    for i in 0..p.n_train {
        let class = i % p.classes;
        rows.push(draw(&mut train_rng, class, 0.0));
        labels.push(class);
    }

    let mut test_rng = streams.stream("dataset-test");
    let half = p.n_test / 2;
    let mut test_rows = Vec::with_capacity(p.n_test);
    for i in 0..p.n_test {
        let class = test_rng.random_range(0..p.classes);
        let offset = if i < half { 0.0 } else { p.offset };
        test_rows.push(draw(&mut test_rng, class, offset));
    }
    let test_labels = (0..p.n_test).map(|i| usize::from(i >= half)).collect();

    let params = serde_json::to_value(p)?;
    Ok((
        dataset("ood", p.seed, &params, Split::Train, rows, labels)?,
        dataset("ood", p.seed, &params, Split::Test, test_rows, test_labels)?,
    ))
}

fn dataset(
    name: &str,
    seed: u64,
    params: &serde_json::Value,
    split: Split,
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
) -> Result<LabeledDataset> {
    Ok(LabeledDataset {
        features: DenseMatrix::from_rows(&rows)?,
        labels,
        meta: DatasetMeta {
            name: name.to_string(),
            seed: Some(seed),
            params: params.clone(),
            split,
            scaling: None,
        },
    })
}

/// Path of the JSON sidecar next to a CSV file.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `features[, label]` rows with shortest round-trip float formatting
/// and the metadata sidecar.
pub fn save_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, row) in data.features.row_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if !data.labels.is_empty() {
            cells.push(data.labels[i].to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&data.meta)?)?;
    Ok(())
}

fn read_rows(path: &Path, has_labels: bool) -> Result<(DenseMatrix, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if *width.get_or_insert(cells.len()) != cells.len() {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected {} cells, found {}", width.unwrap(), cells.len()),
            });
        }
        let (feat, label) = if has_labels {
            if cells.len() < 2 {
                return Err(Error::Parse {
                    line: lineno,
                    reason: "need at least one feature and a label".into(),
                });
            }
            let (f, l) = cells.split_at(cells.len() - 1);
            let label = l[0].parse::<usize>().map_err(|_| Error::Parse {
                line: lineno,
                reason: format!("label {:?} is not a non-negative integer", l[0]),
            })?;
            (f, Some(label))
        } else {
            (&cells[..], None)
        };
        let mut row = Vec::with_capacity(feat.len());
        for cell in feat {
            let v = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            row.push(v.ok_or_else(|| Error::Parse {
                line: lineno,
                reason: format!("{cell:?} is not a finite number"),
            })?);
        }
        rows.push(row);
        labels.extend(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            reason: "no data rows".into(),
        });
    }
    Ok((DenseMatrix::from_rows(&rows)?, labels))
}

fn read_meta(path: &Path, split: Split) -> DatasetMeta {
    fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|s| serde_json::from_str::<DatasetMeta>(&s).ok())
        .unwrap_or(DatasetMeta {
            name: path.display().to_string(),
            seed: None,
            params: serde_json::Value::Null,
            split,
            scaling: None,
        })
}

/// Loads a headerless numeric CSV (optional final integer label column)
/// and min-max scales each column, recording the scaling in the metadata.
pub fn load_csv(path: &Path, has_labels: bool) -> Result<LabeledDataset> {
    let (raw, labels) = read_rows(path, has_labels)?;
    let scaling = Scaling::fit(&raw);
    finish(path, raw, labels, scaling, Split::Train)
}

/// Loads a CSV and applies a previously fitted scaling.
pub fn load_csv_with_scaling(path: &Path, has_labels: bool, scaling: &Scaling) -> Result<LabeledDataset> {
    let (raw, labels) = read_rows(path, has_labels)?;
    finish(path, raw, labels, scaling.clone(), Split::Test)
}

fn finish(
    path: &Path,
    raw: DenseMatrix,
    labels: Vec<usize>,
    scaling: Scaling,
    split: Split,
) -> Result<LabeledDataset> {
    let features = scaling.apply(&raw)?;
    let mut meta = read_meta(path, split);
    meta.scaling = Some(scaling);
    Ok(LabeledDataset {
        features,
        labels,
        meta,
    })
}
