//! k-NN anomaly scoring on latent means and the ROC summary.
//!
//! The score of a query is the mean Euclidean distance to its `k` nearest
//! reference points. Anomalous samples are the positive class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypersphere::norm;
use crate::matrix::DenseMatrix;
use crate::stats::{self, Histogram};

pub const DEFAULT_K: usize = 3;
const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: usize,
    pub score: f64,
    pub anomalous: bool,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean distance from `query` to its `k` nearest rows of `reference`.
///
/// Equal distances are ordered by reference index; the selected
/// distances are summed in ascending order.
pub fn knn_score(query: &[f64], reference: &DenseMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::pre("k must be >= 1"));
    }
    if reference.rows() < k {
        return Err(Error::pre(format!(
            "need at least k = {k} reference points, have {}",
            reference.rows()
        )));
    }
    if query.len() != reference.cols() {
        return Err(Error::dim(format!(
            "query has {} coordinates, reference rows have {}",
            query.len(),
            reference.cols()
        )));
    }
    let mut dist: Vec<(f64, usize)> = reference
        .row_iter()
        .enumerate()
        .map(|(i, r)| (squared_distance(query, r), i))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, order);
        dist.truncate(k);
    }
    dist.sort_by(order);
    let total: f64 = dist.iter().map(|(d2, _)| d2.sqrt()).sum();
    let score = total / k as f64;
    if !score.is_finite() {
        return Err(Error::domain("non-finite k-NN score"));
    }
    Ok(score)
}

/// [`knn_score`] for every row of `test`, in parallel.
pub fn knn_scores(train: &DenseMatrix, test: &DenseMatrix, k: usize) -> Result<Vec<f64>> {
    if train.rows() < k {
        return Err(Error::pre(format!(
            "need at least k = {k} reference points, have {}",
            train.rows()
        )));
    }
    (0..test.rows())
        .into_par_iter()
        .map(|i| knn_score(test.row(i), train, k))
        .collect()
}

/// Scores test means against training means; `anomalous[i]` labels row `i`.
pub fn score_dataset(
    train_mu: &DenseMatrix,
    test_mu: &DenseMatrix,
    anomalous: &[bool],
    k: usize,
) -> Result<Vec<ScoredSample>> {
    if anomalous.len() != test_mu.rows() {
        return Err(Error::dim(format!(
            "{} labels for {} test rows",
            anomalous.len(),
            test_mu.rows()
        )));
    }
    let scores = knn_scores(train_mu, test_mu, k)?;
    Ok(scores
        .into_iter()
        .zip(anomalous)
        .enumerate()
        .map(|(id, (score, &anomalous))| ScoredSample {
            id,
            score,
            anomalous,
        })
        .collect())
}

/// Reconstruction score `‖x − x̂‖` per row.
pub fn reconstruction_scores(x: &DenseMatrix, x_hat: &DenseMatrix) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    Ok(x.row_iter()
        .zip(x_hat.row_iter())
        .map(|(a, b)| squared_distance(a, b).sqrt())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub normal_count: usize,
    pub anomalous_count: usize,
    /// From `(0, 0)` to `(1, 1)`, one point per distinct threshold.
    pub roc: Vec<RocPoint>,
    /// Mann–Whitney estimate with ties counted as ½.
    pub auroc: f64,
    /// Trapezoidal area under `roc`.
    pub auroc_trapezoid: f64,
    /// 95th percentile of the normal scores.
    pub threshold95: f64,
    pub fpr95: f64,
    pub normal_histogram: Histogram,
    pub anomalous_histogram: Histogram,
    pub min_normal_score: f64,
    pub replica: Option<ReplicaSummary>,
}

impl RocReport {
    pub fn with_replica(mut self, angles: &ReplicaAngles) -> Self {
        self.replica = Some(ReplicaSummary {
            mean: angles.mean,
            std: angles.std,
        });
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("RocReport is always serialisable")
    }
}

/// Average 1-based ranks with ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn roc_metrics(scored: &[ScoredSample]) -> Result<RocReport> {
    if let Some(s) = scored.iter().find(|s| !(s.score.is_finite() && s.score >= 0.0)) {
        return Err(Error::domain(format!("sample {} has score {}", s.id, s.score)));
    }
    let normal: Vec<f64> = scored.iter().filter(|s| !s.anomalous).map(|s| s.score).collect();
    let anomalous: Vec<f64> = scored.iter().filter(|s| s.anomalous).map(|s| s.score).collect();
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::pre("ROC needs both normal and anomalous samples"));
    }
    let (n_neg, n_pos) = (normal.len() as f64, anomalous.len() as f64);

    let all: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let ranks = average_ranks(&all);
    let rank_sum: f64 = scored
        .iter()
        .zip(&ranks)
        .filter(|(s, _)| s.anomalous)
        .map(|(_, r)| r)
        .sum();
    let auroc = (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);

    let mut order: Vec<&ScoredSample> = scored.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut roc = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].score;
        while i < order.len() && order[i].score == t {
            if order[i].anomalous {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
        });
    }
    let auroc_trapezoid = roc
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();

    let mut sorted_normal = normal.clone();
    sorted_normal.sort_by(f64::total_cmp);
    let threshold95 = stats::percentile_sorted(&sorted_normal, 0.95);
    let accepted = anomalous.iter().filter(|&&s| s <= threshold95).count();
    let fpr95 = accepted as f64 / n_pos;

    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    Ok(RocReport {
        normal_count: normal.len(),
        anomalous_count: anomalous.len(),
        roc,
        auroc,
        auroc_trapezoid,
        threshold95,
        fpr95,
        normal_histogram: Histogram::with_range(&normal, HISTOGRAM_BINS, lo, hi),
        anomalous_histogram: Histogram::with_range(&anomalous, HISTOGRAM_BINS, lo, hi),
        min_normal_score: sorted_normal[0],
        replica: None,
    })
}

/// Angles between test means and the mean of the normal test means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaAngles {
    pub angles: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn replica_angle(test_mu: &DenseMatrix, normal_test_mu: &DenseMatrix) -> Result<ReplicaAngles> {
    if normal_test_mu.rows() == 0 {
        return Err(Error::pre("no normal test samples"));
    }
    if test_mu.cols() != normal_test_mu.cols() {
        return Err(Error::dim(format!(
            "{} vs {} latent dimensions",
            test_mu.cols(),
            normal_test_mu.cols()
        )));
    }
    let p = normal_test_mu.rows() as f64;
    let centre: Vec<f64> = crate::autodiff::column_sums(normal_test_mu)
        .into_data()
        .into_iter()
        .map(|s| s / p)
        .collect();
    let centre_norm = norm(&centre);
    if centre_norm == 0.0 {
        return Err(Error::domain("mean of the normal test means is zero"));
    }
    let mut angles = Vec::with_capacity(test_mu.rows());
    for (i, row) in test_mu.row_iter().enumerate() {
        let r = norm(row);
        if r == 0.0 {
            return Err(Error::domain(format!("test mean {i} is zero")));
        }
        let dot: f64 = row.iter().zip(&centre).map(|(a, b)| a * b).sum();
        angles.push((dot / (r * centre_norm)).clamp(-1.0, 1.0).acos());
    }
    Ok(ReplicaAngles {
        mean: stats::mean(&angles),
        std: stats::std_dev(&angles),
        angles,
    })
}

/// `id,score,label` rows with label `normal` or `anomalous`.
pub fn scores_csv(scored: &[ScoredSample]) -> String {
    let mut out = String::from("id,score,label\n");
    for s in scored {
        let label = if s.anomalous { "anomalous" } else { "normal" };
        out.push_str(&format!("{},{:?},{}\n", s.id, s.score, label));
    }
    out
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(bad("expected id,score,label"));
        }
        out.push(ScoredSample {
            id: cells[0].parse().map_err(|_| bad("bad id"))?,
            score: cells[1].parse().map_err(|_| bad("bad score"))?,
            anomalous: match cells[2] {
                "anomalous" => true,
                "normal" => false,
                _ => return Err(bad("label must be normal or anomalous")),
            },
        });
    }
    Ok(out)
}
