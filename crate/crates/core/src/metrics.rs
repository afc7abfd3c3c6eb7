//! Evaluation: fine, coarse and top-k error, and sorted probability profiles.
//!
//! Coarse predictions are the coarse group of the fine argmax; there is no
//! separate coarse head. Argmax ties resolve to the lowest class index.

use std::io::Write;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::hierarchy::LabelHierarchy;
use crate::network::{Network, NetworkError};
use crate::objectives::{LogitBatch, ObjectiveError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("k = {k} is out of range for {classes} classes")]
    KOutOfRange { k: usize, classes: usize },
    #[error("hierarchy has {hierarchy} fine classes but logits have {logits}")]
    HierarchyMismatch { hierarchy: usize, logits: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Zero-based rank of class `g` under the same tie rule as [`argmax`].
fn rank_of(row: ArrayView1<'_, f64>, g: usize) -> usize {
    let target = row[g];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < g))
        .count()
}

/// Fraction of rows whose argmax is not the label.
pub fn fine_error(batch: &LogitBatch<'_>) -> f64 {
    let wrong = batch
        .values()
        .rows()
        .into_iter()
        .zip(batch.labels())
        .filter(|(row, &g)| argmax(row.view()) != g)
        .count();
    wrong as f64 / batch.len() as f64
}

/// Fraction of rows whose predicted fine class falls in another coarse group
/// than the label.
pub fn coarse_error(batch: &LogitBatch<'_>, h: &LabelHierarchy) -> Result<f64, MetricsError> {
    check_hierarchy(batch, h)?;
    let map = h.fine_to_coarse();
    let wrong = batch
        .values()
        .rows()
        .into_iter()
        .zip(batch.labels())
        .filter(|(row, &g)| map[argmax(row.view())] != map[g])
        .count();
    Ok(wrong as f64 / batch.len() as f64)
}

/// Fraction of rows where the label is not among the `k` largest logits.
pub fn topk_error(batch: &LogitBatch<'_>, k: usize) -> Result<f64, MetricsError> {
    let classes = batch.num_classes();
    if k == 0 || k > classes {
        return Err(MetricsError::KOutOfRange { k, classes });
    }
    let wrong = batch
        .values()
        .rows()
        .into_iter()
        .zip(batch.labels())
        .filter(|(row, &g)| rank_of(row.view(), g) >= k)
        .count();
    Ok(wrong as f64 / batch.len() as f64)
}

fn check_hierarchy(batch: &LogitBatch<'_>, h: &LabelHierarchy) -> Result<(), MetricsError> {
    if h.num_fine() != batch.num_classes() {
        return Err(MetricsError::HierarchyMismatch {
            hierarchy: h.num_fine(),
            logits: batch.num_classes(),
        });
    }
    Ok(())
}

/// Position-wise mean of sorted full-softmax probabilities, split into the
/// ground truth, its siblings and the non-relatives.
///
/// `inner[r]` is the mean of the `r`-th largest sibling probability over the
/// rows that have at least `r + 1` siblings; `outer` likewise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbabilityProfile {
    pub rows: usize,
    pub ground_truth: f64,
    pub inner: Vec<f64>,
    pub outer: Vec<f64>,
    /// Mean total probability on the ground truth.
    pub mass_g: f64,
    /// Mean total probability on the siblings.
    pub mass_inner: f64,
    /// Mean total probability on the non-relatives.
    pub mass_outer: f64,
    /// Mean per-class sibling probability, averaged over rows with siblings.
    pub mean_inner: f64,
    /// Mean per-class non-relative probability, averaged over rows with non-relatives.
    pub mean_outer: f64,
}

impl ProbabilityProfile {
    /// `mean_inner - mean_outer`: positive when siblings keep more probability
    /// than unrelated classes.
    pub fn staircase_gap(&self) -> f64 {
        self.mean_inner - self.mean_outer
    }

    /// Writes `rank_group,rank,mean_probability` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank_group", "rank", "mean_probability"])?;
        w.write_record(["g", "0", &self.ground_truth.to_string()])?;
        for (group, values) in [("inner", &self.inner), ("outer", &self.outer)] {
            for (rank, v) in values.iter().enumerate() {
                w.write_record([group, &rank.to_string(), &v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Full-K softmax of one row.
fn softmax(row: ArrayView1<'_, f64>, out: &mut Vec<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    out.clear();
    out.extend(row.iter().map(|&v| (v - max).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
}

pub fn probability_profile(
    batch: &LogitBatch<'_>,
    h: &LabelHierarchy,
) -> Result<ProbabilityProfile, MetricsError> {
    check_hierarchy(batch, h)?;
    let mut inner_sum: Vec<f64> = Vec::new();
    let mut inner_count: Vec<usize> = Vec::new();
    let mut outer_sum: Vec<f64> = Vec::new();
    let mut outer_count: Vec<usize> = Vec::new();
    let mut profile = ProbabilityProfile {
        rows: batch.len(),
        ..Default::default()
    };
    let (mut rows_with_inner, mut rows_with_outer) = (0usize, 0usize);
    let mut probs = Vec::with_capacity(batch.num_classes());
    let mut sorted = Vec::new();

    let mut accumulate =
        |indices: &[usize], probs: &[f64], sums: &mut Vec<f64>, counts: &mut Vec<usize>| -> f64 {
            sorted.clear();
            sorted.extend(indices.iter().map(|&j| probs[j]));
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sums.len() < sorted.len() {
                sums.resize(sorted.len(), 0.0);
                counts.resize(sorted.len(), 0);
            }
            for (r, &p) in sorted.iter().enumerate() {
                sums[r] += p;
                counts[r] += 1;
            }
            sorted.iter().sum()
        };

    for (row, &g) in batch.values().rows().into_iter().zip(batch.labels()) {
        softmax(row, &mut probs);
        let slices = h.slices_for(g).expect("labels validated against K");
        profile.mass_g += probs[g];
        let inner_mass = accumulate(&slices.inner, &probs, &mut inner_sum, &mut inner_count);
        let outer_mass = accumulate(&slices.outer, &probs, &mut outer_sum, &mut outer_count);
        profile.mass_inner += inner_mass;
        profile.mass_outer += outer_mass;
        if !slices.inner.is_empty() {
            profile.mean_inner += inner_mass / slices.inner.len() as f64;
            rows_with_inner += 1;
        }
        if !slices.outer.is_empty() {
            profile.mean_outer += outer_mass / slices.outer.len() as f64;
            rows_with_outer += 1;
        }
    }
    let n = batch.len() as f64;
    profile.ground_truth = profile.mass_g / n;
    profile.mass_g /= n;
    profile.mass_inner /= n;
    profile.mass_outer /= n;
    profile.mean_inner = if rows_with_inner > 0 {
        profile.mean_inner / rows_with_inner as f64
    } else {
        0.0
    };
    profile.mean_outer = if rows_with_outer > 0 {
        profile.mean_outer / rows_with_outer as f64
    } else {
        0.0
    };
    profile.inner = inner_sum
        .iter()
        .zip(&inner_count)
        .map(|(s, &c)| s / c as f64)
        .collect();
    profile.outer = outer_sum
        .iter()
        .zip(&outer_count)
        .map(|(s, &c)| s / c as f64)
        .collect();
    Ok(profile)
}

/// One evaluation record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub fine_error: f64,
    pub coarse_error: f64,
    pub top5_error: f64,
    pub mean_mass_g: f64,
    pub mean_mass_inner: f64,
    pub mean_mass_outer: f64,
    /// Mean training cross-entropy over the epoch.
    pub xe: f64,
    /// Mean training complement term over the epoch.
    pub hce: f64,
}

/// Test-set evaluation of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fine_error: f64,
    pub coarse_error: f64,
    pub top5_error: f64,
    pub profile: ProbabilityProfile,
}

impl Evaluation {
    pub fn record(&self, epoch: usize, xe: f64, hce: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            fine_error: self.fine_error,
            coarse_error: self.coarse_error,
            top5_error: self.top5_error,
            mean_mass_g: self.profile.mass_g,
            mean_mass_inner: self.profile.mass_inner,
            mean_mass_outer: self.profile.mass_outer,
            xe,
            hce,
        }
    }
}

pub fn evaluate(
    net: &Network,
    data: &Dataset,
    h: &LabelHierarchy,
) -> Result<Evaluation, MetricsError> {
    let logits = net.predict(data.inputs())?;
    let batch = LogitBatch::new(logits.view(), data.fine_labels())?;
    let k = 5.min(batch.num_classes());
    Ok(Evaluation {
        fine_error: fine_error(&batch),
        coarse_error: coarse_error(&batch, h)?,
        top5_error: topk_error(&batch, k)?,
        profile: probability_profile(&batch, h)?,
    })
}

/// Writes a header row and one row per record.
pub fn write_metrics_csv<W: Write>(
    writer: W,
    records: &[MetricsRecord],
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch",
    "fine_error",
    "coarse_error",
    "top5_error",
    "mean_mass_g",
    "mean_mass_inner",
    "mean_mass_outer",
    "xe",
    "hce",
];

/// Penultimate-layer activations as `dim_0..dim_{m-1},fine_label,coarse_label`.
pub fn export_embeddings<W: Write>(
    net: &Network,
    data: &Dataset,
    h: &LabelHierarchy,
    writer: W,
) -> Result<usize, MetricsError> {
    data.check_labels(h.num_fine())?;
    let features = net.penultimate(data.inputs())?;
    let mut w = csv::Writer::from_writer(writer);
    let width = features.ncols();
    let mut header: Vec<String> = (0..width).map(|d| format!("dim_{d}")).collect();
    header.push("fine_label".into());
    header.push("coarse_label".into());
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(width + 2);
    for (row, &label) in features.rows().into_iter().zip(data.fine_labels()) {
        record.clear();
        record.extend(row.iter().map(|v| v.to_string()));
        record.push(label.to_string());
        record.push(h.fine_to_coarse()[label].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(features.nrows())
}
