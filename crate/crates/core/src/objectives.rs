//! Cross-entropy, complement entropy and hierarchical complement entropy.
//!
//! Every objective returns its batch-mean value together with the analytic
//! gradient with respect to the logits. The complement objectives are built
//! from one primitive: the Shannon entropy of a softmax restricted to a
//! subset of classes,
//!
//! ```text
//! p_j = exp(z_j) / sum_{k in S} exp(z_k)          (j in S)
//! H   = -sum_{j in S} p_j ln p_j
//! dH/dz_j = -p_j (ln p_j + H)                      (zero outside S)
//! ```
//!
//! Complement entropy uses `S = K \ {g}`. The hierarchical variant sums two
//! such entropies: over the siblings `G \ {g}` and over the non-relatives
//! `K \ G`. Empty subsets contribute nothing to value or gradient, which is
//! what makes both degenerate hierarchies (one group, or one group per class)
//! reduce exactly to complement entropy.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{labels} labels for {rows} logit rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite logit at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("subset index {index} is out of range for {classes} classes")]
    SubsetOutOfRange { index: usize, classes: usize },
    #[error("subset index {0} appears more than once")]
    DuplicateSubsetIndex(usize),
    #[error("complement entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("hierarchy has {hierarchy} fine classes but logits have {logits}")]
    HierarchyMismatch { hierarchy: usize, logits: usize },
    #[error("objective `{0}` requires a label hierarchy")]
    MissingHierarchy(ObjectiveKind),
}

/// Which training objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Plain cross-entropy.
    Xe,
    /// Cross-entropy minus complement entropy.
    Cot,
    /// Cross-entropy minus hierarchical complement entropy.
    Hcot,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] =
        [ObjectiveKind::Xe, ObjectiveKind::Cot, ObjectiveKind::Hcot];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Xe => "xe",
            ObjectiveKind::Cot => "cot",
            ObjectiveKind::Hcot => "hcot",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xe" => Ok(ObjectiveKind::Xe),
            "cot" => Ok(ObjectiveKind::Cot),
            "hcot" => Ok(ObjectiveKind::Hcot),
            other => Err(format!(
                "unknown objective `{other}` (expected xe, cot or hcot)"
            )),
        }
    }
}

/// Options shared by the entropy-based objectives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntropyOptions {
    /// Divide each subset entropy by `ln |S|` (skipped when `|S| <= 1`).
    #[serde(default)]
    pub normalize: bool,
}

/// Logits for a batch plus the ground-truth fine label of every row.
#[derive(Debug, Clone, Copy)]
pub struct LogitBatch<'a> {
    values: ArrayView2<'a, f64>,
    labels: &'a [usize],
}

impl<'a> LogitBatch<'a> {
    pub fn new(values: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self, ObjectiveError> {
        let (rows, classes) = values.dim();
        if rows == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        if labels.len() != rows {
            return Err(ObjectiveError::LabelCount {
                rows,
                labels: labels.len(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(ObjectiveError::LabelOutOfRange {
                row,
                label,
                classes,
            });
        }
        if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite { row, col });
        }
        Ok(Self { values, labels })
    }

    pub fn values(&self) -> ArrayView2<'a, f64> {
        self.values
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }
}

/// Batch-mean objective value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveResult {
    pub value: f64,
    /// Unreduced per-row values; `value` is their mean.
    pub per_sample: Vec<f64>,
    pub grad: Array2<f64>,
}

impl ObjectiveResult {
    /// `self - other` for value, per-sample values and gradient.
    pub fn minus(mut self, other: &ObjectiveResult) -> ObjectiveResult {
        self.value -= other.value;
        for (a, b) in self.per_sample.iter_mut().zip(&other.per_sample) {
            *a -= b;
        }
        self.grad -= &other.grad;
        self
    }

    /// Flips the sign of value and gradient (turns a maximization target into a loss).
    pub fn negated(mut self) -> ObjectiveResult {
        self.value = -self.value;
        self.per_sample.iter_mut().for_each(|v| *v = -*v);
        self.grad.mapv_inplace(|g| -g);
        self
    }
}

/// Softmax over a subset of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetDistribution {
    pub indices: Vec<usize>,
    pub probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl SubsetDistribution {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `ln p_j`, computed in log-space so it stays finite when `p_j` underflows.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

/// Softmax of `z` restricted to `subset`, with the subset's maximum logit
/// subtracted before exponentiation.
pub fn subset_softmax(
    z: ArrayView1<'_, f64>,
    subset: &[usize],
) -> Result<SubsetDistribution, ObjectiveError> {
    let classes = z.len();
    let mut seen = vec![false; classes];
    for &index in subset {
        if index >= classes {
            return Err(ObjectiveError::SubsetOutOfRange { index, classes });
        }
        if std::mem::replace(&mut seen[index], true) {
            return Err(ObjectiveError::DuplicateSubsetIndex(index));
        }
    }
    let mut log_probs = Vec::with_capacity(subset.len());
    log_softmax_into(z, subset, &mut log_probs);
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok(SubsetDistribution {
        indices: subset.to_vec(),
        probs,
        log_probs,
    })
}

/// `-sum p ln p` in nats. Empty and singleton distributions give 0.
pub fn shannon_entropy(d: &SubsetDistribution) -> f64 {
    entropy_of(&d.probs, &d.log_probs)
}

fn log_softmax_into(z: ArrayView1<'_, f64>, subset: &[usize], out: &mut Vec<f64>) {
    out.clear();
    if subset.is_empty() {
        return;
    }
    let max = subset
        .iter()
        .map(|&j| z[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = subset.iter().map(|&j| (z[j] - max).exp()).sum();
    let log_sum = sum.ln();
    out.extend(subset.iter().map(|&j| z[j] - max - log_sum));
}

fn entropy_of(probs: &[f64], log_probs: &[f64]) -> f64 {
    if probs.len() <= 1 {
        return 0.0;
    }
    // p = 0 carries a finite log-prob, so 0 * ln 0 evaluates to 0.
    -probs
        .iter()
        .zip(log_probs)
        .map(|(p, lp)| p * lp)
        .sum::<f64>()
}

/// Scratch space for [`add_subset_entropy`].
#[derive(Default)]
struct EntropyScratch {
    log_probs: Vec<f64>,
    probs: Vec<f64>,
}

/// Entropy of the softmax over `subset`; adds `scale * dH/dz` into `grad_row`.
fn add_subset_entropy(
    z: ArrayView1<'_, f64>,
    subset: &[usize],
    scale: f64,
    opts: EntropyOptions,
    grad_row: &mut ArrayViewMut1<'_, f64>,
    scratch: &mut EntropyScratch,
) -> f64 {
    if subset.len() <= 1 {
        // H is identically 0 on a singleton or empty set; so is its gradient.
        return 0.0;
    }
    log_softmax_into(z, subset, &mut scratch.log_probs);
    scratch.probs.clear();
    scratch
        .probs
        .extend(scratch.log_probs.iter().map(|lp| lp.exp()));
    let h = entropy_of(&scratch.probs, &scratch.log_probs);
    let (value, grad_scale) = if opts.normalize {
        let norm = (subset.len() as f64).ln();
        (h / norm, scale / norm)
    } else {
        (h, scale)
    };
    for ((&j, &p), &lp) in subset.iter().zip(&scratch.probs).zip(&scratch.log_probs) {
        grad_row[j] += grad_scale * (-p * (lp + h));
    }
    value
}

/// Mean of `-ln softmax(z_i)[g_i]`; gradient `(softmax(z_i) - onehot(g_i)) / N`.
pub fn cross_entropy(batch: &LogitBatch<'_>) -> Result<ObjectiveResult, ObjectiveError> {
    let (rows, classes) = batch.values.dim();
    let inv_n = 1.0 / rows as f64;
    let mut grad = Array2::zeros((rows, classes));
    let mut per_sample = Vec::with_capacity(rows);
    for (i, (z, mut grad_row)) in batch
        .values
        .rows()
        .into_iter()
        .zip(grad.rows_mut())
        .enumerate()
    {
        let g = batch.labels[i];
        let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        per_sample.push(-(z[g] - max - log_sum));
        for (j, (&v, dz)) in z.iter().zip(grad_row.iter_mut()).enumerate() {
            let p = (v - max - log_sum).exp();
            *dz = (p - if j == g { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok(ObjectiveResult {
        value: mean(&per_sample),
        per_sample,
        grad,
    })
}

/// Mean entropy of the softmax over the incorrect classes `K \ {g}`.
pub fn complement_entropy(
    batch: &LogitBatch<'_>,
    opts: EntropyOptions,
) -> Result<ObjectiveResult, ObjectiveError> {
    let (rows, classes) = batch.values.dim();
    if classes < 2 {
        return Err(ObjectiveError::TooFewClasses(classes));
    }
    let inv_n = 1.0 / rows as f64;
    let mut grad = Array2::zeros((rows, classes));
    let mut per_sample = Vec::with_capacity(rows);
    let mut scratch = EntropyScratch::default();
    let mut complement = Vec::with_capacity(classes - 1);
    for (i, (z, mut grad_row)) in batch
        .values
        .rows()
        .into_iter()
        .zip(grad.rows_mut())
        .enumerate()
    {
        let g = batch.labels[i];
        complement.clear();
        complement.extend((0..classes).filter(|&j| j != g));
        per_sample.push(add_subset_entropy(
            z,
            &complement,
            inv_n,
            opts,
            &mut grad_row,
            &mut scratch,
        ));
    }
    Ok(ObjectiveResult {
        value: mean(&per_sample),
        per_sample,
        grad,
    })
}

/// Mean of `H(P_{G\{g}}) + H(P_{K\G})`: sibling entropy plus non-relative entropy.
pub fn hierarchical_complement_entropy(
    batch: &LogitBatch<'_>,
    h: &LabelHierarchy,
    opts: EntropyOptions,
) -> Result<ObjectiveResult, ObjectiveError> {
    hierarchical_terms(batch, h, opts).map(|t| t.total)
}

/// Per-term breakdown of the hierarchical complement entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalTerms {
    pub total: ObjectiveResult,
    /// Per-row entropy over the siblings `G \ {g}`.
    pub inner: Vec<f64>,
    /// Per-row entropy over the non-relatives `K \ G`.
    pub outer: Vec<f64>,
}

pub fn hierarchical_terms(
    batch: &LogitBatch<'_>,
    h: &LabelHierarchy,
    opts: EntropyOptions,
) -> Result<HierarchicalTerms, ObjectiveError> {
    let (rows, classes) = batch.values.dim();
    if h.num_fine() != classes {
        return Err(ObjectiveError::HierarchyMismatch {
            hierarchy: h.num_fine(),
            logits: classes,
        });
    }
    let inv_n = 1.0 / rows as f64;
    let mut grad = Array2::zeros((rows, classes));
    let mut per_sample = Vec::with_capacity(rows);
    let mut inner_terms = Vec::with_capacity(rows);
    let mut outer_terms = Vec::with_capacity(rows);
    let mut scratch = EntropyScratch::default();
    for (i, (z, mut grad_row)) in batch
        .values
        .rows()
        .into_iter()
        .zip(grad.rows_mut())
        .enumerate()
    {
        let slices = h
            .slices_for(batch.labels[i])
            .expect("labels validated against K");
        let inner = add_subset_entropy(z, &slices.inner, inv_n, opts, &mut grad_row, &mut scratch);
        let outer = add_subset_entropy(z, &slices.outer, inv_n, opts, &mut grad_row, &mut scratch);
        inner_terms.push(inner);
        outer_terms.push(outer);
        per_sample.push(inner + outer);
    }
    Ok(HierarchicalTerms {
        total: ObjectiveResult {
            value: mean(&per_sample),
            per_sample,
            grad,
        },
        inner: inner_terms,
        outer: outer_terms,
    })
}

/// `XE - HCE`.
pub fn hcot_loss(
    batch: &LogitBatch<'_>,
    h: &LabelHierarchy,
    opts: EntropyOptions,
) -> Result<ObjectiveResult, ObjectiveError> {
    let hce = hierarchical_complement_entropy(batch, h, opts)?;
    Ok(cross_entropy(batch)?.minus(&hce))
}

/// `XE - complement entropy`.
pub fn cot_loss(
    batch: &LogitBatch<'_>,
    opts: EntropyOptions,
) -> Result<ObjectiveResult, ObjectiveError> {
    let ce = complement_entropy(batch, opts)?;
    Ok(cross_entropy(batch)?.minus(&ce))
}

/// The complement term an objective maximizes: none for `xe`, complement
/// entropy for `cot`, hierarchical complement entropy for `hcot`.
pub fn complement_term(
    kind: ObjectiveKind,
    batch: &LogitBatch<'_>,
    h: Option<&LabelHierarchy>,
    opts: EntropyOptions,
) -> Result<Option<ObjectiveResult>, ObjectiveError> {
    match kind {
        ObjectiveKind::Xe => Ok(None),
        ObjectiveKind::Cot => complement_entropy(batch, opts).map(Some),
        ObjectiveKind::Hcot => {
            let h = h.ok_or(ObjectiveError::MissingHierarchy(kind))?;
            hierarchical_complement_entropy(batch, h, opts).map(Some)
        }
    }
}

/// Full training loss for `kind`: `XE - complement_term`.
pub fn training_loss(
    kind: ObjectiveKind,
    batch: &LogitBatch<'_>,
    h: Option<&LabelHierarchy>,
    opts: EntropyOptions,
) -> Result<ObjectiveResult, ObjectiveError> {
    match kind {
        ObjectiveKind::Xe => cross_entropy(batch),
        ObjectiveKind::Cot => cot_loss(batch, opts),
        ObjectiveKind::Hcot => hcot_loss(
            batch,
            h.ok_or(ObjectiveError::MissingHierarchy(kind))?,
            opts,
        ),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    const TIGHT: f64 = 1e-12;

    fn batch<'a>(z: &'a Array2<f64>, labels: &'a [usize]) -> LogitBatch<'a> {
        LogitBatch::new(z.view(), labels).unwrap()
    }

    #[test]
    fn subset_softmax_examples() {
        let d = subset_softmax(array![5.0, 5.0, 5.0].view(), &[0, 1, 2]).unwrap();
        for p in &d.probs {
            assert!((p - 1.0 / 3.0).abs() < TIGHT);
        }
        let d = subset_softmax(array![1.0, 2.0, 3.0, 4.0].view(), &[2, 3]).unwrap();
        assert!((d.probs[0] - 0.268_941_421_369_995_1).abs() < TIGHT);
        assert!((d.probs[1] - 0.731_058_578_630_004_9).abs() < TIGHT);

        let d = subset_softmax(array![1000.0, 0.0].view(), &[0, 1]).unwrap();
        assert_eq!(d.probs[0], 1.0);
        assert!(d.probs[1] >= 0.0 && d.probs[1] < 1e-300);
        assert_eq!(d.log_probs()[1], -1000.0);
        assert_eq!(shannon_entropy(&d), 0.0);

        let empty = subset_softmax(array![1.0].view(), &[]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(shannon_entropy(&empty), 0.0);
    }

    #[test]
    fn subset_softmax_rejects_bad_indices() {
        let z = array![1.0, 2.0];
        assert_eq!(
            subset_softmax(z.view(), &[0, 0]),
            Err(ObjectiveError::DuplicateSubsetIndex(0))
        );
        assert_eq!(
            subset_softmax(z.view(), &[2]),
            Err(ObjectiveError::SubsetOutOfRange {
                index: 2,
                classes: 2
            })
        );
    }

    #[test]
    fn entropy_examples() {
        for m in 1..8usize {
            let z = Array1::<f64>::zeros(m);
            let d = subset_softmax(z.view(), &(0..m).collect::<Vec<_>>()).unwrap();
            assert!((shannon_entropy(&d) - (m as f64).ln()).abs() < TIGHT);
        }
        let d = subset_softmax(array![1.0, 2.0, 3.0, 4.0].view(), &[2, 3]).unwrap();
        assert!((shannon_entropy(&d) - 0.582_203_108_888_217_9).abs() < TIGHT);
    }

    #[test]
    fn cross_entropy_examples() {
        let z = Array2::<f64>::zeros((3, 7));
        let r = cross_entropy(&batch(&z, &[0, 3, 6])).unwrap();
        assert!((r.value - 7f64.ln()).abs() < TIGHT);

        let z = array![[0.0, 60.0, 0.0]];
        assert!(cross_entropy(&batch(&z, &[1])).unwrap().value < 1e-25);

        let z = array![[1.0, 2.0, 3.0, 4.0]];
        let r = cross_entropy(&batch(&z, &[3])).unwrap();
        assert!((r.value - 0.440_189_698_561_195_3).abs() < TIGHT);
        // gradient rows sum to zero
        assert!(r.grad.sum().abs() < TIGHT);
    }

    #[test]
    fn complement_entropy_examples() {
        let z = Array2::<f64>::from_elem((2, 6), 0.3);
        let r = complement_entropy(&batch(&z, &[1, 4]), EntropyOptions::default()).unwrap();
        assert!((r.value - 5f64.ln()).abs() < TIGHT);
        assert!(r.grad.iter().all(|g| g.abs() < 1e-16));

        let z = array![[0.2, -1.0], [3.0, 1.0]];
        let r = complement_entropy(&batch(&z, &[0, 1]), EntropyOptions::default()).unwrap();
        assert_eq!(r.value, 0.0);

        let z = array![[1.0, 2.0, 3.0, 4.0]];
        let r = complement_entropy(&batch(&z, &[3]), EntropyOptions::default()).unwrap();
        assert!((r.value - 0.832_395_581_839_938_9).abs() < TIGHT);
        assert_eq!(r.grad[[0, 3]], 0.0);

        let z = array![[1.0]];
        assert_eq!(
            complement_entropy(&batch(&z, &[0]), EntropyOptions::default()),
            Err(ObjectiveError::TooFewClasses(1))
        );
    }

    #[test]
    fn hierarchical_examples() {
        let z = array![[1.0, 2.0, 3.0, 4.0]];
        let h = LabelHierarchy::uniform(2, 2).unwrap();
        let opts = EntropyOptions::default();
        let terms = hierarchical_terms(&batch(&z, &[0]), &h, opts).unwrap();
        assert_eq!(terms.inner[0], 0.0);
        assert!((terms.outer[0] - 0.582_203_108_888_217_9).abs() < TIGHT);
        assert!((terms.total.value - 0.582_203_108_888_217_9).abs() < TIGHT);
        // g and its singleton sibling carry no gradient
        assert_eq!(terms.total.grad[[0, 0]], 0.0);
        assert_eq!(terms.total.grad[[0, 1]], 0.0);

        let loss = hcot_loss(&batch(&z, &[0]), &h, opts).unwrap();
        assert!((loss.value - 2.857_986_589_672_977_4).abs() < TIGHT);

        let wrong = LabelHierarchy::flat(5).unwrap();
        assert!(matches!(
            hierarchical_complement_entropy(&batch(&z, &[0]), &wrong, opts),
            Err(ObjectiveError::HierarchyMismatch {
                hierarchy: 5,
                logits: 4
            })
        ));
    }

    #[test]
    fn degenerate_hierarchies_match_complement_entropy_bitwise() {
        let z = array![[0.3, -1.2, 2.0, 0.7, 0.1], [1.5, 0.0, -0.4, 2.2, -3.0]];
        let labels = [2, 4];
        let b = batch(&z, &labels);
        let opts = EntropyOptions::default();
        let ce = complement_entropy(&b, opts).unwrap();
        for h in [
            LabelHierarchy::flat(5).unwrap(),
            LabelHierarchy::identity(5).unwrap(),
        ] {
            let hce = hierarchical_complement_entropy(&b, &h, opts).unwrap();
            assert_eq!(hce, ce);
            assert_eq!(
                hcot_loss(&b, &h, opts).unwrap(),
                cot_loss(&b, opts).unwrap()
            );
        }
    }

    #[test]
    fn normalized_entropy_is_scaled_by_subset_log_size() {
        let z = Array2::<f64>::zeros((1, 6));
        let h = LabelHierarchy::uniform(2, 3).unwrap();
        let opts = EntropyOptions { normalize: true };
        let terms = hierarchical_terms(&batch(&z, &[0]), &h, opts).unwrap();
        assert!((terms.inner[0] - 1.0).abs() < TIGHT);
        assert!((terms.outer[0] - 1.0).abs() < TIGHT);
    }

    #[test]
    fn batch_validation() {
        let z = Array2::<f64>::zeros((0, 3));
        assert_eq!(
            LogitBatch::new(z.view(), &[]).unwrap_err(),
            ObjectiveError::EmptyBatch
        );
        let z = array![[0.0, f64::NAN]];
        assert_eq!(
            LogitBatch::new(z.view(), &[0]).unwrap_err(),
            ObjectiveError::NonFinite { row: 0, col: 1 }
        );
        let z = array![[0.0, 1.0]];
        assert!(matches!(
            LogitBatch::new(z.view(), &[2]),
            Err(ObjectiveError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            LogitBatch::new(z.view(), &[0, 1]),
            Err(ObjectiveError::LabelCount { .. })
        ));
        assert_eq!(
            training_loss(
                ObjectiveKind::Hcot,
                &batch(&z, &[0]),
                None,
                EntropyOptions::default()
            ),
            Err(ObjectiveError::MissingHierarchy(ObjectiveKind::Hcot))
        );
    }
}
