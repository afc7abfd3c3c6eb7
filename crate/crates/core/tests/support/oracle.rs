//! Independent reference evaluations for the objectives.
//!
//! Plain loops over `Vec<f64>`, no max-shift, no shared code with the crate.
//! Index sets are rebuilt from the raw fine-to-coarse assignment.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;

pub fn softmax_over(z: &[f64], subset: &[usize]) -> Vec<f64> {
    let denom: f64 = subset.iter().map(|&k| z[k].exp()).sum();
    subset.iter().map(|&j| z[j].exp() / denom).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &q in p {
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    h
}

pub fn cross_entropy(z: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &g) in labels.iter().enumerate() {
        let row: Vec<f64> = z.row(i).to_vec();
        let all: Vec<usize> = (0..row.len()).collect();
        total -= softmax_over(&row, &all)[g].ln();
    }
    total / labels.len() as f64
}

pub fn complement_entropy(z: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &g) in labels.iter().enumerate() {
        let row: Vec<f64> = z.row(i).to_vec();
        let complement: Vec<usize> = (0..row.len()).filter(|&j| j != g).collect();
        total += entropy(&softmax_over(&row, &complement));
    }
    total / labels.len() as f64
}

/// `assignment[fine] = coarse`.
pub fn hierarchical_complement_entropy(
    z: &Array2<f64>,
    labels: &[usize],
    assignment: &[usize],
) -> f64 {
    let mut total = 0.0;
    for (i, &g) in labels.iter().enumerate() {
        let row: Vec<f64> = z.row(i).to_vec();
        let mut inner = Vec::new();
        let mut outer = Vec::new();
        for j in 0..row.len() {
            if assignment[j] == assignment[g] {
                if j != g {
                    inner.push(j);
                }
            } else {
                outer.push(j);
            }
        }
        let hi = if inner.is_empty() {
            0.0
        } else {
            entropy(&softmax_over(&row, &inner))
        };
        let ho = if outer.is_empty() {
            0.0
        } else {
            entropy(&softmax_over(&row, &outer))
        };
        total += hi + ho;
    }
    total / labels.len() as f64
}

/// Central differences of `f` at `z`, one entry at a time.
pub fn finite_difference(
    z: &Array2<f64>,
    step: f64,
    f: impl Fn(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(z.dim());
    let mut probe = z.clone();
    for idx in 0..z.len() {
        let (r, c) = (idx / z.ncols(), idx % z.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let up = f(&probe);
        probe[[r, c]] = orig - step;
        let down = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * step);
    }
    grad
}

/// Entry-wise relative error with magnitudes below `floor` compared absolutely
/// against `floor`; returns the maximum over all entries.
pub fn max_relative_error<'a>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'a f64>,
    floor: f64,
) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Random contiguous two-level assignment of `k` fine classes.
pub fn random_assignment(rng: &mut impl Rng, k: usize) -> Vec<usize> {
    let groups = rng.random_range(1..=k);
    let raw: Vec<usize> = (0..k).map(|_| rng.random_range(0..groups)).collect();
    let mut relabel = std::collections::HashMap::new();
    raw.iter()
        .map(|c| {
            let next = relabel.len();
            *relabel.entry(*c).or_insert(next)
        })
        .collect()
}

pub fn random_batch(
    rng: &mut impl Rng,
    n: usize,
    k: usize,
    scale: f64,
) -> (Array2<f64>, Vec<usize>) {
    let z = Array2::from_shape_simple_fn((n, k), || rng.random_range(-scale..scale));
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    (z, labels)
}
