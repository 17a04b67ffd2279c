//! Zero-shot retrieval metrics over query × gallery similarity matrices.

use crate::alignment::cosine_similarity_matrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::scalar::Scalar;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

/// 1-based rank of `truth` in `row` sorted by descending similarity; equal
/// scores are ordered by gallery index.
pub fn rank_of_truth<T: Scalar>(row: &[T], truth: usize) -> usize {
    let t = row[truth];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < truth))
        .count()
}

fn check_truth<T: Scalar>(sim: &Matrix<T>, truth: &[usize]) -> Result<()> {
    if truth.len() != sim.rows() {
        return Err(Error::Contract(format!(
            "{} truth indices for {} queries",
            truth.len(),
            sim.rows()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= sim.cols()) {
        return Err(Error::Contract(format!(
            "truth index {bad} outside gallery of {}",
            sim.cols()
        )));
    }
    Ok(())
}

/// Fraction of queries whose truth ranks within the top `k`.
pub fn topk_accuracy<T: Scalar>(sim: &Matrix<T>, truth: &[usize], k: usize) -> Result<f64> {
    check_truth(sim, truth)?;
    if k == 0 || k > sim.cols() {
        return Err(Error::Contract(format!("k = {k} outside 1..={}", sim.cols())));
    }
    if sim.rows() == 0 {
        return Ok(0.0);
    }
    let hits = truth
        .iter()
        .enumerate()
        .filter(|&(q, &t)| rank_of_truth(sim.row(q), t) <= k)
        .count();
    Ok(hits as f64 / sim.rows() as f64)
}

/// Mean over queries of `1 / rank(truth)` (one relevant item per query).
pub fn mean_average_precision<T: Scalar>(sim: &Matrix<T>, truth: &[usize]) -> Result<f64> {
    check_truth(sim, truth)?;
    if sim.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = truth
        .iter()
        .enumerate()
        .map(|(q, &t)| 1.0 / rank_of_truth(sim.row(q), t) as f64)
        .sum();
    Ok(total / sim.rows() as f64)
}

/// Mean of the diagonal of a square similarity matrix.
pub fn similarity_score<T: Scalar>(sim: &Matrix<T>) -> Result<f64> {
    if sim.rows() != sim.cols() {
        return Err(Error::Contract("similarity score needs a square matrix".into()));
    }
    if sim.rows() == 0 {
        return Ok(0.0);
    }
    Ok((0..sim.rows()).map(|i| sim.get(i, i).as_f64()).sum::<f64>() / sim.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    pub similarity: f64,
    pub gallery_size: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Metrics on one paired gallery: query `i` matches gallery item `i`.
pub fn evaluate_paired<T: Scalar>(sim: &Matrix<T>) -> Result<(f64, f64, f64, f64)> {
    let truth: Vec<usize> = (0..sim.rows()).collect();
    let k5 = 5.min(sim.cols());
    Ok((
        topk_accuracy(sim, &truth, 1)?,
        topk_accuracy(sim, &truth, k5)?,
        mean_average_precision(sim, &truth)?,
        similarity_score(sim)?,
    ))
}

/// `n`-way retrieval averaged over `trials` random galleries.
///
/// Rows of `queries` and `gallery` are paired. Each trial draws `n` distinct
/// pairs; every drawn query is ranked against the `n` drawn gallery items,
/// so its truth is always present.
pub fn nway_evaluate<T: Scalar>(
    queries: &Matrix<T>,
    gallery: &Matrix<T>,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if queries.rows() != gallery.rows() || queries.cols() != gallery.cols() {
        return Err(Error::Contract(format!(
            "query matrix {}x{} and gallery {}x{} are not paired",
            queries.rows(),
            queries.cols(),
            gallery.rows(),
            gallery.cols()
        )));
    }
    let total = queries.rows();
    if n == 0 || n > total {
        return Err(Error::Config(format!(
            "gallery size {n} must lie in 1..={total} (test set size)"
        )));
    }
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let full = cosine_similarity_matrix(queries, gallery)?;
    let mut sums = [0.0; 4];
    for trial in 0..trials {
        let mut rng = seeded_rng(derive_seed(seed, &[stream::GALLERY, trial as u64]));
        let mut picked = sample(&mut rng, total, n).into_vec();
        picked.sort_unstable();
        let mut sub = Matrix::<T>::zeros(n, n);
        for (a, &qa) in picked.iter().enumerate() {
            for (b, &gb) in picked.iter().enumerate() {
                sub.set(a, b, full.get(qa, gb));
            }
        }
        let (t1, t5, map, s) = evaluate_paired(&sub)?;
        for (acc, v) in sums.iter_mut().zip([t1, t5, map, s]) {
            *acc += v;
        }
    }
    let t = trials as f64;
    Ok(EvalReport {
        top1: sums[0] / t,
        top5: sums[1] / t,
        map: sums[2] / t,
        similarity: sums[3] / t,
        gallery_size: n,
        trials,
        seed,
    })
}
