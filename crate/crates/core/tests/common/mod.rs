//! Brute-force reference implementations used as test oracles. Nothing here
//! calls into the library's numeric code; they are written from the defining
//! formulas in the most direct way available.
#![allow(dead_code)]

use bicap_core::fusion::{EvidenceActivation, FusionParams};
use bicap_core::image::Image;
use bicap_core::linalg::{Affine, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize) -> Image<f64> {
    let data = (0..channels * h * w).map(|_| rng.random::<f64>()).collect();
    Image::new(channels, h, w, data).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Gaussian weights for an odd kernel size, normalized to sum 1.
pub fn kernel_weights(k: u32) -> Vec<f64> {
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let half = (k / 2) as i64;
    let raw: Vec<f64> = (-half..=half)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror an index into `0..n` without repeating the edge sample.
pub fn mirror(mut i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as i64 - 1;
    while i < 0 || i > last {
        if i < 0 {
            i = -i;
        }
        if i > last {
            i = 2 * last - i;
        }
    }
    i as usize
}

/// Dense 2-D convolution with the outer-product kernel, every tap explicit.
pub fn dense_blur(img: &Image<f64>, k: u32) -> Image<f64> {
    let w = kernel_weights(k);
    let half = (k / 2) as i64;
    Image::from_fn(img.channels(), img.height(), img.width(), |c, r, x| {
        let mut acc = 0.0;
        for a in -half..=half {
            for b in -half..=half {
                let weight = w[(a + half) as usize] * w[(b + half) as usize];
                acc += weight
                    * img.get(
                        c,
                        mirror(r as i64 + a, img.height()),
                        mirror(x as i64 + b, img.width()),
                    );
            }
        }
        acc.clamp(0.0, 1.0)
    })
}

pub fn mask_value(r: usize, c: usize, center: (f64, f64), gamma: f64, h: usize, w: usize) -> f64 {
    let dist = |y: f64, x: f64| ((y - center.0).powi(2) + (x - center.1).powi(2)).sqrt();
    let mut far: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            far = far.max(dist(y as f64, x as f64));
        }
    }
    if far == 0.0 {
        return 1.0;
    }
    (-gamma * dist(r as f64, c as f64) / far).exp()
}

pub fn cosine_matrix(a: &Matrix<f64>, b: &Matrix<f64>) -> Vec<Vec<f64>> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    (0..a.rows())
        .map(|i| {
            (0..b.rows())
                .map(|j| {
                    let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                    dot / (norm(a.row(i)) * norm(b.row(j)))
                })
                .collect()
        })
        .collect()
}

/// Position (1-based) of `truth` after a stable sort by descending score.
pub fn sorted_rank(row: &[f64], truth: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    idx.iter().position(|&i| i == truth).unwrap() + 1
}

/// Average precision read off the full ranked list with one relevant item.
pub fn ranked_list_ap(row: &[f64], truth: usize) -> f64 {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let mut hits = 0.0;
    let mut precision_sum = 0.0;
    for (pos, &i) in idx.iter().enumerate() {
        if i == truth {
            hits += 1.0;
            precision_sum += hits / (pos + 1) as f64;
        }
    }
    precision_sum / hits
}

/// Symmetric InfoNCE written out with explicit log-sum-exp per row and column.
pub fn contrastive_loss(a: &Matrix<f64>, b: &Matrix<f64>, tau: f64) -> f64 {
    let s = cosine_matrix(a, b);
    let n = s.len();
    let ce = |logit: &dyn Fn(usize, usize) -> f64| {
        (0..n)
            .map(|i| {
                let m = (0..n).map(|j| logit(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|j| (logit(i, j) - m).exp()).sum::<f64>().ln();
                lse - logit(i, i)
            })
            .sum::<f64>()
            / n as f64
    };
    0.5 * (ce(&|i, j| s[i][j] / tau) + ce(&|i, j| s[j][i] / tau))
}

fn affine(a: &Affine<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.out_dim())
        .map(|o| a.bias[o] + (0..a.in_dim()).map(|i| a.weight.get(o, i) * x[i]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Evaluation-mode fusion forward pass from the parameter tensors alone.
pub fn fusion_forward(features: &Matrix<f64>, p: &FusionParams<f64>) -> Vec<f64> {
    let views = features.rows();
    let rows: Vec<&[f64]> = (0..views).map(|v| features.row(v)).collect();
    let belief: Vec<f64> = match &p.evidence {
        Some(head) => rows
            .iter()
            .map(|f| {
                let hidden: Vec<f64> = affine(&head.hidden, f).into_iter().map(gelu).collect();
                let raw = affine(&head.out, &hidden)[0];
                let e = match head.activation {
                    EvidenceActivation::ExpSoftplus => softplus(raw).exp(),
                    EvidenceActivation::Softplus => softplus(raw),
                };
                e / (e + 1.0)
            })
            .collect(),
        None => vec![1.0; views],
    };
    let dim = features.cols();
    let total: f64 = belief.iter().sum();
    let mean: Vec<f64> = (0..dim)
        .map(|d| (0..views).map(|v| belief[v] * rows[v][d]).sum::<f64>() / (total + p.epsilon))
        .collect();
    let evidence_part = affine(&p.proj, &mean);

    let scores: Vec<f64> = rows.iter().map(|f| affine(&p.attention, f)[0]).collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let attended: Vec<f64> = (0..dim)
        .map(|d| (0..views).map(|v| scores[v].exp() / z * rows[v][d]).sum())
        .collect();
    let attention_part = match &p.attention_proj {
        Some(a) => affine(a, &attended),
        None => attended,
    };
    let fused: Vec<f64> = evidence_part
        .iter()
        .zip(&attention_part)
        .map(|(a, b)| a + b)
        .collect();
    let bottleneck: Vec<f64> = affine(&p.purify_down, &fused).into_iter().map(gelu).collect();
    let up = affine(&p.purify_up, &bottleneck);
    let x: Vec<f64> = fused.iter().zip(&up).map(|(a, b)| a + b).collect();
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| p.norm.gain[i] * (v - mu) / (var + p.norm.eps).sqrt() + p.norm.shift[i])
        .collect()
}

/// Exact two-sided Clopper–Pearson interval for `hits` successes in `n` draws.
pub fn clopper_pearson(hits: u64, n: u64, confidence: f64) -> (f64, f64) {
    use statrs::distribution::{Beta, ContinuousCDF};
    let alpha = 1.0 - confidence;
    let lower = if hits == 0 {
        0.0
    } else {
        Beta::new(hits as f64, (n - hits + 1) as f64)
            .unwrap()
            .inverse_cdf(alpha / 2.0)
    };
    let upper = if hits == n {
        1.0
    } else {
        Beta::new((hits + 1) as f64, (n - hits) as f64)
            .unwrap()
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lower, upper)
}

/// Central-difference check of every trainable parameter. Returns the largest
/// relative error `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn max_gradient_error(
    model: &bicap_core::alignment::Model<f64>,
    features: &[bicap_core::features::ViewFeatureSet<f64>],
    neural: &[Vec<f64>],
    dropout: Option<&[u64]>,
    step: f64,
) -> f64 {
    use bicap_core::alignment::batch_loss_and_grad;
    let analytic = batch_loss_and_grad(model, features, neural, dropout)
        .unwrap()
        .grad;
    let analytic: Vec<f64> = analytic
        .tensors()
        .into_iter()
        .flat_map(|(_, _, v)| v.to_vec())
        .collect();
    let loss = |m: &bicap_core::alignment::Model<f64>| {
        batch_loss_and_grad(m, features, neural, dropout).unwrap().loss
    };
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    let sizes: Vec<usize> = model.tensors().iter().map(|(_, _, v)| v.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let mut plus = model.clone();
            plus.tensors_mut()[t][i] += step;
            let mut minus = model.clone();
            minus.tensors_mut()[t][i] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let a = analytic[flat];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            flat += 1;
        }
    }
    worst
}
