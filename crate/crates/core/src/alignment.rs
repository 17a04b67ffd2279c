//! Symmetric contrastive alignment of neural and visual embeddings, the
//! trainable model, its optimizer and the per-epoch training loop.

use crate::error::{Error, Result};
use crate::features::{encode_views, FeatureProvider, SampleRequest, ViewFeatureSet};
use crate::fusion::{fuse_and_purify, FusionConfig, FusionParams};
use crate::linalg::{dot, log_sum_exp, normalize, normalize_backward, softmax, Affine, Matrix};
use crate::regulator::{confidence_bounds, BlurScheduleState, RegulatorConfig};
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::scalar::Scalar;
use crate::transforms::View;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Norm floor used when normalizing rows for cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

/// `(i, j) ↦ ⟨a_i, c_j⟩ / (‖a_i‖ ‖c_j‖)`, norms floored at [`NORM_FLOOR`].
pub fn cosine_similarity_matrix<T: Scalar>(a: &Matrix<T>, c: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != c.cols() {
        return Err(Error::Contract(format!(
            "embedding widths differ: {} vs {}",
            a.cols(),
            c.cols()
        )));
    }
    let unit = |m: &Matrix<T>| -> Vec<Vec<T>> {
        (0..m.rows())
            .map(|i| normalize(m.row(i), T::lit(NORM_FLOOR)).0)
            .collect()
    };
    let (ua, uc) = (unit(a), unit(c));
    let mut out = Matrix::zeros(a.rows(), c.rows());
    for (i, ai) in ua.iter().enumerate() {
        for (j, cj) in uc.iter().enumerate() {
            out.set(i, j, dot(ai, cj));
        }
    }
    Ok(out)
}

/// `logits[i][j] = sim(F_N_i, F_latent_j) / τ`; the target for row `i` is `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLogits<T> {
    pub logits: Matrix<T>,
}

impl<T: Scalar> BatchLogits<T> {
    pub fn diagonal(&self) -> Vec<T> {
        (0..self.logits.rows()).map(|i| self.logits.get(i, i)).collect()
    }
}

/// Mean over rows of `−z_ii + logsumexp_j z_ij`.
fn diagonal_cross_entropy<T: Scalar>(z: &Matrix<T>) -> T {
    let b = T::from_usize(z.rows()).unwrap();
    (0..z.rows())
        .map(|i| log_sum_exp(z.row(i)) - z.get(i, i))
        .sum::<T>()
        / b
}

fn check_batch<T: Scalar>(a: &Matrix<T>, c: &Matrix<T>) -> Result<()> {
    if a.rows() != c.rows() {
        return Err(Error::Contract(format!(
            "batch sizes differ: {} vs {}",
            a.rows(),
            c.rows()
        )));
    }
    if a.rows() < 2 {
        return Err(Error::Contract(
            "contrastive loss needs a batch of at least two pairs".into(),
        ));
    }
    Ok(())
}

/// `½ [CE(sim(N, L)/τ) + CE(sim(L, N)/τ)]` with identity targets.
pub fn symmetric_contrastive_loss<T: Scalar>(
    neural: &Matrix<T>,
    latent: &Matrix<T>,
    tau: T,
) -> Result<(T, BatchLogits<T>)> {
    check_batch(neural, latent)?;
    if !(tau > T::zero()) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let sim = cosine_similarity_matrix(neural, latent)?;
    let mut z = sim;
    for v in z.as_mut_slice() {
        *v /= tau;
    }
    let forward = diagonal_cross_entropy(&z);
    let backward = diagonal_cross_entropy(&z.transpose());
    Ok(((forward + backward) * T::lit(0.5), BatchLogits { logits: z }))
}

/// Loss value, logits and gradients with respect to both embedding matrices
/// and `log τ`.
pub struct LossGradient<T> {
    pub loss: T,
    pub logits: BatchLogits<T>,
    pub d_neural: Matrix<T>,
    pub d_latent: Matrix<T>,
    pub d_log_tau: T,
}

pub fn contrastive_loss_gradient<T: Scalar>(
    neural: &Matrix<T>,
    latent: &Matrix<T>,
    log_tau: T,
) -> Result<LossGradient<T>> {
    let tau = log_tau.exp();
    let (loss, logits) = symmetric_contrastive_loss(neural, latent, tau)?;
    let b = neural.rows();
    let z = &logits.logits;
    let scale = T::lit(0.5) / T::from_usize(b).unwrap();

    // ∂L/∂z = ½·(1/B)·[(row softmax − I) + (column softmax − I)]
    let mut dz = Matrix::zeros(b, b);
    for i in 0..b {
        let p = softmax(z.row(i));
        for j in 0..b {
            dz.set(i, j, p[j]);
        }
    }
    let zt = z.transpose();
    for j in 0..b {
        let q = softmax(zt.row(j));
        for i in 0..b {
            dz.set(i, j, dz.get(i, j) + q[i]);
        }
    }
    for i in 0..b {
        dz.set(i, i, dz.get(i, i) - T::lit(2.0));
    }
    for v in dz.as_mut_slice() {
        *v *= scale;
    }

    // z = s / τ, τ = exp(log τ): ∂z/∂log τ = −z
    let d_log_tau = -dz
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .fold(T::zero(), |acc, (&d, &zz)| acc + d * zz);
    let mut ds = dz;
    for v in ds.as_mut_slice() {
        *v /= tau;
    }

    let floor = T::lit(NORM_FLOOR);
    let unit_rows = |m: &Matrix<T>| -> Vec<(Vec<T>, T, bool)> {
        (0..m.rows())
            .map(|i| {
                let raw = crate::linalg::l2_norm(m.row(i));
                let (u, n) = normalize(m.row(i), floor);
                (u, n, raw < floor)
            })
            .collect()
    };
    let un = unit_rows(neural);
    let ul = unit_rows(latent);
    let d = neural.cols();
    let mut d_neural = Matrix::zeros(b, d);
    let mut d_latent = Matrix::zeros(b, d);
    for i in 0..b {
        let mut du = vec![T::zero(); d];
        for j in 0..b {
            let g = ds.get(i, j);
            for (a, &x) in du.iter_mut().zip(&ul[j].0) {
                *a += g * x;
            }
        }
        let (u, n, floored) = &un[i];
        d_neural
            .row_mut(i)
            .copy_from_slice(&normalize_backward(u, *n, &du, *floored));
    }
    for j in 0..b {
        let mut du = vec![T::zero(); d];
        for i in 0..b {
            let g = ds.get(i, j);
            for (a, &x) in du.iter_mut().zip(&un[i].0) {
                *a += g * x;
            }
        }
        let (u, n, floored) = &ul[j];
        d_latent
            .row_mut(j)
            .copy_from_slice(&normalize_backward(u, *n, &du, *floored));
    }
    Ok(LossGradient {
        loss,
        logits,
        d_neural,
        d_latent,
        d_log_tau,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            tau_min: 1e-3,
            tau_max: 1.0,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            epochs: 150,
            batch_size: 32,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.temperature && self.temperature <= self.tau_max) {
            return Err(Error::Config(format!(
                "temperature {} must lie in [{}, {}] with a positive lower bound",
                self.temperature, self.tau_min, self.tau_max
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// All trainable state: fusion, the neural-side encoder and `log τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub fusion: FusionParams<T>,
    pub neural: Affine<T>,
    pub log_tau: T,
}

impl<T: Scalar> Model<T> {
    pub fn init(
        view_dim: usize,
        neural_dim: usize,
        fusion: &FusionConfig,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let fusion_params = FusionParams::init(view_dim, fusion, seed)?;
        let neural = Affine::init(
            fusion.latent_dim,
            neural_dim,
            derive_seed(seed, &[stream::INIT, 100]),
        );
        Ok(Self {
            fusion: fusion_params,
            neural,
            log_tau: T::lit(tau.ln()),
        })
    }

    pub fn tau(&self) -> T {
        self.log_tau.exp()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion.zeros_like(),
            neural: Affine::zeros(self.neural.out_dim(), self.neural.in_dim()),
            log_tau: T::zero(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = self.fusion.tensors();
        out.push((
            "neural.weight".into(),
            vec![self.neural.out_dim(), self.neural.in_dim()],
            self.neural.weight.as_slice(),
        ));
        out.push((
            "neural.bias".into(),
            vec![self.neural.out_dim()],
            &self.neural.bias[..],
        ));
        out.push(("log_tau".into(), vec![1], std::slice::from_ref(&self.log_tau)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.fusion.tensors_mut();
        out.push(self.neural.weight.as_mut_slice());
        out.push(&mut self.neural.bias[..]);
        out.push(std::slice::from_mut(&mut self.log_tau));
        out
    }

    pub fn embed_neural(&self, x: &[T]) -> Vec<T> {
        self.neural.forward(x)
    }

    /// Evaluation-mode visual embedding.
    pub fn embed_visual(&self, features: &ViewFeatureSet<T>) -> Result<Vec<T>> {
        Ok(fuse_and_purify(features, &self.fusion, None)?.0)
    }
}

pub struct BatchResult<T> {
    pub loss: T,
    pub logits: BatchLogits<T>,
    pub grad: Model<T>,
}

/// Loss and full parameter gradient for one batch. `dropout_seeds` switches
/// the fusion into training mode with one mask seed per sample.
pub fn batch_loss_and_grad<T: Scalar>(
    model: &Model<T>,
    features: &[ViewFeatureSet<T>],
    neural_inputs: &[Vec<T>],
    dropout_seeds: Option<&[u64]>,
) -> Result<BatchResult<T>> {
    if features.len() != neural_inputs.len() {
        return Err(Error::Contract(
            "feature and neural batches differ in size".into(),
        ));
    }
    let forwards = features
        .iter()
        .enumerate()
        .map(|(i, f)| fuse_and_purify(f, &model.fusion, dropout_seeds.map(|s| s[i])))
        .collect::<Result<Vec<_>>>()?;
    let latent = Matrix::from_rows(&forwards.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>());
    let neural = Matrix::from_rows(
        &neural_inputs
            .iter()
            .map(|x| model.embed_neural(x))
            .collect::<Vec<_>>(),
    );
    let lg = contrastive_loss_gradient(&neural, &latent, model.log_tau)?;
    let mut grad = model.zeros_like();
    for (i, (_, cache)) in forwards.iter().enumerate() {
        model.fusion.backward(cache, lg.d_latent.row(i), &mut grad.fusion);
        model
            .neural
            .backward(&neural_inputs[i], lg.d_neural.row(i), &mut grad.neural);
    }
    grad.log_tau = lg.d_log_tau;
    Ok(BatchResult {
        loss: lg.loss,
        logits: lg.logits,
        grad,
    })
}

/// Adam with decoupled weight decay. Decay applies to weight matrices only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &Model<T>, learning_rate: f64, weight_decay: f64) -> Self {
        let tensors = model.tensors();
        Self {
            learning_rate: T::lit(learning_rate),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::lit(weight_decay),
            step: 0,
            first: tensors.iter().map(|t| vec![T::zero(); t.2.len()]).collect(),
            second: tensors.iter().map(|t| vec![T::zero(); t.2.len()]).collect(),
            decay: tensors.iter().map(|t| t.0.ends_with(".weight")).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, model: &mut Model<T>, grad: &Model<T>) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let lr = self.learning_rate;
        let grads: Vec<Vec<T>> = grad.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        for (ti, (param, g)) in model.tensors_mut().into_iter().zip(&grads).enumerate() {
            let (m, v) = (&mut self.first[ti], &mut self.second[ti]);
            for k in 0..param.len() {
                m[k] = self.beta1 * m[k] + (T::one() - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (T::one() - self.beta2) * g[k] * g[k];
                if self.decay[ti] {
                    param[k] -= lr * self.weight_decay * param[k];
                }
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                param[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Everything `train_epoch` reads besides the trainer's own state.
pub struct TrainingData<'a, T> {
    pub provider: &'a FeatureProvider<'a, T>,
    /// Neural input vector per sample id.
    pub neural: &'a [Vec<T>],
    pub train_ids: &'a [usize],
    pub views: &'a [View],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub mean_smoothed_sim: f64,
    pub kernel_min: u32,
    pub kernel_mean: f64,
    pub kernel_max: u32,
    pub t_lower: f64,
    pub t_upper: f64,
    pub batches: usize,
    pub kernel_histogram: BTreeMap<u32, usize>,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub regulator: BlurScheduleState<T>,
    pub alignment: AlignmentConfig,
    pub regulation: RegulatorConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Where to write a diagnostic file if the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: Model<T>,
        regulator: BlurScheduleState<T>,
        alignment: AlignmentConfig,
        regulation: RegulatorConfig,
        seed: u64,
    ) -> Result<Self> {
        alignment.validate()?;
        let optimizer = AdamW::new(&model, alignment.learning_rate, alignment.weight_decay);
        Ok(Self {
            model,
            optimizer,
            regulator,
            alignment,
            regulation,
            seed,
            epoch: 0,
            dump_dir: None,
        })
    }

    fn regulating(&self) -> bool {
        self.regulation.dynamic && self.epoch >= self.regulation.start_epoch
    }

    /// One pass over the shuffled training ids in full batches; the last
    /// incomplete batch is dropped.
    pub fn train_epoch(&mut self, data: &TrainingData<'_, T>) -> Result<EpochReport> {
        let b = self.alignment.batch_size;
        if data.train_ids.len() < b {
            return Err(Error::Config(format!(
                "training split has {} samples, fewer than one batch of {b}",
                data.train_ids.len()
            )));
        }
        let epoch = self.epoch as u64;
        let mut order = data.train_ids.to_vec();
        order.shuffle(&mut seeded_rng(derive_seed(self.seed, &[stream::SHUFFLE, epoch])));

        let mut loss_sum = 0.0;
        let mut bound_sums = (0.0, 0.0);
        let mut batches = 0usize;
        for (bi, ids) in order.chunks_exact(b).enumerate() {
            let features = ids
                .par_iter()
                .map(|&i| {
                    encode_views(
                        data.provider,
                        data.views,
                        SampleRequest {
                            index: i,
                            kernel_size: self.regulator.kernel(i),
                            noise_seed: derive_seed(self.seed, &[stream::NOISE, i as u64, epoch]),
                        },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let neural: Vec<Vec<T>> = ids.iter().map(|&i| data.neural[i].clone()).collect();
            let seeds: Vec<u64> = ids
                .iter()
                .map(|&i| derive_seed(self.seed, &[stream::DROPOUT, epoch, i as u64]))
                .collect();
            let result = match batch_loss_and_grad(&self.model, &features, &neural, Some(&seeds)) {
                Err(Error::Numeric { .. }) => return Err(self.numeric_failure(bi, ids, T::nan())),
                other => other?,
            };
            if !result.loss.is_finite() {
                return Err(self.numeric_failure(bi, ids, result.loss));
            }
            self.optimizer.step(&mut self.model, &result.grad);
            let (lo, hi) = (
                T::lit(self.alignment.tau_min.ln()),
                T::lit(self.alignment.tau_max.ln()),
            );
            self.model.log_tau = self.model.log_tau.max(lo).min(hi);

            self.regulator.update_smoothed(ids, &result.logits.diagonal())?;
            let (bounds, _) = confidence_bounds(&self.regulator.smoothed_batch(ids), self.regulator.z());
            if self.regulating() {
                self.regulator.update_kernels(ids, bounds)?;
            }
            loss_sum += result.loss.as_f64();
            bound_sums.0 += bounds.lower.as_f64();
            bound_sums.1 += bounds.upper.as_f64();
            batches += 1;
        }

        let smoothed: Vec<f64> = data
            .train_ids
            .iter()
            .filter_map(|&i| self.regulator.smoothed(i).map(|s| s.as_f64()))
            .collect();
        let kernels: Vec<u32> = data.train_ids.iter().map(|&i| self.regulator.kernel(i)).collect();
        let mut histogram = BTreeMap::new();
        for &k in &kernels {
            *histogram.entry(k).or_insert(0) += 1;
        }
        let nb = batches as f64;
        let report = EpochReport {
            epoch: self.epoch,
            loss: loss_sum / nb,
            mean_smoothed_sim: smoothed.iter().sum::<f64>() / smoothed.len().max(1) as f64,
            kernel_min: *kernels.iter().min().unwrap(),
            kernel_mean: kernels.iter().map(|&k| k as f64).sum::<f64>() / kernels.len() as f64,
            kernel_max: *kernels.iter().max().unwrap(),
            t_lower: bound_sums.0 / nb,
            t_upper: bound_sums.1 / nb,
            batches,
            kernel_histogram: histogram,
        };
        self.epoch += 1;
        Ok(report)
    }

    fn numeric_failure(&self, batch: usize, ids: &[usize], loss: T) -> Error {
        let message = format!(
            "non-finite loss {loss} at epoch {} batch {batch} (tau = {})",
            self.epoch,
            self.model.tau()
        );
        let dump = self.dump_dir.as_ref().and_then(|dir| {
            let path = dir.join("diagnostic.toml");
            let mut text = format!(
                "epoch = {}\nbatch = {batch}\nloss = \"{loss}\"\nlog_tau = {}\nsample_ids = {ids:?}\n",
                self.epoch,
                self.model.log_tau.as_f64()
            );
            text.push_str(&format!(
                "kernels = {:?}\n",
                ids.iter().map(|&i| self.regulator.kernel(i)).collect::<Vec<_>>()
            ));
            for (name, _, values) in self.model.tensors() {
                let bad = values.iter().filter(|v| !v.is_finite()).count();
                text.push_str(&format!("\"nonfinite.{name}\" = {bad}\n"));
            }
            std::fs::write(&path, text).ok().map(|_| path)
        });
        Error::Numeric { message, dump }
    }
}
