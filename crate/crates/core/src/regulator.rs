//! Feedback control of the per-sample blur kernel.
//!
//! Each sample's diagonal contrastive logit is smoothed with momentum. Within a
//! batch, smoothed values above `μ + zσ` shrink that sample's kernel by `c`,
//! values below `μ − zσ` grow it by `c`, and everything in between keeps it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulatorConfig {
    /// Kernel updates on. Smoothing always runs.
    pub dynamic: bool,
    pub momentum: f64,
    /// Two-sided significance level; `z = Φ⁻¹(1 − α/2)`.
    pub alpha: f64,
    pub k_min: u32,
    /// Zero means `2·k_init − 1`.
    pub k_max: u32,
    /// First epoch (0-based) in which kernels may change.
    pub start_epoch: usize,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            dynamic: true,
            momentum: 0.9,
            alpha: 0.05,
            k_min: 1,
            k_max: 0,
            start_epoch: 1,
        }
    }
}

impl RegulatorConfig {
    pub fn z_score(&self) -> f64 {
        Normal::standard().inverse_cdf(1.0 - self.alpha / 2.0)
    }

    pub fn k_max_for(&self, k_init: u32) -> u32 {
        if self.k_max == 0 {
            2 * k_init - 1
        } else {
            self.k_max
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds<T> {
    pub lower: T,
    pub upper: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurScheduleState<T> {
    smoothed: Vec<T>,
    kernels: Vec<u32>,
    initialized: Vec<bool>,
    momentum: T,
    z: T,
    perturbation: u32,
    k_min: u32,
    k_max: u32,
}

impl<T: Scalar> BlurScheduleState<T> {
    /// Every kernel starts at `k_init`.
    pub fn new(
        samples: usize,
        k_init: u32,
        perturbation: u32,
        momentum: T,
        z: T,
        k_min: u32,
        k_max: u32,
    ) -> Result<Self> {
        for (name, k) in [("k_init", k_init), ("k_min", k_min), ("k_max", k_max)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(k_min <= k_init && k_init <= k_max) {
            return Err(Error::Config(format!(
                "need k_min <= k_init <= k_max, got {k_min} <= {k_init} <= {k_max}"
            )));
        }
        if perturbation == 0 || !perturbation.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "perturbation must be even and positive, got {perturbation}"
            )));
        }
        if !(momentum >= T::zero() && momentum <= T::one()) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            smoothed: vec![T::zero(); samples],
            kernels: vec![k_init; samples],
            initialized: vec![false; samples],
            momentum,
            z,
            perturbation,
            k_min,
            k_max,
        })
    }

    pub fn from_config(
        samples: usize,
        k_init: u32,
        perturbation: u32,
        cfg: &RegulatorConfig,
    ) -> Result<Self> {
        Self::new(
            samples,
            k_init,
            perturbation,
            T::lit(cfg.momentum),
            T::lit(cfg.z_score()),
            cfg.k_min,
            cfg.k_max_for(k_init),
        )
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernel(&self, sample: usize) -> u32 {
        self.kernels[sample]
    }

    pub fn kernels(&self) -> &[u32] {
        &self.kernels
    }

    pub fn smoothed(&self, sample: usize) -> Option<T> {
        self.initialized[sample].then(|| self.smoothed[sample])
    }

    pub fn z(&self) -> T {
        self.z
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.kernels.len()) {
            Some(i) => Err(Error::Contract(format!("unknown sample id {i}"))),
            None => Ok(()),
        }
    }

    /// `ŝ ← β·s + (1 − β)·ŝ_prev`; the first observation seeds `ŝ ← s`.
    pub fn update_smoothed(&mut self, ids: &[usize], diag_logits: &[T]) -> Result<()> {
        self.check_ids(ids)?;
        if ids.len() != diag_logits.len() {
            return Err(Error::Contract(format!(
                "{} ids but {} logits",
                ids.len(),
                diag_logits.len()
            )));
        }
        for (&i, &s) in ids.iter().zip(diag_logits) {
            self.smoothed[i] = if self.initialized[i] {
                self.momentum * s + (T::one() - self.momentum) * self.smoothed[i]
            } else {
                s
            };
            self.initialized[i] = true;
        }
        Ok(())
    }

    /// Smoothed values of `ids`, uninitialized samples skipped.
    pub fn smoothed_batch(&self, ids: &[usize]) -> Vec<T> {
        ids.iter().filter_map(|&i| self.smoothed(i)).collect()
    }

    /// Applies the three-way rule to each sample in `ids`.
    pub fn update_kernels(&mut self, ids: &[usize], bounds: Bounds<T>) -> Result<()> {
        self.check_ids(ids)?;
        for &i in ids {
            let Some(s) = self.smoothed(i) else { continue };
            self.kernels[i] = next_kernel(
                self.kernels[i],
                s,
                bounds,
                self.perturbation,
                self.k_min,
                self.k_max,
            );
        }
        Ok(())
    }

    pub fn histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for &k in &self.kernels {
            *h.entry(k).or_insert(0) += 1;
        }
        h
    }

    pub fn state_vectors(&self) -> (Vec<T>, Vec<u32>) {
        (self.smoothed.clone(), self.kernels.clone())
    }
}

/// Strict inequalities on both sides; a value exactly on a bound keeps `k`.
pub fn next_kernel<T: Scalar>(k: u32, smoothed: T, bounds: Bounds<T>, c: u32, k_min: u32, k_max: u32) -> u32 {
    let k = k as i64;
    let c = c as i64;
    let next = if smoothed > bounds.upper {
        k - c
    } else if smoothed < bounds.lower {
        k + c
    } else {
        k
    };
    next.clamp(k_min as i64, k_max as i64) as u32
}

/// `μ ± z·σ` over the batch, σ the population standard deviation.
///
/// Fewer than two values yields the degenerate interval `(μ, μ)` (or `(0, 0)`
/// when empty) and `warned = true`.
pub fn confidence_bounds<T: Scalar>(smoothed: &[T], z: T) -> (Bounds<T>, bool) {
    if smoothed.is_empty() {
        return (
            Bounds {
                lower: T::zero(),
                upper: T::zero(),
            },
            true,
        );
    }
    let n = T::from_usize(smoothed.len()).unwrap();
    let mean = smoothed.iter().copied().sum::<T>() / n;
    if smoothed.len() < 2 {
        return (
            Bounds {
                lower: mean,
                upper: mean,
            },
            true,
        );
    }
    let var = smoothed.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / n;
    let half = z * var.sqrt();
    (
        Bounds {
            lower: mean - half,
            upper: mean + half,
        },
        false,
    )
}
