//! Evidence-driven fusion of per-view features into one latent vector.
//!
//! ```text
//!   f_v ──► evidence head ──► e_v ──► w_v = 1 − 1/(e_v + 1)
//!   F_evidence = Proj( Σ w_v f_v / (Σ w_v + ε) )
//!   F_att      = Σ softmax(s)_v f_v,        s_v = a·f_v + a₀
//!   F_fus      = F_evidence + F_att
//!   F_latent   = LayerNorm( F_fus + Dropout(Up(GELU(Down(F_fus)))) )
//! ```
//!
//! Forward passes return a cache; [`FusionParams::backward`] consumes it and
//! accumulates parameter gradients.

use crate::error::{Error, Result};
use crate::features::ViewFeatureSet;
use crate::linalg::{
    dot, gelu, gelu_grad, sigmoid, softmax, softmax_backward, softplus, Affine, LayerNorm, LayerNormCache,
};
use crate::rng::seeded_rng;
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceActivation {
    /// `e = exp(softplus(z))`, always ≥ 1.
    ExpSoftplus,
    /// `e = softplus(z)`, ≥ 0.
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub latent_dim: usize,
    /// Defaults to `latent_dim / 2` when zero.
    pub bottleneck_dim: usize,
    pub evidence_hidden: usize,
    pub dropout: f64,
    pub epsilon: f64,
    pub layer_norm_eps: f64,
    /// Evidence weighting on; when off every view gets belief weight 1.
    pub evidence: bool,
    pub evidence_activation: EvidenceActivation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            bottleneck_dim: 0,
            evidence_hidden: 16,
            dropout: 0.1,
            epsilon: 1e-8,
            layer_norm_eps: 1e-5,
            evidence: true,
            evidence_activation: EvidenceActivation::ExpSoftplus,
        }
    }
}

impl FusionConfig {
    pub fn bottleneck(&self) -> usize {
        if self.bottleneck_dim == 0 {
            (self.latent_dim / 2).max(1)
        } else {
            self.bottleneck_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.evidence_hidden == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.epsilon > 0.0) || !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("epsilons must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer MLP producing one scalar evidence value per view.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceHead<T> {
    pub hidden: Affine<T>,
    pub out: Affine<T>,
    pub activation: EvidenceActivation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub evidence: Option<EvidenceHead<T>>,
    pub proj: Affine<T>,
    pub attention: Affine<T>,
    /// Present only when the latent width differs from the view feature width.
    pub attention_proj: Option<Affine<T>>,
    pub purify_down: Affine<T>,
    pub purify_up: Affine<T>,
    pub norm: LayerNorm<T>,
    pub epsilon: T,
    pub dropout: T,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init(view_dim: usize, cfg: &FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if view_dim == 0 {
            return Err(Error::Config("view feature dimension must be positive".into()));
        }
        let latent = cfg.latent_dim;
        let bottleneck = cfg.bottleneck();
        let s = |i: u64| crate::rng::derive_seed(seed, &[crate::rng::stream::INIT, i]);
        Ok(Self {
            evidence: cfg.evidence.then(|| EvidenceHead {
                hidden: Affine::init(cfg.evidence_hidden, view_dim, s(0)),
                out: Affine::init(1, cfg.evidence_hidden, s(1)),
                activation: cfg.evidence_activation,
            }),
            proj: Affine::init(latent, view_dim, s(2)),
            attention: Affine::init(1, view_dim, s(3)),
            attention_proj: (latent != view_dim).then(|| Affine::init(latent, view_dim, s(4))),
            purify_down: Affine::init(bottleneck, latent, s(5)),
            purify_up: Affine::init(latent, bottleneck, s(6)),
            norm: LayerNorm::identity(latent, T::lit(cfg.layer_norm_eps)),
            epsilon: T::lit(cfg.epsilon),
            dropout: T::lit(cfg.dropout),
        })
    }

    pub fn view_dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// Same shapes, all trainable entries zero.
    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine<T>| Affine::zeros(a.out_dim(), a.in_dim());
        Self {
            evidence: self.evidence.as_ref().map(|h| EvidenceHead {
                hidden: z(&h.hidden),
                out: z(&h.out),
                activation: h.activation,
            }),
            proj: z(&self.proj),
            attention: z(&self.attention),
            attention_proj: self.attention_proj.as_ref().map(z),
            purify_down: z(&self.purify_down),
            purify_up: z(&self.purify_up),
            norm: self.norm.zeros_like(),
            epsilon: self.epsilon,
            dropout: self.dropout,
        }
    }

    /// Named trainable tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        type Named<'a, T> = Vec<(String, Vec<usize>, &'a [T])>;
        fn push_affine<'a, T: Scalar>(name: &str, a: &'a Affine<T>, out: &mut Named<'a, T>) {
            out.push((
                format!("{name}.weight"),
                vec![a.out_dim(), a.in_dim()],
                a.weight.as_slice(),
            ));
            out.push((format!("{name}.bias"), vec![a.out_dim()], &a.bias[..]));
        }
        let mut out = Vec::new();
        if let Some(h) = &self.evidence {
            push_affine("fusion.evidence.hidden", &h.hidden, &mut out);
            push_affine("fusion.evidence.out", &h.out, &mut out);
        }
        push_affine("fusion.proj", &self.proj, &mut out);
        push_affine("fusion.attention", &self.attention, &mut out);
        if let Some(p) = &self.attention_proj {
            push_affine("fusion.attention_proj", p, &mut out);
        }
        push_affine("fusion.purify_down", &self.purify_down, &mut out);
        push_affine("fusion.purify_up", &self.purify_up, &mut out);
        out.push((
            "fusion.norm.gain".into(),
            vec![self.norm.gain.len()],
            &self.norm.gain[..],
        ));
        out.push((
            "fusion.norm.shift".into(),
            vec![self.norm.shift.len()],
            &self.norm.shift[..],
        ));
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        fn affine<'a, T: Scalar>(a: &'a mut Affine<T>, out: &mut Vec<&'a mut [T]>) {
            out.push(a.weight.as_mut_slice());
            out.push(&mut a.bias[..]);
        }
        if let Some(h) = &mut self.evidence {
            affine(&mut h.hidden, &mut out);
            affine(&mut h.out, &mut out);
        }
        affine(&mut self.proj, &mut out);
        affine(&mut self.attention, &mut out);
        if let Some(p) = &mut self.attention_proj {
            affine(p, &mut out);
        }
        affine(&mut self.purify_down, &mut out);
        affine(&mut self.purify_up, &mut out);
        out.push(&mut self.norm.gain[..]);
        out.push(&mut self.norm.shift[..]);
        out
    }

    fn check_features(&self, features: &ViewFeatureSet<T>) -> Result<()> {
        if features.dim() != self.view_dim() {
            return Err(Error::Config(format!(
                "feature dimension {} does not match fusion input dimension {}",
                features.dim(),
                self.view_dim()
            )));
        }
        Ok(())
    }
}

/// Per-view evidential quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceState<T> {
    pub evidence: Vec<T>,
    pub strength: Vec<T>,
    pub uncertainty: Vec<T>,
    pub belief: Vec<T>,
}

struct HeadTrace<T> {
    pre: Vec<T>,
    act: Vec<T>,
    raw: T,
}

fn head_forward<T: Scalar>(head: &EvidenceHead<T>, f: &[T]) -> (T, HeadTrace<T>) {
    let pre = head.hidden.forward(f);
    let act: Vec<T> = pre.iter().map(|&z| gelu(z)).collect();
    let raw = head.out.forward(&act)[0];
    let sp = softplus(raw);
    let e = match head.activation {
        EvidenceActivation::ExpSoftplus => sp.exp(),
        EvidenceActivation::Softplus => sp,
    };
    (e, HeadTrace { pre, act, raw })
}

/// `e_v` for each view. All zeros when evidence weighting is disabled.
pub fn evidence_head<T: Scalar>(features: &ViewFeatureSet<T>, params: &FusionParams<T>) -> Result<Vec<T>> {
    params.check_features(features)?;
    Ok(match &params.evidence {
        Some(head) => (0..features.views())
            .map(|v| head_forward(head, features.row(v)).0)
            .collect(),
        None => vec![T::zero(); features.views()],
    })
}

/// `S = e + 1`, `u = 1/S`, `w = 1 − u`.
pub fn belief_weights<T: Scalar>(evidence: &[T]) -> Result<EvidenceState<T>> {
    if evidence.iter().any(|e| e.is_nan()) {
        return Err(Error::Numeric {
            message: "evidence is NaN".into(),
            dump: None,
        });
    }
    if let Some(bad) = evidence.iter().find(|e| **e < T::zero()) {
        return Err(Error::Contract(format!(
            "evidence must be non-negative, got {bad}"
        )));
    }
    let strength: Vec<T> = evidence.iter().map(|&e| e + T::one()).collect();
    let uncertainty: Vec<T> = strength.iter().map(|&s| T::one() / s).collect();
    let belief = uncertainty.iter().map(|&u| T::one() - u).collect();
    Ok(EvidenceState {
        evidence: evidence.to_vec(),
        strength,
        uncertainty,
        belief,
    })
}

/// Summation order for the weighted mean: by weight, then by row contents.
/// A fixed order makes the sum exactly invariant to how views are listed.
fn canonical_order<T: Scalar>(features: &ViewFeatureSet<T>, weights: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                features
                    .row(a)
                    .iter()
                    .zip(features.row(b))
                    .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    order
}

/// `Σ w_v f_v / (Σ w_v + ε)`, before the projection.
pub fn weighted_mean<T: Scalar>(features: &ViewFeatureSet<T>, weights: &[T], epsilon: T) -> Vec<T> {
    let order = canonical_order(features, weights);
    let mut acc = vec![T::zero(); features.dim()];
    let mut total = T::zero();
    for &v in &order {
        total += weights[v];
        for (a, &x) in acc.iter_mut().zip(features.row(v)) {
            *a += weights[v] * x;
        }
    }
    let denom = total + epsilon;
    acc.into_iter().map(|a| a / denom).collect()
}

/// Returns `(pre_projection, F_evidence)`.
pub fn evidential_fuse<T: Scalar>(
    features: &ViewFeatureSet<T>,
    weights: &[T],
    params: &FusionParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    params.check_features(features)?;
    if weights.len() != features.views() {
        return Err(Error::Contract(format!(
            "{} weights for {} views",
            weights.len(),
            features.views()
        )));
    }
    let pre = weighted_mean(features, weights, params.epsilon);
    let projected = params.proj.forward(&pre);
    Ok((pre, projected))
}

/// Returns `(softmax weights, F_att)`.
pub fn attention_fuse<T: Scalar>(
    features: &ViewFeatureSet<T>,
    params: &FusionParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    params.check_features(features)?;
    let scores: Vec<T> = (0..features.views())
        .map(|v| params.attention.forward(features.row(v))[0])
        .collect();
    let alpha = softmax(&scores);
    Ok((alpha.clone(), mix_rows(features, &alpha)))
}

fn mix_rows<T: Scalar>(features: &ViewFeatureSet<T>, alpha: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); features.dim()];
    for (v, &a) in alpha.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(features.row(v)) {
            *o += a * x;
        }
    }
    out
}

/// Everything the backward pass needs from one forward evaluation.
pub struct FusionCache<T> {
    features: ViewFeatureSet<T>,
    heads: Vec<HeadTrace<T>>,
    evidence: Vec<T>,
    belief: Vec<T>,
    weight_total: T,
    pre_projection: Vec<T>,
    alpha: Vec<T>,
    attended: Vec<T>,
    fused: Vec<T>,
    bottleneck_pre: Vec<T>,
    bottleneck_act: Vec<T>,
    dropout_mask: Option<Vec<T>>,
    norm: LayerNormCache<T>,
}

impl<T: Scalar> FusionCache<T> {
    pub fn belief(&self) -> &[T] {
        &self.belief
    }

    pub fn fused(&self) -> &[T] {
        &self.fused
    }
}

/// Inverted-dropout mask (`0` or `1/(1−p)`) drawn from `seed`.
pub fn dropout_mask<T: Scalar>(dim: usize, rate: T, seed: u64) -> Vec<T> {
    let mut rng = seeded_rng(seed);
    let keep = T::one() / (T::one() - rate);
    let p = rate.as_f64();
    (0..dim)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Bottleneck purifier with a skip connection, normalized after the residual sum.
fn purify<T: Scalar>(
    params: &FusionParams<T>,
    fused: &[T],
    mask: Option<&[T]>,
) -> (Vec<T>, Vec<T>, Vec<T>, LayerNormCache<T>) {
    let down = params.purify_down.forward(fused);
    let act: Vec<T> = down.iter().map(|&z| gelu(z)).collect();
    let up = params.purify_up.forward(&act);
    let residual: Vec<T> = match mask {
        Some(m) => fused
            .iter()
            .zip(&up)
            .zip(m)
            .map(|((&f, &u), &k)| f + u * k)
            .collect(),
        None => fused.iter().zip(&up).map(|(&f, &u)| f + u).collect(),
    };
    let (latent, norm) = params.norm.forward(&residual);
    (latent, down, act, norm)
}

/// Full forward pass. `dropout_seed = None` is evaluation mode.
pub fn fuse_and_purify<T: Scalar>(
    features: &ViewFeatureSet<T>,
    params: &FusionParams<T>,
    dropout_seed: Option<u64>,
) -> Result<(Vec<T>, FusionCache<T>)> {
    params.check_features(features)?;
    let views = features.views();
    let mut heads = Vec::with_capacity(views);
    let evidence: Vec<T> = match &params.evidence {
        Some(head) => (0..views)
            .map(|v| {
                let (e, trace) = head_forward(head, features.row(v));
                heads.push(trace);
                e
            })
            .collect(),
        None => vec![T::zero(); views],
    };
    let belief = if params.evidence.is_some() {
        belief_weights(&evidence)?.belief
    } else {
        vec![T::one(); views]
    };
    let weight_total: T = belief.iter().copied().sum();
    let (pre_projection, ev) = evidential_fuse(features, &belief, params)?;
    let (alpha, attended) = attention_fuse(features, params)?;
    let att = match &params.attention_proj {
        Some(p) => p.forward(&attended),
        None => attended.clone(),
    };
    let fused: Vec<T> = ev.iter().zip(&att).map(|(&a, &b)| a + b).collect();
    let mask = dropout_seed
        .filter(|_| params.dropout > T::zero())
        .map(|s| dropout_mask(fused.len(), params.dropout, s));
    let (latent, bottleneck_pre, bottleneck_act, norm) = purify(params, &fused, mask.as_deref());
    Ok((
        latent,
        FusionCache {
            features: features.clone(),
            heads,
            evidence,
            belief,
            weight_total,
            pre_projection,
            alpha,
            attended,
            fused,
            bottleneck_pre,
            bottleneck_act,
            dropout_mask: mask,
            norm,
        },
    ))
}

impl<T: Scalar> FusionParams<T> {
    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂F_latent`. View features are
    /// treated as constants (the image encoder is frozen).
    pub fn backward(&self, cache: &FusionCache<T>, d_latent: &[T], grad: &mut FusionParams<T>) {
        let features = &cache.features;
        let d_residual = self.norm.backward(&cache.norm, d_latent, &mut grad.norm);

        // residual = fused + mask ⊙ up(gelu(down(fused)))
        let mut d_fused = d_residual.clone();
        let d_up: Vec<T> = match &cache.dropout_mask {
            Some(m) => d_residual.iter().zip(m).map(|(&d, &k)| d * k).collect(),
            None => d_residual,
        };
        let d_act = self
            .purify_up
            .backward(&cache.bottleneck_act, &d_up, &mut grad.purify_up);
        let d_down: Vec<T> = d_act
            .iter()
            .zip(&cache.bottleneck_pre)
            .map(|(&d, &z)| d * gelu_grad(z))
            .collect();
        let d_from_branch = self
            .purify_down
            .backward(&cache.fused, &d_down, &mut grad.purify_down);
        for (a, b) in d_fused.iter_mut().zip(d_from_branch) {
            *a += b;
        }

        // attention path
        let d_attended = match (&self.attention_proj, &mut grad.attention_proj) {
            (Some(p), Some(gp)) => p.backward(&cache.attended, &d_fused, gp),
            _ => d_fused.clone(),
        };
        let d_alpha: Vec<T> = (0..features.views())
            .map(|v| dot(&d_attended, features.row(v)))
            .collect();
        let d_scores = softmax_backward(&cache.alpha, &d_alpha);
        for (v, &ds) in d_scores.iter().enumerate() {
            self.attention
                .backward(features.row(v), &[ds], &mut grad.attention);
        }

        // evidence path
        let d_pre = self
            .proj
            .backward(&cache.pre_projection, &d_fused, &mut grad.proj);
        if let (Some(head), Some(ghead)) = (&self.evidence, &mut grad.evidence) {
            let denom = cache.weight_total + self.epsilon;
            for v in 0..features.views() {
                // ∂p/∂w_v = (f_v − p) / (Σw + ε)
                let d_w = features
                    .row(v)
                    .iter()
                    .zip(&cache.pre_projection)
                    .zip(&d_pre)
                    .fold(T::zero(), |acc, ((&f, &p), &d)| acc + d * (f - p))
                    / denom;
                let e = cache.evidence[v];
                let s = e + T::one();
                let d_e = d_w / (s * s);
                let trace = &cache.heads[v];
                let d_raw = match head.activation {
                    EvidenceActivation::ExpSoftplus => d_e * e * sigmoid(trace.raw),
                    EvidenceActivation::Softplus => d_e * sigmoid(trace.raw),
                };
                let d_act = head.out.backward(&trace.act, &[d_raw], &mut ghead.out);
                let d_hidden: Vec<T> = d_act
                    .iter()
                    .zip(&trace.pre)
                    .map(|(&d, &z)| d * gelu_grad(z))
                    .collect();
                head.hidden
                    .backward(features.row(v), &d_hidden, &mut ghead.hidden);
            }
        }
    }
}
