mod common;

use bicap_core::features::ViewFeatureSet;
use bicap_core::fusion::{
    attention_fuse, belief_weights, evidence_head, fuse_and_purify, weighted_mean, EvidenceActivation,
    FusionConfig, FusionParams,
};
use bicap_core::linalg::{Affine, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn cfg(latent: usize) -> FusionConfig {
    FusionConfig {
        latent_dim: latent,
        evidence_hidden: 4,
        ..FusionConfig::default()
    }
}

#[test]
fn reference_forward_on_seed_zero_parameters() {
    let mut rng = common::rng(0);
    let features = common::random_matrix(&mut rng, 4, 8);
    let params = FusionParams::<f64>::init(8, &cfg(8), 0).unwrap();
    let set = ViewFeatureSet::new(features.clone()).unwrap();
    let (latent, _) = fuse_and_purify(&set, &params, None).unwrap();
    let want = common::fusion_forward(&features, &params);
    for (a, b) in latent.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn reference_forward_with_every_branch_active() {
    let mut rng = common::rng(1);
    for (latent, activation, evidence) in [
        (6, EvidenceActivation::ExpSoftplus, true),
        (8, EvidenceActivation::Softplus, true),
        (8, EvidenceActivation::ExpSoftplus, false),
    ] {
        let c = FusionConfig {
            evidence_activation: activation,
            evidence,
            ..cfg(latent)
        };
        let features = common::random_matrix(&mut rng, 4, 8);
        let mut params = FusionParams::<f64>::init(8, &c, 9).unwrap();
        for g in params.norm.gain.iter_mut().chain(params.norm.shift.iter_mut()) {
            *g = rng.random_range(-1.5..1.5);
        }
        let set = ViewFeatureSet::new(features.clone()).unwrap();
        let (out, _) = fuse_and_purify(&set, &params, None).unwrap();
        let want = common::fusion_forward(&features, &params);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn evidence_of_zero_pre_activation_is_two() {
    let mut params = FusionParams::<f64>::init(3, &cfg(3), 2).unwrap();
    let head = params.evidence.as_mut().unwrap();
    head.out = Affine::zeros(1, 4);
    let set = ViewFeatureSet::new(Matrix::from_rows(&[vec![0.3, -0.2, 0.9]])).unwrap();
    assert!((evidence_head(&set, &params).unwrap()[0] - 2.0).abs() < 1e-15);
    head_bias(&mut params, -60.0);
    assert!((evidence_head(&set, &params).unwrap()[0] - 1.0).abs() < 1e-12);
}

fn head_bias(params: &mut FusionParams<f64>, b: f64) {
    params.evidence.as_mut().unwrap().out.bias[0] = b;
}

#[test]
fn belief_examples() {
    let s = belief_weights(&[0.0_f64, 1.0, 9.0]).unwrap();
    assert_eq!(s.strength, vec![1.0, 2.0, 10.0]);
    assert_eq!(s.uncertainty, vec![1.0, 0.5, 0.1]);
    assert_eq!(s.belief[0], 0.0);
    assert_eq!(s.belief[1], 0.5);
    assert!((s.belief[2] - 0.9).abs() < 1e-15);
    assert!(belief_weights(&[0.5, -1e-9]).is_err());
}

#[test]
fn weighted_mean_degenerate_weights() {
    let f = ViewFeatureSet::new(Matrix::<f64>::from_rows(&[
        vec![1.0, 2.0],
        vec![3.0, -1.0],
        vec![0.5, 0.5],
        vec![-2.0, 4.0],
    ]))
    .unwrap();
    let single = weighted_mean(&f, &[1.0, 0.0, 0.0, 0.0], 1e-8);
    assert!((single[0] - 1.0).abs() < 1e-7 && (single[1] - 2.0).abs() < 1e-7);
    assert_eq!(weighted_mean(&f, &[0.0; 4], 1e-8), vec![0.0, 0.0]);
    let equal = weighted_mean(&f, &[0.5; 4], 1e-8);
    assert!((equal[0] - 0.625).abs() < 1e-6 && (equal[1] - 1.375).abs() < 1e-6);
}

#[test]
fn attention_closed_form_weights() {
    let mut params = FusionParams::<f64>::init(2, &cfg(2), 0).unwrap();
    params.attention = Affine {
        weight: Matrix::from_rows(&[vec![1.0, 0.0]]),
        bias: vec![0.0],
    };
    let f = ViewFeatureSet::new(Matrix::from_rows(&[vec![2f64.ln(), 1.0], vec![0.0, 4.0]])).unwrap();
    let (alpha, att) = attention_fuse(&f, &params).unwrap();
    assert!((alpha[0] - 2.0 / 3.0).abs() < 1e-12 && (alpha[1] - 1.0 / 3.0).abs() < 1e-12);
    assert!((att[1] - (2.0 / 3.0 + 4.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn zero_purifier_yields_normalized_fusion() {
    let mut rng = common::rng(4);
    let mut params = FusionParams::<f64>::init(8, &cfg(8), 3).unwrap();
    params.purify_up = Affine::zeros(8, 4);
    let features = common::random_matrix(&mut rng, 4, 8);
    let set = ViewFeatureSet::new(features).unwrap();
    let (latent, cache) = fuse_and_purify(&set, &params, Some(17)).unwrap();
    let fused = cache.fused();
    let mu = fused.iter().sum::<f64>() / 8.0;
    let var = fused.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
    for (l, f) in latent.iter().zip(fused) {
        assert!((l - (f - mu) / (var + 1e-5).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn dropout_only_changes_training_mode() {
    let mut rng = common::rng(8);
    let params = FusionParams::<f64>::init(8, &cfg(8), 3).unwrap();
    let set = ViewFeatureSet::new(common::random_matrix(&mut rng, 4, 8)).unwrap();
    let eval_a = fuse_and_purify(&set, &params, None).unwrap().0;
    let eval_b = fuse_and_purify(&set, &params, None).unwrap().0;
    assert_eq!(eval_a, eval_b);
    let train_a = fuse_and_purify(&set, &params, Some(5)).unwrap().0;
    assert_eq!(train_a, fuse_and_purify(&set, &params, Some(5)).unwrap().0);
}

#[test]
fn belief_is_strictly_monotone_over_many_values() {
    let mut rng = common::rng(10);
    let mut evidence: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..50.0)).collect();
    evidence.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let s = belief_weights(&evidence).unwrap();
    for i in 1..evidence.len() {
        if evidence[i] > evidence[i - 1] {
            assert!(s.belief[i] > s.belief[i - 1]);
        }
        assert_eq!(s.uncertainty[i] + s.belief[i], 1.0);
    }
}

proptest! {
    #[test]
    fn uncertainty_and_belief_sum_to_one(e in prop::collection::vec(0.0..1e6f64, 1..16)) {
        let s = belief_weights(&e).unwrap();
        for i in 0..e.len() {
            prop_assert_eq!(s.uncertainty[i] + s.belief[i], 1.0);
            prop_assert!(s.uncertainty[i] > 0.0 && s.uncertainty[i] <= 1.0);
            prop_assert!(s.belief[i] >= 0.0 && s.belief[i] < 1.0);
        }
    }

    // The relative deviation is exactly eps / (sum of weights + eps), so the
    // 2e-8 bound needs the weights to total at least one half.
    #[test]
    fn equal_beliefs_give_the_plain_mean(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 6), 1..6),
        w in 0.5..0.99f64,
    ) {
        let f = ViewFeatureSet::new(Matrix::from_rows(&rows)).unwrap();
        let got = weighted_mean(&f, &vec![w; rows.len()], 1e-8);
        for d in 0..6 {
            let mean = rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64;
            prop_assert!((got[d] - mean).abs() <= 2e-8 * mean.abs().max(1.0));
        }
    }

    #[test]
    fn view_permutation_leaves_pre_projection_unchanged(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 5), 4),
        w in prop::collection::vec(0.0..1.0f64, 4),
        perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let f = ViewFeatureSet::new(Matrix::from_rows(&rows)).unwrap();
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let w_p: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let fp = ViewFeatureSet::new(Matrix::from_rows(&rows_p)).unwrap();
        prop_assert_eq!(weighted_mean(&f, &w, 1e-8), weighted_mean(&fp, &w_p, 1e-8));
    }

    #[test]
    fn attention_weights_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 1..8), seed in any::<u64>()) {
        let params = FusionParams::<f64>::init(4, &cfg(4), seed).unwrap();
        let f = ViewFeatureSet::new(Matrix::from_rows(&rows)).unwrap();
        let (alpha, _) = attention_fuse(&f, &params).unwrap();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn evidence_is_positive(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 1..6), seed in any::<u64>()) {
        let params = FusionParams::<f64>::init(4, &cfg(4), seed).unwrap();
        let f = ViewFeatureSet::new(Matrix::from_rows(&rows)).unwrap();
        prop_assert!(evidence_head(&f, &params).unwrap().iter().all(|&e| e > 0.0));
    }
}
