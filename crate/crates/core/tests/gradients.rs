//! Analytic gradients against central differences at eps = 1e-5.

use keyphrase_distill::encoders::{BiEncoderParams, CrossEncoderParams, CrossInput, TokenSeq};
use keyphrase_distill::losses::{
    contrastive_loss, cosent_loss, matryoshka_wrap, mnr_loss, mse_loss, pair_loss, pearson_ri_loss,
    ContrastiveConfig, CosentConfig, EmbeddingLoss, LossKind, MatryoshkaConfig, MnrConfig,
    ScoreLoss,
};
use keyphrase_distill::numerics::{
    finite_diff_check_bi, finite_diff_check_cross, relative_error, CrossBatch, LossSpec, PairBatch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn all_kinds() -> Vec<LossKind> {
    vec![
        LossKind::Mnr(MnrConfig::default()),
        LossKind::Contrastive(ContrastiveConfig::default()),
        LossKind::Cosent(CosentConfig::default()),
        LossKind::Pearson,
        LossKind::Mse,
    ]
}

/// Worst relative error of the score gradient of `f` at `s`.
fn check_scores(s: &[f64], f: impl Fn(&[f64]) -> ScoreLoss) -> f64 {
    let analytic = f(s).grads;
    let mut worst: f64 = 0.0;
    for i in 0..s.len() {
        let mut up = s.to_vec();
        up[i] += EPS;
        let mut down = s.to_vec();
        down[i] -= EPS;
        let numeric = (f(&up).value - f(&down).value) / (2.0 * EPS);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Worst relative error over both embedding sides of `f`.
fn check_embeddings(
    left: &[Vec<f64>],
    right: &[Vec<f64>],
    f: impl Fn(&[Vec<f64>], &[Vec<f64>]) -> EmbeddingLoss,
) -> f64 {
    let base = f(left, right);
    let mut worst: f64 = 0.0;
    for side in 0..2 {
        let analytic = if side == 0 {
            &base.left_grads
        } else {
            &base.right_grads
        };
        for r in 0..left.len() {
            for c in 0..left[0].len() {
                let eval = |delta: f64| {
                    let (mut l, mut rr) = (left.to_vec(), right.to_vec());
                    if side == 0 {
                        l[r][c] += delta;
                    } else {
                        rr[r][c] += delta;
                    }
                    f(&l, &rr).value
                };
                let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
                worst = worst.max(relative_error(analytic[r][c], numeric));
            }
        }
    }
    worst
}

#[test]
fn score_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let teacher: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
    let student: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cfg = CosentConfig::default();
    for (name, err) in [
        (
            "pearson",
            check_scores(&student, |s| pearson_ri_loss(&teacher, s).unwrap()),
        ),
        (
            "cosent",
            check_scores(&student, |s| cosent_loss(&teacher, s, &cfg).unwrap()),
        ),
        (
            "mse",
            check_scores(&student, |s| mse_loss(&teacher, s).unwrap()),
        ),
    ] {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn embedding_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let left = vectors(&mut rng, 5, 6);
    let right = vectors(&mut rng, 5, 6);
    // Distances straddle the margin so both hinge branches are exercised.
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0];
    let mnr = check_embeddings(&left, &right, |l, r| {
        mnr_loss(l, r, &MnrConfig::default()).unwrap()
    });
    assert!(mnr < TOL, "mnr: {mnr}");
    let contrastive = check_embeddings(&left, &right, |l, r| {
        contrastive_loss(l, r, &labels, &ContrastiveConfig::default()).unwrap()
    });
    assert!(contrastive < TOL, "contrastive: {contrastive}");
}

#[test]
fn every_loss_through_cosine_and_matryoshka() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let left = vectors(&mut rng, 6, 8);
    // Cosines stay in a narrow band so the scale-20 ranking loss does not
    // saturate; saturated components fall below finite-difference noise.
    let right: Vec<Vec<f64>> = vectors(&mut rng, 6, 8)
        .into_iter()
        .zip(&left)
        .map(|(n, l)| l.iter().zip(n).map(|(a, b)| a + 0.5 * b).collect())
        .collect();
    let labels: Vec<f64> = (0..6)
        .map(|i| {
            if i % 2 == 0 {
                1.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect();
    let binary: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let mcfg = MatryoshkaConfig {
        dims: vec![2, 4, 8],
        weights: vec![1.0, 0.5, 2.0],
    };
    for kind in all_kinds() {
        let y = if matches!(kind, LossKind::Contrastive(_)) {
            &binary
        } else {
            &labels
        };
        let plain = check_embeddings(&left, &right, |l, r| pair_loss(&kind, l, r, y).unwrap());
        let wrapped = check_embeddings(&left, &right, |l, r| {
            matryoshka_wrap(&kind, l, r, y, &mcfg).unwrap()
        });
        assert!(plain < TOL, "{}: {plain}", kind.id());
        assert!(wrapped < TOL, "matryoshka {}: {wrapped}", kind.id());
    }
}

fn seq(rng: &mut ChaCha8Rng, vocab: u32, len: usize) -> TokenSeq {
    TokenSeq::new((0..len).map(|_| rng.random_range(1..vocab)).collect()).unwrap()
}

#[test]
fn bi_encoder_backprop_for_every_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = BiEncoderParams::new_random(24, 5, 8, 11).unwrap();
    let batch = PairBatch {
        items: (0..4).map(|_| seq(&mut rng, 24, 5)).collect(),
        keyphrases: (0..4).map(|_| seq(&mut rng, 24, 2)).collect(),
        labels: vec![1.0, 0.0, 1.0, 0.0],
    };
    let soft = PairBatch {
        labels: vec![0.9, 0.2, 0.6, 0.1],
        ..batch.clone()
    };
    let mcfg = MatryoshkaConfig {
        dims: vec![4, 8],
        weights: vec![1.0, 1.0],
    };
    for kind in all_kinds() {
        let b = if matches!(kind, LossKind::Contrastive(_) | LossKind::Mnr(_)) {
            &batch
        } else {
            &soft
        };
        for spec in [
            LossSpec::plain(kind),
            LossSpec {
                kind,
                matryoshka: Some(mcfg.clone()),
            },
        ] {
            let r = finite_diff_check_bi(&params, b, &spec, EPS).unwrap();
            assert!(
                r.max_relative_error < TOL,
                "{} matryoshka={}: {} at {}",
                kind.id(),
                spec.matryoshka.is_some(),
                r.max_relative_error,
                r.worst_parameter_path
            );
        }
    }
}

#[test]
fn cross_encoder_backprop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = CrossEncoderParams::new_random(20, 6, 12).unwrap();
    let inputs = (0..4)
        .map(|_| CrossInput {
            keyphrase: seq(&mut rng, 20, 2),
            category: seq(&mut rng, 20, 1).ids().to_vec(),
            title: seq(&mut rng, 20, 6),
        })
        .collect();
    let batch = CrossBatch {
        inputs,
        labels: vec![1.0, 0.0, 1.0, 0.0],
    };
    let r = finite_diff_check_cross(&params, &batch, EPS).unwrap();
    assert!(
        r.max_relative_error < TOL,
        "{} at {}",
        r.max_relative_error,
        r.worst_parameter_path
    );
}
