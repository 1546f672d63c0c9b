//! Loss contracts against direct-formula oracles and randomized properties.

use proptest::prelude::*;
use segface_core::numerics::relative_error;
use segface_core::numerics::Tensor;
use segface_core::objective::{soft_dice_loss, softmax_cross_entropy, total_loss, LabelMask, LossConfig};

/// Naive per-pixel probabilities, written independently of the library.
fn probs(logits: &[f64], b: usize, n: usize, hw: usize) -> Vec<Vec<Vec<f64>>> {
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|px| {
                    let z: Vec<f64> = (0..n).map(|k| logits[(bi * n + k) * hw + px]).collect();
                    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                })
                .collect()
        })
        .collect()
}

fn ce_oracle(logits: &[f64], labels: &[u8], b: usize, n: usize, hw: usize) -> f64 {
    let p = probs(logits, b, n, hw);
    let mut total = 0.0;
    for bi in 0..b {
        for px in 0..hw {
            total -= p[bi][px][labels[bi * hw + px] as usize].ln();
        }
    }
    total / (b * hw) as f64
}

fn dice_oracle(logits: &[f64], labels: &[u8], b: usize, n: usize, hw: usize, smooth: f64) -> f64 {
    let p = probs(logits, b, n, hw);
    let mut mean = 0.0;
    for k in 0..n {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for bi in 0..b {
            for px in 0..hw {
                let y = if labels[bi * hw + px] as usize == k { 1.0 } else { 0.0 };
                inter += p[bi][px][k] * y;
                ps += p[bi][px][k];
                ys += y;
            }
        }
        mean += (2.0 * inter + smooth) / (ps + ys + smooth);
    }
    1.0 - mean / n as f64
}

struct Case {
    b: usize,
    n: usize,
    h: usize,
    w: usize,
    logits: Vec<f64>,
    labels: Vec<u8>,
}

fn hand_cases() -> Vec<Case> {
    vec![
        Case { b: 1, n: 2, h: 1, w: 1, logits: vec![2.0, -1.0], labels: vec![1] },
        Case { b: 1, n: 3, h: 1, w: 2, logits: vec![0.5, 0.0, -0.5, 1.5, 3.0, 0.0], labels: vec![2, 0] },
        Case {
            b: 2,
            n: 3,
            h: 2,
            w: 1,
            logits: vec![1.0, -2.0, 0.0, 0.5, 4.0, -1.0, 0.25, 0.25, 0.0, 0.0, -3.0, 2.0],
            labels: vec![0, 1, 2, 2],
        },
        // A class absent from both labels and (effectively) predictions.
        Case { b: 1, n: 4, h: 1, w: 2, logits: vec![5.0, -5.0, 1.0, 2.0, -20.0, -20.0, 0.0, 0.0], labels: vec![0, 2] },
    ]
}

impl Case {
    fn tensors(&self) -> (Tensor<f64>, LabelMask) {
        (
            Tensor::from_vec(&[self.b, self.n, self.h, self.w], self.logits.clone()).unwrap(),
            LabelMask::new(self.b, self.h, self.w, self.labels.clone()).unwrap(),
        )
    }
}

#[test]
fn losses_match_direct_formulas_on_hand_cases() {
    for (i, c) in hand_cases().iter().enumerate() {
        let (logits, labels) = c.tensors();
        let hw = c.h * c.w;
        let ce = ce_oracle(&c.logits, &c.labels, c.b, c.n, hw);
        let dice = dice_oracle(&c.logits, &c.labels, c.b, c.n, hw, 1.0);
        let (got_ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (got_dice, _) = soft_dice_loss(&logits, &labels, 1.0).unwrap();
        assert!((got_ce - ce).abs() <= 1e-10, "case {i}: ce {got_ce} vs {ce}");
        assert!((got_dice - dice).abs() <= 1e-10, "case {i}: dice {got_dice} vs {dice}");
        let total = total_loss(&logits, &labels, &LossConfig::default()).unwrap();
        assert!((total.total - (0.5 * ce + 0.5 * dice)).abs() <= 1e-10, "case {i}: total");
    }
}

#[test]
fn single_pixel_two_class_values_by_hand() {
    // p(label 1) = e^-1 / (e^2 + e^-1) = 1 / (1 + e^3).
    let c = &hand_cases()[0];
    let (logits, labels) = c.tensors();
    let (ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert!((ce - (1.0 + 3f64.exp()).ln()).abs() <= 1e-12);
    let p1 = 1.0 / (1.0 + 3f64.exp());
    let p0 = 1.0 - p1;
    // Class 0: no label pixel, overlap 0. Class 1: overlap p1.
    let expected = 1.0 - 0.5 * (1.0 / (p0 + 1.0) + (2.0 * p1 + 1.0) / (p1 + 2.0));
    let (dice, _) = soft_dice_loss(&logits, &labels, 1.0).unwrap();
    assert!((dice - expected).abs() <= 1e-12);
}

#[test]
fn weight_projections_are_exact() {
    for c in hand_cases() {
        let (logits, labels) = c.tensors();
        let (ce, ce_grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (dice, dice_grad) = soft_dice_loss(&logits, &labels, 1.0).unwrap();
        let only_ce = LossConfig { lambda_dice: 0.0, lambda_ce: 1.0, dice_smooth: 1.0 };
        let only_dice = LossConfig { lambda_dice: 1.0, lambda_ce: 0.0, dice_smooth: 1.0 };
        let a = total_loss(&logits, &labels, &only_ce).unwrap();
        let b = total_loss(&logits, &labels, &only_dice).unwrap();
        assert_eq!(a.total, ce);
        assert_eq!(a.grad.data(), ce_grad.data());
        assert_eq!(b.total, dice);
        assert_eq!(b.grad.data(), dice_grad.data());
    }
}

fn problem() -> impl Strategy<Value = (Tensor<f64>, LabelMask)> {
    problem_in(8.0)
}

fn problem_in(range: f64) -> impl Strategy<Value = (Tensor<f64>, LabelMask)> {
    (1usize..3, 2usize..6, 1usize..5, 1usize..5).prop_flat_map(move |(b, n, h, w)| {
        (
            prop::collection::vec(-range..range, b * n * h * w),
            prop::collection::vec(0..n as u8, b * h * w),
        )
            .prop_map(move |(z, y)| {
                (
                    Tensor::from_vec(&[b, n, h, w], z).unwrap(),
                    LabelMask::new(b, h, w, y).unwrap(),
                )
            })
    })
}

fn permute(logits: &Tensor<f64>, labels: &LabelMask, perm: &[usize]) -> (Tensor<f64>, LabelMask) {
    let &[b, n, h, w] = logits.shape() else { unreachable!() };
    let hw = h * w;
    let mut z = vec![0.0; logits.numel()];
    // New channel perm[k] carries old channel k; labels are relabelled to match.
    for bi in 0..b {
        for k in 0..n {
            z[(bi * n + perm[k]) * hw..][..hw].copy_from_slice(&logits.data()[(bi * n + k) * hw..][..hw]);
        }
    }
    let ids = labels.ids().iter().map(|&y| perm[y as usize] as u8).collect();
    (
        Tensor::from_vec(logits.shape(), z).unwrap(),
        LabelMask::new(b, h, w, ids).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ce_is_non_negative_and_dice_is_a_fraction(
        (logits, labels) in problem(),
        smooth in 1e-3f64..5.0,
    ) {
        let (ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (dice, _) = soft_dice_loss(&logits, &labels, smooth).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&dice), "dice {}", dice);
    }

    #[test]
    fn losses_are_class_permutation_consistent(
        (logits, labels) in problem(),
        seed in any::<u64>(),
    ) {
        let n = logits.shape()[1];
        let mut perm: Vec<usize> = (0..n).collect();
        segface_core::rng::SplitMix64::new(seed).shuffle(&mut perm);
        let (pl, py) = permute(&logits, &labels, &perm);
        let a = total_loss(&logits, &labels, &LossConfig::default()).unwrap();
        let b = total_loss(&pl, &py, &LossConfig::default()).unwrap();
        prop_assert!((a.ce - b.ce).abs() <= 1e-10);
        prop_assert!((a.dice - b.dice).abs() <= 1e-10);
    }

    #[test]
    // Logits stay moderate: deep in saturation the true gradient falls below
    // the round-off floor of a central difference on an O(1) loss.
    fn total_loss_gradient_matches_central_differences(
        (logits, labels) in problem_in(4.0),
        lambda_dice in 0.0f64..2.0,
        lambda_ce in 0.1f64..2.0,
    ) {
        let cfg = LossConfig { lambda_dice, lambda_ce, dice_smooth: 1.0 };
        let analytic = total_loss(&logits, &labels, &cfg).unwrap().grad;
        let eps = 1e-4;
        for i in 0..logits.numel() {
            let eval = |delta: f64| {
                let mut z = logits.clone();
                z.data_mut()[i] += delta;
                total_loss(&z, &labels, &cfg).unwrap().total
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = relative_error(analytic.data()[i], numeric);
            prop_assert!(err < 1e-4, "coordinate {}: {} vs {}", i, analytic.data()[i], numeric);
        }
    }
}
