mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use recal::losses::{calib_loss, cs_loss, total_loss, CalibrationTerm, CsReduction, LossConfig};

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Anchor, positives, centroid, negatives and temperature.
type CalibInstance = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, f64);

/// Random unit embeddings for one calibration instance.
fn calib_instance(seed: u64) -> CalibInstance {
    let mut r = rng(seed);
    let d = r.random_range(2..=8);
    let f = unit_vec(&mut r, d);
    let pos = (0..r.random_range(1..=4)).map(|_| unit_vec(&mut r, d)).collect();
    let c = unit_vec(&mut r, d);
    let neg = (0..r.random_range(1..=6)).map(|_| unit_vec(&mut r, d)).collect();
    (f, pos, c, neg, r.random_range(0.05..1.0))
}

#[test]
fn calibration_value_matches_reference_three_positives_and_centroid() {
    let mut r = rng(11);
    let f = unit_vec(&mut r, 6);
    let pos: Vec<Vec<f64>> = (0..3).map(|_| unit_vec(&mut r, 6)).collect();
    let c = unit_vec(&mut r, 6);
    let neg: Vec<Vec<f64>> = (0..4).map(|_| unit_vec(&mut r, 6)).collect();
    let got = calib_loss(&f, &slices(&pos), Some(&c), &slices(&neg), 0.1).unwrap().loss;
    let mut all = pos.clone();
    all.push(c);
    let want = ref_calib(&f, &all, &neg, 0.1);
    assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
}

#[test]
fn holistic_value_matches_reference_five_and_five() {
    let mut r = rng(12);
    let u = gaussian_vec(&mut r, 5);
    let same: Vec<Vec<f64>> = (0..5).map(|_| gaussian_vec(&mut r, 5)).collect();
    let other: Vec<Vec<f64>> = (0..5).map(|_| gaussian_vec(&mut r, 5)).collect();
    let got = cs_loss(&u, &slices(&same), &slices(&other)).unwrap().loss;
    assert!((got - ref_cs(&u, &same, &other)).abs() <= 1e-10);
}

#[test]
fn lambda_zero_leaves_only_the_holistic_sum() {
    let mut r = rng(3);
    let inst = random_instance(&mut r, 10, 2);
    let terms = random_terms(&mut r, &inst.data, TermShape::WithCentroid);
    let batch = [0, 1, 2, 3, 4, 5];
    let view = inst.data.training_view();
    let cfg = LossConfig { lambda: 0.0, cs_reduction: CsReduction::Sum, ..Default::default() };
    let with = total_loss(&inst.head, view, &terms, &batch, &cfg, true).unwrap();
    let only = total_loss(&inst.head, view, &[], &batch, &cfg, true).unwrap();
    assert_eq!(with.loss, with.holistic);
    assert_eq!(with.loss, only.loss);
    assert_eq!(with.grad, only.grad);
}

#[test]
fn empty_holistic_batch_leaves_the_calibration_sum() {
    let mut r = rng(4);
    let inst = random_instance(&mut r, 10, 2);
    let terms = random_terms(&mut r, &inst.data, TermShape::WithCentroid);
    let view = inst.data.training_view();
    let out = total_loss(&inst.head, view, &terms, &[], &LossConfig::default(), true).unwrap();
    let mut sum = 0.0;
    for t in &terms {
        let emb = |i: usize| ref_embed(inst.head.weight(), inst.data.feature(i));
        let mut pos: Vec<Vec<f64>> = t.positives.iter().map(|&i| emb(i)).collect();
        pos.extend(t.centroid.clone());
        let neg: Vec<Vec<f64>> = t.negatives.iter().map(|&i| emb(i)).collect();
        sum += ref_calib(&emb(t.anchor), &pos, &neg, 0.1);
    }
    assert_eq!(out.loss, out.calibration);
    assert!((out.loss - sum).abs() < 1e-10);
}

#[test]
fn centroid_is_a_constant() {
    // Moving the head changes every sampled embedding but not the centroid,
    // so a centroid-only term with no negatives has zero loss and gradient.
    let mut r = rng(5);
    let inst = random_instance(&mut r, 10, 2);
    let c = unit_vec(&mut r, inst.data.d_out());
    let out = calib_loss(&ref_embed(inst.head.weight(), inst.data.feature(0)), &[], Some(&c), &[], 0.1).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grad_anchor.iter().all(|&g| g == 0.0));
}

proptest! {
    #[test]
    fn calibration_loss_is_non_negative(seed in any::<u64>()) {
        let (f, pos, c, neg, tau) = calib_instance(seed);
        let out = calib_loss(&f, &slices(&pos), Some(&c), &slices(&neg), tau).unwrap();
        prop_assert!(out.loss >= 0.0);
    }

    #[test]
    fn calibration_loss_matches_reference(seed in any::<u64>()) {
        let (f, pos, c, neg, tau) = calib_instance(seed);
        let got = calib_loss(&f, &slices(&pos), None, &slices(&neg), tau).unwrap().loss;
        prop_assert!((got - ref_calib(&f, &pos, &neg, tau)).abs() <= 1e-10);
        let got = calib_loss(&f, &[], Some(&c), &slices(&neg), tau).unwrap().loss;
        prop_assert!((got - ref_calib(&f, std::slice::from_ref(&c), &neg, tau)).abs() <= 1e-10);
    }

    #[test]
    fn calibration_loss_is_monotone_in_similarities(seed in any::<u64>(), k in 0usize..4, eps in 1e-3f64..0.5) {
        // Moving a positive toward the anchor lowers the loss; moving a
        // negative toward it raises the loss.
        let (f, mut pos, _, mut neg, tau) = calib_instance(seed);
        let base = calib_loss(&f, &slices(&pos), None, &slices(&neg), tau).unwrap().loss;
        let i = k % pos.len();
        pos[i].iter_mut().zip(&f).for_each(|(p, a)| *p += eps * a);
        let closer = calib_loss(&f, &slices(&pos), None, &slices(&neg), tau).unwrap().loss;
        prop_assert!(closer <= base);
        let j = k % neg.len();
        neg[j].iter_mut().zip(&f).for_each(|(n, a)| *n += eps * a);
        let harder = calib_loss(&f, &slices(&pos), None, &slices(&neg), tau).unwrap().loss;
        prop_assert!(harder >= closer);
    }

    #[test]
    fn holistic_loss_is_bounded(seed in any::<u64>(), p in 0usize..6, j in 0usize..6) {
        prop_assume!(p + j > 0);
        let mut r = rng(seed);
        let u = gaussian_vec(&mut r, 4);
        let same: Vec<Vec<f64>> = (0..p).map(|_| gaussian_vec(&mut r, 4)).collect();
        let other: Vec<Vec<f64>> = (0..j).map(|_| gaussian_vec(&mut r, 4)).collect();
        let l = cs_loss(&u, &slices(&same), &slices(&other)).unwrap().loss;
        let n = (p + j) as f64;
        prop_assert!(l >= -n - 1e-12 && l <= n + 1e-12);
        prop_assert!((l - ref_cs(&u, &same, &other)).abs() <= 1e-10);
    }

    #[test]
    fn loss_is_permutation_invariant(seed in any::<u64>(), shift in 1usize..7) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 12, 2);
        let terms = random_terms(&mut r, &inst.data, TermShape::WithCentroid);
        let batch: Vec<usize> = (0..7).map(|_| r.random_range(0..12)).collect();
        let view = inst.data.training_view();
        let cfg = LossConfig::default();
        let a = total_loss(&inst.head, view, &terms, &batch, &cfg, true).unwrap();

        let mut terms2: Vec<CalibrationTerm> = terms.iter().rev().cloned().collect();
        for t in &mut terms2 {
            t.positives.reverse();
            let n = t.negatives.len();
            t.negatives.rotate_left(shift % n);
        }
        let mut batch2 = batch.clone();
        batch2.rotate_left(shift);
        let b = total_loss(&inst.head, view, &terms2, &batch2, &cfg, true).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-9);
        prop_assert!((a.calibration - b.calibration).abs() <= 1e-9);
        prop_assert!((a.holistic - b.holistic).abs() <= 1e-9);
    }

    #[test]
    fn pair_mean_holistic_is_the_scaled_sum(seed in any::<u64>()) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 8, 2);
        let batch: Vec<usize> = (0..8).collect();
        let view = inst.data.training_view();
        let mean = total_loss(&inst.head, view, &[], &batch, &LossConfig::default(), true).unwrap();
        let sum = total_loss(&inst.head, view, &[], &batch,
            &LossConfig { cs_reduction: CsReduction::Sum, ..Default::default() }, true).unwrap();
        // Every position has the 7 others as partners.
        prop_assert!((mean.holistic * 7.0 - sum.holistic).abs() <= 1e-10);
    }
}
