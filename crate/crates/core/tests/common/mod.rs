//! Independent reference implementations and instance generators shared by
//! the integration tests. Nothing here calls into the loss code under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recal::dataset::{ClassAnchors, EmbeddingDataset};
use recal::head::ProjectionHead;
use recal::linalg::Matrix;
use recal::losses::CalibrationTerm;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| {
            // Box-Muller, kept local so the oracle side shares no sampling code.
            let u1: f64 = r.random_range(1e-12..1.0);
            let u2: f64 = r.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub fn unit_vec(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian_vec(r, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn ref_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn ref_cos(a: &[f64], b: &[f64]) -> f64 {
    let na = ref_dot(a, a).sqrt();
    let nb = ref_dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ref_dot(a, b) / (na * nb)
    }
}

/// Direct transcription of the calibration loss with `positives` already
/// including the centroid when it takes part.
pub fn ref_calib(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let neg_sum: f64 = negatives.iter().map(|n| (ref_dot(anchor, n) / tau).exp()).sum();
    let mut total = 0.0;
    for p in positives {
        let e = (ref_dot(anchor, p) / tau).exp();
        total += -(e / (e + neg_sum)).ln();
    }
    total / positives.len() as f64
}

pub fn ref_cs(u: &[f64], same: &[Vec<f64>], other: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for p in same {
        total -= ref_cos(u, p);
    }
    for j in other {
        total += ref_cos(u, j);
    }
    total
}

pub fn ref_matvec(w: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| (0..w.cols()).map(|c| w.get(r, c) * v[c]).sum())
        .collect()
}

pub fn ref_embed(w: &Matrix, v: &[f64]) -> Vec<f64> {
    let z = ref_matvec(w, v);
    let n = ref_dot(&z, &z).sqrt();
    if n == 0.0 {
        z
    } else {
        z.into_iter().map(|x| x / n).collect()
    }
}

/// Central differences of `f` at every weight of `w`.
pub fn numeric_grad(w: &Matrix, step: f64, mut f: impl FnMut(&ProjectionHead) -> f64) -> Matrix {
    let mut g = Matrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            let mut plus = w.clone();
            plus.set(r, c, w.get(r, c) + step);
            let mut minus = w.clone();
            minus.set(r, c, w.get(r, c) - step);
            let hp = ProjectionHead::new(plus).unwrap();
            let hm = ProjectionHead::new(minus).unwrap();
            g.set(r, c, (f(&hp) - f(&hm)) / (2.0 * step));
        }
    }
    g
}

/// Largest entrywise `|a − n| / max(|a|, |n|)`. Entries where both sides are
/// below `1e-8` in magnitude are treated as agreeing, since their relative
/// error is dominated by cancellation in the difference quotient.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-8 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// A small labelled dataset with random features and a random head.
pub struct Instance {
    pub data: EmbeddingDataset,
    pub head: ProjectionHead,
}

pub fn random_instance(r: &mut ChaCha8Rng, n: usize, n_classes: usize) -> Instance {
    let d_in = r.random_range(2..=8);
    let d_out = r.random_range(2..=6);
    let mut feats = Vec::with_capacity(n * d_in);
    for _ in 0..n {
        feats.extend(gaussian_vec(r, d_in));
    }
    let labels: Vec<u32> = (0..n).map(|i| (i % n_classes) as u32).collect();
    let anchors: Vec<f64> = (0..n_classes).flat_map(|_| unit_vec(r, d_out)).collect();
    let anchors = ClassAnchors::from_rows(Matrix::from_vec(n_classes, d_out, anchors).unwrap()).unwrap();
    let data = EmbeddingDataset::new(Matrix::from_vec(n, d_in, feats).unwrap(), labels, None, anchors).unwrap();
    let w: Vec<f64> = gaussian_vec(r, d_in * d_out);
    let head = ProjectionHead::new(Matrix::from_vec(d_out, d_in, w).unwrap()).unwrap();
    Instance { data, head }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermShape {
    /// Sampled positives and the centroid.
    WithCentroid,
    /// Sampled positives only.
    PositivesOnly,
    /// The centroid only.
    CentroidOnly,
}

/// Up to four calibration terms with indices into `data` respecting labels.
pub fn random_terms(r: &mut ChaCha8Rng, data: &EmbeddingDataset, shape: TermShape) -> Vec<CalibrationTerm> {
    let n = data.n_samples();
    let n_anchors = r.random_range(1..=4);
    (0..n_anchors)
        .map(|_| {
            let a = r.random_range(0..n);
            let y = data.labels()[a];
            let same: Vec<usize> = (0..n).filter(|&i| data.labels()[i] == y && i != a).collect();
            let other: Vec<usize> = (0..n).filter(|&i| data.labels()[i] != y).collect();
            let n_pos = if shape == TermShape::CentroidOnly { 0 } else { r.random_range(1..=3) };
            let positives = (0..n_pos).map(|_| same[r.random_range(0..same.len())]).collect();
            let negatives = (0..r.random_range(1..=4)).map(|_| other[r.random_range(0..other.len())]).collect();
            let centroid = (shape != TermShape::PositivesOnly).then(|| unit_vec(r, data.d_out()));
            CalibrationTerm {
                anchor: a,
                positives,
                centroid,
                negatives,
            }
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-5;

/// Cross-entropy θ-gradient error on a random instance.
pub fn ce_grad_err(seed: u64) -> f64 {
    use recal::head::{ce_loss_and_grad, ClassifierConfig};
    let mut r = rng(seed);
    let n_classes = r.random_range(2..=4);
    let inst = random_instance(&mut r, 6, n_classes);
    let cfg = ClassifierConfig {
        beta: r.random_range(1.0..100.0),
        ..Default::default()
    };
    let ds = &inst.data;
    let batch: Vec<(&[f64], usize)> = (0..ds.n_samples()).map(|i| (ds.feature(i), ds.labels()[i] as usize)).collect();
    let (_, analytic) = ce_loss_and_grad(&inst.head, &batch, ds.anchors(), &cfg).unwrap();
    let numeric = numeric_grad(inst.head.weight(), FD_STEP, |h| {
        ce_loss_and_grad(h, &batch, ds.anchors(), &cfg).unwrap().0
    });
    max_rel_err(&analytic, &numeric)
}

/// θ-gradient error of the summed calibration loss for one term shape.
pub fn calib_grad_err(seed: u64, shape: TermShape) -> f64 {
    use recal::losses::{total_loss, LossConfig};
    let mut r = rng(seed);
    let inst = random_instance(&mut r, 10, 2);
    let terms = random_terms(&mut r, &inst.data, shape);
    let cfg = LossConfig {
        tau: r.random_range(0.05..1.0),
        holistic: false,
        ..Default::default()
    };
    let view = inst.data.training_view();
    let analytic = total_loss(&inst.head, view, &terms, &[], &cfg, true).unwrap().grad;
    let numeric = numeric_grad(inst.head.weight(), FD_STEP, |h| {
        total_loss(h, view, &terms, &[], &cfg, true).unwrap().loss
    });
    max_rel_err(&analytic, &numeric)
}

/// θ-gradient error of the holistic term alone.
pub fn cs_grad_err(seed: u64, reduction: recal::losses::CsReduction) -> f64 {
    use recal::losses::{total_loss, LossConfig};
    let mut r = rng(seed);
    let n_classes = r.random_range(2..=3);
    let inst = random_instance(&mut r, 8, n_classes);
    let batch: Vec<usize> = (0..r.random_range(2..=8)).map(|_| r.random_range(0..8)).collect();
    let cfg = LossConfig {
        cs_reduction: reduction,
        ..Default::default()
    };
    let view = inst.data.training_view();
    let analytic = total_loss(&inst.head, view, &[], &batch, &cfg, true).unwrap().grad;
    let numeric = numeric_grad(inst.head.weight(), FD_STEP, |h| {
        total_loss(h, view, &[], &batch, &cfg, true).unwrap().loss
    });
    max_rel_err(&analytic, &numeric)
}

/// θ-gradient error of the combined objective with terms drawn by the real
/// samplers. `None` when the random head leaves an anchor's class without
/// correctly predicted samples.
pub fn total_grad_err(
    seed: u64,
    positive: recal::calibration::PositiveMode,
    negative: recal::calibration::NegativeMode,
) -> Option<f64> {
    use recal::calibration::{build_calibration_set, sample_negative, sample_positive, SamplerConfig};
    use recal::head::ClassifierConfig;
    use recal::losses::{total_loss, LossConfig};
    let mut r = rng(seed);
    let inst = random_instance(&mut r, 16, 2);
    let view = inst.data.training_view();
    let calset = build_calibration_set(view, &inst.head, &ClassifierConfig::default()).ok()?;
    let sampler = SamplerConfig {
        positive_mode: positive,
        negative_mode: negative,
        p_size: 3,
        n_size: 3,
        nns_candidate_size: 4,
    };
    let mut terms = Vec::new();
    for &a in calset.anchors.iter().take(4) {
        let pos = sample_positive(&calset, a, &mut r, &sampler).ok()?;
        let neg = sample_negative(&calset, a, view.features, &mut r, &sampler).ok()?;
        terms.push(CalibrationTerm {
            anchor: a,
            positives: pos.samples,
            centroid: pos.centroid.then(|| unit_vec(&mut r, inst.data.d_out())),
            negatives: neg,
        });
    }
    let batch: Vec<usize> = (0..6).map(|_| r.random_range(0..16)).collect();
    let cfg = LossConfig {
        lambda: r.random_range(0.1..2.0),
        ..Default::default()
    };
    let analytic = total_loss(&inst.head, view, &terms, &batch, &cfg, true).ok()?.grad;
    let numeric = numeric_grad(inst.head.weight(), FD_STEP, |h| {
        total_loss(h, view, &terms, &batch, &cfg, true).unwrap().loss
    });
    Some(max_rel_err(&analytic, &numeric))
}
