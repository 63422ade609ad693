//! Contrastive calibration loss, holistic cosine-similarity loss, and their
//! combination, each with exact gradients.
//!
//! For an anchor embedding `f` with positives `P` (optionally joined by the
//! class centroid `c`) and negatives `N`, with `z = ⟨f, ·⟩ / τ`:
//!
//! ```text
//! L_cal(f) = −(1/K) Σ_{p ∈ P ∪ {c}} log( e^{z_p} / (e^{z_p} + Σ_{n ∈ N} e^{z_n}) )
//! ```
//!
//! where `K` counts the positive terms. Dropping `c` gives the RPS form;
//! keeping only `c` gives the centroid-only form. The centroid is a constant:
//! no gradient flows into it.
//!
//! The holistic term for an embedding `u` with same-class partners `u_p` and
//! other-class partners `u_j` is `L_CS(u) = −Σ cos(u, u_p) + Σ cos(u, u_j)`.

use crate::dataset::TrainingView;
use crate::error::{Error, Result};
use crate::head::{Projected, ProjectionHead};
use crate::linalg::{dot, norm, CompensatedSum, Matrix};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// How the holistic term of one sample is scaled before it enters the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsReduction {
    /// `L_CS` as written: a plain sum over partners.
    Sum,
    /// `L_CS` divided by the number of partners, which puts every sample's
    /// holistic term on the same `[−1, 1]` scale as one calibration term.
    PairMean,
}

impl FromStr for CsReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CsReduction::Sum),
            "pair_mean" => Ok(CsReduction::PairMean),
            _ => Err(Error::config(format!("unknown cs reduction {s:?}"))),
        }
    }
}

impl fmt::Display for CsReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CsReduction::Sum => "sum",
            CsReduction::PairMean => "pair_mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Temperature of the calibration loss.
    pub tau: f64,
    /// Weight of the calibration term.
    pub lambda: f64,
    /// Include the holistic cosine-similarity term.
    pub holistic: bool,
    pub cs_reduction: CsReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 1.0,
            holistic: true,
            cs_reduction: CsReduction::PairMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Value and per-embedding gradients of the calibration loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    /// One entry per sampled positive (the centroid has none).
    pub grad_positives: Vec<Vec<f64>>,
    pub grad_negatives: Vec<Vec<f64>>,
}

pub fn calib_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    centroid: Option<&[f64]>,
    negatives: &[&[f64]],
    tau: f64,
) -> Result<CalibLoss> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("tau must be finite and > 0, got {tau}")));
    }
    let d = anchor.len();
    for v in positives.iter().chain(negatives).chain(centroid.as_ref()) {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                what: "calibration loss embedding",
                expected: d,
                actual: v.len(),
            });
        }
    }
    // Positive terms: sampled positives first, then the centroid.
    let pos: Vec<&[f64]> = positives.iter().copied().chain(centroid).collect();
    if pos.is_empty() {
        return Err(Error::Empty("positive batch"));
    }
    let k = pos.len() as f64;
    let zn: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau).collect();
    let zn_max = zn.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut loss = CompensatedSum::new();
    let mut grad_anchor = vec![0.0; d];
    let mut grad_positives = vec![vec![0.0; d]; positives.len()];
    // Σ_k q_kj, the total weight each negative receives.
    let mut neg_weight = vec![0.0; negatives.len()];
    for (t, p) in pos.iter().enumerate() {
        let zp = dot(anchor, p) / tau;
        let m = zp.max(zn_max);
        let denom = (zp - m).exp() + zn.iter().map(|&z| (z - m).exp()).sum::<f64>();
        let lse = m + denom.ln();
        loss.add(lse - zp);
        let sigma = (zp - lse).exp();
        // ∂L_t/∂z_p = σ − 1, ∂L_t/∂z_n = q_n; then ∂z/∂f = other/τ.
        let coef = (sigma - 1.0) / (k * tau);
        grad_anchor.iter_mut().zip(*p).for_each(|(g, &x)| *g += coef * x);
        if t < positives.len() {
            grad_positives[t].iter_mut().zip(anchor).for_each(|(g, &x)| *g += coef * x);
        }
        for (w, &z) in neg_weight.iter_mut().zip(&zn) {
            *w += (z - lse).exp();
        }
    }
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for (n, &w) in negatives.iter().zip(&neg_weight) {
        let coef = w / (k * tau);
        grad_anchor.iter_mut().zip(*n).for_each(|(g, &x)| *g += coef * x);
        grad_negatives.push(anchor.iter().map(|&x| coef * x).collect());
    }
    Ok(CalibLoss {
        loss: loss.value() / k,
        grad_anchor,
        grad_positives,
        grad_negatives,
    })
}

/// Value and per-embedding gradients of the cosine-similarity loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CsLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_same: Vec<Vec<f64>>,
    pub grad_other: Vec<Vec<f64>>,
}

/// `cos(a, b)` and its gradients with respect to `a` and `b`; zero operands
/// give 0 and no gradient.
fn cosine_with_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - c * bi / (nb * nb))
        .collect();
    (c, ga, gb)
}

pub fn cs_loss(u: &[f64], same: &[&[f64]], other: &[&[f64]]) -> Result<CsLoss> {
    if same.is_empty() && other.is_empty() {
        return Err(Error::Empty("cosine-similarity partners"));
    }
    for v in same.iter().chain(other) {
        if v.len() != u.len() {
            return Err(Error::DimensionMismatch {
                what: "cosine-similarity embedding",
                expected: u.len(),
                actual: v.len(),
            });
        }
    }
    let mut loss = CompensatedSum::new();
    let mut grad_anchor = vec![0.0; u.len()];
    let mut side = |partners: &[&[f64]], sign: f64| -> Vec<Vec<f64>> {
        partners
            .iter()
            .map(|p| {
                let (c, ga, gb) = cosine_with_grads(u, p);
                loss.add(sign * c);
                grad_anchor.iter_mut().zip(&ga).for_each(|(g, x)| *g += sign * x);
                gb.into_iter().map(|x| sign * x).collect()
            })
            .collect()
    };
    let grad_same = side(same, -1.0);
    let grad_other = side(other, 1.0);
    Ok(CsLoss {
        loss: loss.value(),
        grad_anchor,
        grad_same,
        grad_other,
    })
}

/// One anchor's contribution to the calibration term, by training index.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTerm {
    pub anchor: usize,
    pub positives: Vec<usize>,
    /// Class centroid, if it joins the positive batch.
    pub centroid: Option<Vec<f64>>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    /// `λ·Σ L_cal + Σ L_CS` (after the configured reduction).
    pub loss: f64,
    /// Unweighted `Σ L_cal`.
    pub calibration: f64,
    /// `Σ L_CS` after reduction.
    pub holistic: f64,
    pub grad: Matrix,
}

/// Embeddings of every index touched by a step, with their accumulated
/// upstream gradients.
struct EmbeddingCache<'a> {
    head: &'a ProjectionHead,
    view: TrainingView<'a>,
    normalize: bool,
    entries: BTreeMap<usize, (Projected, Vec<f64>)>,
}

impl<'a> EmbeddingCache<'a> {
    fn new(head: &'a ProjectionHead, view: TrainingView<'a>, normalize: bool) -> Self {
        Self {
            head,
            view,
            normalize,
            entries: BTreeMap::new(),
        }
    }

    fn load(&mut self, i: usize) -> Result<()> {
        if i >= self.view.n_samples() {
            return Err(Error::DimensionMismatch {
                what: "sample index",
                expected: self.view.n_samples(),
                actual: i,
            });
        }
        if !self.entries.contains_key(&i) {
            let p = self.head.project(self.view.feature(i), self.normalize)?;
            let d = p.out.len();
            self.entries.insert(i, (p, vec![0.0; d]));
        }
        Ok(())
    }

    fn emb(&self, i: usize) -> &[f64] {
        &self.entries[&i].0.out
    }

    fn add_grad(&mut self, i: usize, scale: f64, g: &[f64]) {
        let acc = &mut self.entries.get_mut(&i).expect("loaded").1;
        acc.iter_mut().zip(g).for_each(|(a, x)| *a += scale * x);
    }

    /// Chains every accumulated embedding gradient through the head.
    fn backprop(self) -> Matrix {
        let mut grad = Matrix::zeros(self.head.d_out(), self.head.d_in());
        for (i, (p, g)) in &self.entries {
            self.head.backprop(self.view.feature(*i), p, g, &mut grad);
        }
        grad
    }
}

/// `λ·Σ_{anchors} L_cal + Σ_{holistic batch} L_CS` and its gradient with
/// respect to the head weights.
///
/// Holistic partners are taken within `holistic_batch`: every other position
/// with the same label is a positive, every position with a different label a
/// negative. Positions without any partner are skipped.
pub fn total_loss(
    head: &ProjectionHead,
    view: TrainingView<'_>,
    calibration: &[CalibrationTerm],
    holistic_batch: &[usize],
    cfg: &LossConfig,
    normalize: bool,
) -> Result<TotalLoss> {
    cfg.validate()?;
    if calibration.is_empty() && holistic_batch.is_empty() {
        return Err(Error::Empty("loss terms"));
    }
    let mut cache = EmbeddingCache::new(head, view, normalize);

    let mut cal_sum = CompensatedSum::new();
    for term in calibration {
        for &i in std::iter::once(&term.anchor).chain(&term.positives).chain(&term.negatives) {
            cache.load(i)?;
        }
        let out = {
            let pos: Vec<&[f64]> = term.positives.iter().map(|&i| cache.emb(i)).collect();
            let neg: Vec<&[f64]> = term.negatives.iter().map(|&i| cache.emb(i)).collect();
            calib_loss(cache.emb(term.anchor), &pos, term.centroid.as_deref(), &neg, cfg.tau)?
        };
        cal_sum.add(out.loss);
        if cfg.lambda != 0.0 {
            cache.add_grad(term.anchor, cfg.lambda, &out.grad_anchor);
            for (&i, g) in term.positives.iter().zip(&out.grad_positives) {
                cache.add_grad(i, cfg.lambda, g);
            }
            for (&i, g) in term.negatives.iter().zip(&out.grad_negatives) {
                cache.add_grad(i, cfg.lambda, g);
            }
        }
    }

    let mut cs_sum = CompensatedSum::new();
    if cfg.holistic {
        for &i in holistic_batch {
            cache.load(i)?;
        }
        for (a, &ia) in holistic_batch.iter().enumerate() {
            let ya = view.label(ia);
            let (mut same, mut other) = (Vec::new(), Vec::new());
            for (b, &ib) in holistic_batch.iter().enumerate() {
                if b == a {
                    continue;
                }
                if view.label(ib) == ya {
                    same.push(ib);
                } else {
                    other.push(ib);
                }
            }
            if same.is_empty() && other.is_empty() {
                continue;
            }
            let out = {
                let s: Vec<&[f64]> = same.iter().map(|&i| cache.emb(i)).collect();
                let o: Vec<&[f64]> = other.iter().map(|&i| cache.emb(i)).collect();
                cs_loss(cache.emb(ia), &s, &o)?
            };
            let scale = match cfg.cs_reduction {
                CsReduction::Sum => 1.0,
                CsReduction::PairMean => 1.0 / (same.len() + other.len()) as f64,
            };
            cs_sum.add(scale * out.loss);
            cache.add_grad(ia, scale, &out.grad_anchor);
            for (&i, g) in same.iter().zip(&out.grad_same) {
                cache.add_grad(i, scale, g);
            }
            for (&i, g) in other.iter().zip(&out.grad_other) {
                cache.add_grad(i, scale, g);
            }
        }
    }

    let calibration = cal_sum.value();
    let holistic = cs_sum.value();
    let mut total = CompensatedSum::new();
    total.add(cfg.lambda * calibration);
    total.add(holistic);
    Ok(TotalLoss {
        loss: total.value(),
        calibration,
        holistic,
        grad: cache.backprop(),
    })
}
