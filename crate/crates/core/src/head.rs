//! The trainable linear projection `f(v) = W·v` and classification against
//! fixed class anchors.
//!
//! Outputs are L2-normalized before every dot product (configurable). A zero
//! pre-normalization output maps to the zero vector and contributes no
//! gradient.
//!
//! Heads are stored as `PRJ1`: magic `PRJ1`, u32 `d_in`, u32 `d_out`, then
//! `d_out × d_in` f32 weights, row-major, little-endian.

use crate::dataset::ClassAnchors;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, CompensatedSum, Matrix};
use crate::rng::Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

pub const PRJ_MAGIC: [u8; 4] = *b"PRJ1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    /// Logit scale applied to anchor cosines.
    pub beta: f64,
    pub normalize_output: bool,
    /// When false, cross-entropy training uses unit scale and `beta` only
    /// affects inference-time scores.
    pub beta_in_training: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            beta: 100.0,
            normalize_output: true,
            beta_in_training: true,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        Ok(())
    }

    fn training_beta(&self) -> f64 {
        if self.beta_in_training {
            self.beta
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    weight: Matrix,
}

/// Forward-pass intermediates needed for backpropagation.
#[derive(Debug, Clone)]
pub struct Projected {
    /// Final embedding (normalized iff configured and nonzero).
    pub out: Vec<f64>,
    /// Norm of `W·v` before normalization.
    pub raw_norm: f64,
    normalized: bool,
    normalize_requested: bool,
}

impl ProjectionHead {
    pub fn new(weight: Matrix) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::NonFinite("head weights"));
        }
        Ok(Self { weight })
    }

    /// Zero-mean Gaussian weights with variance `2 / (d_in + d_out)`.
    pub fn init_gaussian(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..d_in * d_out).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(d_out, d_in, data).expect("shape"),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.d_in() {
            return Err(Error::DimensionMismatch {
                what: "head input",
                expected: self.d_in(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    pub fn project(&self, v: &[f64], normalize: bool) -> Result<Projected> {
        self.check_input(v)?;
        let mut out = self.weight.matvec(v);
        let raw_norm = norm(&out);
        let normalized = normalize && raw_norm > 0.0;
        if normalized {
            out.iter_mut().for_each(|x| *x /= raw_norm);
        }
        Ok(Projected {
            out,
            raw_norm,
            normalized,
            normalize_requested: normalize,
        })
    }

    /// `W·v`, L2-normalized when `normalize` is set.
    pub fn forward(&self, v: &[f64], normalize: bool) -> Result<Vec<f64>> {
        Ok(self.project(v, normalize)?.out)
    }

    /// Accumulates `∂L/∂W` into `grad_w` given `∂L/∂f(v)`.
    pub fn backprop(&self, v: &[f64], p: &Projected, grad_out: &[f64], grad_w: &mut Matrix) {
        if p.normalized {
            let f = &p.out;
            let proj = dot(f, grad_out);
            let gz: Vec<f64> = grad_out
                .iter()
                .zip(f)
                .map(|(g, fi)| (g - fi * proj) / p.raw_norm)
                .collect();
            grad_w.add_outer(1.0, &gz, v);
        } else if !p.normalize_requested {
            grad_w.add_outer(1.0, grad_out, v);
        }
        // Normalization requested on a zero output: the embedding is pinned
        // to zero and passes no gradient.
    }

    fn check_anchors(&self, anchors: &ClassAnchors) -> Result<()> {
        if anchors.d_out() != self.d_out() {
            return Err(Error::DimensionMismatch {
                what: "anchor width vs head output",
                expected: self.d_out(),
                actual: anchors.d_out(),
            });
        }
        Ok(())
    }
}

/// `logit_c = β·⟨f(v), u_c⟩`.
pub fn class_scores(
    head: &ProjectionHead,
    v: &[f64],
    anchors: &ClassAnchors,
    cfg: &ClassifierConfig,
) -> Result<Vec<f64>> {
    head.check_anchors(anchors)?;
    let f = head.forward(v, cfg.normalize_output)?;
    Ok(logits_for(&f, anchors, cfg.beta))
}

fn logits_for(f: &[f64], anchors: &ClassAnchors, beta: f64) -> Vec<f64> {
    anchors.matrix().row_iter().map(|u| beta * dot(f, u)).collect()
}

/// Index of the largest score; ties go to the lower class index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn predict(
    head: &ProjectionHead,
    v: &[f64],
    anchors: &ClassAnchors,
    cfg: &ClassifierConfig,
) -> Result<usize> {
    Ok(argmax(&class_scores(head, v, anchors, cfg)?))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over `batch` and its exact gradient with respect to W.
pub fn ce_loss_and_grad(
    head: &ProjectionHead,
    batch: &[(&[f64], usize)],
    anchors: &ClassAnchors,
    cfg: &ClassifierConfig,
) -> Result<(f64, Matrix)> {
    if batch.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    head.check_anchors(anchors)?;
    let beta = cfg.training_beta();
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = CompensatedSum::new();
    let mut grad = Matrix::zeros(head.d_out(), head.d_in());
    for &(v, y) in batch {
        if y >= anchors.n_classes() {
            return Err(Error::LabelOutOfRange {
                index: 0,
                label: y as u32,
                n_classes: anchors.n_classes(),
            });
        }
        let p = head.project(v, cfg.normalize_output)?;
        let logits = logits_for(&p.out, anchors, beta);
        loss.add(log_sum_exp(&logits) - logits[y]);
        let probs = softmax(&logits);
        // ∂L/∂f = β·Σ_c (p_c − 1[c=y])·u_c, scaled by 1/n.
        let mut g_f = vec![0.0; head.d_out()];
        for (c, u) in anchors.matrix().row_iter().enumerate() {
            let coef = inv_n * beta * (probs[c] - if c == y { 1.0 } else { 0.0 });
            for (g, &ui) in g_f.iter_mut().zip(u) {
                *g += coef * ui;
            }
        }
        head.backprop(v, &p, &g_f, &mut grad);
    }
    Ok((loss.value() * inv_n, grad))
}

pub fn encode_head(head: &ProjectionHead) -> Result<Vec<u8>> {
    let d_in = u32::try_from(head.d_in()).map_err(|_| Error::config("d_in exceeds u32"))?;
    let d_out = u32::try_from(head.d_out()).map_err(|_| Error::config("d_out exceeds u32"))?;
    let mut out = Vec::with_capacity(12 + 4 * head.d_in() * head.d_out());
    out.extend_from_slice(&PRJ_MAGIC);
    out.extend_from_slice(&d_in.to_le_bytes());
    out.extend_from_slice(&d_out.to_le_bytes());
    for &w in head.weight.as_slice() {
        out.extend_from_slice(&(w as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_head(bytes: &[u8]) -> Result<ProjectionHead> {
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != PRJ_MAGIC {
        return Err(Error::BadMagic {
            expected: PRJ_MAGIC,
            found: magic,
        });
    }
    let d_in = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let d_out = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if d_in == 0 || d_out == 0 {
        return Err(Error::Empty("head dimensions"));
    }
    // u128 keeps hostile dimensions from overflowing.
    let need = 12 + 4 * d_in as u128 * d_out as u128;
    let have = bytes.len() as u128;
    if have < need {
        return Err(Error::Truncated {
            expected: u64::try_from(need).unwrap_or(u64::MAX),
            actual: have as u64,
        });
    }
    if have > need {
        return Err(Error::TrailingBytes((have - need) as u64));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    ProjectionHead::new(Matrix::from_vec(d_out as usize, d_in as usize, data)?)
}

/// Copy with weights rounded to f32, i.e. exactly what a `PRJ1` round trip yields.
pub fn round_to_f32(head: &ProjectionHead) -> ProjectionHead {
    let mut h = head.clone();
    h.weight
        .as_mut_slice()
        .iter_mut()
        .for_each(|w| *w = *w as f32 as f64);
    h
}

pub fn write_head(head: &ProjectionHead, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_head(head)?)?;
    Ok(())
}

pub fn read_head(path: impl AsRef<Path>) -> Result<ProjectionHead> {
    decode_head(&std::fs::read(path)?)
}
