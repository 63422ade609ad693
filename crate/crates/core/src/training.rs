//! ERM and recalibration training loops, the SGD optimizer, per-epoch
//! validation and best-model selection.

use crate::calibration::{
    build_calibration_set, draw_uniform, sample_negative, sample_positive, CalibrationSet, CentroidState,
    PositiveMode, SamplerConfig,
};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::head::{ce_loss_and_grad, ClassifierConfig, ProjectionHead};
use crate::linalg::{CompensatedSum, Matrix};
use crate::losses::{total_loss, CalibrationTerm, LossConfig};
use crate::metrics;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::fmt::{self, Write as _};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Anchors per recalibration step.
    pub anchor_batch: usize,
    /// Holistic samples per recalibration step.
    pub cs_batch: usize,
    /// Minibatch size for cross-entropy training.
    pub erm_batch: usize,
    pub eval_every: usize,
    /// EMA rate of the class centroids.
    pub ema_gamma: f64,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 100,
            anchor_batch: 128,
            cs_batch: 128,
            erm_batch: 128,
            eval_every: 1,
            ema_gamma: 0.9,
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        for (name, v) in [
            ("anchor_batch", self.anchor_batch),
            ("cs_batch", self.cs_batch),
            ("erm_batch", self.erm_batch),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !(self.ema_gamma > 0.0 && self.ema_gamma <= 1.0) {
            return Err(Error::config(format!("ema_gamma must be in (0, 1], got {}", self.ema_gamma)));
        }
        self.sampler.validate()?;
        self.loss.validate()
    }

    pub fn sgd(&self) -> SgdParams {
        SgdParams {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffer, one entry per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Matrix,
}

impl SgdState {
    pub fn new(head: &ProjectionHead) -> Self {
        Self {
            velocity: Matrix::zeros(head.d_out(), head.d_in()),
        }
    }

    pub fn velocity(&self) -> &Matrix {
        &self.velocity
    }
}

/// `g' = grad + wd·W;  m ← μ·m + g';  W ← W − lr·m`.
pub fn sgd_step(head: &mut ProjectionHead, grad: &Matrix, state: &mut SgdState, params: &SgdParams) -> Result<()> {
    let w = head.weight();
    if grad.rows() != w.rows() || grad.cols() != w.cols() {
        return Err(Error::DimensionMismatch {
            what: "gradient shape",
            expected: w.rows() * w.cols(),
            actual: grad.rows() * grad.cols(),
        });
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let m = state.velocity.as_mut_slice();
    let w = head.weight_mut().as_mut_slice();
    for ((m, w), &g) in m.iter_mut().zip(w.iter_mut()).zip(grad.as_slice()) {
        *m = params.momentum * *m + (g + params.weight_decay * *w);
        *w -= params.lr * *m;
    }
    if !head.weight().is_finite() {
        return Err(Error::Numeric("weights diverged after the optimizer step".into()));
    }
    Ok(())
}

/// What validation score drives model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    WorstGroup,
    /// Fallback when the validation split has no group labels.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    /// Mean step loss over the epoch.
    pub loss: f64,
    /// `None` on epochs that were not evaluated or when the validation split
    /// has no groups.
    pub val_wga: Option<f64>,
    pub val_avg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub rows: Vec<EpochRow>,
    pub selection: Selection,
    /// `None` when no epoch ran; `best_head` is then the starting head.
    pub best_epoch: Option<usize>,
    pub best_head: ProjectionHead,
    pub final_head: ProjectionHead,
    pub steps: usize,
    /// Recalibration ran on the holistic term alone because the reference
    /// head misclassified nothing.
    pub holistic_only: bool,
    pub warnings: Vec<String>,
}

impl TrainRecord {
    /// Tab-separated curve with header `epoch loss val_wga val_avg`;
    /// unevaluated cells read `NA`.
    pub fn curve_tsv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = String::from("epoch\tloss\tval_wga\tval_avg\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.epoch, r.loss, cell(r.val_wga), cell(r.val_avg));
        }
        s
    }

    pub fn best_row(&self) -> Option<&EpochRow> {
        let e = self.best_epoch?;
        self.rows.iter().find(|r| r.epoch == e)
    }
}

/// Epoch with the highest score; the earliest wins ties.
pub fn select_best(rows: &[EpochRow], selection: Selection) -> Option<usize> {
    let score = |r: &EpochRow| match selection {
        Selection::WorstGroup => r.val_wga,
        Selection::Average => r.val_avg,
    };
    let mut best: Option<(usize, f64)> = None;
    for r in rows {
        if let Some(s) = score(r) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((r.epoch, s));
            }
        }
    }
    best.map(|(e, _)| e)
}

/// Shared epoch bookkeeping: validation, curve rows and the best head.
struct Tracker<'a> {
    val: &'a EmbeddingDataset,
    clf: &'a ClassifierConfig,
    eval_every: usize,
    selection: Selection,
    rows: Vec<EpochRow>,
    best: Option<(usize, f64, ProjectionHead)>,
}

impl<'a> Tracker<'a> {
    fn new(val: &'a EmbeddingDataset, clf: &'a ClassifierConfig, eval_every: usize, warnings: &mut Vec<String>) -> Self {
        let selection = if val.groups().is_some() {
            Selection::WorstGroup
        } else {
            warnings.push("validation split has no group labels; selecting by average accuracy".into());
            Selection::Average
        };
        Self {
            val,
            clf,
            eval_every,
            selection,
            rows: Vec::new(),
            best: None,
        }
    }

    fn end_epoch(&mut self, epoch: usize, epochs: usize, loss: f64, head: &ProjectionHead) -> Result<()> {
        let evaluate = epoch.is_multiple_of(self.eval_every) || epoch == epochs;
        let (val_wga, val_avg) = if !evaluate {
            (None, None)
        } else if self.selection == Selection::WorstGroup {
            let m = metrics::evaluate(head, self.val, self.clf)?;
            (Some(m.wga), Some(m.avg))
        } else {
            (None, Some(metrics::accuracy(head, self.val, self.clf)?))
        };
        let score = match self.selection {
            Selection::WorstGroup => val_wga,
            Selection::Average => val_avg,
        };
        if let Some(s) = score {
            if self.best.as_ref().is_none_or(|(_, b, _)| s > *b) {
                self.best = Some((epoch, s, head.clone()));
            }
        }
        self.rows.push(EpochRow {
            epoch,
            loss,
            val_wga,
            val_avg,
        });
        Ok(())
    }

    fn finish(
        self,
        start: &ProjectionHead,
        final_head: ProjectionHead,
        steps: usize,
        holistic_only: bool,
        warnings: Vec<String>,
    ) -> TrainRecord {
        let (best_epoch, best_head) = match self.best {
            Some((e, _, h)) => (Some(e), h),
            None => (None, start.clone()),
        };
        TrainRecord {
            rows: self.rows,
            selection: self.selection,
            best_epoch,
            best_head,
            final_head,
            steps,
            holistic_only,
            warnings,
        }
    }
}

fn check_splits(train: &EmbeddingDataset, val: &EmbeddingDataset, head: &ProjectionHead) -> Result<()> {
    if train.n_samples() == 0 {
        return Err(Error::Empty("training split"));
    }
    if val.n_samples() == 0 {
        return Err(Error::Empty("validation split"));
    }
    train.check_compatible(val)?;
    if head.d_in() != train.d_in() || head.d_out() != train.d_out() {
        return Err(Error::DimensionMismatch {
            what: "head shape vs dataset",
            expected: train.d_in() * train.d_out(),
            actual: head.d_in() * head.d_out(),
        });
    }
    Ok(())
}

/// Starting head for cross-entropy training, drawn from the root seed.
pub fn initial_head(d_in: usize, d_out: usize, seed: u64) -> ProjectionHead {
    ProjectionHead::init_gaussian(d_in, d_out, &mut rng::derive(seed, rng::stream::HEAD_INIT))
}

/// Minibatch cross-entropy training of the projection head.
pub fn train_erm(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    head0: &ProjectionHead,
    cfg: &TrainConfig,
    clf: &ClassifierConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    clf.validate()?;
    check_splits(train, val, head0)?;
    let view = train.training_view();
    let params = cfg.sgd();
    let mut warnings = Vec::new();
    let mut tracker = Tracker::new(val, clf, cfg.eval_every, &mut warnings);
    let mut shuffle = rng::derive(cfg.seed, rng::stream::ERM_SHUFFLE);
    let mut head = head0.clone();
    let mut state = SgdState::new(&head);
    let mut order: Vec<usize> = (0..view.n_samples()).collect();
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss = CompensatedSum::new();
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.erm_batch) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (view.feature(i), view.label(i))).collect();
            let (l, grad) = ce_loss_and_grad(&head, &batch, view.anchors, clf)?;
            sgd_step(&mut head, &grad, &mut state, &params)?;
            loss.add(l);
            n_batches += 1;
            steps += 1;
        }
        tracker.end_epoch(epoch, cfg.epochs, loss.value() / n_batches as f64, &head)?;
    }
    Ok(tracker.finish(head0, head, steps, false, warnings))
}

/// Recalibrates `reference` on the samples it misclassifies.
///
/// The calibration set is built once from `reference`. Each step takes up to
/// `anchor_batch` anchors with their positive and negative batches plus a
/// holistic batch of `cs_batch` uniform draws (with replacement) from the
/// training split, applies one optimizer step, then moves each anchor's class
/// centroid toward its positives under the updated head, anchor by anchor.
/// An epoch is one pass over the shuffled anchors.
pub fn train_cfr(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    reference: &ProjectionHead,
    cfg: &TrainConfig,
    clf: &ClassifierConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    clf.validate()?;
    check_splits(train, val, reference)?;
    let view = train.training_view();
    let calset = build_calibration_set(view, reference, clf)?;
    train_cfr_with(train, val, reference, &calset, cfg, clf)
}

/// [`train_cfr`] with a prebuilt calibration set.
pub fn train_cfr_with(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    reference: &ProjectionHead,
    calset: &CalibrationSet,
    cfg: &TrainConfig,
    clf: &ClassifierConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    clf.validate()?;
    check_splits(train, val, reference)?;
    let view = train.training_view();
    let n = view.n_samples();
    let params = cfg.sgd();
    let sampler = &cfg.sampler;
    let mut warnings = Vec::new();
    let mut tracker = Tracker::new(val, clf, cfg.eval_every, &mut warnings);

    let mut head = reference.clone();
    let mut state = SgdState::new(&head);
    let mut centroids = CentroidState::warm_start(calset, view.features, &head, cfg.ema_gamma)?;
    let mut anchor_rng = rng::derive(cfg.seed, rng::stream::CFR_ANCHORS);
    let mut sample_rng = rng::derive(cfg.seed, rng::stream::CFR_SAMPLER);
    let mut holistic_rng = rng::derive(cfg.seed, rng::stream::CFR_HOLISTIC);

    let holistic_only = calset.anchors.is_empty();
    if holistic_only {
        warnings.push("reference head misclassifies no training sample; training on the holistic term only".into());
        if !cfg.loss.holistic {
            warnings.push("holistic term disabled as well; the head is left unchanged".into());
        }
    }
    let uses_centroid = sampler.positive_mode != PositiveMode::Rps;
    let mut order = calset.anchors.clone();
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        let mut loss = CompensatedSum::new();
        let mut n_steps = 0usize;
        let batches: Vec<Vec<usize>> = if holistic_only {
            let k = if cfg.loss.holistic { n.div_ceil(cfg.cs_batch) } else { 0 };
            vec![Vec::new(); k]
        } else {
            order.shuffle(&mut anchor_rng);
            order.chunks(cfg.anchor_batch).map(<[usize]>::to_vec).collect()
        };
        for batch in batches {
            let mut terms = Vec::with_capacity(batch.len());
            let mut ema_batches = Vec::with_capacity(batch.len());
            for &a in &batch {
                let pos = sample_positive(calset, a, &mut sample_rng, sampler)?;
                let neg = sample_negative(calset, a, view.features, &mut sample_rng, sampler)?;
                let y = calset.label(a);
                // The centroid-only strategy samples no positives, so the EMA
                // gets its own draw from the pool.
                let ema = if !uses_centroid {
                    Vec::new()
                } else if pos.samples.is_empty() && sampler.p_size > 0 {
                    draw_uniform(&calset.positive_pools[y], sampler.p_size, &mut sample_rng)
                } else {
                    pos.samples.clone()
                };
                ema_batches.push((y, ema));
                terms.push(CalibrationTerm {
                    anchor: a,
                    positives: pos.samples,
                    centroid: pos.centroid.then(|| centroids.centroid(y).to_vec()),
                    negatives: neg,
                });
            }
            let holistic: Vec<usize> = if cfg.loss.holistic {
                (0..cfg.cs_batch).map(|_| holistic_rng.random_range(0..n)).collect()
            } else {
                Vec::new()
            };
            let out = total_loss(&head, view, &terms, &holistic, &cfg.loss, clf.normalize_output)?;
            sgd_step(&mut head, &out.grad, &mut state, &params)?;
            for (y, members) in ema_batches {
                if members.is_empty() {
                    continue;
                }
                let embs = members
                    .iter()
                    .map(|&i| head.forward(view.feature(i), true))
                    .collect::<Result<Vec<_>>>()?;
                centroids.update(y, embs.iter().map(Vec::as_slice))?;
            }
            loss.add(out.loss);
            n_steps += 1;
            steps += 1;
        }
        let mean = if n_steps == 0 { 0.0 } else { loss.value() / n_steps as f64 };
        tracker.end_epoch(epoch, cfg.epochs, mean, &head)?;
    }
    Ok(tracker.finish(reference, head, steps, holistic_only, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    PSize,
    NSize,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "p_size" => Ok(SweepAxis::PSize),
            "n_size" => Ok(SweepAxis::NSize),
            _ => Err(Error::config(format!("unknown sweep axis {s:?} (lambda, p_size, n_size)"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::PSize => "p_size",
            SweepAxis::NSize => "n_size",
        })
    }
}

impl SweepAxis {
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = *base;
        let as_size = |v: f64| -> Result<usize> {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!("{self} values must be non-negative integers, got {v}")))
            }
        };
        match self {
            SweepAxis::Lambda => cfg.loss.lambda = value,
            SweepAxis::PSize => cfg.sampler.p_size = as_size(value)?,
            SweepAxis::NSize => cfg.sampler.n_size = as_size(value)?,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub wga: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Tab-separated, one row per value, accuracies in percent.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\twga\tavg\n", self.axis);
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.2}\t{:.2}", r.value, 100.0 * r.wga, 100.0 * r.avg);
        }
        s
    }
}

/// One recalibration run per value, each from the same root seed, scored on
/// `test` with the validation-selected head.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    test: &EmbeddingDataset,
    reference: &ProjectionHead,
    base: &TrainConfig,
    clf: &ClassifierConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let calset = build_calibration_set(train.training_view(), reference, clf)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = axis.apply(base, value)?;
        let rec = train_cfr_with(train, val, reference, &calset, &cfg, clf)?;
        let m = metrics::evaluate(&rec.best_head, test, clf)?;
        rows.push(SweepRow {
            value,
            wga: m.wga,
            avg: m.avg,
        });
    }
    Ok(SweepTable { axis, rows })
}
