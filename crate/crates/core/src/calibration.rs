//! Calibration-set construction, positive/negative sampling and EMA class
//! centroids.
//!
//! The calibration set is every training sample the reference (ERM) head gets
//! wrong. For each class `c` two pools are precomputed once:
//!
//! - `positive_pool[c]`: samples labelled `c` that the reference head predicts
//!   correctly;
//! - `negative_pool[c]`: every sample whose label differs from `c`, whatever
//!   the prediction.
//!
//! Pools smaller than the requested batch are sampled with replacement.

use crate::dataset::TrainingView;
use crate::error::{Error, Result};
use crate::head::{self, ClassifierConfig, ProjectionHead};
use crate::kv;
use crate::linalg::{cosine, normalize_in_place, Matrix};
use crate::rng::Rng;
use rand::seq::index;
use rand::Rng as _;
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveMode {
    /// Sampled positives plus the class centroid.
    Dps,
    /// Sampled positives only.
    Rps,
    /// The class centroid only.
    CentroidOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    /// Uniform over other-class samples.
    Rns,
    /// Uniform candidate draw, then the most similar candidates by cosine of
    /// the pre-projection features.
    Nns,
}

impl FromStr for PositiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DPS" => Ok(PositiveMode::Dps),
            "RPS" => Ok(PositiveMode::Rps),
            "CENTROID_ONLY" => Ok(PositiveMode::CentroidOnly),
            _ => Err(Error::config(format!("unknown positive mode {s:?}"))),
        }
    }
}

impl fmt::Display for PositiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositiveMode::Dps => "DPS",
            PositiveMode::Rps => "RPS",
            PositiveMode::CentroidOnly => "CENTROID_ONLY",
        })
    }
}

impl FromStr for NegativeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RNS" => Ok(NegativeMode::Rns),
            "NNS" => Ok(NegativeMode::Nns),
            _ => Err(Error::config(format!("unknown negative mode {s:?}"))),
        }
    }
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMode::Rns => "RNS",
            NegativeMode::Nns => "NNS",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub positive_mode: PositiveMode,
    pub negative_mode: NegativeMode,
    pub p_size: usize,
    pub n_size: usize,
    pub nns_candidate_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            positive_mode: PositiveMode::Dps,
            negative_mode: NegativeMode::Rns,
            p_size: 16,
            n_size: 16,
            nns_candidate_size: 256,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_size == 0 && self.positive_mode != PositiveMode::CentroidOnly {
            return Err(Error::config("p_size must be >= 1 unless positive_mode is CENTROID_ONLY"));
        }
        if self.n_size == 0 {
            return Err(Error::config("n_size must be >= 1"));
        }
        if self.nns_candidate_size < self.n_size {
            return Err(Error::config("nns_candidate_size must be >= n_size"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    /// Misclassified training indices, ascending.
    pub anchors: Vec<usize>,
    pub positive_pools: Vec<Vec<usize>>,
    pub negative_pools: Vec<Vec<usize>>,
    labels: Vec<u32>,
}

/// Predicts every training sample with `reference` and partitions the indices.
pub fn build_calibration_set(
    train: TrainingView<'_>,
    reference: &ProjectionHead,
    cfg: &ClassifierConfig,
) -> Result<CalibrationSet> {
    let n = train.n_samples();
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    let k = train.n_classes();
    let mut anchors = Vec::new();
    let mut positive_pools = vec![Vec::new(); k];
    let mut negative_pools = vec![Vec::new(); k];
    for i in 0..n {
        let y = train.label(i);
        let pred = head::predict(reference, train.feature(i), train.anchors, cfg)?;
        if pred == y {
            positive_pools[y].push(i);
        } else {
            anchors.push(i);
        }
        for (c, pool) in negative_pools.iter_mut().enumerate() {
            if c != y {
                pool.push(i);
            }
        }
    }
    if positive_pools.iter().all(Vec::is_empty) {
        return Err(Error::UnusableReferenceHead);
    }
    Ok(CalibrationSet {
        anchors,
        positive_pools,
        negative_pools,
        labels: train.labels.to_vec(),
    })
}

impl CalibrationSet {
    pub fn n_classes(&self) -> usize {
        self.positive_pools.len()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Index-list export: `anchors` and `positive.<c>` keys with
    /// comma-separated indices. Negative pools follow from the labels.
    pub fn to_text(&self) -> String {
        let mut entries: Vec<(String, String)> = vec![
            ("n_samples".into(), self.labels.len().to_string()),
            ("n_classes".into(), self.n_classes().to_string()),
            ("anchors".into(), kv::join_list(&self.anchors)),
        ];
        for (c, pool) in self.positive_pools.iter().enumerate() {
            entries.push((format!("positive.{c}"), kv::join_list(pool)));
        }
        kv::render(entries.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }
}

/// Parsed calibration-set export. Negative pools are implied by the labels and
/// are therefore not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationIndexList {
    pub n_samples: usize,
    pub anchors: Vec<usize>,
    pub positive_pools: Vec<Vec<usize>>,
}

impl CalibrationIndexList {
    pub fn parse(text: &str) -> Result<Self> {
        const WHAT: &str = "calibration index list";
        let entries = kv::parse(text, WHAT)?;
        let get = |key: &str| entries.iter().find(|e| e.key == key);
        let require = |key: &str| get(key).ok_or_else(|| Error::parse(WHAT, 0, format!("missing key {key:?}")));
        let num = |key: &str| -> Result<usize> {
            let e = require(key)?;
            e.value
                .parse()
                .map_err(|_| Error::parse(WHAT, e.line, format!("bad {key} {:?}", e.value)))
        };
        let n_samples = num("n_samples")?;
        let n_classes = num("n_classes")?;
        let list = |key: &str| -> Result<Vec<usize>> {
            let e = require(key)?;
            let v: Vec<usize> = kv::parse_list(&e.value, WHAT, e.line)?;
            if let Some(&bad) = v.iter().find(|&&i| i >= n_samples) {
                return Err(Error::parse(WHAT, e.line, format!("index {bad} >= n_samples {n_samples}")));
            }
            Ok(v)
        };
        let anchors = list("anchors")?;
        // Bound the class count by the number of lines so a hostile header
        // cannot demand a huge allocation.
        if n_classes > entries.len() {
            return Err(Error::parse(WHAT, 0, format!("n_classes {n_classes} but only {} entries", entries.len())));
        }
        let positive_pools = (0..n_classes)
            .map(|c| list(&format!("positive.{c}")))
            .collect::<Result<Vec<_>>>()?;
        for e in &entries {
            let known = matches!(e.key.as_str(), "n_samples" | "n_classes" | "anchors")
                || e.key
                    .strip_prefix("positive.")
                    .and_then(|c| c.parse::<usize>().ok())
                    .is_some_and(|c| c < n_classes);
            if !known {
                return Err(Error::parse(WHAT, e.line, format!("unknown key {:?}", e.key)));
            }
        }
        Ok(Self {
            n_samples,
            anchors,
            positive_pools,
        })
    }
}

/// Indices drawn for one anchor's positive side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveBatch {
    /// Sampled same-class, correctly predicted indices.
    pub samples: Vec<usize>,
    /// Whether the class centroid joins the batch.
    pub centroid: bool,
}

impl PositiveBatch {
    /// Number of positive terms in the calibration loss.
    pub fn len(&self) -> usize {
        self.samples.len() + usize::from(self.centroid)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `k` uniform draws from `pool`: without replacement (in random order) when
/// the pool is large enough, with replacement otherwise.
pub fn draw_uniform(pool: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    if pool.len() >= k {
        index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

pub fn sample_positive(
    calset: &CalibrationSet,
    anchor: usize,
    rng: &mut Rng,
    cfg: &SamplerConfig,
) -> Result<PositiveBatch> {
    let y = calset.label(anchor);
    let draw = |rng: &mut Rng| -> Result<Vec<usize>> {
        let pool = &calset.positive_pools[y];
        if pool.is_empty() {
            return Err(Error::EmptyPositivePool(y));
        }
        Ok(draw_uniform(pool, cfg.p_size, rng))
    };
    Ok(match cfg.positive_mode {
        PositiveMode::Dps => PositiveBatch {
            samples: draw(rng)?,
            centroid: true,
        },
        PositiveMode::Rps => PositiveBatch {
            samples: draw(rng)?,
            centroid: false,
        },
        PositiveMode::CentroidOnly => PositiveBatch {
            samples: Vec::new(),
            centroid: true,
        },
    })
}

/// The `k` entries of `candidates` most cosine-similar to `query` in the
/// feature space, best first. Ties go to the lower index.
pub fn nearest_by_cosine(query: &[f64], candidates: &[usize], features: &Matrix, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| (cosine(query, features.row(i)), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    scored.dedup_by_key(|s| s.1);
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn sample_negative(
    calset: &CalibrationSet,
    anchor: usize,
    features: &Matrix,
    rng: &mut Rng,
    cfg: &SamplerConfig,
) -> Result<Vec<usize>> {
    let y = calset.label(anchor);
    let pool = &calset.negative_pools[y];
    if pool.is_empty() {
        return Err(Error::EmptyNegativePool(y));
    }
    match cfg.negative_mode {
        NegativeMode::Rns => Ok(draw_uniform(pool, cfg.n_size, rng)),
        NegativeMode::Nns => {
            let candidates = if pool.len() > cfg.nns_candidate_size {
                draw_uniform(pool, cfg.nns_candidate_size, rng)
            } else {
                pool.clone()
            };
            let ranked = nearest_by_cosine(features.row(anchor), &candidates, features, cfg.n_size);
            // Fewer distinct candidates than requested: repeat the ranking.
            Ok(ranked.iter().cycle().take(cfg.n_size).copied().collect())
        }
    }
}

/// `(1 − γ)·prev + γ·mean`, before re-normalization.
pub fn ema_blend(prev: &[f64], mean: &[f64], gamma: f64) -> Vec<f64> {
    prev.iter()
        .zip(mean)
        .map(|(&c, &m)| (1.0 - gamma) * c + gamma * m)
        .collect()
}

fn mean_of<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "centroid batch",
                expected: dim,
                actual: r.len(),
            });
        }
        sum.iter_mut().zip(r).for_each(|(s, x)| *s += x);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("centroid batch"));
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(sum)
}

/// Normalized mean of the normalized embeddings of `members`.
pub fn exact_centroid(
    members: &[usize],
    features: &Matrix,
    head: &ProjectionHead,
) -> Result<Vec<f64>> {
    let embs = members
        .iter()
        .map(|&i| head.forward(features.row(i), true))
        .collect::<Result<Vec<_>>>()?;
    let mut c = mean_of(embs.iter().map(Vec::as_slice), head.d_out())?;
    normalize_in_place(&mut c);
    Ok(c)
}

/// Per-class EMA centroids. Centroids are constants to the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidState {
    centroids: Vec<Vec<f64>>,
    gamma: f64,
}

impl CentroidState {
    pub fn new(centroids: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::config(format!("EMA gamma must be in (0, 1], got {gamma}")));
        }
        if centroids.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("centroids"));
        }
        Ok(Self { centroids, gamma })
    }

    /// Exact centroid of each class's positive pool under `head`; classes
    /// with empty pools start at zero.
    pub fn warm_start(
        calset: &CalibrationSet,
        features: &Matrix,
        head: &ProjectionHead,
        gamma: f64,
    ) -> Result<Self> {
        let centroids = calset
            .positive_pools
            .iter()
            .map(|pool| {
                if pool.is_empty() {
                    Ok(vec![0.0; head.d_out()])
                } else {
                    exact_centroid(pool, features, head)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(centroids, gamma)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        &self.centroids[class]
    }

    /// One EMA step toward the mean of `batch` (embeddings under the current
    /// head), then re-normalization.
    pub fn update<'a>(&mut self, class: usize, batch: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let c = &mut self.centroids[class];
        let mean = mean_of(batch, c.len())?;
        let mut next = ema_blend(c, &mean, self.gamma);
        normalize_in_place(&mut next);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("centroid update"));
        }
        *c = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassAnchors;
    use crate::rng;

    fn view_parts(features: Vec<f64>, d: usize, labels: Vec<u32>) -> (Matrix, Vec<u32>, ClassAnchors) {
        let n = labels.len();
        let anchors = ClassAnchors::from_rows(Matrix::from_vec(2, 2, vec![-1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        (Matrix::from_vec(n, d, features).unwrap(), labels, anchors)
    }

    #[test]
    fn constant_class0_head_makes_class1_all_anchors() {
        // Head maps everything onto the class-0 anchor direction.
        let (f, l, a) = view_parts(vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 3.0, 1.0], 2, vec![0, 0, 1, 1]);
        let view = TrainingView { features: &f, labels: &l, anchors: &a };
        let head = ProjectionHead::new(Matrix::from_vec(2, 2, vec![-1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let cs = build_calibration_set(view, &head, &ClassifierConfig::default()).unwrap();
        assert_eq!(cs.anchors, vec![2, 3]);
        assert_eq!(cs.positive_pools[0], vec![0, 1]);
        assert!(cs.positive_pools[1].is_empty());
        assert_eq!(cs.negative_pools[1], vec![0, 1]);
        let mut r = rng::derive(0, 1);
        let err = sample_positive(&cs, 2, &mut r, &SamplerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyPositivePool(1)));
    }

    #[test]
    fn single_misprediction_is_sole_anchor() {
        // Identity head: prediction is the sign of the first coordinate.
        let (f, l, a) = view_parts(vec![-1.0, 0.2, 2.0, 0.0, 0.5, -0.3], 2, vec![0, 1, 0]);
        let view = TrainingView { features: &f, labels: &l, anchors: &a };
        let head = ProjectionHead::new(Matrix::identity(2)).unwrap();
        let cs = build_calibration_set(view, &head, &ClassifierConfig::default()).unwrap();
        assert_eq!(cs.anchors, vec![2]);
    }

    #[test]
    fn perfect_head_has_no_anchors() {
        let (f, l, a) = view_parts(vec![-1.0, 0.0, 1.0, 0.0], 2, vec![0, 1]);
        let view = TrainingView { features: &f, labels: &l, anchors: &a };
        let head = ProjectionHead::new(Matrix::identity(2)).unwrap();
        let cs = build_calibration_set(view, &head, &ClassifierConfig::default()).unwrap();
        assert!(cs.anchors.is_empty());
    }

    #[test]
    fn empty_training_set_rejected() {
        let (f, l, a) = view_parts(vec![], 2, vec![]);
        let view = TrainingView { features: &f, labels: &l, anchors: &a };
        let head = ProjectionHead::new(Matrix::identity(2)).unwrap();
        assert!(matches!(
            build_calibration_set(view, &head, &ClassifierConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn full_pool_draw_is_a_permutation() {
        let pool: Vec<usize> = (100..116).collect();
        let mut r = rng::derive(5, 5);
        let mut d = draw_uniform(&pool, 16, &mut r);
        d.sort();
        assert_eq!(d, pool);
    }

    #[test]
    fn small_pool_falls_back_to_replacement() {
        let pool = vec![3, 9];
        let mut r = rng::derive(5, 6);
        let d = draw_uniform(&pool, 16, &mut r);
        assert_eq!(d.len(), 16);
        assert!(d.iter().all(|i| pool.contains(i)));
    }

    #[test]
    fn ema_blend_arithmetic() {
        let b = ema_blend(&[1.0, 0.0], &[0.0, 1.0], 0.9);
        assert!((b[0] - 0.1).abs() < 1e-15 && (b[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn centroid_fixed_point() {
        let c = vec![0.6, 0.8];
        let mut s = CentroidState::new(vec![c.clone(), vec![1.0, 0.0]], 0.9).unwrap();
        s.update(0, [[0.6, 0.8].as_slice()]).unwrap();
        assert!((s.centroid(0)[0] - 0.6).abs() < 1e-15 && (s.centroid(0)[1] - 0.8).abs() < 1e-15);
        assert!(matches!(s.update(0, std::iter::empty()), Err(Error::Empty(_))));
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        assert!(CentroidState::new(vec![vec![1.0]], 0.0).is_err());
        assert!(CentroidState::new(vec![vec![1.0]], 1.5).is_err());
    }

    #[test]
    fn exact_centroid_edge_cases() {
        let f = Matrix::from_vec(2, 2, vec![3.0, 4.0, -3.0, -4.0]).unwrap();
        let head = ProjectionHead::new(Matrix::identity(2)).unwrap();
        let one = exact_centroid(&[0], &f, &head).unwrap();
        assert!((one[0] - 0.6).abs() < 1e-15 && (one[1] - 0.8).abs() < 1e-15);
        assert_eq!(exact_centroid(&[0, 1], &f, &head).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(exact_centroid(&[], &f, &head), Err(Error::Empty(_))));
    }

    #[test]
    fn index_list_round_trip() {
        let (f, l, a) = view_parts(vec![-1.0, 0.2, 2.0, 0.0, 0.5, -0.3, 1.0, 1.0], 2, vec![0, 1, 0, 1]);
        let view = TrainingView { features: &f, labels: &l, anchors: &a };
        let head = ProjectionHead::new(Matrix::identity(2)).unwrap();
        let cs = build_calibration_set(view, &head, &ClassifierConfig::default()).unwrap();
        let parsed = CalibrationIndexList::parse(&cs.to_text()).unwrap();
        assert_eq!(parsed.n_samples, 4);
        assert_eq!(parsed.anchors, cs.anchors);
        assert_eq!(parsed.positive_pools, cs.positive_pools);
        assert!(CalibrationIndexList::parse("n_samples = 2\nn_classes = 1\nanchors = 5\npositive.0 =").is_err());
    }
}
