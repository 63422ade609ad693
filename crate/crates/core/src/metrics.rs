//! Group-wise evaluation: per-group accuracy, worst-group accuracy (WGA) and
//! overall accuracy.

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::head::{self, ClassifierConfig, ProjectionHead};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupCount {
    pub correct: u64,
    pub total: u64,
}

impl GroupCount {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    /// Only groups with at least one sample appear.
    pub per_group: BTreeMap<u32, GroupCount>,
    pub wga: f64,
    pub worst_group: u32,
    /// Sample-weighted accuracy.
    pub avg: f64,
}

impl GroupMetrics {
    pub fn from_predictions(predictions: &[usize], labels: &[u32], groups: &[u32]) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        if predictions.len() != labels.len() || labels.len() != groups.len() {
            return Err(Error::DimensionMismatch {
                what: "prediction count",
                expected: labels.len(),
                actual: predictions.len(),
            });
        }
        let mut per_group: BTreeMap<u32, GroupCount> = BTreeMap::new();
        for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
            let e = per_group.entry(g).or_default();
            e.total += 1;
            if p == y as usize {
                e.correct += 1;
            }
        }
        let (worst_group, wga) = per_group
            .iter()
            .map(|(&g, c)| (g, c.accuracy()))
            .fold((u32::MAX, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let correct: u64 = per_group.values().map(|c| c.correct).sum();
        let total: u64 = per_group.values().map(|c| c.total).sum();
        Ok(Self {
            per_group,
            wga,
            worst_group,
            avg: correct as f64 / total as f64,
        })
    }

    /// `key = value` report.
    pub fn report(&self) -> String {
        let total: u64 = self.per_group.values().map(|c| c.total).sum();
        let mut s = String::new();
        let _ = writeln!(s, "n_samples = {total}");
        let _ = writeln!(s, "wga = {}", self.wga);
        let _ = writeln!(s, "avg = {}", self.avg);
        let _ = writeln!(s, "worst_group = {}", self.worst_group);
        for (g, c) in &self.per_group {
            let _ = writeln!(s, "group.{g}.correct = {}", c.correct);
            let _ = writeln!(s, "group.{g}.total = {}", c.total);
            let _ = writeln!(s, "group.{g}.accuracy = {}", c.accuracy());
        }
        s
    }

    /// Tab-separated per-group table with a header row.
    pub fn group_table(&self) -> String {
        let mut s = String::from("group\tcorrect\ttotal\taccuracy\n");
        for (g, c) in &self.per_group {
            let _ = writeln!(s, "{g}\t{}\t{}\t{}", c.correct, c.total, c.accuracy());
        }
        s
    }
}

pub fn predictions(head: &ProjectionHead, ds: &EmbeddingDataset, cfg: &ClassifierConfig) -> Result<Vec<usize>> {
    (0..ds.n_samples())
        .map(|i| head::predict(head, ds.feature(i), ds.anchors(), cfg))
        .collect()
}

/// Plain accuracy; does not need group labels.
pub fn accuracy(head: &ProjectionHead, ds: &EmbeddingDataset, cfg: &ClassifierConfig) -> Result<f64> {
    if ds.n_samples() == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = predictions(head, ds, cfg)?;
    let correct = preds
        .iter()
        .zip(ds.labels())
        .filter(|(&p, &y)| p == y as usize)
        .count();
    Ok(correct as f64 / ds.n_samples() as f64)
}

pub fn evaluate(head: &ProjectionHead, ds: &EmbeddingDataset, cfg: &ClassifierConfig) -> Result<GroupMetrics> {
    let groups = ds.groups().ok_or(Error::MissingGroups)?;
    if ds.n_samples() == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    GroupMetrics::from_predictions(&predictions(head, ds, cfg)?, ds.labels(), groups)
}

/// Tab-separated rows `index, label, group (or -1), e_0 .. e_{d-1}` under
/// `head`, preceded by a header row.
pub fn render_embeddings(head: &ProjectionHead, ds: &EmbeddingDataset, cfg: &ClassifierConfig) -> Result<String> {
    let mut s = String::from("index\tlabel\tgroup");
    for k in 0..head.d_out() {
        let _ = write!(s, "\te{k}");
    }
    s.push('\n');
    for i in 0..ds.n_samples() {
        let e = head.forward(ds.feature(i), cfg.normalize_output)?;
        let g = ds.groups().map_or(-1, |g| g[i] as i64);
        let _ = write!(s, "{i}\t{}\t{g}", ds.labels()[i]);
        for x in e {
            let _ = write!(s, "\t{x}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(
    head: &ProjectionHead,
    ds: &EmbeddingDataset,
    cfg: &ClassifierConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, render_embeddings(head, ds, cfg)?)?;
    Ok(())
}
