//! Frozen embedding datasets and the `VLE1` container.
//!
//! A dataset holds pre-projection visual features, class labels, optional
//! group labels, and the class anchors (text embeddings) that act as the
//! classifier. Each split lives in its own file.
//!
//! # `VLE1` layout (little-endian)
//!
//! | offset | type | field                                         |
//! |--------|------|-----------------------------------------------|
//! | 0      | 4B   | magic `VLE1`                                  |
//! | 4      | u32  | version (= 1)                                 |
//! | 8      | u64  | n_samples                                     |
//! | 16     | u32  | d_in                                          |
//! | 20     | u32  | d_out                                         |
//! | 24     | u32  | n_classes                                     |
//! | 28     | u32  | flags: bit0 groups present, bit1 f64 payload  |
//!
//! followed by anchors (`n_classes × d_out`), features (`n_samples × d_in`),
//! labels (`n_samples` u32) and, iff bit0, groups (`n_samples` u32). Floats
//! are f32 unless bit1 is set.
//!
//! An optional `<file>.meta` sidecar carries the split tag, class names,
//! group count and provenance as `key = value` lines.

use crate::error::{Error, Result};
use crate::kv;
use crate::linalg::{norm, Matrix};
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MAGIC: [u8; 4] = *b"VLE1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

const FLAG_GROUPS: u32 = 1;
const FLAG_F64: u32 = 2;

/// Tolerance on anchor row norms.
pub const ANCHOR_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("unknown precision {s:?}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-class text embeddings, one unit-norm row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchors {
    rows: Matrix,
}

impl ClassAnchors {
    /// Normalizes every row. Fails on zero rows, non-finite entries or fewer
    /// than two classes.
    pub fn from_rows(mut rows: Matrix) -> Result<Self> {
        if !rows.is_finite() {
            return Err(Error::NonFinite("class anchors"));
        }
        for r in 0..rows.rows() {
            let row = rows.row_mut(r);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::AnchorNotNormalized { row: r, norm: 0.0 });
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Self::from_normalized(rows)
    }

    /// Takes rows that are already unit-norm (within [`ANCHOR_NORM_TOL`]).
    pub fn from_normalized(rows: Matrix) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                rows.rows()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::NonFinite("class anchors"));
        }
        for (r, row) in rows.row_iter().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > ANCHOR_NORM_TOL {
                return Err(Error::AnchorNotNormalized { row: r, norm: n });
            }
        }
        Ok(Self { rows })
    }

    pub fn n_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn d_out(&self) -> usize {
        self.rows.cols()
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        self.rows.row(class)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    fn rounded(&self, p: Precision) -> Self {
        let mut rows = self.rows.clone();
        rows.as_mut_slice().iter_mut().for_each(|x| *x = p.round(*x));
        Self { rows }
    }
}

/// Sidecar metadata. Everything here is informational except `n_groups`,
/// which overrides the group count inferred from the labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    pub split: Option<Split>,
    pub class_names: Vec<String>,
    pub n_groups: Option<usize>,
    pub provenance: Option<String>,
}

impl DatasetMeta {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn to_text(&self) -> Result<String> {
        let mut entries: Vec<(&str, String)> = Vec::new();
        if let Some(s) = self.split {
            entries.push(("split", s.to_string()));
        }
        if !self.class_names.is_empty() {
            if self
                .class_names
                .iter()
                .any(|c| c.contains(',') || c.contains('\n') || c.trim() != c || c.is_empty())
            {
                return Err(Error::config("class names must be non-empty, trimmed and comma-free"));
            }
            entries.push(("class_names", self.class_names.join(",")));
        }
        if let Some(g) = self.n_groups {
            entries.push(("n_groups", g.to_string()));
        }
        if let Some(p) = &self.provenance {
            if p.contains('\n') {
                return Err(Error::config("provenance must be a single line"));
            }
            entries.push(("provenance", p.trim().to_string()));
        }
        Ok(kv::render(entries))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = Self::default();
        for e in kv::parse(text, "dataset sidecar")? {
            let bad = |msg: String| Error::parse("dataset sidecar", e.line, msg);
            match e.key.as_str() {
                "split" => meta.split = Some(e.value.parse().map_err(|_| bad(format!("bad split {:?}", e.value)))?),
                "class_names" => meta.class_names = kv::parse_list(&e.value, "dataset sidecar", e.line)?,
                "n_groups" => {
                    meta.n_groups = Some(e.value.parse().map_err(|_| bad(format!("bad n_groups {:?}", e.value)))?)
                }
                "provenance" => meta.provenance = Some(e.value.clone()),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(meta)
    }
}

/// One split of frozen embeddings. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Matrix,
    labels: Vec<u32>,
    groups: Option<Vec<u32>>,
    anchors: ClassAnchors,
    precision: Precision,
    pub meta: DatasetMeta,
}

impl EmbeddingDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<u32>,
        groups: Option<Vec<u32>>,
        anchors: ClassAnchors,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                what: "label count",
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some(g) = &groups {
            if g.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "group count",
                    expected: n,
                    actual: g.len(),
                });
            }
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("features"));
        }
        let n_classes = anchors.n_classes();
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= n_classes)
        {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                n_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            groups,
            anchors,
            precision: Precision::F64,
            meta: DatasetMeta::default(),
        })
    }

    /// Sets the payload precision, rounding features and anchors so that a
    /// write/read cycle is exact.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        if precision == Precision::F32 {
            self.features
                .as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = precision.round(*x));
            self.anchors = self.anchors.rounded(precision);
        }
        self
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    pub fn d_out(&self) -> usize {
        self.anchors.d_out()
    }

    pub fn n_classes(&self) -> usize {
        self.anchors.n_classes()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&[u32]> {
        self.groups.as_deref()
    }

    pub fn anchors(&self) -> &ClassAnchors {
        &self.anchors
    }

    /// Group count: the sidecar value if present, else one past the largest
    /// group index, else 0.
    pub fn n_groups(&self) -> usize {
        self.meta.n_groups.unwrap_or_else(|| {
            self.groups
                .as_ref()
                .and_then(|g| g.iter().max())
                .map_or(0, |&m| m as usize + 1)
        })
    }

    /// The group-free view handed to trainers.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            features: &self.features,
            labels: &self.labels,
            anchors: &self.anchors,
        }
    }

    /// Hash of the feature payload, used to check that training never
    /// mutates frozen features.
    pub fn feature_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in self.features.as_slice() {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Copy with group labels dropped.
    pub fn without_groups(&self) -> Self {
        let mut d = self.clone();
        d.groups = None;
        d
    }

    /// Fails unless `other` has the same input width and class anchors.
    pub fn check_compatible(&self, other: &EmbeddingDataset) -> Result<()> {
        if self.d_in() != other.d_in() {
            return Err(Error::DimensionMismatch {
                what: "d_in across splits",
                expected: self.d_in(),
                actual: other.d_in(),
            });
        }
        if self.d_out() != other.d_out() {
            return Err(Error::DimensionMismatch {
                what: "d_out across splits",
                expected: self.d_out(),
                actual: other.d_out(),
            });
        }
        if self.n_classes() != other.n_classes() {
            return Err(Error::DimensionMismatch {
                what: "n_classes across splits",
                expected: self.n_classes(),
                actual: other.n_classes(),
            });
        }
        Ok(())
    }
}

/// Features, labels and anchors with the group column deliberately absent.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [u32],
    pub anchors: &'a ClassAnchors,
}

impl<'a> TrainingView<'a> {
    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn feature(&self, i: usize) -> &'a [f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn n_classes(&self) -> usize {
        self.anchors.n_classes()
    }
}

/// Serializes to `VLE1` bytes.
pub fn encode(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    if !ds.features.is_finite() {
        return Err(Error::NonFinite("features"));
    }
    let p = ds.precision;
    let mut flags = 0;
    if ds.groups.is_some() {
        flags |= FLAG_GROUPS;
    }
    if p == Precision::F64 {
        flags |= FLAG_F64;
    }
    let n = ds.n_samples();
    let floats = ds.n_classes() * ds.d_out() + n * ds.d_in();
    let ints = n * if ds.groups.is_some() { 2 } else { 1 };
    let mut out = Vec::with_capacity(HEADER_LEN + floats * p.width() + ints * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in [ds.d_in(), ds.d_out(), ds.n_classes()] {
        out.extend_from_slice(&u32_dim(v)?.to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
    let put = |out: &mut Vec<u8>, x: f64| match p {
        Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
    };
    for &x in ds.anchors.matrix().as_slice() {
        put(&mut out, x);
    }
    for &x in ds.features.as_slice() {
        put(&mut out, x);
    }
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(g) = &ds.groups {
        for &x in g {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("dimension {v} exceeds u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        a
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn float(&mut self, p: Precision) -> f64 {
        match p {
            Precision::F32 => f32::from_le_bytes(self.take()) as f64,
            Precision::F64 => f64::from_le_bytes(self.take()),
        }
    }

    fn floats(&mut self, count: usize, p: Precision) -> Vec<f64> {
        (0..count).map(|_| self.float(p)).collect()
    }
}

/// Parses `VLE1` bytes. The sidecar is not consulted; `meta` is empty.
pub fn decode(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u32();
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_samples = u64::from_le_bytes(c.take());
    let d_in = c.u32() as u64;
    let d_out = c.u32() as u64;
    let n_classes = c.u32() as u64;
    let flags = c.u32();
    if flags & !(FLAG_GROUPS | FLAG_F64) != 0 {
        return Err(Error::UnknownFlags(flags));
    }
    let has_groups = flags & FLAG_GROUPS != 0;
    let precision = if flags & FLAG_F64 != 0 {
        Precision::F64
    } else {
        Precision::F32
    };

    // u128 so hostile headers cannot overflow the size computation.
    let w = precision.width() as u128;
    let n = n_samples as u128;
    let need = HEADER_LEN as u128
        + (n_classes as u128 * d_out as u128 + n * d_in as u128) * w
        + n * 4 * if has_groups { 2 } else { 1 };
    let have = bytes.len() as u128;
    if have < need {
        return Err(Error::Truncated {
            expected: need.min(u64::MAX as u128) as u64,
            actual: have as u64,
        });
    }
    if have > need {
        return Err(Error::TrailingBytes((have - need) as u64));
    }
    // `need` fits in memory now, so every count below fits in usize.
    let (n, d_in, d_out, n_classes) = (
        n_samples as usize,
        d_in as usize,
        d_out as usize,
        n_classes as usize,
    );

    let anchors = Matrix::from_vec(n_classes, d_out, c.floats(n_classes * d_out, precision))?;
    let anchors = ClassAnchors::from_normalized(anchors)?;
    let features = Matrix::from_vec(n, d_in, c.floats(n * d_in, precision))?;
    let labels: Vec<u32> = (0..n).map(|_| c.u32()).collect();
    let groups = has_groups.then(|| (0..n).map(|_| c.u32()).collect::<Vec<u32>>());
    let ds = EmbeddingDataset::new(features, labels, groups, anchors)?;
    Ok(EmbeddingDataset { precision, ..ds })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the container and, when the metadata is non-empty, its sidecar.
pub fn write_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ds)?;
    std::fs::write(path, bytes)?;
    let side = sidecar_path(path);
    if !ds.meta.is_empty() {
        std::fs::write(side, ds.meta.to_text()?)?;
    } else if side.exists() {
        std::fs::remove_file(side)?;
    }
    Ok(())
}

/// Reads the container and its sidecar, if one exists.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let mut ds = decode(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        ds.meta = DatasetMeta::parse(&std::fs::read_to_string(side)?)?;
        if let (Some(n_groups), Some(g)) = (ds.meta.n_groups, ds.groups()) {
            if let Some((index, &group)) = g.iter().enumerate().find(|(_, &x)| x as usize >= n_groups) {
                return Err(Error::GroupOutOfRange {
                    index,
                    group,
                    n_groups,
                });
            }
        }
    }
    Ok(ds)
}
