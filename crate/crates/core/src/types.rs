//! Point clouds, label sets, class sets and datasets.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-point class label. `Label::IGNORE` marks unlabeled or filtered points;
/// it is never a member of a [`ClassSet`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(u16);

impl Label {
    pub const IGNORE: Label = Label(u16::MAX);

    /// Label for class `id`. Panics if `id` collides with the sentinel.
    pub fn class(id: u16) -> Label {
        assert_ne!(id, u16::MAX, "class id collides with IGNORE");
        Label(id)
    }

    pub fn id(self) -> Option<u16> {
        (!self.is_ignore()).then_some(self.0)
    }

    pub fn is_ignore(self) -> bool {
        self == Label::IGNORE
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.id() {
            Some(id) => write!(f, "Label({id})"),
            None => f.write_str("IGNORE"),
        }
    }
}

/// Ordered set of semantic classes. Class ids are the positions `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("class set is empty".into()));
        }
        if names.len() >= u16::MAX as usize {
            return Err(Error::Config("too many classes".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.eq_ignore_ascii_case("ignore") {
                return Err(Error::Config("IGNORE cannot be a class".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u16> + '_ {
        (0..self.names.len()).map(|i| i as u16)
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16)
    }

    pub fn contains(&self, label: Label) -> bool {
        label.id().is_some_and(|id| (id as usize) < self.names.len())
    }
}

/// N points with 3D coordinates in meters and optional intensity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    coords: Vec<[f32; 3]>,
    intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f32; 3]>, intensity: Option<Vec<f32>>) -> Result<Self> {
        if let Some(i) = &intensity {
            if i.len() != coords.len() {
                return Err(Error::Alignment(format!("{} intensities for {} points", i.len(), coords.len())));
            }
            if let Some(idx) = i.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data { index: idx, reason: "non-finite intensity".into() });
            }
        }
        if let Some(idx) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data { index: idx, reason: "non-finite coordinate".into() });
        }
        Ok(Self { coords, intensity })
    }

    pub fn from_coords(coords: Vec<[f32; 3]>) -> Result<Self> {
        Self::new(coords, None)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    /// Intensity of point `i`, or 0 when the cloud carries none.
    pub fn intensity_at(&self, i: usize) -> f32 {
        self.intensity.as_ref().map_or(0.0, |v| v[i])
    }

    /// Applies `f` to every coordinate. Panics if `f` produces a non-finite
    /// value, which no rigid/scale transform with finite parameters does.
    pub(crate) fn map_coords(&self, f: impl Fn([f32; 3]) -> [f32; 3]) -> PointCloud {
        let coords: Vec<[f32; 3]> = self.coords.iter().map(|&p| f(p)).collect();
        debug_assert!(coords.iter().flatten().all(|v| v.is_finite()));
        PointCloud { coords, intensity: self.intensity.clone() }
    }

    pub(crate) fn select_indices(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            intensity: self.intensity.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Concatenation of two clouds. Missing intensities are filled with 0
    /// when only one side carries them.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut coords = Vec::with_capacity(self.len() + other.len());
        coords.extend_from_slice(&self.coords);
        coords.extend_from_slice(&other.coords);
        let intensity = match (&self.intensity, &other.intensity) {
            (None, None) => None,
            _ => {
                let mut v = Vec::with_capacity(coords.len());
                v.extend((0..self.len()).map(|i| self.intensity_at(i)));
                v.extend((0..other.len()).map(|i| other.intensity_at(i)));
                Some(v)
            }
        };
        PointCloud { coords, intensity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelKind {
    GroundTruth,
    Pseudo,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<Label>,
    kind: LabelKind,
}

impl LabelSet {
    pub fn new(labels: Vec<Label>, kind: LabelKind) -> Self {
        Self { labels, kind }
    }

    pub fn empty(kind: LabelKind) -> Self {
        Self::new(Vec::new(), kind)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: LabelKind) -> Self {
        self.kind = kind;
        self
    }

    /// Checks every non-IGNORE label against `classes`.
    pub fn validate(&self, classes: &ClassSet) -> Result<()> {
        match self.labels.iter().position(|&l| !l.is_ignore() && !classes.contains(l)) {
            Some(i) => Err(Error::Label(format!("point {i} has label {:?} outside the class set", self.labels[i]))),
            None => Ok(()),
        }
    }

    /// Sorted distinct class ids present (IGNORE excluded).
    pub fn present_classes(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.labels.iter().filter_map(|l| l.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_ignore()).count()
    }
}

/// A point cloud with aligned per-point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    cloud: PointCloud,
    labels: LabelSet,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, labels: LabelSet) -> Result<Self> {
        if cloud.len() != labels.len() {
            return Err(Error::Alignment(format!("{} labels for {} points", labels.len(), cloud.len())));
        }
        Ok(Self { cloud, labels })
    }

    pub fn empty(kind: LabelKind) -> Self {
        Self { cloud: PointCloud::empty(), labels: LabelSet::empty(kind) }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn into_parts(self) -> (PointCloud, LabelSet) {
        (self.cloud, self.labels)
    }

    /// Appends `other` after `self`. Returns the result and the boundary
    /// index (the length of `self`).
    pub fn concat(&self, other: &LabeledCloud) -> (LabeledCloud, usize) {
        let boundary = self.len();
        let kind = if self.is_empty() {
            other.labels.kind
        } else if other.is_empty() || self.labels.kind == other.labels.kind {
            self.labels.kind
        } else {
            LabelKind::Mixed
        };
        let mut labels = Vec::with_capacity(self.len() + other.len());
        labels.extend_from_slice(&self.labels.labels);
        labels.extend_from_slice(&other.labels.labels);
        let out = LabeledCloud { cloud: self.cloud.concat(&other.cloud), labels: LabelSet::new(labels, kind) };
        (out, boundary)
    }

    /// Points where `mask` is true, in original order.
    pub fn subset(&self, mask: &[bool]) -> Result<LabeledCloud> {
        if mask.len() != self.len() {
            return Err(Error::Alignment(format!("mask of length {} for {} points", mask.len(), self.len())));
        }
        let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        Ok(self.select_indices(&idx))
    }

    /// Splits at `boundary` into `[0, boundary)` and `[boundary, len)`.
    pub fn split_at(&self, boundary: usize) -> Result<(LabeledCloud, LabeledCloud)> {
        if boundary > self.len() {
            return Err(Error::Alignment(format!("boundary {boundary} beyond {} points", self.len())));
        }
        let head: Vec<usize> = (0..boundary).collect();
        let tail: Vec<usize> = (boundary..self.len()).collect();
        Ok((self.select_indices(&head), self.select_indices(&tail)))
    }

    pub(crate) fn select_indices(&self, idx: &[usize]) -> LabeledCloud {
        LabeledCloud {
            cloud: self.cloud.select_indices(idx),
            labels: LabelSet::new(idx.iter().map(|&i| self.labels.labels[i]).collect(), self.labels.kind),
        }
    }

    pub(crate) fn map_coords(&self, f: impl Fn([f32; 3]) -> [f32; 3]) -> LabeledCloud {
        LabeledCloud { cloud: self.cloud.map_coords(f), labels: self.labels.clone() }
    }
}

/// `concat` on aligned cloud/label pairs.
pub fn concat(a: &LabeledCloud, b: &LabeledCloud) -> (LabeledCloud, usize) {
    a.concat(b)
}

/// `subset` on a cloud and its labels; fails on any length mismatch.
pub fn subset(cloud: &PointCloud, labels: &LabelSet, mask: &[bool]) -> Result<LabeledCloud> {
    LabeledCloud::new(cloud.clone(), labels.clone())?.subset(mask)
}

/// Normalized per-class point frequency over a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequencyDistribution {
    probs: Vec<f64>,
}

impl ClassFrequencyDistribution {
    /// Builds the distribution from raw per-class counts indexed by class id.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Statistics("no labeled points".into()));
        }
        Ok(Self { probs: counts.iter().map(|&c| c as f64 / total as f64).collect() })
    }

    pub fn prob(&self, class: u16) -> Option<f64> {
        self.probs.get(class as usize).copied()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

/// One scan and, when available, its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub name: String,
    pub cloud: PointCloud,
    pub labels: Option<LabelSet>,
}

impl Frame {
    pub fn new(name: impl Into<String>, cloud: PointCloud, labels: Option<LabelSet>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != cloud.len() {
                return Err(Error::Alignment(format!("{} labels for {} points", l.len(), cloud.len())));
            }
        }
        Ok(Self { name: name.into(), cloud, labels })
    }

    /// The labeled view of this frame, if labels exist.
    pub fn labeled(&self) -> Option<LabeledCloud> {
        self.labels.as_ref().map(|l| LabeledCloud::new(self.cloud.clone(), l.clone()).expect("aligned at construction"))
    }

    pub fn without_labels(&self) -> Frame {
        Frame { name: self.name.clone(), cloud: self.cloud.clone(), labels: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    frames: Vec<Frame>,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>) -> Self {
        Self { frames }
    }

    /// Like `new` but requires labels on every frame.
    pub fn labeled(frames: Vec<Frame>) -> Result<Self> {
        if let Some(f) = frames.iter().find(|f| f.labels.is_none()) {
            return Err(Error::Label(format!("frame {} has no labels", f.name)));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.frames.iter().all(|f| f.labels.is_some())
    }

    /// Copy with every label set dropped.
    pub fn unlabeled(&self) -> Dataset {
        Dataset::new(self.frames.iter().map(Frame::without_labels).collect())
    }

    /// Frames in `self` followed by frames in `other`.
    pub fn union(&self, other: &Dataset) -> Dataset {
        let mut frames = self.frames.clone();
        frames.extend_from_slice(&other.frames);
        Dataset::new(frames)
    }

    /// Subset of frames by name, in the order given.
    pub fn select(&self, names: &[String]) -> Result<Dataset> {
        names
            .iter()
            .map(|n| {
                self.frames
                    .iter()
                    .find(|f| &f.name == n)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("frame {n:?} not found")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Dataset::new)
    }
}
