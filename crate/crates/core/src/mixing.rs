//! Compositional mixing of semantic patches across domains.
//!
//! Each selected class patch is augmented on its own (z-rotation, per-axis
//! scaling, random downsampling), the patches are concatenated in front of
//! the other domain's full cloud, and one global rigid-plus-scale transform
//! is applied to the result. Labels travel with their points.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::selection::PatchSelection;
use crate::types::{Label, LabelKind, LabelSet, LabeledCloud, PointCloud};

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        rng.uniform(self.lo, self.hi)
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::Config(format!("{name} range [{}, {}] is invalid", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalAugConfig {
    /// Rotation about z, radians.
    pub rotation: Interval,
    /// Scale factor drawn independently per axis.
    pub scale: Interval,
    /// Fraction of patch points kept by downsampling.
    pub keep: f64,
}

impl Default for LocalAugConfig {
    fn default() -> Self {
        Self { rotation: Interval::new(-FRAC_PI_2, FRAC_PI_2), scale: Interval::new(0.95, 1.05), keep: 0.5 }
    }
}

impl LocalAugConfig {
    pub fn identity() -> Self {
        Self { rotation: Interval::point(0.0), scale: Interval::point(1.0), keep: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation.check("local rotation")?;
        self.scale.check("local scale")?;
        if self.rotation.lo < -PI || self.rotation.hi > PI {
            return Err(Error::Config("local rotation must lie within [-pi, pi]".into()));
        }
        if self.scale.lo <= 0.0 {
            return Err(Error::Config("local scale must be positive".into()));
        }
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Config(format!("keep fraction {} must lie in (0, 1]", self.keep)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalAugConfig {
    pub rotation: Interval,
    /// Translation in meters, drawn independently per axis.
    pub translation: Interval,
    pub scale: Interval,
}

impl Default for GlobalAugConfig {
    fn default() -> Self {
        Self {
            rotation: Interval::new(-PI, PI),
            translation: Interval::new(-0.2, 0.2),
            scale: Interval::new(0.95, 1.05),
        }
    }
}

impl GlobalAugConfig {
    pub fn identity() -> Self {
        Self { rotation: Interval::point(0.0), translation: Interval::point(0.0), scale: Interval::point(1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation.check("global rotation")?;
        self.translation.check("global translation")?;
        self.scale.check("global scale")
    }
}

/// Local transform parameters drawn for one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTransform {
    pub angle: f64,
    pub scale: [f64; 3],
}

impl LocalTransform {
    pub fn sample(cfg: &LocalAugConfig, rng: &mut Rng) -> Self {
        let angle = cfg.rotation.sample(rng);
        let scale = [cfg.scale.sample(rng), cfg.scale.sample(rng), cfg.scale.sample(rng)];
        Self { angle, scale }
    }

    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let [x, y, z] = p.map(f64::from);
        let (s, c) = self.angle.sin_cos();
        [((c * x - s * y) * self.scale[0]) as f32, ((s * x + c * y) * self.scale[1]) as f32, (z * self.scale[2]) as f32]
    }
}

/// Global transform parameters drawn once per mixed cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform {
    pub angle: f64,
    pub translation: [f64; 3],
    pub scale: [f64; 3],
}

impl GlobalTransform {
    pub fn sample(cfg: &GlobalAugConfig, rng: &mut Rng) -> Self {
        let angle = cfg.rotation.sample(rng);
        let translation = [cfg.translation.sample(rng), cfg.translation.sample(rng), cfg.translation.sample(rng)];
        let scale = [cfg.scale.sample(rng), cfg.scale.sample(rng), cfg.scale.sample(rng)];
        Self { angle, translation, scale }
    }

    /// Rotate about z, scale per axis, then translate.
    pub fn apply(&self, p: [f32; 3]) -> [f32; 3] {
        let [x, y, z] = p.map(f64::from);
        let (s, c) = self.angle.sin_cos();
        [
            ((c * x - s * y) * self.scale[0] + self.translation[0]) as f32,
            ((s * x + c * y) * self.scale[1] + self.translation[1]) as f32,
            (z * self.scale[2] + self.translation[2]) as f32,
        ]
    }
}

/// `round_half_up(keep * n)`, at most `n`.
pub fn kept_count(keep: f64, n: usize) -> usize {
    ((keep * n as f64 + 0.5).floor() as usize).min(n)
}

/// Augments one single-class patch: z-rotation, per-axis scaling, then
/// downsampling to `round(keep * N)` points (original order preserved).
/// Every call draws fresh parameters from `rng`.
pub fn local_augment_h(patch: &LabeledCloud, cfg: &LocalAugConfig, rng: &mut Rng) -> Result<LabeledCloud> {
    if patch.is_empty() {
        return Ok(patch.clone());
    }
    let first = patch.labels().labels()[0];
    if patch.labels().labels().iter().any(|&l| l != first) {
        return Err(Error::Selection("local augmentation expects a single-class patch".into()));
    }
    let t = LocalTransform::sample(cfg, rng);
    let n = patch.len();
    let keep = kept_count(cfg.keep, n);
    let mut idx =
        if keep == n { (0..n).collect::<Vec<_>>() } else { rand::seq::index::sample(rng, n, keep).into_vec() };
    idx.sort_unstable();
    Ok(patch.select_indices(&idx).map_coords(|p| t.apply(p)))
}

/// One rigid z-rotation, per-axis scaling and translation applied to every
/// point; labels pass through unchanged.
pub fn global_augment_r(cloud: &LabeledCloud, cfg: &GlobalAugConfig, rng: &mut Rng) -> LabeledCloud {
    let t = GlobalTransform::sample(cfg, rng);
    cloud.map_coords(|p| t.apply(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    SourcePatch,
    TargetPatch,
    SupervisedPatch,
    Base,
}

/// A mixed cloud, its labels, and where each point came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub cloud: PointCloud,
    pub labels: LabelSet,
    pub provenance: Vec<Provenance>,
}

impl MixedSample {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == tag).count()
    }

    /// True when no point carries a usable label.
    pub fn is_degenerate(&self) -> bool {
        self.labels.labeled_count() == 0
    }
}

/// Augmentation settings used when composing a mixed sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MixConfig {
    pub local: LocalAugConfig,
    pub global: GlobalAugConfig,
}

/// Labeled target frame with the classes picked from it.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedPatches<'a> {
    pub frame: &'a LabeledCloud,
    pub selection: &'a PatchSelection,
}

fn check_selection(frame: &LabeledCloud, sel: &PatchSelection, what: &str) -> Result<()> {
    if sel.len() != frame.len() {
        return Err(Error::Alignment(format!(
            "{what} selection covers {} points but the frame has {}",
            sel.len(),
            frame.len()
        )));
    }
    for (i, (&m, &l)) in sel.mask().iter().zip(frame.labels().labels()).enumerate() {
        let chosen = l.id().is_some_and(|c| sel.chosen_classes().contains(&c));
        if m != chosen {
            return Err(Error::Selection(format!("{what} selection mask disagrees with its classes at point {i}")));
        }
    }
    Ok(())
}

/// Per-class patches of `frame` under `sel`, each passed through `h`.
fn augmented_patches(
    frame: &LabeledCloud,
    sel: &PatchSelection,
    cfg: &LocalAugConfig,
    rng: &mut Rng,
) -> Result<Vec<LabeledCloud>> {
    sel.chosen_classes()
        .iter()
        .map(|&c| {
            let target = Label::class(c);
            let mask: Vec<bool> =
                frame.labels().labels().iter().zip(sel.mask()).map(|(&l, &m)| m && l == target).collect();
            local_augment_h(&frame.subset(&mask)?, cfg, rng)
        })
        .collect()
}

fn compose(
    patch_source: (&LabeledCloud, &PatchSelection, Provenance),
    sup: Option<SupervisedPatches<'_>>,
    base: &LabeledCloud,
    cfg: &MixConfig,
    rng: &mut Rng,
) -> Result<MixedSample> {
    let (frame, sel, tag) = patch_source;
    // Drawn first so the supervised patches do not shift the other draws.
    let global = GlobalTransform::sample(&cfg.global, rng);
    let mut parts: Vec<(LabeledCloud, Provenance)> =
        augmented_patches(frame, sel, &cfg.local, rng)?.into_iter().map(|p| (p, tag)).collect();
    if let Some(s) = sup {
        check_selection(s.frame, s.selection, "supervised")?;
        parts.extend(
            augmented_patches(s.frame, s.selection, &cfg.local, rng)?
                .into_iter()
                .map(|p| (p, Provenance::SupervisedPatch)),
        );
    }
    parts.push((base.clone(), Provenance::Base));

    let mut mixed = LabeledCloud::empty(LabelKind::Mixed);
    let mut provenance = Vec::new();
    for (part, tag) in &parts {
        provenance.extend(std::iter::repeat_n(*tag, part.len()));
        mixed = mixed.concat(part).0;
    }
    let (cloud, labels) = mixed.map_coords(|p| global.apply(p)).into_parts();
    Ok(MixedSample { cloud, labels: labels.with_kind(LabelKind::Mixed), provenance })
}

/// Source patches (and supervised target patches) mixed into the target
/// cloud, which carries its pseudo-labels.
pub fn mix_s_to_t(
    source: &LabeledCloud,
    source_sel: &PatchSelection,
    target: &PointCloud,
    pseudo: &LabelSet,
    sup: Option<SupervisedPatches<'_>>,
    cfg: &MixConfig,
    rng: &mut Rng,
) -> Result<MixedSample> {
    check_selection(source, source_sel, "source")?;
    let base = LabeledCloud::new(target.clone(), pseudo.clone())?;
    compose((source, source_sel, Provenance::SourcePatch), sup, &base, cfg, rng)
}

/// Target pseudo-label patches (and supervised target patches) mixed into
/// the source cloud, which carries its ground truth.
pub fn mix_t_to_s(
    target: &PointCloud,
    pseudo: &LabelSet,
    pseudo_sel: &PatchSelection,
    source: &LabeledCloud,
    sup: Option<SupervisedPatches<'_>>,
    cfg: &MixConfig,
    rng: &mut Rng,
) -> Result<MixedSample> {
    let patches = LabeledCloud::new(target.clone(), pseudo.clone())?;
    check_selection(&patches, pseudo_sel, "pseudo-label")?;
    compose((&patches, pseudo_sel, Provenance::TargetPatch), sup, source, cfg, rng)
}
