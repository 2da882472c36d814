//! Synthetic two-domain scenes for desk-scale experiments.
//!
//! Source frames are street-like scenes seen by a forward-facing sensor
//! (azimuth within +-45 degrees): a ground plane, a few boxes at short
//! range and a few poles at long range. Target frames are copies of the
//! source frames with a domain shift applied: a fixed z-rotation, random
//! subsampling and Gaussian coordinate noise.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use crate::error::{Error, Result};
use crate::kitti::RemapTable;
use crate::rng::Rng;
use crate::trainer::TrainConfig;
use crate::types::{ClassSet, Dataset, Frame, Label, LabelKind, LabelSet, PointCloud};

pub const GROUND: u16 = 0;
pub const BOX: u16 = 1;
pub const POLE: u16 = 2;

const SECTOR_HALF_WIDTH: f64 = FRAC_PI_4;
const GROUND_RANGE: (f64, f64) = (2.0, 16.0);
const BOX_CENTER_RANGE: (f64, f64) = (4.0, 7.0);
const POLE_CENTER_RANGE: (f64, f64) = (11.0, 15.0);
const OBJECT_MIN_Z: f64 = 0.2;
const GROUND_SIGMA: f64 = 0.01;
const OUTLIER_FRACTION: f64 = 0.01;

/// `ground, box` for 2 classes, `ground, box, pole` for 3.
pub fn toy_classes(n_classes: usize) -> Result<ClassSet> {
    match n_classes {
        2 => ClassSet::new(["ground", "box"]),
        3 => ClassSet::new(["ground", "box", "pole"]),
        _ => Err(Error::Config(format!("toy data has 2 or 3 classes, not {n_classes}"))),
    }
}

/// Raw label ids are class id + 1; raw 0 marks unlabeled outliers.
pub fn toy_remap(n_classes: usize) -> Result<RemapTable> {
    toy_classes(n_classes).map(RemapTable::offset_by_one)
}

/// Training settings that suit the 3-class toy data: a narrow network, a
/// large supervised step (Dice gradients are small) and a short adaptation.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        hidden: 32,
        input_scale: 0.1,
        batch_size: 4,
        pretrain_epochs: 20,
        pretrain_lr: Some(1.0),
        epochs: 3,
        lr: 0.03,
        ..TrainConfig::default()
    }
}

/// [`toy_train_config`] adjusted for `n_classes`. Plain SGD on the 2-class
/// scenes stalls with one class predicted everywhere unless the inputs are
/// scaled up and the steps are smaller.
pub fn toy_train_config_for(n_classes: usize) -> TrainConfig {
    match n_classes {
        2 => TrainConfig {
            input_scale: 0.3,
            batch_size: 1,
            pretrain_epochs: 25,
            pretrain_lr: Some(0.3),
            ..toy_train_config()
        },
        _ => toy_train_config(),
    }
}

/// Domain shift applied to target frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    /// z-rotation in radians.
    pub rotate: f64,
    /// Fraction of points kept.
    pub subsample: f64,
    /// Coordinate noise standard deviation in meters.
    pub noise: f64,
}

impl ShiftSpec {
    pub const DEFAULT_ROTATE: f64 = FRAC_PI_2;
    pub const DEFAULT_SUBSAMPLE: f64 = 0.7;
    pub const DEFAULT_NOISE: f64 = 0.03;

    pub fn none() -> Self {
        Self { rotate: 0.0, subsample: 1.0, noise: 0.0 }
    }

    pub fn combo() -> Self {
        Self { rotate: Self::DEFAULT_ROTATE, subsample: Self::DEFAULT_SUBSAMPLE, noise: Self::DEFAULT_NOISE }
    }

    /// Comma-separated terms: `rotate`, `subsample`, `noise`, `combo` or
    /// `none`, each optionally with `=<magnitude>` (`combo` takes none).
    /// Later terms override earlier ones, e.g. `combo,rotate=1.0`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = Self::none();
        let mut any = false;
        for term in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            any = true;
            let (key, value) = match term.split_once('=') {
                Some((k, v)) => {
                    let v: f64 =
                        v.trim().parse().map_err(|_| Error::Config(format!("bad magnitude in shift term {term:?}")))?;
                    (k.trim(), Some(v))
                }
                None => (term, None),
            };
            match (key, value) {
                ("combo", None) => out = Self::combo(),
                ("none", None) => out = Self::none(),
                ("rotate", v) => out.rotate = v.unwrap_or(Self::DEFAULT_ROTATE),
                ("subsample", v) => out.subsample = v.unwrap_or(Self::DEFAULT_SUBSAMPLE),
                ("noise", v) => out.noise = v.unwrap_or(Self::DEFAULT_NOISE),
                _ => return Err(Error::Config(format!("unknown shift term {term:?}"))),
            }
        }
        if !any {
            return Err(Error::Config("empty shift spec".into()));
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotate.is_finite() {
            return Err(Error::Config("rotation must be finite".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config(format!("subsample {} must lie in (0, 1]", self.subsample)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub n_frames: usize,
    pub n_points: usize,
    /// 2 (no poles) or 3.
    pub n_classes: usize,
    /// Held-out target frames for validation.
    pub n_val_frames: usize,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(n_frames: usize, n_points: usize, shift: ShiftSpec, seed: u64) -> Self {
        Self { n_frames, n_points, n_classes: 3, n_val_frames: (n_frames / 4).max(1), shift, seed }
    }
}

#[derive(Debug, Clone)]
pub struct ToyPair {
    pub classes: ClassSet,
    pub source: Dataset,
    /// Shifted copies of the source frames; labels kept so supervised runs
    /// and evaluation can use them.
    pub target: Dataset,
    pub target_val: Dataset,
}

fn sector_azimuth(rng: &mut Rng, margin: f64) -> f64 {
    rng.uniform(-SECTOR_HALF_WIDTH + margin, SECTOR_HALF_WIDTH - margin)
}

fn polar(range: f64, az: f64) -> (f64, f64) {
    (range * az.cos(), range * az.sin())
}

struct SceneBuilder {
    coords: Vec<[f32; 3]>,
    labels: Vec<Label>,
}

impl SceneBuilder {
    fn push(&mut self, p: [f64; 3], label: Label) {
        self.coords.push(p.map(|v| v as f32));
        self.labels.push(label);
    }
}

/// Splits `total` into `parts` near-equal counts.
fn split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// One unshifted scene with exactly `n_points` points. With 2 classes the
/// poles are left out and boxes take their share of points.
pub fn scene(n_points: usize, n_classes: usize, rng: &mut Rng) -> (PointCloud, LabelSet) {
    let with_poles = n_classes > 2;
    let n_outliers = (n_points as f64 * OUTLIER_FRACTION).round() as usize;
    let box_share = if with_poles { 0.3 } else { 0.5 };
    let n_boxes_pts = (n_points as f64 * box_share).round() as usize;
    let n_poles_pts = if with_poles { (n_points as f64 * 0.2).round() as usize } else { 0 };
    let n_ground = n_points - n_outliers - n_boxes_pts - n_poles_pts;
    let mut b = SceneBuilder { coords: Vec::with_capacity(n_points), labels: Vec::with_capacity(n_points) };

    for _ in 0..n_ground {
        let (x, y) = polar(rng.uniform(GROUND_RANGE.0, GROUND_RANGE.1), sector_azimuth(rng, 0.0));
        b.push([x, y, GROUND_SIGMA * rng.normal()], Label::class(GROUND));
    }

    let n_boxes = 2 + rng.index(3);
    for count in split(n_boxes_pts, n_boxes) {
        let (cx, cy) = polar(rng.uniform(BOX_CENTER_RANGE.0, BOX_CENTER_RANGE.1), sector_azimuth(rng, 0.15));
        let hx = rng.uniform(0.6, 1.4);
        let hy = rng.uniform(0.6, 1.4);
        let h = rng.uniform(1.0, 1.6);
        let (s, c) = rng.uniform(0.0, TAU).sin_cos();
        let side_x = 2.0 * hx * (h - OBJECT_MIN_Z);
        let side_y = 2.0 * hy * (h - OBJECT_MIN_Z);
        let top = 4.0 * hx * hy;
        let total = 2.0 * side_x + 2.0 * side_y + top;
        for _ in 0..count {
            let pick = rng.uniform(0.0, total);
            let (u, v, z) = if pick < 2.0 * side_x {
                let sign = if pick < side_x { 1.0 } else { -1.0 };
                (rng.uniform(-hx, hx), sign * hy, rng.uniform(OBJECT_MIN_Z, h))
            } else if pick < 2.0 * (side_x + side_y) {
                let sign = if pick < 2.0 * side_x + side_y { 1.0 } else { -1.0 };
                (sign * hx, rng.uniform(-hy, hy), rng.uniform(OBJECT_MIN_Z, h))
            } else {
                (rng.uniform(-hx, hx), rng.uniform(-hy, hy), h)
            };
            b.push([cx + c * u - s * v, cy + s * u + c * v, z], Label::class(BOX));
        }
    }

    let n_poles = if with_poles { 3 + rng.index(3) } else { 0 };
    for count in split(n_poles_pts, n_poles) {
        let (cx, cy) = polar(rng.uniform(POLE_CENTER_RANGE.0, POLE_CENTER_RANGE.1), sector_azimuth(rng, 0.05));
        let h = rng.uniform(2.5, 4.5);
        let radius = 0.12;
        for _ in 0..count {
            let a = rng.uniform(0.0, TAU);
            b.push([cx + radius * a.cos(), cy + radius * a.sin(), rng.uniform(OBJECT_MIN_Z, h)], Label::class(POLE));
        }
    }

    for _ in 0..n_outliers {
        let (x, y) = polar(rng.uniform(GROUND_RANGE.0, GROUND_RANGE.1), sector_azimuth(rng, 0.0));
        b.push([x, y, rng.uniform(0.0, 3.0)], Label::IGNORE);
    }

    // Interleave classes so clouds are not sorted by label.
    let mut order: Vec<usize> = (0..b.coords.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.index(i + 1));
    }
    let coords: Vec<[f32; 3]> = order.iter().map(|&i| b.coords[i]).collect();
    let labels = order.iter().map(|&i| b.labels[i]).collect();
    let intensity = (0..coords.len()).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    (
        PointCloud::new(coords, Some(intensity)).expect("finite by construction"),
        LabelSet::new(labels, LabelKind::GroundTruth),
    )
}

/// Applies `shift` to a labeled cloud: rotation, then subsampling to
/// `round(subsample * N)` points, then noise.
pub fn apply_shift(cloud: &PointCloud, labels: &LabelSet, shift: &ShiftSpec, rng: &mut Rng) -> (PointCloud, LabelSet) {
    let n = cloud.len();
    let keep = ((shift.subsample * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    let (s, c) = shift.rotate.sin_cos();
    let mut coords = Vec::with_capacity(keep);
    let mut intensity = Vec::with_capacity(keep);
    for &i in &idx {
        let [x, y, z] = cloud.coords()[i].map(f64::from);
        let mut p = [c * x - s * y, s * x + c * y, z];
        if shift.noise > 0.0 {
            for v in &mut p {
                *v += shift.noise * rng.normal();
            }
        }
        coords.push(p.map(|v| v as f32));
        intensity.push(cloud.intensity_at(i));
    }
    let labels = LabelSet::new(idx.iter().map(|&i| labels.labels()[i]).collect(), labels.kind());
    (PointCloud::new(coords, Some(intensity)).expect("finite by construction"), labels)
}

fn frame_name(i: usize) -> String {
    format!("{i:06}")
}

/// Generates source, shifted target and held-out target frames.
pub fn generate(cfg: &ToyConfig) -> Result<ToyPair> {
    cfg.shift.validate()?;
    let classes = toy_classes(cfg.n_classes)?;
    if cfg.n_frames == 0 || cfg.n_points == 0 {
        return Err(Error::Config("toy data needs at least one frame and one point".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut source = Vec::with_capacity(cfg.n_frames);
    let mut target = Vec::with_capacity(cfg.n_frames);
    for i in 0..cfg.n_frames {
        let (cloud, labels) = scene(cfg.n_points, cfg.n_classes, &mut root.derive(i as u64));
        let (t_cloud, t_labels) = apply_shift(&cloud, &labels, &cfg.shift, &mut root.derive((1 << 32) + i as u64));
        source.push(Frame::new(frame_name(i), cloud, Some(labels))?);
        target.push(Frame::new(frame_name(i), t_cloud, Some(t_labels))?);
    }
    // Held-out scenes, shifted like the target.
    let val = (0..cfg.n_val_frames)
        .map(|i| {
            let mut rng = root.derive((2 << 32) + i as u64);
            let (cloud, labels) = scene(cfg.n_points, cfg.n_classes, &mut rng);
            let (cloud, labels) = apply_shift(&cloud, &labels, &cfg.shift, &mut rng);
            Frame::new(frame_name(i), cloud, Some(labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyPair {
        classes,
        source: Dataset::labeled(source)?,
        target: Dataset::labeled(target)?,
        target_val: Dataset::labeled(val)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        assert_eq!(ShiftSpec::parse("combo").unwrap(), ShiftSpec::combo());
        let s = ShiftSpec::parse("rotate=0.5").unwrap();
        assert_eq!((s.rotate, s.subsample, s.noise), (0.5, 1.0, 0.0));
        let s = ShiftSpec::parse("combo, noise=0.1").unwrap();
        assert_eq!(s.noise, 0.1);
        assert_eq!(s.subsample, 0.7);
        assert!(ShiftSpec::parse("warp").is_err());
        assert!(ShiftSpec::parse("subsample=0").is_err());
        assert!(ShiftSpec::parse("").is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = ToyConfig::new(3, 500, ShiftSpec::combo(), 42);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        let c = generate(&ToyConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn target_point_count_follows_subsample() {
        let cfg = ToyConfig::new(2, 1000, ShiftSpec::combo(), 1);
        let pair = generate(&cfg).unwrap();
        for f in pair.source.frames() {
            assert_eq!(f.cloud.len(), 1000);
        }
        for f in pair.target.frames() {
            assert_eq!(f.cloud.len(), 700);
            assert_eq!(f.labels.as_ref().unwrap().len(), 700);
        }
    }

    #[test]
    fn two_class_variant() {
        let cfg = ToyConfig { n_classes: 2, ..ToyConfig::new(2, 800, ShiftSpec::none(), 3) };
        let pair = generate(&cfg).unwrap();
        assert_eq!(pair.classes.len(), 2);
        for f in pair.source.frames() {
            assert_eq!(f.labels.as_ref().unwrap().present_classes(), vec![GROUND, BOX]);
        }
        assert!(generate(&ToyConfig { n_classes: 4, ..cfg }).is_err());
    }

    #[test]
    fn every_class_present_in_each_frame() {
        let pair = generate(&ToyConfig::new(4, 2048, ShiftSpec::combo(), 5)).unwrap();
        for f in pair.source.frames().iter().chain(pair.target.frames()) {
            assert_eq!(f.labels.as_ref().unwrap().present_classes(), vec![GROUND, BOX, POLE]);
        }
    }
}
