//! SemanticKITTI-layout scan and label files.
//!
//! Scans are little-endian `f32` quadruples `(x, y, z, intensity)`; label
//! files hold one little-endian `u32` per point with the semantic id in the
//! low 16 bits and the instance id in the high 16 bits.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{ClassFrequencyDistribution, ClassSet, Dataset, Frame, Label, LabelKind, LabelSet, PointCloud};

const POINT_BYTES: usize = 16;
const LABEL_BYTES: usize = 4;
const CHUNK_POINTS: usize = 4096;

pub const SCAN_DIR: &str = "scans";
pub const LABEL_DIR: &str = "labels";
pub const SCAN_EXT: &str = "bin";
pub const LABEL_EXT: &str = "label";

/// Raw semantic id to class mapping.
///
/// Text form, one entry per line, `#` starts a comment:
///
/// ```text
/// classes = ground, box, pole
/// 0 = IGNORE
/// 1 = ground
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct RemapTable {
    classes: ClassSet,
    map: BTreeMap<u16, Label>,
}

impl RemapTable {
    pub fn new(classes: ClassSet, map: BTreeMap<u16, Label>) -> Result<Self> {
        if let Some((raw, l)) = map.iter().find(|(_, &l)| !l.is_ignore() && !classes.contains(l)) {
            return Err(Error::Remap(format!("raw id {raw} maps to unknown class {l:?}")));
        }
        Ok(Self { classes, map })
    }

    /// Raw id `i + 1` maps to class `i`; raw 0 is IGNORE.
    pub fn offset_by_one(classes: ClassSet) -> Self {
        let mut map: BTreeMap<u16, Label> = classes.ids().map(|c| (c + 1, Label::class(c))).collect();
        map.insert(0, Label::IGNORE);
        Self { classes, map }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = None;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("remap line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "classes" {
                classes = Some(ClassSet::new(value.split(',').map(str::trim).filter(|s| !s.is_empty()))?);
                continue;
            }
            let raw: u16 =
                key.parse().map_err(|_| Error::Config(format!("remap line {}: bad raw id {key:?}", lineno + 1)))?;
            entries.push((lineno + 1, raw, value.to_string()));
        }
        let classes = classes.ok_or_else(|| Error::Config("remap table lacks a `classes =` line".into()))?;
        let mut map = BTreeMap::new();
        for (lineno, raw, value) in entries {
            let label = if value.eq_ignore_ascii_case("ignore") {
                Label::IGNORE
            } else {
                Label::class(
                    classes
                        .id_of(&value)
                        .ok_or_else(|| Error::Config(format!("remap line {lineno}: unknown class {value:?}")))?,
                )
            };
            if map.insert(raw, label).is_some() {
                return Err(Error::Config(format!("remap line {lineno}: duplicate raw id {raw}")));
            }
        }
        Self::new(classes, map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("classes = {}\n", self.classes.names().join(", "));
        for (raw, label) in &self.map {
            let v = match label.id() {
                Some(id) => self.classes.name(id).unwrap(),
                None => "IGNORE",
            };
            out.push_str(&format!("{raw} = {v}\n"));
        }
        out
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn lookup(&self, raw: u16) -> Result<Label> {
        self.map.get(&raw).copied().ok_or_else(|| Error::Remap(format!("raw id {raw} is not in the remap table")))
    }

    /// Class to raw id; the smallest raw id wins when several map to a class.
    pub fn inverse(&self) -> InverseRemap {
        let mut map = HashMap::new();
        for (&raw, &label) in &self.map {
            map.entry(label).or_insert(raw);
        }
        InverseRemap { map }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InverseRemap {
    map: HashMap<Label, u16>,
}

impl InverseRemap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, u16)>) -> Self {
        Self { map: pairs.into_iter().collect() }
    }

    pub fn lookup(&self, label: Label) -> Result<u16> {
        self.map.get(&label).copied().ok_or_else(|| Error::Remap(format!("no raw id for {label:?}")))
    }
}

fn check_size(path: &Path, unit: usize) -> Result<(File, usize)> {
    let file = File::open(path)?;
    let len = file.metadata()?.len() as usize;
    if !len.is_multiple_of(unit) {
        return Err(Error::Format(format!("{}: size {len} is not a multiple of {unit} bytes", path.display())));
    }
    Ok((file, len / unit))
}

fn read_chunks(mut file: File, unit: usize, count: usize, mut f: impl FnMut(usize, &[u8]) -> Result<()>) -> Result<()> {
    let mut buf = vec![0u8; unit * CHUNK_POINTS];
    let mut done = 0;
    while done < count {
        let n = (count - done).min(CHUNK_POINTS);
        let bytes = &mut buf[..n * unit];
        file.read_exact(bytes)?;
        for (k, rec) in bytes.chunks_exact(unit).enumerate() {
            f(done + k, rec)?;
        }
        done += n;
    }
    Ok(())
}

fn f32_at(rec: &[u8], k: usize) -> f32 {
    f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap())
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let (file, n) = check_size(path, POINT_BYTES)?;
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    read_chunks(file, POINT_BYTES, n, |i, rec| {
        let p = [f32_at(rec, 0), f32_at(rec, 1), f32_at(rec, 2)];
        let it = f32_at(rec, 3);
        if p.iter().any(|v| !v.is_finite()) || !it.is_finite() {
            return Err(Error::Data { index: i, reason: format!("non-finite value in {}", path.display()) });
        }
        coords.push(p);
        intensity.push(it);
        Ok(())
    })?;
    PointCloud::new(coords, Some(intensity))
}

/// Writes a scan; points without intensity are written with intensity 0.
pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, p) in cloud.coords().iter().enumerate() {
        for v in p.iter().chain(std::iter::once(&cloud.intensity_at(i))) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw 32-bit label words, instance bits included.
pub fn read_label_words(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let (file, n) = check_size(path.as_ref(), LABEL_BYTES)?;
    let mut words = Vec::with_capacity(n);
    read_chunks(file, LABEL_BYTES, n, |_, rec| {
        words.push(u32::from_le_bytes(rec.try_into().unwrap()));
        Ok(())
    })?;
    Ok(words)
}

pub fn read_labels(path: impl AsRef<Path>, remap: &RemapTable) -> Result<LabelSet> {
    let labels =
        read_label_words(path)?.into_iter().map(|w| remap.lookup((w & 0xFFFF) as u16)).collect::<Result<Vec<_>>>()?;
    Ok(LabelSet::new(labels, LabelKind::GroundTruth))
}

/// Writes labels with instance id 0.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelSet, inverse: &InverseRemap) -> Result<()> {
    let words = labels.labels().iter().map(|&l| inverse.lookup(l)).collect::<Result<Vec<_>>>()?;
    let mut w = BufWriter::new(File::create(path)?);
    for raw in words {
        w.write_all(&u32::from(raw).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a scan and, optionally, its label file, checking alignment.
pub fn read_frame(
    name: impl Into<String>,
    scan: impl AsRef<Path>,
    labels: Option<(&Path, &RemapTable)>,
) -> Result<Frame> {
    let cloud = read_scan(scan)?;
    let labels = labels.map(|(p, r)| read_labels(p, r)).transpose()?;
    Frame::new(name, cloud, labels)
}

pub fn scan_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(SCAN_DIR).join(format!("{name}.{SCAN_EXT}"))
}

pub fn label_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(LABEL_DIR).join(format!("{name}.{LABEL_EXT}"))
}

/// Sorted frame names found under `dir/scans`.
pub fn list_frames(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir.join(SCAN_DIR))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(SCAN_EXT) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every frame under `dir`; labels are read only when `remap` is given.
pub fn load_dataset(dir: impl AsRef<Path>, remap: Option<&RemapTable>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let frames = list_frames(dir)?
        .into_iter()
        .map(|name| {
            let lp = label_path(dir, &name);
            read_frame(name.clone(), scan_path(dir, &name), remap.map(|r| (lp.as_path(), r)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(frames))
}

pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset, inverse: &InverseRemap) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(SCAN_DIR))?;
    fs::create_dir_all(dir.join(LABEL_DIR))?;
    for f in dataset.frames() {
        write_scan(scan_path(dir, &f.name), &f.cloud)?;
        if let Some(l) = &f.labels {
            write_labels(label_path(dir, &f.name), l, inverse)?;
        }
    }
    Ok(())
}

/// Per-class point frequency over a fully labeled dataset, IGNORE excluded.
pub fn compute_class_frequency(dataset: &Dataset, classes: &ClassSet) -> Result<ClassFrequencyDistribution> {
    let mut counts = vec![0u64; classes.len()];
    for f in dataset.frames() {
        let labels = f.labels.as_ref().ok_or_else(|| Error::Label(format!("frame {} has no labels", f.name)))?;
        for &l in labels.labels() {
            if let Some(id) = l.id() {
                *counts
                    .get_mut(id as usize)
                    .ok_or_else(|| Error::Label(format!("label {l:?} in frame {} outside the class set", f.name)))? +=
                    1;
            }
        }
    }
    ClassFrequencyDistribution::from_counts(&counts)
}
