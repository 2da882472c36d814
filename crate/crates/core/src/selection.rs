//! Semantic patch selection.
//!
//! Source and supervised-target patches are picked by weighted class
//! sampling, where rare classes of the source distribution are favored
//! (weight `1 - P(c)`). Target patches come from teacher predictions that
//! pass a confidence threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassProbs;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::types::{ClassFrequencyDistribution, Label, LabelKind, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Ratio of present source classes mixed per frame.
    pub alpha: f64,
    /// Ratio of present classes taken from a labeled target frame.
    pub mu: f64,
    /// Teacher confidence threshold for pseudo-labels.
    pub zeta: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { alpha: 0.5, mu: 0.5, zeta: 0.85 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("mu", self.mu)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::Config(format!("zeta = {} must lie in [0, 1]", self.zeta)));
        }
        Ok(())
    }
}

/// Chosen classes of one frame and the mask of their points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSelection {
    chosen: Vec<u16>,
    mask: Vec<bool>,
}

impl PatchSelection {
    /// Selection of `classes` over `labels`; the mask is derived, so it is
    /// true exactly on points carrying a chosen class.
    pub fn from_classes(labels: &LabelSet, classes: &[u16]) -> Self {
        let mut chosen = classes.to_vec();
        chosen.sort_unstable();
        chosen.dedup();
        let mask = labels.labels().iter().map(|l| l.id().is_some_and(|c| chosen.binary_search(&c).is_ok())).collect();
        Self { chosen, mask }
    }

    /// No classes over `n` points.
    pub fn empty(n: usize) -> Self {
        Self { chosen: Vec::new(), mask: vec![false; n] }
    }

    pub fn chosen_classes(&self) -> &[u16] {
        &self.chosen
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `max(1, round_half_up(ratio * present))`, capped at `present`.
pub fn selection_count(ratio: f64, present: usize) -> usize {
    ((ratio * present as f64 + 0.5).floor() as usize).clamp(1, present.max(1))
}

/// Per-class sampling weights.
#[derive(Debug, Clone, Copy)]
pub enum ClassWeighting<'a> {
    /// `1 - P(c)` from a class frequency distribution.
    InverseFrequency(&'a ClassFrequencyDistribution),
    Uniform,
}

impl ClassWeighting<'_> {
    fn weight(&self, class: u16) -> Result<f64> {
        match self {
            ClassWeighting::Uniform => Ok(1.0),
            ClassWeighting::InverseFrequency(d) => d
                .prob(class)
                .map(|p| (1.0 - p).max(0.0))
                .ok_or_else(|| Error::Selection(format!("class {class} missing from the frequency distribution"))),
        }
    }
}

/// Draws `count` distinct classes from `present` by sequential renormalized
/// weighted draws. Falls back to uniform over the remaining classes when
/// their weights sum to zero.
pub fn weighted_sample_without_replacement(present: &[u16], weights: &[f64], count: usize, rng: &mut Rng) -> Vec<u16> {
    let mut pool: Vec<(u16, f64)> = present.iter().copied().zip(weights.iter().copied()).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count && !pool.is_empty() {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let pick = if total > 0.0 {
            let target = rng.uniform(0.0, total);
            let mut acc = 0.0;
            let mut idx = pool.len() - 1;
            for (k, &(_, w)) in pool.iter().enumerate() {
                acc += w;
                if target < acc {
                    idx = k;
                    break;
                }
            }
            idx
        } else {
            rng.index(pool.len())
        };
        out.push(pool.remove(pick).0);
    }
    out.sort_unstable();
    out
}

/// Samples `max(1, round(ratio * k))` of the `k` classes present in
/// `labels` and masks their points.
pub fn select_classes(
    labels: &LabelSet,
    weighting: ClassWeighting<'_>,
    ratio: f64,
    rng: &mut Rng,
) -> Result<PatchSelection> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("selection ratio {ratio} must lie in (0, 1]")));
    }
    let present = labels.present_classes();
    if present.is_empty() {
        return Err(Error::Selection("no labeled points to select from".into()));
    }
    let weights = present.iter().map(|&c| weighting.weight(c)).collect::<Result<Vec<_>>>()?;
    let m = selection_count(ratio, present.len());
    let chosen = weighted_sample_without_replacement(&present, &weights, m, rng);
    Ok(PatchSelection::from_classes(labels, &chosen))
}

/// Source class selection weighted by `1 - P(c)`.
pub fn select_classes_f(
    labels: &LabelSet,
    dist: &ClassFrequencyDistribution,
    ratio: f64,
    rng: &mut Rng,
) -> Result<PatchSelection> {
    select_classes(labels, ClassWeighting::InverseFrequency(dist), ratio, rng)
}

/// Supervised-target selection. The weights come from the *source*
/// distribution, as for [`select_classes_f`].
pub fn select_supervised_target(
    labels: &LabelSet,
    dist: &ClassFrequencyDistribution,
    mu: f64,
    rng: &mut Rng,
) -> Result<PatchSelection> {
    select_classes_f(labels, dist, mu, rng)
}

/// Keeps the argmax class of points whose top probability is `>= zeta`;
/// every other point becomes IGNORE.
pub fn filter_pseudo_labels_g<T: Scalar>(probs: &ClassProbs<T>, zeta: f64) -> Result<LabelSet> {
    let mut labels = Vec::with_capacity(probs.len());
    for (i, row) in probs.rows().enumerate() {
        let mut sum = 0.0;
        for &p in row {
            let p = p.f64();
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(Error::ModelOutput { index: i, reason: format!("probability {p} outside [0, 1]") });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::ModelOutput { index: i, reason: format!("probabilities sum to {sum}") });
        }
        let (c, p) = probs.argmax(i);
        labels.push(if p.f64() >= zeta { Label::class(c as u16) } else { Label::IGNORE });
    }
    Ok(LabelSet::new(labels, LabelKind::Pseudo))
}

/// Fraction of points carrying a non-IGNORE label (0 for an empty set).
pub fn pseudo_label_coverage(labels: &LabelSet) -> f64 {
    if labels.is_empty() {
        0.0
    } else {
        labels.labeled_count() as f64 / labels.len() as f64
    }
}
