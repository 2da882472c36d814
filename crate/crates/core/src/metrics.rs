//! Confusion matrix, per-class IoU and mIoU.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::{ClassSet, LabelSet};

/// `counts[pred][actual]` over points whose ground truth is not IGNORE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { n: n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, pred: usize, actual: usize) -> u64 {
        self.counts[pred * self.n + actual]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, predictions: &LabelSet, truth: &LabelSet) -> Result<()> {
        if predictions.len() != truth.len() {
            return Err(Error::Alignment(format!(
                "{} predictions for {} ground-truth labels",
                predictions.len(),
                truth.len()
            )));
        }
        for (i, (p, t)) in predictions.labels().iter().zip(truth.labels()).enumerate() {
            let Some(t) = t.id() else { continue };
            let p = p.id().ok_or_else(|| Error::Label(format!("prediction {i} is IGNORE")))?;
            let (p, t) = (p as usize, t as usize);
            if p >= self.n || t >= self.n {
                return Err(Error::Label(format!("class id at point {i} outside {} classes", self.n)));
            }
            self.counts[p * self.n + t] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!("{} vs {} classes", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; classes with `TP + FP + FN = 0` are `None` and left
    /// out of the mean.
    pub fn iou(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let fp: u64 = (0..self.n).filter(|&a| a != c).map(|a| self.get(c, a)).sum();
                let fn_: u64 = (0..self.n).filter(|&p| p != c).map(|p| self.get(p, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        IouReport { per_class, miou }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

impl IouReport {
    /// mIoU, or 0 when no class was scored.
    pub fn miou_or_zero(&self) -> f64 {
        self.miou.unwrap_or(0.0)
    }

    pub fn to_table(&self, classes: &ClassSet) -> String {
        let width = classes.names().iter().map(String::len).max().unwrap_or(4).max(5);
        let mut out = format!("{:<width$}  {:>7}\n", "class", "IoU");
        for (c, v) in self.per_class.iter().enumerate() {
            let name = classes.name(c as u16).unwrap_or("?");
            match v {
                Some(v) => writeln!(out, "{name:<width$}  {:>7.2}", v * 100.0).unwrap(),
                None => writeln!(out, "{name:<width$}  {:>7}", "-").unwrap(),
            }
        }
        match self.miou {
            Some(m) => writeln!(out, "{:<width$}  {:>7.2}", "mIoU", m * 100.0).unwrap(),
            None => writeln!(out, "{:<width$}  {:>7}", "mIoU", "-").unwrap(),
        }
        out
    }

    /// `iou.<class>=<value>` lines plus `miou=<value>`; unscored classes are
    /// written as `nan`.
    pub fn to_key_values(&self, classes: &ClassSet) -> String {
        let mut out = String::new();
        for (c, v) in self.per_class.iter().enumerate() {
            let name = classes.name(c as u16).unwrap_or("?");
            writeln!(out, "iou.{name}={}", v.map_or("nan".to_string(), |v| format!("{v:.6}"))).unwrap();
        }
        writeln!(out, "miou={}", self.miou.map_or("nan".to_string(), |v| format!("{v:.6}"))).unwrap();
        out
    }
}
