//! Source pretraining, supervised finetuning and teacher-student adaptation
//! with cross-domain mixed samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kitti::compute_class_frequency;
use crate::metrics::ConfusionMatrix;
use crate::mixing::{
    mix_s_to_t, mix_t_to_s, GlobalAugConfig, LocalAugConfig, MixConfig, MixedSample, SupervisedPatches,
};
use crate::model::{backward, forward, predict, DiceClasses, ModelParams, DEFAULT_HIDDEN, DEFAULT_INPUT_SCALE};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::selection::{filter_pseudo_labels_g, select_classes, ClassWeighting, PatchSelection, SelectionConfig};
use crate::types::{ClassSet, Dataset, LabeledCloud};

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_FINETUNE: u64 = 3;
const STREAM_ADAPT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
    #[default]
    Uda,
    Ssda,
}

/// Component switches for ablations. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub branch_s_to_t: bool,
    pub branch_t_to_s: bool,
    pub local_aug: bool,
    pub global_aug: bool,
    /// Off: the teacher is replaced by the student after every step.
    pub ema: bool,
    /// Off: classes are sampled uniformly instead of by `1 - P(c)`.
    pub weighted_f: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            branch_s_to_t: true,
            branch_t_to_s: true,
            local_aug: true,
            global_aug: true,
            ema: true,
            weighted_f: true,
        }
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 6] =
        ["branch_s_to_t", "branch_t_to_s", "local_aug", "global_aug", "ema", "weighted_f"];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "branch_s_to_t" | "s_to_t" => &mut self.branch_s_to_t,
            "branch_t_to_s" | "t_to_s" => &mut self.branch_t_to_s,
            "local_aug" => &mut self.local_aug,
            "global_aug" => &mut self.global_aug,
            "ema" => &mut self.ema,
            "weighted_f" => &mut self.weighted_f,
            _ => return Err(Error::Config(format!("unknown component {name:?}"))),
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    /// EMA smoothing coefficient of the teacher.
    pub beta: f64,
    /// Teacher update period, in iterations (batches).
    pub gamma: u64,
    /// Adaptation epochs.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate for pretraining and finetuning; `lr` when unset.
    pub pretrain_lr: Option<f64>,
    pub hidden: usize,
    pub input_scale: f64,
    pub dice_classes: DiceClasses,
    /// Validate the teacher instead of the student at epoch ends.
    pub eval_teacher: bool,
    pub selection: SelectionConfig,
    pub local_aug: LocalAugConfig,
    pub global_aug: GlobalAugConfig,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Uda,
            beta: 0.99,
            gamma: 1,
            epochs: 10,
            pretrain_epochs: 10,
            finetune_epochs: 2,
            batch_size: 12,
            lr: 0.001,
            pretrain_lr: None,
            hidden: DEFAULT_HIDDEN,
            input_scale: DEFAULT_INPUT_SCALE,
            dice_classes: DiceClasses::Present,
            eval_teacher: false,
            selection: SelectionConfig::default(),
            local_aug: LocalAugConfig::default(),
            global_aug: GlobalAugConfig::default(),
            toggles: Toggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} must lie in [0, 1]", self.beta)));
        }
        if self.gamma < 1 {
            return Err(Error::Config("gamma must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for lr in [Some(self.lr), self.pretrain_lr].into_iter().flatten() {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("learning rate {lr} is invalid")));
            }
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        self.selection.validate()?;
        self.local_aug.validate()?;
        self.global_aug.validate()
    }

    pub fn supervised_lr(&self) -> f64 {
        self.pretrain_lr.unwrap_or(self.lr)
    }

    /// Augmentations with disabled components replaced by identities.
    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            local: if self.toggles.local_aug { self.local_aug } else { LocalAugConfig::identity() },
            global: if self.toggles.global_aug { self.global_aug } else { GlobalAugConfig::identity() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub loss_s_to_t: f64,
    pub loss_t_to_s: f64,
    pub loss_total: f64,
    /// Fraction of target points that received a pseudo-label.
    pub coverage: f64,
    pub teacher_updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub coverage: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Receives training records as they are produced.
pub trait TrainObserver {
    fn on_iteration(&mut self, _record: &IterationRecord) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

/// Parameters after supervised training and the mean loss of each epoch.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub params: ModelParams<T>,
    pub epoch_losses: Vec<f64>,
}

/// `beta * teacher + (1 - beta) * student`, elementwise.
pub fn ema_update<T: Scalar>(teacher: &ModelParams<T>, student: &ModelParams<T>, beta: f64) -> Result<ModelParams<T>> {
    teacher.same_shape(student)?;
    let (b, a) = (T::of(beta), T::of(1.0 - beta));
    let mut out = teacher.clone();
    for (t, &s) in out.as_mut_slice().iter_mut().zip(student.as_slice()) {
        *t = b * *t + a * s;
    }
    Ok(out)
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.index(i + 1));
    }
    order
}

fn labeled_frames(dataset: &Dataset, what: &str) -> Result<Vec<LabeledCloud>> {
    dataset
        .frames()
        .iter()
        .map(|f| f.labeled().ok_or_else(|| Error::Label(format!("{what} frame {} has no labels", f.name))))
        .collect()
}

fn check_classes<T: Scalar>(params: &ModelParams<T>, classes: &ClassSet) -> Result<()> {
    if params.n_classes() != classes.len() {
        return Err(Error::Shape(format!(
            "model predicts {} classes, class set has {}",
            params.n_classes(),
            classes.len()
        )));
    }
    Ok(())
}

/// Minibatch SGD on the Dice loss of whole labeled frames.
fn supervised_fit<T: Scalar>(
    params: &ModelParams<T>,
    frames: &[LabeledCloud],
    epochs: usize,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<FitResult<T>> {
    let root = Rng::new(cfg.seed).derive(stream);
    let mut params = params.clone();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = shuffled(frames.len(), &mut root.derive(epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let f = &frames[i];
                    if f.labels().labeled_count() == 0 {
                        return Ok(None);
                    }
                    backward(&params, f.cloud(), f.labels(), cfg.dice_classes).map(Some)
                })
                .collect::<Result<Vec<_>>>()?;
            let used: Vec<_> = results.into_iter().flatten().collect();
            if used.is_empty() {
                continue;
            }
            let mut grad = params.zeros_like();
            for lv in &used {
                grad.axpy(T::one(), &lv.grad)?;
                sum += lv.loss;
            }
            count += used.len();
            params.axpy(T::of(-cfg.supervised_lr() / used.len() as f64), &grad)?;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }
    Ok(FitResult { params, epoch_losses })
}

/// Freshly initialized model for `classes`, seeded from `cfg.seed`.
pub fn init_params<T: Scalar>(classes: &ClassSet, cfg: &TrainConfig) -> Result<ModelParams<T>> {
    ModelParams::init(classes.len(), cfg.hidden, cfg.input_scale, &mut Rng::new(cfg.seed).derive(STREAM_INIT))
}

/// Trains from random initialization on the labeled source set.
pub fn pretrain<T: Scalar>(source: &Dataset, classes: &ClassSet, cfg: &TrainConfig) -> Result<FitResult<T>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset("source".into()));
    }
    let frames = labeled_frames(source, "source")?;
    let init = init_params(classes, cfg)?;
    supervised_fit(&init, &frames, cfg.pretrain_epochs, cfg, STREAM_PRETRAIN)
}

/// Further supervised epochs on `dataset`, starting from `params`.
pub fn continue_training<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    let frames = labeled_frames(dataset, "training")?;
    supervised_fit(params, &frames, epochs, cfg, STREAM_FINETUNE)
}

/// Supervised warm start on source plus labeled target frames.
pub fn finetune_ssda<T: Scalar>(
    params: &ModelParams<T>,
    source: &Dataset,
    target_labeled: &Dataset,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    if target_labeled.is_empty() {
        return Err(Error::EmptyDataset("labeled target set".into()));
    }
    continue_training(params, &source.union(target_labeled), cfg.finetune_epochs, cfg)
}

/// Confusion matrix of argmax predictions over a labeled dataset.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, dataset: &Dataset, classes: &ClassSet) -> Result<ConfusionMatrix> {
    check_classes(params, classes)?;
    let mut cm = ConfusionMatrix::new(classes.len());
    for f in dataset.frames() {
        let truth =
            f.labels.as_ref().ok_or_else(|| Error::Label(format!("evaluation frame {} has no labels", f.name)))?;
        cm.accumulate(&predict(params, &f.cloud)?, truth)?;
    }
    Ok(cm)
}

/// Data for one adaptation run.
#[derive(Debug, Clone, Copy)]
pub struct AdaptData<'a> {
    pub classes: &'a ClassSet,
    /// Labeled source frames.
    pub source: &'a Dataset,
    /// Target frames; labels, if present, are never read.
    pub target: &'a Dataset,
    /// Labeled target frames; nonempty means supervised patches are mixed in.
    pub target_labeled: Option<&'a Dataset>,
    /// Labeled frames scored at every epoch end.
    pub validation: Option<&'a Dataset>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutput<T> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
    pub stats: TrainStats,
}

struct BranchResult<T> {
    loss: f64,
    grad: Option<ModelParams<T>>,
}

fn branch_loss<T: Scalar>(student: &ModelParams<T>, mixed: &MixedSample, cfg: &TrainConfig) -> Result<BranchResult<T>> {
    // Degenerate samples contribute nothing to either the loss or the step.
    if mixed.is_empty() || mixed.is_degenerate() {
        return Ok(BranchResult { loss: 0.0, grad: None });
    }
    let lv = backward(student, &mixed.cloud, &mixed.labels, cfg.dice_classes)?;
    Ok(BranchResult { loss: lv.loss, grad: Some(lv.grad) })
}

struct ItemResult<T> {
    s_to_t: BranchResult<T>,
    t_to_s: BranchResult<T>,
    pseudo_labeled: usize,
    target_points: usize,
}

struct AdaptContext<'a, T> {
    cfg: &'a TrainConfig,
    mix: MixConfig,
    weighting: ClassWeighting<'a>,
    source: &'a [LabeledCloud],
    target: &'a Dataset,
    supervised: &'a [LabeledCloud],
    student: &'a ModelParams<T>,
    teacher: &'a ModelParams<T>,
}

impl<T: Scalar> AdaptContext<'_, T> {
    fn item(&self, target_idx: usize, rng: &Rng) -> Result<ItemResult<T>> {
        let cfg = self.cfg;
        let target = &self.target.frames()[target_idx].cloud;
        let source = &self.source[rng.derive(0).index(self.source.len())];
        let pseudo = if target.is_empty() {
            crate::types::LabelSet::empty(crate::types::LabelKind::Pseudo)
        } else {
            filter_pseudo_labels_g(&forward(self.teacher, target)?, cfg.selection.zeta)?
        };

        let sup_pick = if self.supervised.is_empty() {
            None
        } else {
            let rng = &mut rng.derive(1);
            let frame = &self.supervised[rng.index(self.supervised.len())];
            let sel = if frame.labels().labeled_count() == 0 {
                PatchSelection::empty(frame.len())
            } else {
                select_classes(frame.labels(), self.weighting, cfg.selection.mu, rng)?
            };
            Some((frame, sel))
        };
        let sup = sup_pick.as_ref().map(|(frame, selection)| SupervisedPatches { frame, selection });

        let empty = || BranchResult { loss: 0.0, grad: None };
        let s_to_t = if cfg.toggles.branch_s_to_t {
            let rng = &mut rng.derive(2);
            let sel = if source.labels().labeled_count() == 0 {
                PatchSelection::empty(source.len())
            } else {
                select_classes(source.labels(), self.weighting, cfg.selection.alpha, rng)?
            };
            let mixed = mix_s_to_t(source, &sel, target, &pseudo, sup, &self.mix, rng)?;
            branch_loss(self.student, &mixed, cfg)?
        } else {
            empty()
        };
        let t_to_s = if cfg.toggles.branch_t_to_s {
            let rng = &mut rng.derive(3);
            let sel = if pseudo.labeled_count() == 0 {
                PatchSelection::empty(pseudo.len())
            } else {
                select_classes(&pseudo, self.weighting, cfg.selection.alpha, rng)?
            };
            let mixed = mix_t_to_s(target, &pseudo, &sel, source, sup, &self.mix, rng)?;
            branch_loss(self.student, &mixed, cfg)?
        } else {
            empty()
        };
        Ok(ItemResult { s_to_t, t_to_s, pseudo_labeled: pseudo.labeled_count(), target_points: pseudo.len() })
    }
}

/// Teacher-student adaptation. Student and teacher both start from
/// `params`; the student takes one SGD step per batch on the sum of the two
/// branch losses, and the teacher follows by EMA every `gamma` iterations.
pub fn adapt<T: Scalar>(
    params: &ModelParams<T>,
    data: &AdaptData<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<AdaptOutput<T>> {
    cfg.validate()?;
    check_classes(params, data.classes)?;
    if data.source.is_empty() {
        return Err(Error::EmptyDataset("source".into()));
    }
    if data.target.is_empty() {
        return Err(Error::EmptyDataset("target".into()));
    }
    let supervised = match data.target_labeled {
        Some(d) => labeled_frames(d, "labeled target")?,
        None => Vec::new(),
    };
    if cfg.mode == Mode::Ssda && supervised.is_empty() {
        return Err(Error::EmptyDataset("SSDA needs labeled target frames".into()));
    }
    let source = labeled_frames(data.source, "source")?;
    let dist = compute_class_frequency(data.source, data.classes)?;
    let weighting =
        if cfg.toggles.weighted_f { ClassWeighting::InverseFrequency(&dist) } else { ClassWeighting::Uniform };

    let mut student = params.clone();
    let mut teacher = params.clone();
    let mut stats = TrainStats::default();
    let any_branch = cfg.toggles.branch_s_to_t || cfg.toggles.branch_t_to_s;
    let root = Rng::new(cfg.seed).derive(STREAM_ADAPT);
    let mut iteration = 0u64;

    for epoch in 0..cfg.epochs {
        let (mut covered, mut seen) = (0usize, 0usize);
        if any_branch {
            let order = shuffled(data.target.len(), &mut root.derive(epoch as u64));
            for batch in order.chunks(cfg.batch_size) {
                iteration += 1;
                let ctx = AdaptContext {
                    cfg,
                    mix: cfg.mix_config(),
                    weighting,
                    source: &source,
                    target: data.target,
                    supervised: &supervised,
                    student: &student,
                    teacher: &teacher,
                };
                let results = batch
                    .par_iter()
                    .enumerate()
                    .map(|(k, &t)| ctx.item(t, &root.derive((iteration << 24) | k as u64)))
                    .collect::<Result<Vec<_>>>()?;

                let n = results.len() as f64;
                let mut grad = student.zeros_like();
                let (mut l_st, mut l_ts) = (0.0, 0.0);
                let (mut b_cov, mut b_seen) = (0usize, 0usize);
                for r in &results {
                    l_st += r.s_to_t.loss;
                    l_ts += r.t_to_s.loss;
                    for g in [&r.s_to_t.grad, &r.t_to_s.grad].into_iter().flatten() {
                        grad.axpy(T::one(), g)?;
                    }
                    b_cov += r.pseudo_labeled;
                    b_seen += r.target_points;
                }
                let (l_st, l_ts) = (l_st / n, l_ts / n);
                student.axpy(T::of(-cfg.lr / n), &grad)?;
                if !student.is_finite() {
                    return Err(Error::Numeric {
                        layer: "parameters".into(),
                        reason: format!("non-finite student parameters after iteration {iteration}"),
                    });
                }

                let teacher_updated = if cfg.toggles.ema {
                    if iteration.is_multiple_of(cfg.gamma) {
                        teacher = ema_update(&teacher, &student, cfg.beta)?;
                        true
                    } else {
                        false
                    }
                } else {
                    teacher = student.clone();
                    true
                };

                covered += b_cov;
                seen += b_seen;
                let record = IterationRecord {
                    iteration,
                    epoch,
                    loss_s_to_t: l_st,
                    loss_t_to_s: l_ts,
                    loss_total: l_st + l_ts,
                    coverage: if b_seen > 0 { b_cov as f64 / b_seen as f64 } else { 0.0 },
                    teacher_updated,
                };
                observer.on_iteration(&record);
                stats.iterations.push(record);
            }
        }
        let val_miou = match data.validation {
            Some(v) => {
                let net = if cfg.eval_teacher { &teacher } else { &student };
                evaluate(net, v, data.classes)?.iou().miou
            }
            None => None,
        };
        let record =
            EpochRecord { epoch, coverage: if seen > 0 { covered as f64 / seen as f64 } else { 0.0 }, val_miou };
        observer.on_epoch(&record);
        stats.epochs.push(record);
    }
    Ok(AdaptOutput { student, teacher, stats })
}
