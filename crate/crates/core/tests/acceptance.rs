//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use lidarmix::kitti::{read_labels, read_scan, write_labels, write_scan, RemapTable};
use lidarmix::mixing::{kept_count, LocalTransform};
use lidarmix::model::{backward, dice_loss, forward, DiceClasses};
use lidarmix::selection::{select_classes, select_classes_f};
use lidarmix::toy::{generate, toy_train_config, ShiftSpec, ToyConfig, ToyPair};
use lidarmix::trainer::{adapt, ema_update, evaluate, finetune_ssda, pretrain, AdaptData, Mode, TrainConfig};
use lidarmix::{
    global_augment_r, local_augment_h, mix_s_to_t, mix_t_to_s, ClassFrequencyDistribution, ClassSet, ClassWeighting,
    Dataset, Error, GlobalAugConfig, Interval, Label, LabelKind, LabelSet, LabeledCloud, LocalAugConfig, MixConfig,
    MixedSample, ModelParams, PointCloud, Provenance, Rng, SupervisedPatches,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn labels(ids: &[u16]) -> LabelSet {
    LabelSet::new(
        ids.iter().map(|&i| if i == u16::MAX { Label::IGNORE } else { Label::class(i) }).collect(),
        LabelKind::GroundTruth,
    )
}

/// Upper tail of the chi-square distribution with 2 degrees of freedom.
fn chi2_df2_p(x: f64) -> f64 {
    (-x / 2.0).exp()
}

fn chi2(observed: &[u64], expected_p: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(expected_p)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let counts = [900u64, 50, 50];
    let dist = ClassFrequencyDistribution::from_counts(&counts).unwrap();
    let total: u64 = counts.iter().sum();
    let w: Vec<f64> = counts.iter().map(|&c| 1.0 - c as f64 / total as f64).collect();
    let wsum: f64 = w.iter().sum();
    let frame = labels(&[0, 0, 0, 1, 2, 2]);
    let trials = 100_000;
    let mut rng = Rng::new(2024);

    // One class per draw: frequencies follow normalized 1 - P.
    let single: Vec<f64> = w.iter().map(|v| v / wsum).collect();
    let mut hits = [0u64; 3];
    for _ in 0..trials {
        let sel = select_classes_f(&frame, &dist, 0.34, &mut rng).unwrap();
        ensure!(sel.chosen_classes().len() == 1, "ratio 0.34 over 3 classes must pick 1");
        hits[sel.chosen_classes()[0] as usize] += 1;
    }
    let x1 = chi2(&hits, &single);
    let p1 = chi2_df2_p(x1);

    // Two classes per draw: sequential renormalized draws; the left-out
    // class has probability sum over orders of w_i/W * w_j/(W - w_i).
    let mut pair_p = [0.0; 3];
    for (out, p) in pair_p.iter_mut().enumerate() {
        let (i, j) = match out {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        *p = w[i] / wsum * w[j] / (wsum - w[i]) + w[j] / wsum * w[i] / (wsum - w[j]);
    }
    let mut left_out = [0u64; 3];
    for _ in 0..trials {
        let sel = select_classes_f(&frame, &dist, 0.5, &mut rng).unwrap();
        let chosen = sel.chosen_classes();
        ensure!(chosen.len() == 2, "ratio 0.5 over 3 classes must pick 2");
        let missing = (0..3u16).find(|c| !chosen.contains(c)).unwrap();
        left_out[missing as usize] += 1;
    }
    let x2 = chi2(&left_out, &pair_p);
    let p2 = chi2_df2_p(x2);
    let secs = start.elapsed().as_secs_f64();
    ensure!(p1 > 0.01, "single-pick chi2 {x1:.3}, p {p1:.4}, counts {hits:?}, expected {single:?}");
    ensure!(p2 > 0.01, "pair-pick chi2 {x2:.3}, p {p2:.4}, counts {left_out:?}, expected {pair_p:?}");
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("chi2 {x1:.2} (p {p1:.3}) and {x2:.2} (p {p2:.3}) over {trials} trials each, {secs:.2} s"))
}

fn random_cloud(n: usize, extent: f64, rng: &mut Rng) -> PointCloud {
    let coords = (0..n)
        .map(|_| {
            [rng.uniform(-extent, extent) as f32, rng.uniform(-extent, extent) as f32, rng.uniform(-2.0, 3.0) as f32]
        })
        .collect();
    let intensity = (0..n).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    PointCloud::new(coords, Some(intensity)).unwrap()
}

fn criterion_2() -> Outcome {
    let grid = [0.65, 0.75, 0.85, 0.95];
    let mut covered = Vec::new();
    for seed in 0..5u64 {
        let mut rng = Rng::new(100 + seed);
        let mut params = ModelParams::<f64>::init(3, 16, 0.3, &mut rng).unwrap();
        // Sharpen the random network so every threshold is exercised.
        params.scale(6.0);
        let cloud = random_cloud(10_000, 20.0, &mut rng);
        let probs = forward(&params, &cloud).unwrap();
        let mut previous: Option<LabelSet> = None;
        for &zeta in &grid {
            let pseudo = lidarmix::filter_pseudo_labels_g(&probs, zeta).unwrap();
            // Confidence recomputed from scratch with a fresh forward pass.
            let again = forward(&params, &cloud).unwrap();
            for (i, l) in pseudo.labels().iter().enumerate() {
                let row = again.row(i);
                let (best, conf) =
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
                match l.id() {
                    Some(c) => {
                        ensure!(conf >= zeta, "seed {seed} zeta {zeta}: point {i} labeled with confidence {conf}");
                        ensure!(c as usize == best, "seed {seed}: point {i} label is not the argmax");
                    }
                    None => ensure!(conf < zeta, "seed {seed} zeta {zeta}: confident point {i} left unlabeled"),
                }
            }
            if let Some(prev) = &previous {
                for (i, (a, b)) in pseudo.labels().iter().zip(prev.labels()).enumerate() {
                    ensure!(
                        a.is_ignore() || a == b,
                        "seed {seed}: zeta {zeta} keeps point {i} dropped at a lower zeta"
                    );
                }
            }
            covered.push(pseudo.labeled_count());
            previous = Some(pseudo);
        }
    }
    Ok(format!("5 seeds x 10k points x {} thresholds; labeled counts {:?}", grid.len(), &covered[..4]))
}

/// Frame whose intensity channel holds a unique id per point, so output
/// points can be traced back to their input point.
fn tagged_frame(n_per_class: &[(u16, usize)], base_tag: usize, rng: &mut Rng) -> LabeledCloud {
    let mut coords = Vec::new();
    let mut ids = Vec::new();
    for &(c, n) in n_per_class {
        for _ in 0..n {
            coords.push([
                rng.uniform(-10.0, 10.0) as f32,
                rng.uniform(-10.0, 10.0) as f32,
                rng.uniform(0.0, 2.0) as f32,
            ]);
            ids.push(c);
        }
    }
    // Shuffle so classes interleave.
    for i in (1..ids.len()).rev() {
        let j = rng.index(i + 1);
        coords.swap(i, j);
        ids.swap(i, j);
    }
    let intensity = (0..ids.len()).map(|i| (base_tag + i) as f32).collect();
    LabeledCloud::new(PointCloud::new(coords, Some(intensity)).unwrap(), labels(&ids)).unwrap()
}

fn random_composition(rng: &mut Rng) -> Vec<(u16, usize)> {
    let mut parts = Vec::new();
    for c in 0..4u16 {
        if rng.uniform(0.0, 1.0) < 0.7 {
            parts.push((c, 1 + rng.index(40)));
        }
    }
    if parts.is_empty() {
        parts.push((rng.index(4) as u16, 1 + rng.index(40)));
    }
    if rng.uniform(0.0, 1.0) < 0.5 {
        parts.push((u16::MAX, rng.index(10)));
    }
    parts
}

fn check_mix(
    out: &MixedSample,
    patch_frame: &LabeledCloud,
    patch_classes: &[u16],
    patch_tag: Provenance,
    sup: Option<(&LabeledCloud, &[u16])>,
    base: &LabeledCloud,
    origin: &HashMap<u32, Label>,
) -> Result<(), String> {
    let count_of = |f: &LabeledCloud, c: u16| f.labels().labels().iter().filter(|l| l.id() == Some(c)).count();
    let keep = LocalAugConfig::default().keep;
    let expected_patch: usize = patch_classes.iter().map(|&c| kept_count(keep, count_of(patch_frame, c))).sum();
    let expected_sup: usize = sup.map_or(0, |(f, cs)| cs.iter().map(|&c| kept_count(keep, count_of(f, c))).sum());
    ensure!(
        out.len() == base.len() + expected_patch + expected_sup,
        "N = {} but base {} + patches {} + supervised {}",
        out.len(),
        base.len(),
        expected_patch,
        expected_sup
    );
    ensure!(out.provenance.len() == out.len() && out.labels.len() == out.len(), "misaligned outputs");
    ensure!(out.count(patch_tag) == expected_patch, "patch provenance count");
    ensure!(out.count(Provenance::SupervisedPatch) == expected_sup, "supervised provenance count");
    ensure!(out.count(Provenance::Base) == base.len(), "base provenance count");
    // Segments appear in order: patches, supervised patches, base.
    let rank = |p: Provenance| match p {
        Provenance::Base => 2,
        Provenance::SupervisedPatch => 1,
        _ => 0,
    };
    ensure!(out.provenance.windows(2).all(|w| rank(w[0]) <= rank(w[1])), "provenance segments out of order");
    let intensity = out.cloud.intensity().ok_or("intensity lost")?;
    for (i, (&l, &tag)) in out.labels.labels().iter().zip(intensity).enumerate() {
        let original = origin.get(&(tag as u32)).ok_or_else(|| format!("point {i} has unknown origin"))?;
        ensure!(*original == l, "point {i} label {l:?} differs from its origin {original:?}");
        if out.provenance[i] == patch_tag {
            ensure!(l.id().is_some_and(|c| patch_classes.contains(&c)), "patch point {i} has unselected class");
        }
    }
    let base_labels = &out.labels.labels()[out.len() - base.len()..];
    ensure!(base_labels == base.labels().labels(), "base labels reordered");
    Ok(())
}

fn criterion_3() -> Outcome {
    let dist = ClassFrequencyDistribution::from_counts(&[40, 30, 20, 10]).unwrap();
    let weighting = ClassWeighting::InverseFrequency(&dist);
    let cfg = MixConfig::default();
    let mut checked = 0;
    for branch in 0..2 {
        for trial in 0..1000u64 {
            let mut rng = Rng::new(trial).derive(branch);
            let source = tagged_frame(&random_composition(&mut rng), 0, &mut rng);
            let target_gt = tagged_frame(&random_composition(&mut rng), 100_000, &mut rng);
            // Pseudo-labels: ground truth with some points dropped to IGNORE.
            let pseudo_ids: Vec<Label> = target_gt
                .labels()
                .labels()
                .iter()
                .map(|&l| if rng.uniform(0.0, 1.0) < 0.2 { Label::IGNORE } else { l })
                .collect();
            let pseudo = LabelSet::new(pseudo_ids, LabelKind::Pseudo);
            let sup_frame = tagged_frame(&random_composition(&mut rng), 200_000, &mut rng);
            let with_sup = trial % 2 == 0 && sup_frame.labels().labeled_count() > 0;
            let sup_sel = if with_sup {
                Some(select_classes(sup_frame.labels(), weighting, 0.5, &mut rng).unwrap())
            } else {
                None
            };
            let sup = sup_sel.as_ref().map(|s| SupervisedPatches { frame: &sup_frame, selection: s });
            let target_pseudo = LabeledCloud::new(target_gt.cloud().clone(), pseudo.clone()).unwrap();

            let mut origin: HashMap<u32, Label> = HashMap::new();
            for (f, ls) in [(&source, source.labels()), (&target_pseudo, &pseudo), (&sup_frame, sup_frame.labels())] {
                for (&t, &l) in f.cloud().intensity().unwrap().iter().zip(ls.labels()) {
                    origin.insert(t as u32, l);
                }
            }
            let seed = 7_000 + trial;
            let sup_check = sup_sel.as_ref().map(|s| (&sup_frame, s.chosen_classes()));
            if branch == 0 {
                if source.labels().labeled_count() == 0 {
                    continue;
                }
                let sel = select_classes(source.labels(), weighting, 0.5, &mut rng).unwrap();
                let run = || mix_s_to_t(&source, &sel, target_gt.cloud(), &pseudo, sup, &cfg, &mut Rng::new(seed));
                let out = run().unwrap();
                ensure!(out == run().unwrap(), "s->t replay differs at trial {trial}");
                check_mix(
                    &out,
                    &source,
                    sel.chosen_classes(),
                    Provenance::SourcePatch,
                    sup_check,
                    &target_pseudo,
                    &origin,
                )
                .map_err(|e| format!("s->t trial {trial}: {e}"))?;
            } else {
                let sel = if pseudo.labeled_count() == 0 {
                    lidarmix::PatchSelection::empty(pseudo.len())
                } else {
                    select_classes(&pseudo, weighting, 0.5, &mut rng).unwrap()
                };
                let run = || mix_t_to_s(target_gt.cloud(), &pseudo, &sel, &source, sup, &cfg, &mut Rng::new(seed));
                let out = run().unwrap();
                ensure!(out == run().unwrap(), "t->s replay differs at trial {trial}");
                check_mix(
                    &out,
                    &target_pseudo,
                    sel.chosen_classes(),
                    Provenance::TargetPatch,
                    sup_check,
                    &source,
                    &origin,
                )
                .map_err(|e| format!("t->s trial {trial}: {e}"))?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} mixes checked across both branches, replay bit-identical"))
}

fn criterion_4() -> Outcome {
    let cfg = LocalAugConfig::default();
    ensure!(cfg.rotation == Interval::new(-FRAC_PI_2, FRAC_PI_2), "default local rotation {:?}", cfg.rotation);
    ensure!(cfg.scale == Interval::new(0.95, 1.05), "default local scale {:?}", cfg.scale);
    let mut rng = Rng::new(4);
    let mut extremes = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for n in 1..=300usize {
        let frame = tagged_frame(&[(1, n)], 0, &mut rng);
        let mut a = Rng::new(n as u64);
        let t = LocalTransform::sample(&cfg, &mut a.clone());
        let out = local_augment_h(&frame, &cfg, &mut a).unwrap();
        ensure!((-FRAC_PI_2..=FRAC_PI_2).contains(&t.angle), "rotation {} out of range", t.angle);
        for s in t.scale {
            ensure!((0.95..=1.05).contains(&s), "scale {s} out of range");
            extremes.2 = extremes.2.min(s);
            extremes.3 = extremes.3.max(s);
        }
        extremes.0 = extremes.0.min(t.angle);
        extremes.1 = extremes.1.max(t.angle);
        let expected = (0.5 * n as f64 + 0.5).floor() as usize;
        ensure!(out.len() == expected, "kept {} of {n}, expected {expected}", out.len());
        // Each kept point is the drawn transform of its input point.
        let by_tag: HashMap<u32, [f32; 3]> = frame
            .cloud()
            .coords()
            .iter()
            .zip(frame.cloud().intensity().unwrap())
            .map(|(&p, &t)| (t as u32, p))
            .collect();
        for (p, tag) in out.cloud().coords().iter().zip(out.cloud().intensity().unwrap()) {
            ensure!(t.apply(by_tag[&(*tag as u32)]) == *p, "h output is not the drawn transform");
        }
    }

    ensure!(GlobalAugConfig::default().rotation == Interval::new(-PI, PI), "default global rotation");
    let rigid = GlobalAugConfig { scale: Interval::point(1.0), ..GlobalAugConfig::default() };
    let mut worst: f64 = 0.0;
    for trial in 0..200u64 {
        let mut rng = Rng::new(9_000 + trial);
        let frame = tagged_frame(&[(0, 60), (1, 40)], 0, &mut rng);
        let out = global_augment_r(&frame, &rigid, &mut rng);
        ensure!(out.labels() == frame.labels(), "r changed labels");
        let a = frame.cloud().coords();
        let b = out.cloud().coords();
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let d = |p: &[[f32; 3]]| {
                    let [x, y, z] = [0, 1, 2].map(|k| f64::from(p[i][k]) - f64::from(p[j][k]));
                    (x * x + y * y + z * z).sqrt()
                };
                worst = worst.max((d(a) - d(b)).abs());
            }
        }
    }
    ensure!(worst <= 1e-5, "pairwise distance changed by {worst:e}");
    Ok(format!(
        "rotation draws in [{:.3}, {:.3}], scales in [{:.4}, {:.4}], keep exact for N=1..300, max distance drift {worst:.1e}",
        extremes.0, extremes.1, extremes.2, extremes.3
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = Rng::new(5);
    let teacher = ModelParams::<f64>::init(3, 16, 0.1, &mut rng).unwrap();
    let student = ModelParams::<f64>::init(3, 16, 0.1, &mut rng).unwrap();
    for beta in [0.0, 0.5, 0.9, 0.99, 0.999, 1.0] {
        let out = ema_update(&teacher, &student, beta).unwrap();
        for ((&t, &s), &o) in teacher.as_slice().iter().zip(student.as_slice()).zip(out.as_slice()) {
            let expected = beta * t + (1.0 - beta) * s;
            ensure!(o == expected, "beta {beta}: {o} != {expected}");
        }
    }
    ensure!(ema_update(&teacher, &student, 0.0).unwrap() == student, "beta 0 must copy the student");
    ensure!(ema_update(&teacher, &student, 1.0).unwrap() == teacher, "beta 1 must keep the teacher");
    let t32 = teacher.cast::<f32>();
    let s32 = student.cast::<f32>();
    ensure!(ema_update(&t32, &s32, 0.0).unwrap() == s32, "f32 beta 0");
    ensure!(ema_update(&t32, &s32, 1.0).unwrap() == t32, "f32 beta 1");

    let pair = generate(&ToyConfig::new(50, 256, ShiftSpec::combo(), 5)).unwrap();
    let target = pair.target.unlabeled();
    let cfg = TrainConfig {
        hidden: 8,
        batch_size: 1,
        epochs: 4,
        pretrain_epochs: 2,
        pretrain_lr: Some(0.5),
        lr: 0.05,
        seed: 5,
        ..TrainConfig::default()
    };
    let pre = pretrain::<f32>(&pair.source, &pair.classes, &cfg).unwrap();
    let data = AdaptData {
        classes: &pair.classes,
        source: &pair.source,
        target: &target,
        target_labeled: None,
        validation: None,
    };
    let out = adapt(&pre.params, &data, &cfg, &mut ()).unwrap();
    let its = &out.stats.iterations;
    ensure!(its.len() == 200, "expected 200 iterations, got {}", its.len());
    let mut worst: f64 = 0.0;
    for r in its {
        worst = worst.max((r.loss_total - (r.loss_s_to_t + r.loss_t_to_s)).abs());
    }
    ensure!(worst <= 1e-9, "additivity violated by {worst:e}");
    Ok(format!("EMA exact for 6 betas; 200 iterations with max |L_tot - sum| = {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_probs: f64 = 0.0;
    for inst in 0..20u64 {
        let mut rng = Rng::new(600 + inst);
        let params = ModelParams::<f64>::init(3, 16, 0.3, &mut rng).unwrap();
        let cloud = random_cloud(10, 5.0, &mut rng);
        let ids: Vec<u16> = (0..10).map(|i| if i < 3 { i as u16 } else { rng.index(3) as u16 }).collect();
        let truth = labels(&ids);
        for classes in [DiceClasses::Present, DiceClasses::All] {
            let analytic = backward(&params, &cloud, &truth, classes).unwrap();
            let loss_at = |p: &ModelParams<f64>| dice_loss(&forward(p, &cloud).unwrap(), &truth, classes).unwrap().loss;
            let mut num = Vec::with_capacity(params.len());
            for k in 0..params.len() {
                let mut plus = params.clone();
                plus.as_mut_slice()[k] += h;
                let mut minus = params.clone();
                minus.as_mut_slice()[k] -= h;
                num.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * h));
            }
            let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = analytic.grad.as_slice().iter().zip(&num).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            worst = worst.max(err / scale);

            // Gradient with respect to the probabilities themselves.
            let probs = forward(&params, &cloud).unwrap();
            let d = dice_loss(&probs, &truth, classes).unwrap();
            let mut pscale: f64 = 0.0;
            let mut perr: f64 = 0.0;
            for k in 0..probs.len() * 3 {
                let shifted = |delta: f64| {
                    let mut rows: Vec<Vec<f64>> = probs.rows().map(<[f64]>::to_vec).collect();
                    rows[k / 3][k % 3] += delta;
                    let raw = lidarmix::ClassProbs::new(3, rows.concat()).unwrap();
                    dice_loss(&raw, &truth, classes).unwrap().loss
                };
                let n = (shifted(h) - shifted(-h)) / (2.0 * h);
                pscale = pscale.max(n.abs());
                perr = perr.max((d.grad[k] - n).abs());
            }
            worst_probs = worst_probs.max(perr / pscale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst <= 1e-3, "parameter gradient relative error {worst:e}");
    ensure!(worst_probs <= 1e-3, "probability gradient relative error {worst_probs:e}");
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!(
        "max relative error {worst:.1e} (parameters), {worst_probs:.1e} (probabilities) over 20 instances, {secs:.2} s"
    ))
}

struct SeedRun {
    seed: u64,
    pair: ToyPair,
    source_only: ModelParams<f32>,
}

impl SeedRun {
    fn miou(&self, p: &ModelParams<f32>) -> f64 {
        evaluate(p, &self.pair.target_val, &self.pair.classes).unwrap().iou().miou_or_zero()
    }

    fn adapt(&self, cfg: &TrainConfig, labeled: Option<&Dataset>) -> f64 {
        let target = self.pair.target.unlabeled();
        let start = match labeled {
            Some(l) => finetune_ssda(&self.source_only, &self.pair.source, l, cfg).unwrap().params,
            None => self.source_only.clone(),
        };
        let data = AdaptData {
            classes: &self.pair.classes,
            source: &self.pair.source,
            target: &target,
            target_labeled: labeled,
            validation: None,
        };
        self.miou(&adapt(&start, &data, cfg, &mut ()).unwrap().student)
    }
}

fn base_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..toy_train_config() }
}

/// Matched short budget used for the paired comparisons: one pass over the
/// target at a small step, before the toy task saturates.
fn short_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 1, lr: 0.003, ..base_config(seed) }
}

fn criterion_7(runs: &[SeedRun], pretrain_secs: f64) -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut ok = true;
    for r in runs {
        let before = r.miou(&r.source_only);
        let cfg = TrainConfig { mode: Mode::Uda, ..base_config(r.seed) };
        let after = r.adapt(&cfg, None);
        ok &= after >= before + 0.05;
        rows.push(format!("seed {}: {before:.4} -> {after:.4}", r.seed));
    }
    let secs = pretrain_secs + start.elapsed().as_secs_f64();
    let summary = format!("{} ({secs:.0} s incl. data and pretraining)", rows.join(", "));
    ensure!(ok, "gain below 0.05: {summary}");
    ensure!(secs < 600.0, "took {secs:.0} s");
    Ok(summary)
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let mut rows = Vec::new();
    let mut strictly = 0;
    for r in runs {
        let labeled = Dataset::new(vec![r.pair.target.frames()[0].clone()]);
        let uda = r.adapt(&TrainConfig { mode: Mode::Uda, ..short_config(r.seed) }, None);
        let ssda = r.adapt(&TrainConfig { mode: Mode::Ssda, ..short_config(r.seed) }, Some(&labeled));
        ensure!(ssda >= uda - 0.01, "seed {}: SSDA {ssda:.4} below UDA {uda:.4} - 0.01", r.seed);
        strictly += usize::from(ssda > uda);
        rows.push(format!("seed {}: UDA {uda:.4}, SSDA {ssda:.4}", r.seed));
    }
    ensure!(strictly >= 2, "SSDA strictly better in only {strictly} of 3 seeds: {}", rows.join(", "));
    Ok(rows.join(", "))
}

fn criterion_9(run: &SeedRun) -> Outcome {
    let none = run.miou(&run.source_only);
    let full_cfg = short_config(run.seed);
    let mut s2t_cfg = full_cfg.clone();
    s2t_cfg.toggles.branch_t_to_s = false;
    let mut t2s_cfg = full_cfg.clone();
    t2s_cfg.toggles.branch_s_to_t = false;
    let full = run.adapt(&full_cfg, None);
    let s2t = run.adapt(&s2t_cfg, None);
    let t2s = run.adapt(&t2s_cfg, None);
    let summary = format!("seed {}: none {none:.4}, s->t only {s2t:.4}, t->s only {t2s:.4}, full {full:.4}", run.seed);
    ensure!(full >= s2t && full >= t2s, "full below a single branch: {summary}");
    ensure!(s2t >= none && t2s >= none, "single branch below no adaptation: {summary}");
    Ok(summary)
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let classes = ClassSet::new(["road", "car", "pole", "building"]).unwrap();
    let remap = RemapTable::offset_by_one(classes);
    let inverse = remap.inverse();
    let mut rng = Rng::new(10);
    for i in 0..100 {
        let n = rng.index(600);
        let mut bytes = Vec::with_capacity(16 * n);
        for _ in 0..4 * n {
            let v = (rng.normal() * 10f64.powi(rng.index(6) as i32 - 2)) as f32;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let scan = dir.path().join(format!("{i}.bin"));
        fs::write(&scan, &bytes).unwrap();
        let cloud = read_scan(&scan).map_err(|e| format!("frame {i}: {e}"))?;
        let copy = dir.path().join(format!("{i}.copy.bin"));
        write_scan(&copy, &cloud).unwrap();
        ensure!(fs::read(&copy).unwrap() == bytes, "scan {i} not byte-identical");

        let mut words = Vec::with_capacity(4 * n);
        for _ in 0..n {
            words.extend_from_slice(&(rng.index(5) as u32).to_le_bytes());
        }
        let label = dir.path().join(format!("{i}.label"));
        fs::write(&label, &words).unwrap();
        let ls = read_labels(&label, &remap).map_err(|e| format!("labels {i}: {e}"))?;
        ensure!(ls.len() == n, "label count");
        let lcopy = dir.path().join(format!("{i}.copy.label"));
        write_labels(&lcopy, &ls, &inverse).unwrap();
        ensure!(fs::read(&lcopy).unwrap() == words, "labels {i} not byte-identical");
    }

    let bad = dir.path().join("bad.bin");
    fs::write(&bad, [0u8; 17]).unwrap();
    ensure!(matches!(read_scan(&bad), Err(Error::Format(_))), "truncated scan must be a format error");
    let mut nan = Vec::new();
    for v in [1.0f32, 2.0, 3.0, 0.5, f32::NAN, 0.0, 0.0, 0.0] {
        nan.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bad, &nan).unwrap();
    ensure!(matches!(read_scan(&bad), Err(Error::Data { index: 1, .. })), "NaN must be a data error at point 1");
    let bad_label = dir.path().join("bad.label");
    fs::write(&bad_label, [0u8; 6]).unwrap();
    ensure!(matches!(read_labels(&bad_label, &remap), Err(Error::Format(_))), "ragged label file");
    fs::write(&bad_label, 77u32.to_le_bytes()).unwrap();
    ensure!(matches!(read_labels(&bad_label, &remap), Err(Error::Remap(_))), "unmapped raw id");
    fs::write(&bad, [0u8; 32]).unwrap();
    fs::write(&bad_label, [0u8; 4]).unwrap();
    let frame = lidarmix::kitti::read_frame("x", &bad, Some((bad_label.as_path(), &remap)));
    ensure!(matches!(frame, Err(Error::Alignment(_))), "2 points with 1 label must be an alignment error");
    Ok("100 random frames round-trip byte-identically; malformed inputs map to format/data/remap/alignment errors"
        .into())
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; only the plain
    // invocation runs the checks.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut passed = Vec::new();
    let mut record = |id: u32, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(msg) => println!("PASS criterion {id}: {msg} [{secs:.1} s]"),
            Err(msg) => println!("FAIL criterion {id}: {msg} [{secs:.1} s]"),
        }
        passed.push(outcome.is_ok());
    };

    record(1, &mut criterion_1);
    record(2, &mut criterion_2);
    record(3, &mut criterion_3);
    record(4, &mut criterion_4);
    record(5, &mut criterion_5);
    record(6, &mut criterion_6);

    let start = Instant::now();
    let runs: Vec<SeedRun> = [0u64, 1, 2]
        .into_iter()
        .map(|seed| {
            let pair = generate(&ToyConfig::new(200, 2048, ShiftSpec::combo(), seed)).unwrap();
            let source_only = pretrain::<f32>(&pair.source, &pair.classes, &base_config(seed)).unwrap().params;
            SeedRun { seed, pair, source_only }
        })
        .collect();
    let pretrain_secs = start.elapsed().as_secs_f64();
    record(7, &mut || criterion_7(&runs, pretrain_secs));
    record(8, &mut || criterion_8(&runs));
    record(9, &mut || criterion_9(&runs[0]));
    record(10, &mut criterion_10);

    let failed = passed.iter().filter(|&&ok| !ok).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
