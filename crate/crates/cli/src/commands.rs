use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use lidarmix::kitti::{label_path, load_dataset, read_frame, scan_path, write_dataset, RemapTable};
use lidarmix::toy::{self, ShiftSpec, ToyConfig};
use lidarmix::trainer::{self, AdaptData, EpochRecord, IterationRecord, Mode, TrainObserver, TrainStats};
use lidarmix::{ClassSet, Dataset, Error, IouReport, ModelParams, Result};
use serde::Serialize;

use crate::config::{read_frame_list, DataConfig, RunConfig, RunManifest};
use crate::{EvalArgs, GenToyArgs, ModeArg, RunArgs, SweepArgs};

type Params = ModelParams<f32>;

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    let t = &mut cfg.train;
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    if let Some(mode) = args.mode {
        t.mode = mode.into();
    }
    for (name, on) in &args.toggles {
        t.toggles.set(name, *on)?;
    }
    for (name, value) in [("zeta", args.zeta), ("alpha", args.alpha), ("mu", args.mu), ("beta", args.beta)] {
        if let Some(v) = value {
            cfg.set_param(name, v)?;
        }
    }
    if let Some(g) = args.gamma {
        cfg.set_param("gamma", g as f64)?;
    }
    if let Some(p) = &args.labeled_frames {
        cfg.data.labeled_frames = Some(p.clone());
    }
    if let Some(p) = &args.checkpoint {
        cfg.data.checkpoint = Some(p.clone());
    }
    cfg.train.validate()?;
    Ok(cfg)
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Uda => Mode::Uda,
            ModeArg::Ssda => Mode::Ssda,
        }
    }
}

fn remap(data: &DataConfig) -> Result<RemapTable> {
    RemapTable::load(DataConfig::require(&data.remap, "remap")?)
}

fn load_checkpoint(data: &DataConfig) -> Result<Params> {
    let path = DataConfig::require(&data.checkpoint, "checkpoint")?;
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    Params::load(path)
}

fn labeled_dataset(dir: &Path, remap: &RemapTable, what: &str) -> Result<Dataset> {
    let d = load_dataset(dir, Some(remap))?;
    if d.is_empty() {
        return Err(Error::EmptyDataset(format!("{what} at {}", dir.display())));
    }
    Ok(d)
}

/// Listed target frames with their labels.
fn labeled_target(data: &DataConfig, remap: &RemapTable) -> Result<Dataset> {
    let list = data
        .labeled_frames
        .as_deref()
        .ok_or_else(|| Error::Config("semi-supervised runs need --labeled-frames".into()))?;
    let names = read_frame_list(list)?;
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!("no frames listed in {}", list.display())));
    }
    let dir = DataConfig::require(&data.target, "target")?;
    let frames = names
        .iter()
        .map(|n| {
            let lp = label_path(dir, n);
            read_frame(n.clone(), scan_path(dir, n), Some((lp.as_path(), remap)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(frames))
}

fn prepare_out(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    RunManifest::new(command, cfg, out).write(&out.join("manifest.toml"))
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum StatLine<'a> {
    Iteration(&'a IterationRecord),
    Epoch(&'a EpochRecord),
    SupervisedEpoch { stage: &'a str, epoch: usize, loss: f64 },
}

/// Appends training records to a JSON-lines file as they arrive.
struct StatsWriter {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl StatsWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?), error: None })
    }

    fn line(&mut self, rec: &StatLine<'_>) {
        if self.error.is_some() {
            return;
        }
        let text = serde_json::to_string(rec).expect("records serialize");
        if let Err(e) = writeln!(self.out, "{text}") {
            self.error = Some(e);
        }
    }

    fn supervised(&mut self, stage: &str, losses: &[f64]) {
        for (epoch, &loss) in losses.iter().enumerate() {
            self.line(&StatLine::SupervisedEpoch { stage, epoch, loss });
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

impl TrainObserver for StatsWriter {
    fn on_iteration(&mut self, record: &IterationRecord) {
        self.line(&StatLine::Iteration(record));
    }

    fn on_epoch(&mut self, record: &EpochRecord) {
        if let Some(m) = record.val_miou {
            eprintln!("epoch {}: coverage {:.3}, validation mIoU {:.4}", record.epoch, record.coverage, m);
        } else {
            eprintln!("epoch {}: coverage {:.3}", record.epoch, record.coverage);
        }
        self.line(&StatLine::Epoch(record));
    }
}

fn report(params: &Params, dataset: &Dataset, classes: &ClassSet, out: Option<&Path>) -> Result<IouReport> {
    let r = trainer::evaluate(params, dataset, classes)?.iou();
    print!("{}", r.to_table(classes));
    if let Some(dir) = out {
        fs::write(dir.join("report.txt"), r.to_table(classes))?;
        fs::write(dir.join("report.kv"), r.to_key_values(classes))?;
    }
    Ok(r)
}

fn validation(data: &DataConfig, remap: &RemapTable) -> Result<Option<Dataset>> {
    data.validation.as_deref().map(|d| labeled_dataset(d, remap, "validation set")).transpose()
}

pub fn pretrain(args: &RunArgs) -> Result<()> {
    let mut cfg = run_config(args)?;
    cfg.train.mode = Mode::Pretrain;
    let remap = remap(&cfg.data)?;
    let source = labeled_dataset(DataConfig::require(&cfg.data.source, "source")?, &remap, "source set")?;
    let val = validation(&cfg.data, &remap)?;
    prepare_out(&args.out, "pretrain", &cfg)?;
    let mut stats = StatsWriter::create(&args.out.join("stats.jsonl"))?;
    let fit = trainer::pretrain::<f32>(&source, remap.classes(), &cfg.train)?;
    stats.supervised("pretrain", &fit.epoch_losses);
    stats.finish()?;
    fit.params.save(args.out.join("model.ckpt"))?;
    if let Some(v) = val {
        report(&fit.params, &v, remap.classes(), Some(&args.out))?;
    }
    Ok(())
}

pub fn finetune(args: &RunArgs) -> Result<()> {
    let mut cfg = run_config(args)?;
    cfg.train.mode = Mode::Finetune;
    let remap = remap(&cfg.data)?;
    let params = load_checkpoint(&cfg.data)?;
    let source = labeled_dataset(DataConfig::require(&cfg.data.source, "source")?, &remap, "source set")?;
    let target_l = labeled_target(&cfg.data, &remap)?;
    let val = validation(&cfg.data, &remap)?;
    prepare_out(&args.out, "finetune", &cfg)?;
    let mut stats = StatsWriter::create(&args.out.join("stats.jsonl"))?;
    let fit = trainer::finetune_ssda(&params, &source, &target_l, &cfg.train)?;
    stats.supervised("finetune", &fit.epoch_losses);
    stats.finish()?;
    fit.params.save(args.out.join("model.ckpt"))?;
    if let Some(v) = val {
        report(&fit.params, &v, remap.classes(), Some(&args.out))?;
    }
    Ok(())
}

struct AdaptRun {
    report: Option<IouReport>,
    stats: TrainStats,
}

/// Adaptation under `cfg`, writing everything to `out`. SSDA runs finetune
/// on source plus the labeled frames before adapting.
fn run_adapt(cfg: &RunConfig, out: &Path, command: &str) -> Result<AdaptRun> {
    let t = &cfg.train;
    if !matches!(t.mode, Mode::Uda | Mode::Ssda) {
        return Err(Error::Config(format!("adaptation needs mode uda or ssda, not {:?}", t.mode)));
    }
    let remap = remap(&cfg.data)?;
    let params = load_checkpoint(&cfg.data)?;
    let source = labeled_dataset(DataConfig::require(&cfg.data.source, "source")?, &remap, "source set")?;
    // Target labels are never read here, even when present on disk.
    let target = load_dataset(DataConfig::require(&cfg.data.target, "target")?, None)?;
    let target_l = match t.mode {
        Mode::Ssda => Some(labeled_target(&cfg.data, &remap)?),
        _ => None,
    };
    let val = validation(&cfg.data, &remap)?;
    prepare_out(out, command, cfg)?;
    let mut stats = StatsWriter::create(&out.join("stats.jsonl"))?;

    let start = match &target_l {
        Some(tl) if t.finetune_epochs > 0 => {
            let fit = trainer::finetune_ssda(&params, &source, tl, t)?;
            stats.supervised("finetune", &fit.epoch_losses);
            fit.params
        }
        _ => params,
    };
    let data = AdaptData {
        classes: remap.classes(),
        source: &source,
        target: &target,
        target_labeled: target_l.as_ref(),
        validation: val.as_ref(),
    };
    let result = trainer::adapt(&start, &data, t, &mut stats)?;
    stats.finish()?;
    result.student.save(out.join("student.ckpt"))?;
    result.teacher.save(out.join("teacher.ckpt"))?;
    let model = if t.eval_teacher { &result.teacher } else { &result.student };
    model.save(out.join("model.ckpt"))?;
    let report = val.as_ref().map(|v| report(model, v, remap.classes(), Some(out))).transpose()?;
    Ok(AdaptRun { report, stats: result.stats })
}

pub fn adapt(args: &RunArgs, mode: Option<ModeArg>) -> Result<()> {
    let mut cfg = run_config(args)?;
    if let Some(m) = mode {
        if args.mode.is_some_and(|a| a != m) {
            return Err(Error::Config("--mode contradicts the subcommand".into()));
        }
        cfg.train.mode = m.into();
    }
    let command = match cfg.train.mode {
        Mode::Ssda => "adapt-ssda",
        _ => "adapt-uda",
    };
    run_adapt(&cfg, &args.out, command).map(|_| ())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = &args.checkpoint {
        cfg.data.checkpoint = Some(p.clone());
    }
    let remap = remap(&cfg.data)?;
    let params = load_checkpoint(&cfg.data)?;
    let dir = match &args.dataset {
        Some(d) => d.as_path(),
        None => DataConfig::require(&cfg.data.validation, "validation")?,
    };
    let dataset = labeled_dataset(dir, &remap, "evaluation set")?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
    }
    let r = report(&params, &dataset, remap.classes(), args.out.as_deref())?;
    print!("{}", r.to_key_values(remap.classes()));
    Ok(())
}

pub fn gen_toy(args: &GenToyArgs) -> Result<()> {
    let shift = ShiftSpec::parse(&args.shift)?;
    let mut cfg = ToyConfig::new(args.frames, args.points, shift, args.seed);
    cfg.n_classes = args.classes;
    if let Some(v) = args.val_frames {
        cfg.n_val_frames = v;
    }
    let remap = toy::toy_remap(cfg.n_classes)?;
    let pair = toy::generate(&cfg)?;
    let inverse = remap.inverse();
    let out = &args.out;
    write_dataset(out.join("source"), &pair.source, &inverse)?;
    write_dataset(out.join("target"), &pair.target, &inverse)?;
    write_dataset(out.join("val"), &pair.target_val, &inverse)?;
    fs::write(out.join("toy.remap"), remap.to_text())?;
    let first = pair.target.frames().first().map(|f| f.name.clone()).unwrap_or_default();
    fs::write(out.join("labeled_frames.txt"), format!("{first}\n"))?;

    let run = RunConfig {
        data: DataConfig {
            source: Some("source".into()),
            target: Some("target".into()),
            validation: Some("val".into()),
            remap: Some("toy.remap".into()),
            labeled_frames: Some("labeled_frames.txt".into()),
            checkpoint: None,
        },
        train: toy::toy_train_config_for(cfg.n_classes),
    };
    let mut config = format!(
        "# Generated by gen-toy: {} frames x {} points, shift {:?}, seed {}\n",
        args.frames, args.points, args.shift, args.seed
    );
    config.push_str(&toml::to_string(&run).map_err(|e| Error::Config(e.to_string()))?);
    fs::write(out.join("toy.toml"), config)?;
    println!(
        "wrote {} source, {} target and {} validation frames to {}",
        pair.source.len(),
        pair.target.len(),
        pair.target_val.len(),
        out.display()
    );
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = run_config(&args.run)?;
    if !matches!(base.train.mode, Mode::Uda | Mode::Ssda) {
        return Err(Error::Config("sweeps run adaptation; set mode to uda or ssda".into()));
    }
    // Rejects unknown parameter names before any run starts.
    base.clone().set_param(&args.param, args.values[0])?;
    fs::create_dir_all(&args.run.out)?;
    let mut table = format!("{}\tmiou\tcoverage\n", args.param);
    for &v in &args.values {
        let mut cfg = base.clone();
        cfg.set_param(&args.param, v)?;
        cfg.train.validate()?;
        let dir = args.run.out.join(format!("{}={v}", args.param));
        eprintln!("{} = {v}", args.param);
        let run = run_adapt(&cfg, &dir, "sweep")?;
        let miou = run.report.as_ref().and_then(|r| r.miou).map_or("nan".to_string(), |m| format!("{m:.6}"));
        let coverage = run.stats.epochs.last().map_or(0.0, |e| e.coverage);
        writeln!(table, "{v}\t{miou}\t{coverage:.6}").unwrap();
    }
    print!("{table}");
    fs::write(args.run.out.join("sweep.tsv"), table)?;
    Ok(())
}
