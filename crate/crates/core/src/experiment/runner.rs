use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{BvReference, DatasetKind, ExperimentConfig, SCHEMA_VERSION};
use super::metrics::{
    bv_long, csv_path, metrics_long, mi_long, read_table, read_table_or_empty, write_table, BvRow, LongRow, MetricsRow,
    MiRow, Table,
};
use crate::analysis::{estimate_bias_variance, estimate_mi, eval_accuracy_under_noise, normalize_mi, variance_crossover};
use crate::data::{load_cifar10, load_mnist, Dataset, Split, DATA_ENV};
use crate::error::{Error, Result};
use crate::models::{build_model, clip_weights, load_checkpoint, save_checkpoint, ForwardOptions, Network, TrainingMeta};
use crate::noise::NoiseSpec;
use crate::rng::split_stream;
use crate::train::{accuracy, calibrate_quantizers, fit, EpochReport, Monitor, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    ClipFinetune,
    Retrain,
    EvalNoise,
    AnalyzeBv,
    AnalyzeMi,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::ClipFinetune => "clip-finetune",
            Command::Retrain => "retrain",
            Command::EvalNoise => "eval-noise",
            Command::AnalyzeBv => "analyze-bv",
            Command::AnalyzeMi => "analyze-mi",
        }
    }
}

/// Final checkpoint written by each training subcommand.
pub const PRETRAINED: &str = "pretrained.nnmc";
pub const TEACHER: &str = "teacher.nnmc";
pub const STUDENT: &str = "student.nnmc";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_id: String,
    pub dir: PathBuf,
    /// Final checkpoint of a training subcommand.
    pub checkpoint: Option<PathBuf>,
    /// Rows newly computed by this invocation (resumed rows excluded).
    pub computed: usize,
}

/// An artifact directory bound to one config.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub hash: String,
    log: File,
    clock: Instant,
}

impl Run {
    /// Creates or reopens `cfg.out_dir`. A directory holding a different
    /// config is refused.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(dir.join("checkpoints"))?;
        let hash = cfg.hash();
        let hash_file = dir.join("config.sha256");
        if let Ok(existing) = fs::read_to_string(&hash_file) {
            if existing.trim() != hash {
                return Err(Error::Config(format!(
                    "{} already holds a run with config hash {}, this config hashes to {hash}",
                    dir.display(),
                    existing.trim()
                )));
            }
        }
        fs::write(dir.join("config.json"), cfg.to_json())?;
        fs::write(&hash_file, format!("{hash}\n"))?;
        let log = OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
        Ok(Self {
            cfg,
            dir,
            hash,
            log,
            clock: Instant::now(),
        })
    }

    pub fn run_id(&self) -> String {
        self.hash[..12].to_string()
    }

    pub fn log(&mut self, msg: &str) -> Result<()> {
        writeln!(self.log, "[{:9.1}s] {msg}", self.clock.elapsed().as_secs_f64())?;
        Ok(())
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn row(&self, phase: &str, checkpoint: &str) -> MetricsRow {
        MetricsRow {
            schema_version: SCHEMA_VERSION,
            config_hash: self.hash.clone(),
            run_id: self.run_id(),
            phase: phase.into(),
            checkpoint: checkpoint.into(),
            ..MetricsRow::default()
        }
    }
}

/// Dataset root from the config or the environment.
pub fn data_root(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("no data_dir in config and {DATA_ENV} is not set")))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Split> {
    let root = data_root(cfg)?;
    let sub = |name: &str| {
        let d = root.join(name);
        if d.is_dir() {
            d
        } else {
            root.clone()
        }
    };
    match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&sub("mnist")),
        DatasetKind::Cifar10 => Ok(load_cifar10(&sub("cifar10"))?.0),
    }
}

pub fn run(cmd: Command, cfg: ExperimentConfig) -> Result<RunSummary> {
    let mut run = Run::open(cfg)?;
    run.log(&format!("{} start (run {})", cmd.name(), run.run_id()))?;
    let data = load_dataset(&run.cfg)?;
    let summary = match cmd {
        Command::Pretrain => pretrain(&mut run, &data),
        Command::ClipFinetune => clip_finetune(&mut run, &data),
        Command::Retrain => retrain(&mut run, &data),
        Command::EvalNoise => eval_noise(&mut run, &data),
        Command::AnalyzeBv => analyze_bv(&mut run, &data),
        Command::AnalyzeMi => analyze_mi(&mut run, &data),
    };
    match &summary {
        Ok(s) => run.log(&format!("{} done, {} rows computed", cmd.name(), s.computed))?,
        Err(e) => run.log(&format!("{} failed: {e}", cmd.name()))?,
    }
    summary
}

fn epoch_checkpoint(phase: &str, epoch: usize) -> String {
    format!("{phase}-{epoch:04}.nnmc")
}

/// Latest `<phase>-NNNN.nnmc` in the run's checkpoint directory.
fn latest_epoch_checkpoint(run: &Run, phase: &str) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(run.dir.join("checkpoints"))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(num) = name.strip_prefix(&format!("{phase}-")).and_then(|r| r.strip_suffix(".nnmc")) else {
            continue;
        };
        if let Ok(e) = num.parse::<usize>() {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn done(run: &Run, name: &str) -> Option<RunSummary> {
    let path = run.checkpoint_path(name);
    path.exists().then(|| RunSummary {
        run_id: run.run_id(),
        dir: run.dir.clone(),
        checkpoint: Some(path),
        computed: 0,
    })
}

fn training_meta(phase: &str, epoch: usize, cfg: &TrainConfig, net: &Network) -> TrainingMeta {
    let mut metrics = BTreeMap::new();
    metrics.insert("eta_train".into(), widen(cfg.noise.eta));
    metrics.insert("alpha".into(), widen(cfg.alpha));
    metrics.insert("temperature".into(), widen(cfg.temperature));
    if let Some(q) = &net.quant {
        metrics.insert("bits".into(), q[0].weights.bits as f64);
    }
    TrainingMeta {
        phase: phase.into(),
        epoch,
        seed: cfg.seed,
        metrics,
    }
}

/// `f32` hyperparameters widened through their shortest decimal form, so
/// 0.057 is stored as 0.057.
fn widen(x: f32) -> f64 {
    x.to_string().parse().unwrap_or(x as f64)
}

fn bits_of(net: &Network) -> Option<u32> {
    net.quant.as_ref().map(|q| q[0].weights.bits)
}

fn epoch_row(run: &Run, phase: &str, cfg: &TrainConfig, net: &Network, r: &EpochReport) -> MetricsRow {
    MetricsRow {
        epoch: Some(r.epoch + 1),
        eta_train: Some(widen(cfg.noise.eta)),
        temperature: Some(widen(cfg.temperature)),
        alpha: Some(widen(cfg.alpha)),
        bits: bits_of(net),
        clean_acc: r.clean_acc,
        noisy_acc_mean: r.noisy_acc,
        loss_hard: Some(r.loss.hard),
        loss_soft: Some(r.loss.soft),
        loss_reg: Some(r.loss.reg),
        loss_total: Some(r.loss.total),
        seconds: Some(r.seconds),
        ..run.row(phase, &epoch_checkpoint(phase, r.epoch + 1))
    }
}

/// Runs `fit` for one phase with per-epoch checkpoints, metrics rows and
/// resume from the latest epoch checkpoint.
fn train_phase(
    run: &mut Run,
    phase: &str,
    mut net: Network,
    teacher: Option<&Network>,
    cfg: &TrainConfig,
    data: &Split,
) -> Result<(Network, usize)> {
    let mut start = 0;
    if let Some(path) = latest_epoch_checkpoint(run, phase)? {
        let (resumed, meta) = load_checkpoint(&path)?;
        run.log(&format!("{phase}: resuming after epoch {} from {}", meta.epoch, path.display()))?;
        net = resumed;
        start = meta.epoch;
    }
    let mut rows: Vec<MetricsRow> = read_table_or_empty(&run.dir)?;
    rows.retain(|r| !(r.phase == phase && r.epoch.is_some_and(|e| e > start)));
    let monitor_data = (run.cfg.monitor_subset > 0)
        .then(|| data.test.sample(run.cfg.monitor_subset, &mut split_stream(run.cfg.seed, "monitor-subset", 0)));
    let monitor = monitor_data.as_ref().map(|d| Monitor { data: d, noisy: cfg.noise.eta > 0.0 });
    let every = run.cfg.checkpoint_every;
    let mut computed = 0;
    fit(&mut net, teacher, &data.train, cfg, start, monitor.as_ref(), &mut |r, student| {
        let completed = r.epoch + 1;
        if completed % every == 0 || completed == cfg.epochs {
            save_checkpoint(
                student,
                &training_meta(phase, completed, cfg, student),
                &run.checkpoint_path(&epoch_checkpoint(phase, completed)),
            )?;
        }
        rows.push(epoch_row(run, phase, cfg, student, r));
        write_table(&run.dir, &rows)?;
        computed += 1;
        run.log(&format!(
            "{phase} epoch {completed}/{}: loss {:.4} clean_acc {:?} ({:.0}s)",
            cfg.epochs, r.loss.total, r.clean_acc, r.seconds
        ))
    })?;
    Ok((net, computed))
}

fn finish_phase(run: &mut Run, phase: &str, name: &str, net: &Network, cfg: &TrainConfig, test: &Dataset, computed: usize) -> Result<RunSummary> {
    let quantized = net.quant.is_some();
    let acc = accuracy(net, test, &ForwardOptions::eval(None, quantized))?;
    let mut meta = training_meta(phase, cfg.epochs, cfg, net);
    meta.metrics.insert("test_acc".into(), acc);
    let path = run.checkpoint_path(name);
    save_checkpoint(net, &meta, &path)?;
    let final_phase = format!("{phase}-final");
    let mut rows: Vec<MetricsRow> = read_table_or_empty(&run.dir)?;
    rows.retain(|r| r.phase != final_phase);
    rows.push(MetricsRow {
        epoch: Some(cfg.epochs),
        eta_train: Some(widen(cfg.noise.eta)),
        temperature: Some(widen(cfg.temperature)),
        alpha: Some(widen(cfg.alpha)),
        bits: bits_of(net),
        clean_acc: Some(acc),
        ..run.row(&final_phase, name)
    });
    write_table(&run.dir, &rows)?;
    run.log(&format!("{phase}: test accuracy {acc:.4}, saved {}", path.display()))?;
    Ok(RunSummary {
        run_id: run.run_id(),
        dir: run.dir.clone(),
        checkpoint: Some(path),
        computed: computed + 1,
    })
}

fn pretrain(run: &mut Run, data: &Split) -> Result<RunSummary> {
    if let Some(s) = done(run, PRETRAINED) {
        return Ok(s);
    }
    let cfg = run.cfg.pretrain.clone().ok_or_else(|| Error::Config("pretrain needs a `pretrain` section".into()))?;
    let net = build_model(&run.cfg.model, run.cfg.seed)?;
    let (net, computed) = train_phase(run, "pretrain", net, None, &cfg.train, data)?;
    finish_phase(run, "pretrain", PRETRAINED, &net, &cfg.train, &data.test, computed)
}

fn clip_finetune(run: &mut Run, data: &Split) -> Result<RunSummary> {
    if let Some(s) = done(run, TEACHER) {
        return Ok(s);
    }
    let cfg = run.cfg.pretrain.clone().ok_or_else(|| Error::Config("clip-finetune needs a `pretrain` section".into()))?;
    let init = run.cfg.init.clone().unwrap_or_else(|| run.checkpoint_path(PRETRAINED));
    let (mut net, _) = load_checkpoint(&init)?;
    if latest_epoch_checkpoint(run, "finetune")?.is_none() {
        let ranges = clip_weights(&mut net, cfg.clip_k);
        let acc = accuracy(&net, &data.test, &ForwardOptions::clean())?;
        run.log(&format!("clipped to ±{}σ_W: ranges {ranges:?}, test accuracy {acc:.4}", cfg.clip_k))?;
        let mut rows: Vec<MetricsRow> = read_table_or_empty(&run.dir)?;
        rows.retain(|r| r.phase != "clip");
        rows.push(MetricsRow {
            epoch: Some(0),
            clean_acc: Some(acc),
            ..run.row("clip", &init.display().to_string())
        });
        write_table(&run.dir, &rows)?;
    }
    let (net, computed) = train_phase(run, "finetune", net, None, &cfg.finetune, data)?;
    let summary = finish_phase(run, "finetune", TEACHER, &net, &cfg.finetune, &data.test, computed)?;
    let (_, meta) = load_checkpoint(summary.checkpoint.as_ref().unwrap())?;
    let acc = meta.metrics["test_acc"];
    if acc < cfg.accuracy_floor {
        run.log(&format!("warning: teacher accuracy {acc:.4} below floor {:.4}", cfg.accuracy_floor))?;
    }
    Ok(summary)
}

fn retrain(run: &mut Run, data: &Split) -> Result<RunSummary> {
    if let Some(s) = done(run, STUDENT) {
        return Ok(s);
    }
    let cfg = run.cfg.retrain.clone().ok_or_else(|| Error::Config("retrain needs a `retrain` section".into()))?;
    let teacher = match &run.cfg.teacher {
        Some(p) => Some(load_checkpoint(p)?.0),
        None if cfg.alpha > 0.0 => return Err(Error::Config("distillation (alpha > 0) needs a `teacher` checkpoint".into())),
        None => None,
    };
    let init_path = run
        .cfg
        .init
        .clone()
        .or_else(|| run.cfg.teacher.clone())
        .ok_or_else(|| Error::Config("retrain needs an `init` or `teacher` checkpoint".into()))?;
    let (mut init, _) = load_checkpoint(&init_path)?;
    if let Some(q) = &run.cfg.quant {
        if init.quant.is_none() {
            init.quant = Some(calibrate_quantizers(&init, &data.train, q.bits, q.calibration_batches, cfg.batch_size, run.cfg.seed)?);
            run.log(&format!("calibrated {}-bit quantizers", q.bits))?;
        }
    }
    if cfg.quantized && init.quant.is_none() {
        return Err(Error::Config("quantized retraining needs a `quant` section or a quantized init".into()));
    }
    let (net, computed) = train_phase(run, "retrain", init, teacher.as_ref(), &cfg, data)?;
    finish_phase(run, "retrain", STUDENT, &net, &cfg, &data.test, computed)
}

/// The run's most advanced final checkpoint.
fn own_checkpoint(run: &Run) -> Result<PathBuf> {
    [STUDENT, TEACHER, PRETRAINED]
        .iter()
        .map(|n| run.checkpoint_path(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no checkpoints given and none found in {}", run.dir.display())))
}

fn checkpoints_or_own(run: &Run, list: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if list.is_empty() {
        Ok(vec![own_checkpoint(run)?])
    } else {
        Ok(list.to_vec())
    }
}

fn eval_noise(run: &mut Run, data: &Split) -> Result<RunSummary> {
    let ec = run.cfg.eval.clone();
    let test = data.test.sample(ec.test_subset, &mut split_stream(run.cfg.seed, "eval-subset", 0));
    let existing: Vec<MetricsRow> = read_table_or_empty(&run.dir)?;
    let mut rows: Vec<MetricsRow> = existing.iter().filter(|r| r.phase != "eval").cloned().collect();
    let mut computed = 0;
    for path in checkpoints_or_own(run, &ec.checkpoints)? {
        let label = path.display().to_string();
        let (net, meta) = load_checkpoint(&path)?;
        let eta_train = meta.metrics.get("eta_train").copied().unwrap_or(0.0);
        let quantized = net.quant.is_some();
        let refs = net.noise_references()?;
        let mut clean = None;
        for &g in &ec.eta_grid {
            let eta = if ec.relative { g * eta_train } else { g };
            let prior = existing
                .iter()
                .find(|r| r.phase == "eval" && r.checkpoint == label && r.eta_inf == Some(eta) && r.runs == Some(ec.runs));
            if let Some(r) = prior {
                rows.push(r.clone());
                continue;
            }
            let clean_acc = match clean {
                Some(c) => c,
                None => *clean.insert(accuracy(&net, &test, &ForwardOptions::eval(None, quantized))?),
            };
            let clock = Instant::now();
            let spec = run.cfg.noise.spec(eta, run.cfg.seed);
            let rep = eval_accuracy_under_noise(&net, &spec, &refs, &test, ec.runs, quantized, eta_train)?;
            rows.push(MetricsRow {
                epoch: Some(meta.epoch),
                eta_train: Some(eta_train),
                eta_inf: Some(eta),
                temporal_frac: Some(widen(spec.temporal_frac)),
                spatial_frac: Some(widen(spec.spatial_frac)),
                temperature: meta.metrics.get("temperature").copied(),
                alpha: meta.metrics.get("alpha").copied(),
                bits: bits_of(&net),
                clean_acc: Some(clean_acc),
                noisy_acc_mean: Some(rep.mean),
                noisy_acc_std: Some(rep.std),
                runs: Some(rep.runs),
                seconds: Some(clock.elapsed().as_secs_f64()),
                ..run.row("eval", &label)
            });
            write_table(&run.dir, &rows)?;
            computed += 1;
            run.log(&format!("eval {label} eta {eta}: {:.4} ± {:.4}", rep.mean, rep.std))?;
        }
    }
    write_table(&run.dir, &rows)?;
    Ok(RunSummary {
        run_id: run.run_id(),
        dir: run.dir.clone(),
        checkpoint: None,
        computed,
    })
}

/// Summary written next to `bv.csv`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BvSummary {
    pub checkpoint: String,
    pub reference: BvReference,
    /// Noise level where `l_var` first exceeds `l_bias`.
    pub crossover: Option<f64>,
}

fn analyze_bv(run: &mut Run, data: &Split) -> Result<RunSummary> {
    let bc = run.cfg.bv.clone();
    let path = match &bc.checkpoint {
        Some(p) => p.clone(),
        None => [PRETRAINED, TEACHER, STUDENT]
            .iter()
            .map(|n| run.checkpoint_path(n))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Config("analyze-bv needs `bv.checkpoint` or a checkpoint in the run directory".into()))?,
    };
    let label = path.display().to_string();
    let (net, _) = load_checkpoint(&path)?;
    let refs = match bc.reference {
        BvReference::WeightStd => net.weight_std_references(),
        BvReference::Range => net.noise_references()?,
    };
    let reference = serde_json::to_value(bc.reference)?.as_str().unwrap_or_default().to_string();
    let test = data.test.sample(bc.test_subset, &mut split_stream(run.cfg.seed, "bv-subset", 0));
    let existing: Vec<BvRow> = read_table_or_empty(&run.dir)?;
    let mut rows = Vec::new();
    let mut computed = 0;
    for &eta in &bc.grid {
        let prior = existing.iter().find(|r| {
            r.checkpoint == label && r.reference == reference && r.eta == eta && r.n_instances == bc.instances
        });
        if let Some(r) = prior {
            rows.push(r.clone());
            continue;
        }
        let rep = estimate_bias_variance(&net, &NoiseSpec::ideal(eta as f32, run.cfg.seed), &refs, &test, bc.instances)?;
        rows.push(BvRow {
            schema_version: SCHEMA_VERSION,
            config_hash: run.hash.clone(),
            run_id: run.run_id(),
            checkpoint: label.clone(),
            reference: reference.clone(),
            eta,
            l_var: rep.l_var,
            l_bias: rep.l_bias,
            l_pretrained: rep.l_pretrained,
            normalization: rep.normalization,
            n_instances: rep.n_instances,
        });
        write_table(&run.dir, &rows)?;
        computed += 1;
        run.log(&format!("bv eta {eta}: var {:.5} bias {:.5} pretrained {:.5}", rep.l_var, rep.l_bias, rep.l_pretrained))?;
    }
    write_table(&run.dir, &rows)?;
    let reports: Vec<_> = rows
        .iter()
        .map(|r| crate::analysis::BVReport {
            eta: r.eta,
            l_var: r.l_var,
            l_bias: r.l_bias,
            l_pretrained: r.l_pretrained,
            n_instances: r.n_instances,
            normalization: r.normalization,
        })
        .collect();
    let summary = BvSummary {
        checkpoint: label,
        reference: bc.reference,
        crossover: variance_crossover(&reports),
    };
    fs::write(run.dir.join("bv_summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(RunSummary {
        run_id: run.run_id(),
        dir: run.dir.clone(),
        checkpoint: None,
        computed,
    })
}

fn analyze_mi(run: &mut Run, data: &Split) -> Result<RunSummary> {
    let mc = run.cfg.mi.clone();
    let existing: Vec<MiRow> = read_table_or_empty(&run.dir)?;
    let mut rows = Vec::new();
    let mut computed = 0;
    let mut grid = mc.eta_grid.clone();
    if !grid.contains(&0.0) {
        grid.insert(0, 0.0);
    }
    for path in checkpoints_or_own(run, &mc.checkpoints)? {
        let label = path.display().to_string();
        let (net, _) = load_checkpoint(&path)?;
        let refs = net.noise_references()?;
        for s in 0..mc.seeds as u64 {
            let seed = run.cfg.seed.wrapping_add(s);
            let prior: Vec<MiRow> = existing
                .iter()
                .filter(|r| r.checkpoint == label && r.seed == seed && r.repeats == mc.repeats && r.subset == mc.subset)
                .cloned()
                .collect();
            if grid.iter().all(|e| prior.iter().any(|r| r.eta == *e)) {
                rows.extend(grid.iter().filter_map(|e| prior.iter().find(|r| r.eta == *e).cloned()));
                continue;
            }
            let subset = data.train.sample(mc.subset, &mut split_stream(seed, "mi-subset", 0));
            let mut reports = grid
                .iter()
                .map(|&eta| estimate_mi(&net, &NoiseSpec::ideal(eta as f32, seed), &refs, &subset, mc.repeats, mc.bins))
                .collect::<Result<Vec<_>>>()?;
            for (r, &eta) in reports.iter_mut().zip(&grid) {
                r.eta = eta;
            }
            normalize_mi(&mut reports)?;
            for r in reports {
                run.log(&format!("mi {label} seed {seed} eta {}: I {:.4} normalized {:?}", r.eta, r.mi, r.normalized))?;
                rows.push(MiRow {
                    schema_version: SCHEMA_VERSION,
                    config_hash: run.hash.clone(),
                    run_id: run.run_id(),
                    checkpoint: label.clone(),
                    seed,
                    eta: r.eta,
                    h_y: r.h_y,
                    h_y_given_x: r.h_y_given_x,
                    mi: r.mi,
                    normalized: r.normalized,
                    bins: r.bins,
                    subset: r.subset,
                    repeats: r.repeats,
                });
                computed += 1;
            }
            write_table(&run.dir, &rows)?;
        }
    }
    write_table(&run.dir, &rows)?;
    Ok(RunSummary {
        run_id: run.run_id(),
        dir: run.dir.clone(),
        checkpoint: None,
        computed,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportSummary {
    pub sources: usize,
    pub metrics: usize,
    pub bv: usize,
    pub mi: usize,
    pub long: usize,
}

fn collect_dirs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let has_table = [MetricsRow::FILE, BvRow::FILE, MiRow::FILE]
        .iter()
        .any(|f| root.join(format!("{f}.csv")).exists());
    if has_table {
        out.push(root.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        collect_dirs(&d, out)?;
    }
    Ok(())
}

fn read_all<T: Table>(dirs: &[PathBuf]) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for d in dirs {
        let p = csv_path::<T>(d);
        if p.exists() {
            rows.extend(read_table::<T>(&p)?);
        }
    }
    Ok(rows)
}

/// Merges every table found under `inputs` into `out`, plus a long-format
/// table with one metric value per row. Any schema mismatch is an error.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    let mut dirs = Vec::new();
    for i in inputs {
        if !i.is_dir() {
            return Err(Error::Report(format!("{} is not a directory", i.display())));
        }
        collect_dirs(i, &mut dirs)?;
    }
    let out_canon = out.canonicalize().ok();
    dirs.retain(|d| d.canonicalize().ok() != out_canon);
    if dirs.is_empty() {
        return Err(Error::Report("no metrics, bv or mi tables found".into()));
    }
    let metrics: Vec<MetricsRow> = read_all(&dirs)?;
    let bv: Vec<BvRow> = read_all(&dirs)?;
    let mi: Vec<MiRow> = read_all(&dirs)?;
    let mut long: Vec<LongRow> = metrics_long(&metrics);
    long.extend(bv_long(&bv));
    long.extend(mi_long(&mi));
    write_table(out, &metrics)?;
    write_table(out, &bv)?;
    write_table(out, &mi)?;
    write_table(out, &long)?;
    Ok(ReportSummary {
        sources: dirs.len(),
        metrics: metrics.len(),
        bv: bv.len(),
        mi: mi.len(),
        long: long.len(),
    })
}
