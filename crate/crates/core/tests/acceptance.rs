//! Acceptance checks, one stdout line per criterion.
//!
//! Long experiments are cached as artifact directories under
//! `NOISY_NN_ACCEPTANCE_DIR` (default `target/acceptance`), keyed by config
//! hash, so reruns only recompute what changed. A cold cache takes hours.
//!
//! Environment:
//! - `NOISY_NN_DATA`: dataset root (MNIST in it or in `mnist/`).
//! - `NOISY_NN_ACCEPTANCE_ONLY=1,2,8`: run a subset of criteria.
//! - `NOISY_NN_ACCEPTANCE_STRICT=1`: exit non-zero when a criterion fails.
//! - `NOISY_NN_CIFAR=1`: run the optional CIFAR-10 criterion (data under `cifar10/`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use noisy_nn::analysis::{mean_std, BvAccumulator};
use noisy_nn::data::Dataset;
use noisy_nn::engine::{grad_check, Tape, Tensor, Var};
use noisy_nn::experiment::{
    load_dataset, read_table, run, BvRow, BvSummary, Command, DatasetKind, ExperimentConfig, InferenceNoise,
    MetricsRow, MiRow, ETA_GRID, PRETRAINED, SCHEMA_VERSION,
};
use noisy_nn::models::{build_model, decode_checkpoint, encode_checkpoint, ModelConfig, TrainingMeta, Variant};
use noisy_nn::noise::{NoiseContextSet, NoiseReference, NoiseSpec};
use noisy_nn::quant::{QuantPoint, QuantSpec};
use noisy_nn::rng::split_stream;
use noisy_nn::train::{fit, one_hot, PretrainConfig, TrainConfig};
use rand::Rng;
use rand_distr::StandardNormal;

const RUNS: usize = 20;
const SEED: u64 = 1;
const MID_ETA: f64 = 0.057;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Outcome {
    id: u8,
    status: Status,
    summary: String,
}

impl Outcome {
    fn new(id: u8, pass: bool, summary: String) -> Self {
        let status = if pass { Status::Pass } else { Status::Fail };
        Self { id, status, summary }
    }
}

struct Lab {
    cache: PathBuf,
    details: String,
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "baseline",
        Variant::Deeper => "deeper",
        Variant::Wider => "wider",
        Variant::Custom => "custom",
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Mean, sample std and run count of a set of accuracy rows.
struct Cell {
    mean: f64,
    std: f64,
    clean: f64,
}

impl Lab {
    fn note(&mut self, line: impl AsRef<str>) {
        eprintln!("  {}", line.as_ref());
        self.details.push_str(line.as_ref());
        self.details.push('\n');
    }

    fn base(&self, model: ModelConfig) -> ExperimentConfig {
        ExperimentConfig::from_json(
            &serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "dataset": "mnist",
                "model": model,
                "seed": SEED,
                "out_dir": "",
            })
            .to_string(),
        )
        .expect("valid base config")
    }

    /// Runs `cmds` in an artifact directory named after the config hash.
    fn stage(&mut self, name: &str, mut cfg: ExperimentConfig, cmds: &[Command]) -> noisy_nn::Result<ExperimentConfig> {
        cfg.out_dir = PathBuf::new();
        cfg.out_dir = self.cache.join(format!("{name}-{}", &cfg.hash()[..12]));
        for &c in cmds {
            let clock = Instant::now();
            let s = run(c, cfg.clone())?;
            if s.computed > 0 {
                self.note(format!("{name}: {} computed {} rows in {:.0}s", c.name(), s.computed, clock.elapsed().as_secs_f64()));
            }
        }
        Ok(cfg)
    }

    fn teacher_config(&self, v: Variant) -> ExperimentConfig {
        let mut cfg = self.base(ModelConfig::lenet(v));
        let full = v == Variant::Baseline;
        let mut train = TrainConfig::clean(if full { 10 } else { 3 }, SEED);
        let mut finetune = TrainConfig::clean(1, SEED);
        finetune.lr0 = 0.01;
        if !full {
            train.train_subset = 0;
            finetune.train_subset = 20_000;
        }
        cfg.pretrain = Some(PretrainConfig {
            train,
            finetune,
            clip_k: 2.0,
            accuracy_floor: 0.99,
        });
        cfg.monitor_subset = 2000;
        cfg
    }

    /// Pretrained and clipped-teacher checkpoints of one variant.
    fn teacher(&mut self, v: Variant) -> noisy_nn::Result<(ExperimentConfig, PathBuf, PathBuf)> {
        let cfg = self.teacher_config(v);
        let cfg = self.stage(&format!("teacher-{}", variant_name(v)), cfg, &[Command::Pretrain, Command::ClipFinetune])?;
        let dir = cfg.out_dir.join("checkpoints");
        Ok((cfg, dir.join(PRETRAINED), dir.join(noisy_nn::experiment::TEACHER)))
    }

    fn student(&mut self, v: Variant, teacher: &Path, eta: f64, alpha: f32) -> noisy_nn::Result<PathBuf> {
        let mut cfg = self.base(ModelConfig::lenet(v));
        let mut r = TrainConfig::retrain(1, eta as f32, alpha, SEED);
        if v != Variant::Baseline {
            r.train_subset = 20_000;
        }
        cfg.retrain = Some(r);
        cfg.teacher = Some(teacher.to_path_buf());
        let kind = if alpha > 0.0 { "distill" } else { "noise" };
        let cfg = self.stage(&format!("student-{}-{kind}-{eta}", variant_name(v)), cfg, &[Command::Retrain])?;
        Ok(cfg.out_dir.join("checkpoints").join(noisy_nn::experiment::STUDENT))
    }

    fn test_subset(v: Variant) -> usize {
        if v == Variant::Baseline {
            2000
        } else {
            1000
        }
    }

    /// Accuracy rows of `checkpoints` over `grid`, in (checkpoint, η) order.
    fn eval(
        &mut self,
        name: &str,
        v: Variant,
        checkpoints: &[PathBuf],
        grid: &[f64],
        relative: bool,
        noise: InferenceNoise,
    ) -> noisy_nn::Result<Vec<Cell>> {
        let mut cfg = self.base(ModelConfig::lenet(v));
        cfg.eval.checkpoints = checkpoints.to_vec();
        cfg.eval.eta_grid = grid.to_vec();
        cfg.eval.relative = relative;
        cfg.eval.runs = RUNS;
        cfg.eval.test_subset = Self::test_subset(v);
        cfg.noise = noise;
        let cfg = self.stage(name, cfg, &[Command::EvalNoise])?;
        let rows: Vec<MetricsRow> = read_table(&cfg.out_dir.join("metrics.csv"))?;
        Ok(rows
            .iter()
            .filter(|r| r.phase == "eval")
            .map(|r| Cell {
                mean: r.noisy_acc_mean.unwrap_or(f64::NAN),
                std: r.noisy_acc_std.unwrap_or(f64::NAN),
                clean: r.clean_acc.unwrap_or(f64::NAN),
            })
            .collect())
    }
}

fn metrics(dir: &Path) -> noisy_nn::Result<Vec<MetricsRow>> {
    read_table(&dir.join("metrics.csv"))
}

fn final_acc(rows: &[MetricsRow], phase: &str) -> f64 {
    rows.iter().find(|r| r.phase == phase).and_then(|r| r.clean_acc).unwrap_or(f64::NAN)
}

fn combined_std(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn criterion_1(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let (cfg, _, _) = lab.teacher(Variant::Baseline)?;
    let rows = metrics(&cfg.out_dir)?;
    let pretrained = final_acc(&rows, "pretrain-final");
    let teacher = final_acc(&rows, "finetune-final");
    let minutes = rows.iter().filter(|r| r.phase == "pretrain").filter_map(|r| r.seconds).sum::<f64>() / 60.0;
    let pass = pretrained >= 0.99 && minutes <= 30.0;
    Ok(Outcome::new(
        1,
        pass,
        format!(
            "baseline LeNet test accuracy {} after pretraining (>= 99.0%), {} after clip+finetune; pretraining took {minutes:.1} min (<= 30)",
            pct(pretrained),
            pct(teacher)
        ),
    ))
}

/// `relu(w·x)` with `w ~ N(w0, s²)`: decomposition against direct expected MSE.
fn toy_decomposition_gap() -> f64 {
    let xs = [0.5, 1.0, -0.8, 2.0, 1.5];
    let ys = [0.3f32, 0.1, 0.0, 1.0, 0.5];
    let (w0, s, n) = (0.4, 0.6, 10_000);
    let mut rng = split_stream(SEED, "acceptance-toy", 0);
    let mut acc = BvAccumulator::new(xs.len());
    let mut out = vec![0.0f32; xs.len()];
    for _ in 0..n {
        let w = w0 + s * rng.sample::<f64, _>(StandardNormal);
        for (o, &x) in out.iter_mut().zip(&xs) {
            *o = (w * x).max(0.0) as f32;
        }
        acc.add_instance(&out).unwrap();
    }
    let clean: Vec<f32> = xs.iter().map(|&x| ((w0 * x) as f32).max(0.0)).collect();
    let r = acc.finish(&ys, &clean, s).unwrap();
    // direct MSE over the same instances
    let mut rng = split_stream(SEED, "acceptance-toy", 0);
    let mut mse = 0.0;
    for _ in 0..n {
        let w = w0 + s * rng.sample::<f64, _>(StandardNormal);
        mse += xs.iter().zip(&ys).map(|(&x, &y)| (((w * x).max(0.0) as f32) as f64 - y as f64).powi(2)).sum::<f64>();
    }
    mse /= (n * xs.len()) as f64;
    ((r.l_var + r.l_bias) - mse).abs() / mse
}

fn criterion_2(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let (_, pretrained, _) = lab.teacher(Variant::Baseline)?;
    let mut cfg = lab.base(ModelConfig::lenet(Variant::Baseline));
    cfg.bv.checkpoint = Some(pretrained);
    cfg.bv.instances = 100;
    cfg.bv.test_subset = 2000;
    let cfg = lab.stage("bv-baseline", cfg, &[Command::AnalyzeBv])?;
    let rows: Vec<BvRow> = read_table(&cfg.out_dir.join("bv.csv"))?;
    let summary: BvSummary = serde_json::from_slice(&fs::read(cfg.out_dir.join("bv_summary.json"))?)?;
    for r in &rows {
        lab.note(format!(
            "bv sigma_N/sigma_W {:.1}: l_var {:.5} l_bias {:.5} l_pretrained {:.5}",
            r.eta, r.l_var, r.l_bias, r.l_pretrained
        ));
    }
    let zero = rows.iter().find(|r| r.eta == 0.0);
    let exact = zero.is_some_and(|r| r.l_var == 0.0 && (r.l_bias - r.l_pretrained).abs() <= 1e-6);
    let cross_ok = summary.crossover.is_some_and(|c| (0.4..=0.8).contains(&c));
    let toy = toy_decomposition_gap();
    Ok(Outcome::new(
        2,
        exact && cross_ok && toy <= 0.02,
        format!(
            "eta=0 exact: {exact}; l_var overtakes l_bias at sigma_N/sigma_W = {} (in [0.4, 0.8]); toy decomposition gap {:.2}% (<= 2%)",
            summary.crossover.map_or("never".into(), |c| format!("{c:.3}")),
            100.0 * toy
        ),
    ))
}

/// Per-η mean and sample std of normalized MI over seeds.
fn mi_curve(lab: &mut Lab, v: Variant, grid: &[f64]) -> noisy_nn::Result<BTreeMap<u64, (f64, f64, f64)>> {
    let (_, _, teacher) = lab.teacher(v)?;
    let mut cfg = lab.base(ModelConfig::lenet(v));
    cfg.mi.checkpoints = vec![teacher];
    cfg.mi.eta_grid = grid.to_vec();
    let cfg = lab.stage(&format!("mi-{}", variant_name(v)), cfg, &[Command::AnalyzeMi])?;
    let rows: Vec<MiRow> = read_table(&cfg.out_dir.join("mi.csv"))?;
    let mut by_eta: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_eta.entry(r.eta.to_bits()).or_default().push(r.normalized.unwrap_or(f64::NAN));
    }
    let mut out = BTreeMap::new();
    for (bits, vals) in by_eta {
        let (m, s) = mean_std(&vals);
        let eta = f64::from_bits(bits);
        lab.note(format!("mi {} eta {eta}: normalized {m:.4} ± {s:.4} over {} seeds", variant_name(v), vals.len()));
        out.insert(bits, (eta, m, s));
    }
    Ok(out)
}

fn monotone_within(curve: &BTreeMap<u64, (f64, f64, f64)>, tol: f64) -> bool {
    let mut pts: Vec<(f64, f64)> = curve.values().map(|&(e, m, _)| (e, m)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).all(|w| w[1].1 <= w[0].1 + tol)
}

fn criterion_3(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let mut grid = vec![0.0];
    grid.extend(ETA_GRID);
    let base = mi_curve(lab, Variant::Baseline, &grid)?;
    let deep = mi_curve(lab, Variant::Deeper, &grid)?;
    let wide = mi_curve(lab, Variant::Wider, &[0.0, MID_ETA])?;
    let unit = |c: &BTreeMap<u64, (f64, f64, f64)>| c.get(&0f64.to_bits()).is_some_and(|&(_, m, s)| m == 1.0 && s == 0.0);
    let mono = monotone_within(&base, 0.02) && monotone_within(&deep, 0.02);
    let key = MID_ETA.to_bits();
    let (_, bm, bs) = base[&key];
    let (_, dm, ds) = deep[&key];
    let (_, wm, ws) = wide[&key];
    let ordered = dm <= bm + combined_std(bs, ds);
    lab.note(format!(
        "mi ordering at eta {MID_ETA}: deeper {dm:.4}±{ds:.4} baseline {bm:.4}±{bs:.4} wider {wm:.4}±{ws:.4} (wider >= baseline: {})",
        wm + combined_std(ws, bs) >= bm
    ));
    Ok(Outcome::new(
        3,
        unit(&base) && unit(&deep) && mono && ordered,
        format!(
            "normalized I = 1 at eta=0: {}; non-increasing within 0.02: {mono}; at eta={MID_ETA} deeper {dm:.3}±{ds:.3} <= baseline {bm:.3}±{bs:.3}: {ordered}",
            unit(&base) && unit(&deep)
        ),
    ))
}

/// (no retrain, noise-only, distill) cells of one variant at matched η.
fn matched(lab: &mut Lab, v: Variant) -> noisy_nn::Result<Vec<(f64, [Cell; 3])>> {
    let (_, _, teacher) = lab.teacher(v)?;
    let mut out = Vec::new();
    for eta in ETA_GRID {
        let noise = lab.student(v, &teacher, eta, 0.0)?;
        let distill = lab.student(v, &teacher, eta, 1.0)?;
        let cells = lab.eval(
            &format!("eval-{}-{eta}", variant_name(v)),
            v,
            &[teacher.clone(), noise, distill],
            &[eta],
            false,
            InferenceNoise::default(),
        )?;
        let [t, n, d]: [Cell; 3] = cells.try_into().map_err(|_| noisy_nn::Error::Report("expected three eval rows".into()))?;
        lab.note(format!(
            "{} eta {eta}: no-retrain {}±{} noise-only {}±{} distill {}±{} (clean {} / {} / {})",
            variant_name(v),
            pct(t.mean),
            pct(t.std),
            pct(n.mean),
            pct(n.std),
            pct(d.mean),
            pct(d.std),
            pct(t.clean),
            pct(n.clean),
            pct(d.clean)
        ));
        out.push((eta, [t, n, d]));
    }
    Ok(out)
}

fn criterion_4(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for v in [Variant::Baseline, Variant::Deeper, Variant::Wider] {
        let cells = matched(lab, v)?;
        let violations: Vec<String> = cells
            .iter()
            .filter(|(_, [t, n, d])| !(d.mean >= n.mean && n.mean >= t.mean))
            .map(|(e, _)| format!("{e}"))
            .collect();
        // highest η where noise-only loses at least 2% against the clean teacher
        let margin = cells
            .iter()
            .rev()
            .find(|(_, [t, n, _])| t.clean - n.mean >= 0.02)
            .map(|(e, [_, n, d])| (*e, d.mean - n.mean, combined_std(d.std, n.std)));
        let margin_ok = margin.is_none_or(|(_, m, s)| m > s);
        pass &= violations.is_empty() && margin_ok;
        parts.push(format!(
            "{}: ordering {}{}",
            variant_name(v),
            if violations.is_empty() { "holds".to_string() } else { format!("fails at eta {}", violations.join(",")) },
            match margin {
                Some((e, m, s)) => format!(", margin at eta {e} {:+.2}% vs std {:.2}%", 100.0 * m, 100.0 * s),
                None => ", noise-only never loses 2%".into(),
            }
        ));
    }
    Ok(Outcome::new(4, pass, parts.join("; ")))
}

fn criterion_5(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let v = Variant::Baseline;
    let (_, _, teacher) = lab.teacher(v)?;
    let noise = lab.student(v, &teacher, MID_ETA, 0.0)?;
    let distill = lab.student(v, &teacher, MID_ETA, 1.0)?;
    let mult = [0.5, 0.75, 1.0, 1.25, 1.5];
    let cells = lab.eval("mismatch-baseline", v, &[noise, distill], &mult, true, InferenceNoise::default())?;
    let (n, d) = cells.split_at(mult.len());
    let mut dominated = true;
    for (i, m) in mult.iter().enumerate() {
        lab.note(format!("mismatch {m}x eta_train: noise-only {} distill {}", pct(n[i].mean), pct(d[i].mean)));
        dominated &= d[i].mean >= n[i].mean;
    }
    let worst = (0..mult.len()).map(|i| d[i].mean - n[i].mean).fold(f64::INFINITY, f64::min);
    Ok(Outcome::new(
        5,
        dominated,
        format!("distilled curve dominates noise-only over eta_inf in {{0.5..1.5}}x{MID_ETA}: {dominated} (smallest gap {:+.2}%)", 100.0 * worst),
    ))
}

fn criterion_6(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let v = Variant::Baseline;
    let (_, _, teacher) = lab.teacher(v)?;
    let distill = lab.student(v, &teacher, MID_ETA, 1.0)?;
    let ideal = lab.eval("nonideal-ideal", v, &[distill.clone()], &[MID_ETA], false, InferenceNoise::default())?;
    let fluct = InferenceNoise {
        temporal_frac: 0.2,
        spatial_frac: 0.2,
    };
    let real = lab.eval("nonideal-fluct", v, &[distill], &[MID_ETA], false, fluct)?;
    let dev = (real[0].mean - ideal[0].mean).abs();
    Ok(Outcome::new(
        6,
        dev < 0.005,
        format!(
            "distilled model at eta0={MID_ETA}: ideal {} vs 20% temporal + 20% spatial {}, deviation {:.2}% (< 0.5%)",
            pct(ideal[0].mean),
            pct(real[0].mean),
            100.0 * dev
        ),
    ))
}

fn criterion_7(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let v = Variant::Baseline;
    let (tcfg, _, teacher) = lab.teacher(v)?;
    let fp_acc = final_acc(&metrics(&tcfg.out_dir)?, "finetune-final");

    let quantized = |lab: &Lab, init: &Path, teacher: Option<&Path>, eta: f64, alpha: f32| {
        let mut cfg = lab.base(ModelConfig::lenet(v));
        let mut r = TrainConfig::retrain(1, eta as f32, alpha, SEED);
        r.quantized = true;
        cfg.retrain = Some(r);
        cfg.init = Some(init.to_path_buf());
        cfg.teacher = teacher.map(Path::to_path_buf);
        cfg.quant = Some(serde_json::from_value(serde_json::json!({"bits": 4})).unwrap());
        cfg
    };
    let cfg = quantized(lab, &teacher, None, 0.0, 0.0);
    let qcfg = lab.stage("quant-baseline", cfg, &[Command::Retrain])?;
    let q_base = qcfg.out_dir.join("checkpoints").join(noisy_nn::experiment::STUDENT);
    let q_acc = final_acc(&metrics(&qcfg.out_dir)?, "retrain-final");

    let mut students = Vec::new();
    for alpha in [0.0f32, 1.0] {
        let cfg = quantized(lab, &q_base, Some(&teacher), MID_ETA, alpha);
        let kind = if alpha > 0.0 { "distill" } else { "noise" };
        let c = lab.stage(&format!("quant-{kind}"), cfg, &[Command::Retrain])?;
        students.push(c.out_dir.join("checkpoints").join(noisy_nn::experiment::STUDENT));
    }
    let cells = lab.eval(
        "eval-quant",
        v,
        &[q_base, students[0].clone(), students[1].clone()],
        &[MID_ETA],
        false,
        InferenceNoise::default(),
    )?;
    let (none, noise, distill) = (&cells[0], &cells[1], &cells[2]);
    lab.note(format!(
        "4-bit at eta {MID_ETA}: no-retrain {} noise-only {} distill {} (clean quantized {})",
        pct(none.mean),
        pct(noise.mean),
        pct(distill.mean),
        pct(none.clean)
    ));
    let close = fp_acc - q_acc <= 0.01;
    let loss = none.clean - distill.mean;
    let ordered = distill.mean >= noise.mean && noise.mean >= none.mean;
    Ok(Outcome::new(
        7,
        close && loss < 0.02 && ordered,
        format!(
            "4-bit clean {} vs full precision {} (within 1%: {close}); distilled loss at eta={MID_ETA} {:.2}% (< 2%); ordering distill >= noise-only >= none: {ordered}",
            pct(q_acc),
            pct(fp_acc),
            100.0 * loss
        ),
    ))
}

fn tiny_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = split_stream(seed, "acceptance-tiny", 0);
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut px = vec![0.0f32; n * 256];
    for (i, &l) in labels.iter().enumerate() {
        for p in 0..256 {
            let on = p / 16 / 4 == (l as usize) % 4 && (p % 16) / 4 == (l as usize) / 4 % 4;
            px[i * 256 + p] = if on { 1.0 } else { 0.1 * rng.random::<f32>() };
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 16, 16], px).unwrap(), labels).unwrap()
}

fn criterion_8(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    let clock = Instant::now();
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let mut rng = split_stream(SEED, "acceptance-props", 0);
    let mut normal = |shape: Vec<usize>, s: f32| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| s * rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
    };

    // gradient check of a conv + linear stack, and the frozen-noise STE oracle
    let x = normal(vec![2, 2, 6, 6], 1.0);
    let wc = normal(vec![3, 2, 3, 3], 0.4);
    let wl = normal(vec![4, 48], 0.2);
    let dc = normal(vec![3, 2, 3, 3], 0.05);
    let y = one_hot(&[1, 3], 4)?;
    let net = |noisy: bool| {
        let (x, dc, y) = (x.clone(), dc.clone(), y.clone());
        move |tape: &mut Tape, v: &[Var]| -> noisy_nn::Result<Var> {
            let xv = tape.constant(x.clone());
            let w = if noisy { tape.add_const(v[0], &dc)? } else { v[0] };
            let h = tape.conv2d(xv, w, 1, 0)?;
            let h = tape.flatten(h)?;
            let z = tape.linear(h, v[1])?;
            tape.softmax_cross_entropy(z, 2.0, &y)
        }
    };
    let g = grad_check(net(false), &[wc.clone(), wl.clone()], 1e-3, None)?;
    checks.push(("gradient check", g.max_rel_error < 1e-2));
    let g = grad_check(net(true), &[wc.clone(), wl.clone()], 1e-3, None)?;
    checks.push(("frozen-noise STE", g.max_rel_error < 1e-2));

    // noise moments at 10⁶ samples
    let refs = [NoiseReference {
        layer_id: 0,
        range: (-1.0, 1.0),
        shape: vec![1000, 1000],
    }];
    let ctx = NoiseContextSet::instantiate(NoiseSpec::ideal(MID_ETA as f32, SEED), &refs, 0)?;
    let p = ctx.sample(MID_ETA as f32, &mut split_stream(SEED, "acceptance-moments", 0));
    let d = p.deltas[0].data();
    let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    checks.push(("noise std", ((sd - 2.0 * MID_ETA) / (2.0 * MID_ETA)).abs() < 0.02));

    // quantizer level set, idempotence, monotonicity
    let q = QuantSpec::new(4, -1.0, 1.0, QuantPoint::Weights)?;
    let levels: Vec<f32> = (0..q.levels()).map(|k| q.level(k)).collect();
    let mut xs: Vec<f32> = (0..10_000).map(|i| -1.5 + 3.0 * i as f32 / 9999.0).collect();
    xs.sort_by(f32::total_cmp);
    let qs: Vec<f32> = xs.iter().map(|&v| q.quantize_value(v)).collect();
    checks.push((
        "quantizer",
        levels.len() == 16
            && qs.iter().all(|v| levels.contains(v))
            && qs.iter().all(|&v| q.quantize_value(v) == v)
            && qs.windows(2).all(|w| w[0] <= w[1]),
    ));

    // softmax Jacobian shrinks as 1/T
    let z = normal(vec![1, 10], 0.01);
    let jac_norm = |t: f32| -> f32 {
        (0..10)
            .map(|i| {
                let mut tape = Tape::new();
                let v = tape.param(0, z.clone());
                let p = tape.softmax_t(v, t).unwrap();
                let mut sel = vec![0.0; 10];
                sel[i] = 1.0;
                let s = tape.constant(Tensor::new(vec![1, 10], sel).unwrap());
                let picked = tape.mul(p, s).unwrap();
                let out = tape.sum(picked);
                tape.backward(out).unwrap().wrt(v).unwrap().data().iter().map(|g| g.abs()).sum::<f32>()
            })
            .fold(0.0, f32::max)
    };
    let j1 = jac_norm(1.0);
    checks.push(("softmax 1/T Jacobian", [2.0f32, 6.0].iter().all(|&t| ((jac_norm(t) / j1) * t - 1.0).abs() < 0.05)));

    // checkpoint round trip
    let model = ModelConfig::lenet(Variant::Baseline);
    let built = build_model(&model, SEED)?;
    let meta = TrainingMeta {
        phase: "acceptance".into(),
        ..TrainingMeta::default()
    };
    let bytes = encode_checkpoint(&built, &meta)?;
    let (back, _) = decode_checkpoint(&bytes)?;
    checks.push(("checkpoint round trip", encode_checkpoint(&back, &meta)? == bytes));

    // full-run determinism
    let data = tiny_dataset(200, SEED);
    let cfg = ModelConfig {
        widths: vec![2, 4, 8],
        in_size: 16,
        ..ModelConfig::lenet(Variant::Custom)
    };
    let mut tc = TrainConfig::retrain(2, 0.05, 0.0, SEED);
    tc.batch_size = 20;
    let trained = || -> noisy_nn::Result<Vec<u8>> {
        let mut net = build_model(&cfg, SEED)?;
        noisy_nn::models::clip_weights(&mut net, 2.0);
        fit(&mut net, None, &data, &tc, 0, None, &mut |_, _| Ok(()))?;
        encode_checkpoint(&net, &meta)
    };
    checks.push(("determinism", trained()? == trained()?));

    let secs = clock.elapsed().as_secs_f64();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    lab.note(format!("property checks: {checks:?}"));
    Ok(Outcome::new(
        8,
        failed.is_empty() && secs < 300.0,
        format!(
            "{} property checks, {} failed{}; {secs:.1}s (< 5 min)",
            checks.len(),
            failed.len(),
            if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
        ),
    ))
}

fn criterion_9(lab: &mut Lab) -> noisy_nn::Result<Outcome> {
    if std::env::var("NOISY_NN_CIFAR").as_deref() != Ok("1") {
        return Ok(Outcome {
            id: 9,
            status: Status::Skipped,
            summary: "optional CIFAR-10 run not requested (set NOISY_NN_CIFAR=1 with CIFAR-10 under the data root)".into(),
        });
    }
    let model = ModelConfig::resnet_compact(3);
    let mut probe = lab.base(model.clone());
    probe.dataset = DatasetKind::Cifar10;
    if let Err(e) = load_dataset(&probe) {
        return Ok(Outcome {
            id: 9,
            status: Status::Skipped,
            summary: format!("CIFAR-10 unavailable: {e}"),
        });
    }
    let eta = 0.1;
    let mut cells: Vec<[f64; 3]> = Vec::new();
    for seed in [1u64, 2] {
        let mut cfg = probe.clone().with_seed(seed);
        let mut finetune = TrainConfig::clean(2, seed);
        finetune.lr0 = 0.01;
        cfg.pretrain = Some(PretrainConfig {
            train: TrainConfig::clean(30, seed),
            finetune,
            clip_k: 2.0,
            accuracy_floor: 0.0,
        });
        let tcfg = lab.stage(&format!("cifar-teacher-{seed}"), cfg.clone(), &[Command::Pretrain, Command::ClipFinetune])?;
        let teacher = tcfg.out_dir.join("checkpoints").join(noisy_nn::experiment::TEACHER);
        let mut ckpts = vec![teacher.clone()];
        for alpha in [0.0f32, 1.0] {
            let mut s = probe.clone().with_seed(seed);
            s.retrain = Some(TrainConfig::retrain(10, eta as f32, alpha, seed));
            s.teacher = Some(teacher.clone());
            let s = lab.stage(&format!("cifar-student-{alpha}-{seed}"), s, &[Command::Retrain])?;
            ckpts.push(s.out_dir.join("checkpoints").join(noisy_nn::experiment::STUDENT));
        }
        let mut e = probe.clone().with_seed(seed);
        e.eval.checkpoints = ckpts;
        e.eval.eta_grid = vec![eta];
        e.eval.runs = RUNS;
        let e = lab.stage(&format!("cifar-eval-{seed}"), e, &[Command::EvalNoise])?;
        let rows: Vec<MetricsRow> = read_table(&e.out_dir.join("metrics.csv"))?;
        let accs: Vec<f64> = rows.iter().filter(|r| r.phase == "eval").filter_map(|r| r.noisy_acc_mean).collect();
        cells.push([accs[0], accs[1], accs[2]]);
    }
    let stat = |i: usize| mean_std(&cells.iter().map(|c| c[i]).collect::<Vec<_>>());
    let (t, n, d) = (stat(0), stat(1), stat(2));
    let pass = d.0 - n.0 > combined_std(d.1, n.1) && n.0 - t.0 > combined_std(n.1, t.1);
    Ok(Outcome::new(
        9,
        pass,
        format!("CIFAR-10 at eta={eta}: distill {} > noise-only {} > no-retrain {}", pct(d.0), pct(n.0), pct(t.0)),
    ))
}

fn mnist_available(lab: &Lab) -> Result<(), String> {
    load_dataset(&lab.base(ModelConfig::lenet(Variant::Baseline))).map(|_| ()).map_err(|e| e.to_string())
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; they do not apply here
    let flag = |name: &str| std::env::var(name).ok();
    let strict = flag("NOISY_NN_ACCEPTANCE_STRICT").as_deref() == Some("1");
    let only: Option<Vec<u8>> = flag("NOISY_NN_ACCEPTANCE_ONLY").map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let cache = flag("NOISY_NN_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
    fs::create_dir_all(&cache).expect("cache directory");
    let mut lab = Lab {
        cache,
        details: String::new(),
    };
    let data = mnist_available(&lab);

    // cheap checks and the baseline network first
    let order: [u8; 9] = [8, 1, 2, 5, 6, 7, 3, 4, 9];
    let mut outcomes = Vec::new();
    for id in order {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        if (1..=7).contains(&id) {
            if let Err(e) = &data {
                outcomes.push(Outcome {
                    id,
                    status: Status::Skipped,
                    summary: format!("MNIST unavailable: {e}"),
                });
                continue;
            }
        }
        eprintln!("criterion {id}: running");
        let clock = Instant::now();
        let result = match id {
            1 => criterion_1(&mut lab),
            2 => criterion_2(&mut lab),
            3 => criterion_3(&mut lab),
            4 => criterion_4(&mut lab),
            5 => criterion_5(&mut lab),
            6 => criterion_6(&mut lab),
            7 => criterion_7(&mut lab),
            8 => criterion_8(&mut lab),
            _ => criterion_9(&mut lab),
        };
        let outcome = result.unwrap_or_else(|e| Outcome::new(id, false, format!("error: {e}")));
        eprintln!("criterion {id}: {:?} after {:.0}s", outcome.status, clock.elapsed().as_secs_f64());
        outcomes.push(outcome);
    }
    outcomes.sort_by_key(|o| o.id);
    let mut report = String::new();
    for o in &outcomes {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIPPED",
        };
        let _ = writeln!(report, "criterion {}: {tag} - {}", o.id, o.summary);
    }
    print!("{report}");
    let _ = fs::write(lab.cache.join("report.txt"), format!("{report}\n{}", lab.details));
    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    println!(
        "acceptance: {} passed, {failed} failed, {} skipped",
        outcomes.iter().filter(|o| o.status == Status::Pass).count(),
        outcomes.iter().filter(|o| o.status == Status::Skipped).count()
    );
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
