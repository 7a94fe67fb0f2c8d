use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pmkd::checkpoint::{self, fnv1a64};
use pmkd::config::{seed_repeat, RunConfig};
use pmkd::data::{import_cifar_split, synthetic, CifarVariant, Dataset, Minibatches, SyntheticSpec};
use pmkd::distill::{
    evaluate_accuracy, run_phase, run_pipeline, sub_seed, transplant_weights, EpochRecord, Pacemaker, PhaseData,
    PhaseReport, PipelineRun, TeacherRole, Trainee, CKPT_PHASE1, CKPT_PHASE2, CKPT_PHASE3, RHO_SWEEP,
};
use pmkd::model::{init_weights, ArchSpec, FilterMode, Model};
use pmkd::stream::{equivalence_check, plan_stream, StreamState};
use pmkd::Tensor;

use crate::rundir::{self, Metrics};
use crate::{Command, ConfigError, ImportFormat, Opts};

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

/// Defaults, then `--config`, then `--set`, then the dedicated flags.
fn resolve(opts: &Opts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("reading {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &opts.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    for (key, value) in [
        ("seed", opts.seed.map(|s| s.to_string())),
        ("arch", opts.arch.clone()),
        ("filter_mode", opts.filter_mode.clone()),
        ("epochs", opts.epochs.map(|e| e.to_string())),
        ("dataset", path(&opts.dataset)),
        ("test_dataset", path(&opts.test_dataset)),
        ("teacher", path(&opts.teacher)),
    ] {
        if let Some(v) = value {
            overrides.push((key.into(), v));
        }
    }
    for (k, v) in overrides {
        cfg.set(&k, &v).map_err(|e| config_err(format!("{k}: {e}")))?;
    }
    // a short run without explicit milestones gets the default schedule scaled to fit
    if opts.epochs.is_some() && !opts.set.iter().any(|s| s.starts_with("milestones")) {
        let text = opts.config.as_ref().and_then(|p| fs::read_to_string(p).ok()).unwrap_or_default();
        if !text.lines().any(|l| l.trim_start().starts_with("milestones")) {
            cfg.distill.milestones = pmkd::optim::scaled_milestones(cfg.distill.epochs);
        }
    }
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

struct Ctx<'a> {
    opts: &'a Opts,
    cfg: RunConfig,
}

pub fn dispatch(opts: &Opts, command: &Command) -> Result<()> {
    let cfg = resolve(opts)?;
    let ctx = Ctx { opts, cfg };
    let training = matches!(
        command,
        Command::TrainTeacher | Command::RunPipeline | Command::RunPhase { .. } | Command::SweepRho
    );
    if training && ctx.cfg.seed.is_none() {
        return Err(config_err("--seed is required for training commands"));
    }
    if opts.repeat == 0 {
        return Err(config_err("--repeat must be at least 1"));
    }
    if opts.repeat > 1 && !matches!(command, Command::TrainTeacher | Command::RunPipeline | Command::RunPhase { .. }) {
        return Err(config_err("--repeat applies to train-teacher, run-pipeline and run-phase"));
    }
    match command {
        Command::TrainTeacher => repeated(&ctx, |s| train_teacher(&ctx, s)),
        Command::RunPipeline => repeated(&ctx, |s| pipeline(&ctx, s)),
        Command::RunPhase { phase, pacemaker, init } => {
            repeated(&ctx, |s| single_phase(&ctx, s, *phase, pacemaker.as_deref(), init.as_deref()))
        }
        Command::Eval { checkpoint } => eval(&ctx, checkpoint),
        Command::SweepRho => sweep_rho(&ctx),
        Command::StreamInfer { checkpoint, input } => stream_infer(&ctx, checkpoint, input),
        Command::EquivCheck { checkpoint, count } => equiv_check(&ctx, checkpoint.as_deref(), *count),
        Command::ImportDataset { format, input, out } => import_dataset(*format, input, out),
        Command::ParamReport { all, classes } => param_report(&ctx, *all, *classes),
        Command::SynthDataset {
            out,
            classes,
            train,
            test,
            size,
        } => synth_dataset(out, ctx.cfg.seed.unwrap_or(0), *classes, *train, *test, *size),
    }
}

/// Runs `run` once, or under `--repeat` with per-seed accuracies, mean and deviations.
fn repeated(ctx: &Ctx<'_>, mut run: impl FnMut(u64) -> Result<f64>) -> Result<()> {
    let seed = ctx.cfg.seed.expect("checked by dispatch");
    if ctx.opts.repeat == 1 {
        return run(seed).map(|_| ());
    }
    let mut failure = None;
    let outcome = seed_repeat(seed, ctx.opts.repeat, ctx.opts.same_seed, |s| {
        run(s).map_err(|e| {
            let msg = format!("seed {s}: {e:#}");
            failure = Some(e);
            pmkd::Error::Param(msg)
        })
    });
    match outcome {
        Ok(summary) => {
            for (s, v) in summary.seeds.iter().zip(&summary.values) {
                println!("repeat\tseed={s}\ttest_acc={v}");
            }
            let devs: Vec<String> = summary.deviations.iter().map(|d| format!("{d:+.6}")).collect();
            println!(
                "repeat\tmean={}\trange={}\tdeviations=[{}]",
                summary.mean,
                summary.range(),
                devs.join(", ")
            );
            Ok(())
        }
        Err((partial, e)) => {
            for (s, v) in &partial {
                println!("repeat\tseed={s}\ttest_acc={v}\t(completed before failure)");
            }
            Err(failure.unwrap_or_else(|| anyhow!(e)))
        }
    }
}

fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train_path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("no training data: set `dataset` or pass --dataset"))?;
    let test_path = cfg
        .test_dataset
        .as_ref()
        .ok_or_else(|| config_err("no test data: set `test_dataset` or pass --test-dataset"))?;
    let train = Dataset::load(train_path)?;
    let mut test = Dataset::load(test_path)?;
    if test.dims() != train.dims() || test.num_classes() != train.num_classes() {
        bail!(
            "train and test sets disagree: {:?}/{} classes vs {:?}/{} classes",
            train.dims(),
            train.num_classes(),
            test.dims(),
            test.num_classes()
        );
    }
    test.set_stats(train.header().mean.clone(), train.header().std.clone())?;
    Ok((train, test))
}

fn spec_for(cfg: &RunConfig, ds: &Dataset) -> Result<ArchSpec> {
    let [c, h, w] = ds.dims();
    Ok(ArchSpec::parse(&cfg.arch, ds.num_classes())?.with_input(c, h, w))
}

fn load_teacher(cfg: &RunConfig, spec: &ArchSpec) -> Result<Model> {
    let path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| config_err("no teacher checkpoint: set `teacher` or pass --teacher"))?;
    checkpoint::load_checkpoint(path, spec, FilterMode::Teacher)
        .with_context(|| format!("loading teacher {}", path.display()))
}

struct Run {
    dir: PathBuf,
    metrics: Metrics,
}

impl Run {
    fn start(ctx: &Ctx<'_>, command: &str, seed: Option<u64>) -> Result<Self> {
        let dir = rundir::create(&ctx.opts.runs_dir, command, seed)?;
        let mut resolved = ctx.cfg.clone();
        resolved.seed = seed;
        rundir::write(&dir, "config.txt", &resolved.to_text())?;
        let metrics = Metrics::open(&dir)?;
        Ok(Self { dir, metrics })
    }

    /// Epoch sink that appends to metrics.tsv (prefixed by `tag`) and echoes unless quiet.
    fn with_sink<T>(&mut self, quiet: bool, tag: &str, f: impl FnOnce(&mut dyn FnMut(&EpochRecord)) -> T) -> Result<T> {
        let mut err = None;
        let metrics = &mut self.metrics;
        let out = f(&mut |rec: &EpochRecord| {
            let line = format!("{tag}{}", rec.to_line());
            if !quiet {
                println!("{line}");
            }
            if let Err(e) = metrics.line(&line) {
                err.get_or_insert(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

fn report_lines(reports: &[PhaseReport]) -> String {
    let mut s = String::new();
    for r in reports {
        writeln!(
            s,
            "phase={}\tteacher={}\ttrainee={}\tinitial_loss={}\tfinal_loss={}\ttest_acc={}",
            r.phase, r.teacher, r.trainee, r.initial_loss.total, r.final_loss.total, r.test_acc
        )
        .unwrap();
    }
    s
}

fn checksum_line(path: &Path) -> Result<String> {
    Ok(format!(
        "checkpoint={}\tfnv1a64={:016x}\n",
        path.file_name().unwrap_or_default().to_string_lossy(),
        checkpoint::file_checksum(path)?
    ))
}

fn train_teacher(ctx: &Ctx<'_>, seed: u64) -> Result<f64> {
    let cfg = &ctx.cfg;
    let (train, test) = load_split(cfg)?;
    let spec = spec_for(cfg, &train)?;
    let mut run = Run::start(ctx, "train-teacher", Some(seed))?;
    let mut model = init_weights(Model::build(&spec, cfg.filter_mode)?, sub_seed(seed, 0));
    let data = PhaseData {
        train: &train,
        test: &test,
        seed: sub_seed(seed, 100),
    };
    let supervised = cfg.distill.supervised();
    let report = run.with_sink(ctx.opts.quiet, "", |sink| {
        run_phase(0, TeacherRole::None, Trainee::Model(&mut model), &data, &supervised, sink)
    })??;
    let path = run.dir.join("model.pmkd");
    checkpoint::save_checkpoint(&model, &path)?;
    let summary = report_lines(std::slice::from_ref(&report)) + &checksum_line(&path)?;
    rundir::write(&run.dir, "summary.txt", &summary)?;
    println!("run_dir={}", run.dir.display());
    println!("test_acc={}", report.test_acc);
    Ok(report.test_acc)
}

fn pipeline_into(ctx: &Ctx<'_>, cfg: &RunConfig, seed: u64, run: &mut Run, out: &Path, tag: &str) -> Result<f64> {
    let (train, test) = load_split(cfg)?;
    let spec = spec_for(cfg, &train)?;
    let teacher = load_teacher(cfg, &spec)?;
    let pr = PipelineRun {
        spec: &spec,
        teacher: &teacher,
        train: &train,
        test: &test,
        seed,
        out_dir: Some(out),
    };
    let output = run.with_sink(ctx.opts.quiet, tag, |sink| run_pipeline(&pr, &cfg.distill, sink))??;
    let mut summary = report_lines(&output.reports);
    for p in &output.checkpoints {
        summary += &checksum_line(p)?;
    }
    rundir::write(out, "summary.txt", &summary)?;
    Ok(output.reports.last().map_or(0.0, |r| r.test_acc))
}

fn pipeline(ctx: &Ctx<'_>, seed: u64) -> Result<f64> {
    let mut run = Run::start(ctx, "run-pipeline", Some(seed))?;
    let dir = run.dir.clone();
    let acc = pipeline_into(ctx, &ctx.cfg, seed, &mut run, &dir, "")?;
    println!("run_dir={}", dir.display());
    println!("student_test_acc={acc}");
    Ok(acc)
}

fn sweep_rho(ctx: &Ctx<'_>) -> Result<()> {
    let seed = ctx.cfg.seed.expect("checked by dispatch");
    let mut run = Run::start(ctx, "sweep-rho", Some(seed))?;
    let mut results = String::new();
    for rho in RHO_SWEEP {
        let mut cfg = ctx.cfg.clone();
        cfg.distill.rho = rho;
        let sub = run.dir.join(format!("rho-{rho}"));
        fs::create_dir(&sub).with_context(|| format!("creating {}", sub.display()))?;
        rundir::write(&sub, "config.txt", &cfg.to_text())?;
        let acc = pipeline_into(ctx, &cfg, seed, &mut run, &sub, &format!("rho={rho}\t"))?;
        println!("rho={rho}\tstudent_test_acc={acc}");
        writeln!(results, "rho={rho}\tstudent_test_acc={acc}").unwrap();
    }
    rundir::write(&run.dir, "sweep.tsv", &results)?;
    println!("run_dir={}", run.dir.display());
    Ok(())
}

fn single_phase(ctx: &Ctx<'_>, seed: u64, phase: u8, pacemaker: Option<&Path>, init: Option<&Path>) -> Result<f64> {
    let cfg = &ctx.cfg;
    let (train, test) = load_split(cfg)?;
    let spec = spec_for(cfg, &train)?;
    let mut run = Run::start(ctx, &format!("run-phase{phase}"), Some(seed))?;
    let data = PhaseData {
        train: &train,
        test: &test,
        seed: sub_seed(seed, 100 + phase as u64),
    };
    let dcfg = cfg.distill.for_phase(phase);
    let quiet = ctx.opts.quiet;
    let (report, path) = match phase {
        1 => {
            let teacher = load_teacher(cfg, &spec)?;
            let mut pm = Pacemaker::new(&spec, cfg.distill.pacemaker_mode, sub_seed(seed, 1))?;
            let report = run.with_sink(quiet, "", |sink| {
                run_phase(1, TeacherRole::Model(&teacher), Trainee::Pacemaker(&mut pm), &data, &dcfg, sink)
            })??;
            let path = run.dir.join(CKPT_PHASE1);
            checkpoint::save_pacemaker(&pm, &path)?;
            (report, path)
        }
        2 => {
            let pm_path = pacemaker.ok_or_else(|| config_err("phase 2 needs --pacemaker"))?;
            let pm = checkpoint::load_pacemaker(pm_path, &spec)
                .with_context(|| format!("loading pacemaker {}", pm_path.display()))?;
            let mut student = init_weights(Model::build(&spec, FilterMode::RowStudent)?, sub_seed(seed, 2));
            let report = run.with_sink(quiet, "", |sink| {
                run_phase(2, TeacherRole::Pacemaker(&pm), Trainee::Model(&mut student), &data, &dcfg, sink)
            })??;
            let path = run.dir.join(CKPT_PHASE2);
            checkpoint::save_checkpoint(&student, &path)?;
            (report, path)
        }
        _ => {
            let teacher = load_teacher(cfg, &spec)?;
            let mut student = match init {
                None => init_weights(Model::build(&spec, FilterMode::RowStudent)?, sub_seed(seed, 3)),
                Some(p) => {
                    let tensors = checkpoint::read_checkpoint(p)?;
                    if checkpoint::is_pacemaker(&tensors) {
                        let pm = checkpoint::pacemaker_from_tensors(&tensors, &spec)?;
                        let row = pm.row.as_ref().ok_or_else(|| {
                            config_err("column-only pacemaker has no row member; pass the phase-2 student as --init")
                        })?;
                        transplant_weights(row, Model::build(&spec, FilterMode::RowStudent)?)?
                    } else {
                        let mut m = Model::build(&spec, FilterMode::RowStudent)?;
                        checkpoint::assign(&mut m, &tensors, "")?;
                        m
                    }
                }
            };
            let report = run.with_sink(quiet, "", |sink| {
                run_phase(3, TeacherRole::Model(&teacher), Trainee::Model(&mut student), &data, &dcfg, sink)
            })??;
            let path = run.dir.join(CKPT_PHASE3);
            checkpoint::save_checkpoint(&student, &path)?;
            (report, path)
        }
    };
    let summary = report_lines(std::slice::from_ref(&report)) + &checksum_line(&path)?;
    rundir::write(&run.dir, "summary.txt", &summary)?;
    println!("run_dir={}", run.dir.display());
    println!("test_acc={}", report.test_acc);
    Ok(report.test_acc)
}

fn eval(ctx: &Ctx<'_>, ckpt: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("eval needs --dataset"))?;
    let ds = Dataset::load(path)?;
    let spec = spec_for(cfg, &ds)?;
    let tensors = checkpoint::read_checkpoint(ckpt)?;
    let acc = if checkpoint::is_pacemaker(&tensors) {
        let pm = checkpoint::pacemaker_from_tensors(&tensors, &spec)?;
        evaluate_accuracy(&pm.members(), &ds, cfg.distill.ensemble_combine, cfg.distill.eval_batch)?
    } else {
        let mut m = Model::build(&spec, cfg.filter_mode)?;
        checkpoint::assign(&mut m, &tensors, "").with_context(|| format!("loading {}", ckpt.display()))?;
        evaluate_accuracy(&[&m], &ds, cfg.distill.ensemble_combine, cfg.distill.eval_batch)?
    };
    let mut run = Run::start(ctx, "eval", cfg.seed)?;
    run.metrics.line(&format!(
        "checkpoint={}\tdataset={}\ttest_acc={acc}",
        ckpt.display(),
        path.display()
    ))?;
    println!("{acc}");
    Ok(())
}

fn stream_infer(ctx: &Ctx<'_>, ckpt: &Path, input: &str) -> Result<()> {
    let cfg = &ctx.cfg;
    let ds_path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("stream-infer needs --dataset for image size, classes and normalization"))?;
    let ds = Dataset::load(ds_path)?;
    let spec = spec_for(cfg, &ds)?;
    let model = checkpoint::load_checkpoint(ckpt, &spec, FilterMode::RowStudent)?;
    let plan = plan_stream(&model)?;
    let [c, h, w] = plan.input_shape();
    let (mean, std) = (&ds.header().mean, &ds.header().std);
    let mut reader: Box<dyn Read> = if input == "-" {
        Box::new(io::stdin().lock())
    } else {
        Box::new(fs::File::open(input).with_context(|| format!("opening {input}"))?)
    };
    let mut state = StreamState::new(&plan);
    let mut raw = vec![0u8; c * w];
    let mut row = vec![0f32; c * w];
    let mut logits = None;
    for r in 0..h {
        reader
            .read_exact(&mut raw)
            .with_context(|| format!("reading row {r} ({} bytes per row, {h} rows)", c * w))?;
        for (i, (&b, out)) in raw.iter().zip(row.iter_mut()).enumerate() {
            let ch = i / w;
            *out = (b as f32 / 255.0 - mean[ch]) / std[ch];
        }
        logits = state.push_row(&plan, &row)?;
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        bail!("input has more than {h} rows");
    }
    for v in logits.expect("final row yields logits") {
        println!("{v}");
    }
    Ok(())
}

fn equiv_check(ctx: &Ctx<'_>, ckpt: Option<&Path>, count: usize) -> Result<()> {
    let cfg = &ctx.cfg;
    let seed = cfg.seed.unwrap_or(0);
    let ds = match cfg.test_dataset.as_ref().or(cfg.dataset.as_ref()) {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let spec = match &ds {
        Some(d) => spec_for(cfg, d)?,
        None => ArchSpec::parse(&cfg.arch, 10)?,
    };
    let model = match ckpt {
        Some(p) => checkpoint::load_checkpoint(p, &spec, FilterMode::RowStudent)?,
        None => init_weights(Model::build(&spec, FilterMode::RowStudent)?, seed),
    };
    let plan = plan_stream(&model)?;
    let [c, h, w] = spec.input;
    let images: Vec<Tensor> = match &ds {
        Some(d) => Minibatches::sequential(d, 1, true)?.take(count).map(|b| b.x).collect(),
        None => (0..count as u64)
            .map(|i| {
                let data = (0..(c * h * w) as u64)
                    .map(|j| (sub_seed(sub_seed(seed, i), j) % 4001) as f32 / 1000.0 - 2.0)
                    .collect();
                Tensor::new(&[1, c, h, w], data)
            })
            .collect::<pmkd::Result<_>>()?,
    };
    let (mut worst, mut agree) = (0f32, 0usize);
    for x in &images {
        let eq = equivalence_check(&model, x)?;
        worst = worst.max(eq.max_abs_diff);
        agree += (eq.batch_argmax == eq.stream_argmax) as usize;
    }
    let line = format!(
        "images={}\tmax_abs_diff={worst:e}\targmax_agree={agree}\tmemory_budget_floats={}",
        images.len(),
        plan.memory_budget()
    );
    let mut run = Run::start(ctx, "equiv-check", cfg.seed)?;
    run.metrics.line(&line)?;
    println!("{line}");
    if worst >= 1e-4 || agree != images.len() {
        bail!("streaming and batch inference disagree ({line})");
    }
    Ok(())
}

fn import_dataset(format: ImportFormat, input: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (train, test) = match format {
        ImportFormat::Cifar10 => import_cifar_split(CifarVariant::Cifar10, input)?,
        ImportFormat::Cifar100 => import_cifar_split(CifarVariant::Cifar100, input)?,
        ImportFormat::Svhn => {
            let train = Dataset::load(&input.join("train.otfd"))?;
            let mut test = Dataset::load(&input.join("test.otfd"))?;
            train.check_svhn(true)?;
            test.check_svhn(false)?;
            test.set_stats(train.header().mean.clone(), train.header().std.clone())?;
            (train, test)
        }
    };
    train.save(&out.join("train.otfd"))?;
    test.save(&out.join("test.otfd"))?;
    println!(
        "train={} test={} classes={} dims={:?}",
        train.len(),
        test.len(),
        train.num_classes(),
        train.dims()
    );
    Ok(())
}

fn param_report(ctx: &Ctx<'_>, all: bool, classes: usize) -> Result<()> {
    let specs = if all {
        ArchSpec::all(classes)
    } else {
        vec![ArchSpec::parse(&ctx.cfg.arch, classes)?]
    };
    println!("arch\tteacher_conv\tstudent_conv\tconv_ratio\tteacher_total\tstudent_total\ttotal_ratio");
    for spec in specs {
        let t = Model::build(&spec, FilterMode::Teacher)?;
        let s = Model::build(&spec, FilterMode::RowStudent)?;
        let (tc, sc) = (t.param_count(true), s.param_count(true));
        let (tt, st) = (t.param_count(false), s.param_count(false));
        println!(
            "{spec}\t{tc}\t{sc}\t{}\t{tt}\t{st}\t{}",
            sc as f64 / tc as f64,
            st as f64 / tt as f64
        );
    }
    Ok(())
}

fn synth_dataset(out: &Path, seed: u64, classes: usize, train: usize, test: usize, size: usize) -> Result<()> {
    if !(2..=10).contains(&classes) {
        return Err(config_err("synthetic data supports 2 to 10 classes"));
    }
    let spec = SyntheticSpec {
        dims: [3, size, size],
        ..SyntheticSpec::cifar10_like()
    };
    let keep: Vec<usize> = (0..classes).collect();
    // generate over all ten patterns, keep the first `classes`
    let gen = |n: usize, s: u64| -> Result<Dataset> {
        let full = synthetic(&spec, n * 10 / classes + 10, s)?;
        Ok(full.filter_classes(&keep)?.take_balanced(n))
    };
    let mut tr = gen(train, sub_seed(seed, 1))?;
    let (mean, std) = tr.compute_stats()?;
    tr.set_stats(mean, std)?;
    let mut te = gen(test, sub_seed(seed, 2))?;
    te.set_stats(tr.header().mean.clone(), tr.header().std.clone())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    tr.save(&out.join("train.otfd"))?;
    te.save(&out.join("test.otfd"))?;
    println!(
        "train={} test={} classes={classes} fnv1a64_train={:016x}",
        tr.len(),
        te.len(),
        fnv1a64(&tr.to_bytes())
    );
    Ok(())
}
