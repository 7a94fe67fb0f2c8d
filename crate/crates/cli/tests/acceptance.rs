//! Acceptance criteria. Runs without the libtest harness so every criterion's
//! PASS/FAIL line reaches the output of a plain `cargo test`.
//!
//! Criteria 8/11 use CIFAR-10 when `PMKD_CIFAR10_DIR` points at the extracted binary
//! batches and the synthetic CIFAR-layout generator otherwise. Criterion 9 is slow
//! (about two CPU hours) and runs only with `--ignored` or `--include-ignored`.
//! Free arguments select criteria and `--skip NAME` drops them, both by substring.

use std::panic;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pmkd::checkpoint;
use pmkd::data::{import_cifar_split, synthetic, CifarVariant, Dataset, SyntheticSpec};
use pmkd::distill::{
    self, run_phase, run_pipeline, sub_seed, transplant_weights, DistillConfig, PhaseData, PhaseReport, PipelineRun,
    TeacherRole, Trainee, CKPT_PHASE1, CKPT_PHASE2, CKPT_PHASE3,
};
use pmkd::model::{init_weights, ArchSpec, FilterMode, Model};
use pmkd::ops::{conv2d, cross_entropy, ConvGeometry};
use pmkd::oracle::{self, RefAct};
use pmkd::stream::{equivalence_check, plan_stream, StreamState, image_row};
use pmkd::Tensor;
use rand::{Rng, SeedableRng};

fn verdict(id: u32, what: &str, ok: bool, detail: &str) -> bool {
    println!("{} criterion {id:>2} ({what}): {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn pmkd_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmkd"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn pmkd");
    assert!(
        out.status.success(),
        "pmkd failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_synthetic(classes: &[usize], train: usize, test: usize, size: usize) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        dims: [3, size, size],
        ..SyntheticSpec::cifar10_like()
    };
    let gen = |n: usize, seed| {
        synthetic(&spec, n * 10 / classes.len() + 10, seed)
            .unwrap()
            .filter_classes(classes)
            .unwrap()
            .take_balanced(n)
    };
    let mut tr = gen(train, 1);
    let (m, s) = tr.compute_stats().unwrap();
    tr.set_stats(m, s).unwrap();
    let mut te = gen(test, 2);
    te.set_stats(tr.header().mean.clone(), tr.header().std.clone()).unwrap();
    (tr, te)
}

fn criterion_01_gradient_oracle() -> bool {
    let start = Instant::now();
    let mut total = oracle::GradCheck::default();
    for seed in 0..20 {
        let case = oracle::random_tiny_case(1000 + seed);
        let r = oracle::gradient_check(&case, 40, seed, 1e-3);
        total.checked += r.checked;
        total.passed += r.passed;
        total.worst = total.worst.max(r.worst);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = total.fraction() >= 0.95 && secs < 120.0;
    let detail = format!(
        "{}/{} coordinates within 1e-3 relative ({:.1}%), 20 models, {secs:.1} s",
        total.passed,
        total.checked,
        100.0 * total.fraction()
    );
    verdict(1, "gradient oracle", ok, &detail)
}

fn criterion_02_convolution_oracle() -> bool {
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let geoms = [(3, 3, 1, 1), (1, 3, 0, 1), (3, 1, 1, 0), (1, 1, 0, 0), (3, 3, 0, 0), (1, 3, 1, 1)];
    let mut worst = 0f64;
    let mut seen_pads = [false; 3];
    let mut seen_stride2 = false;
    for case in 0..200 {
        let (kh, kw, ph, pw) = geoms[case % geoms.len()];
        let s = rng.random_range(1..=2);
        let g = ConvGeometry::new((kh, kw), (ph, pw), (s, s));
        let (n, cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=5));
        let (h, w) = (rng.random_range(kh.max(2)..=9), rng.random_range(kw.max(2)..=9));
        let mut gen = |len: usize| (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let x = Tensor::new(&[n, cin, h, w], gen(n * cin * h * w)).unwrap();
        let wt = Tensor::new(&[cout, cin, kh, kw], gen(cout * cin * kh * kw)).unwrap();
        let b = Tensor::from_vec(gen(cout));
        let y = conv2d(&x, &wt, Some(&b), &g).unwrap();
        let wf: Vec<f64> = wt.data().iter().map(|&v| v as f64).collect();
        let bf: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        let r = oracle::naive_conv2d(&RefAct::from_tensor(&x), &wf, [cout, cin, kh, kw], Some(&bf), &g);
        assert_eq!(y.dims(), &[n, cout, r.h, r.w]);
        for (a, e) in y.data().iter().zip(&r.data) {
            worst = worst.max((*a as f64 - e).abs());
        }
        match (ph, pw) {
            (0, 1) => seen_pads[0] = true,
            (1, 0) => seen_pads[1] = true,
            (1, 1) => seen_pads[2] = true,
            _ => {}
        }
        seen_stride2 |= s == 2;
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-6 && seen_pads.iter().all(|&p| p) && seen_stride2 && secs < 60.0;
    let detail = format!("200 cases, max |conv2d - nested loops| = {worst:.2e}, {secs:.2} s");
    verdict(2, "convolution oracle", ok, &detail)
}

fn criterion_03_loss_oracles() -> bool {
    let mut notes = Vec::new();
    let mut ok = true;

    // KL(softmax[2,0] || softmax[0,2]) at tau 1 = 2·tanh(1) in closed form
    let t = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
    let s = Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap();
    let kl = distill::loss_lkd(&t, &s, 1.0, false).unwrap();
    let closed = 2.0 * 1f64.tanh();
    let naive = oracle::naive_kl(&[2.0, 0.0], &[0.0, 2.0], 2, 1.0, 1.0);
    ok &= (kl - closed).abs() < 1e-6 && (kl - naive).abs() < 1e-6;
    notes.push(format!("KL example {kl:.7} vs 2·tanh(1) {closed:.7} (listed as ≈1.526)"));

    // CE of [1,2] at label 0 = ln(1 + e)
    let z = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let ce = cross_entropy(&z, &[0]).unwrap();
    let closed = (1.0 + 1f64.exp()).ln();
    ok &= (ce - closed).abs() < 1e-6;
    notes.push(format!("CE example {ce:.7} vs ln(1+e) {closed:.7}"));
    let uniform = cross_entropy(&Tensor::zeros(&[2, 5]), &[1, 4]).unwrap();
    ok &= (uniform - 5f64.ln()).abs() < 1e-6;

    // random cases against the scalar references, plus the zero identities
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..50 {
        let a: Vec<f32> = (0..12).map(|_| rng.random_range(-6.0..6.0)).collect();
        let b: Vec<f32> = (0..12).map(|_| rng.random_range(-6.0..6.0)).collect();
        let tau = rng.random_range(0.5f32..8.0);
        let (ta, tb) = (Tensor::new(&[3, 4], a.clone()).unwrap(), Tensor::new(&[3, 4], b.clone()).unwrap());
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let want = oracle::naive_kl(&f(&a), &f(&b), 4, tau as f64, (tau as f64).powi(2));
        worst = worst.max((distill::loss_lkd(&ta, &tb, tau, true).unwrap() - want).abs() / want.max(1.0));
        let labels = [0, 3, 1];
        worst = worst.max((cross_entropy(&ta, &labels).unwrap() - oracle::naive_cross_entropy(&f(&a), 4, &labels)).abs());
        ok &= distill::loss_lkd(&ta, &ta, tau, true).unwrap() == 0.0;
        let feats = vec![Tensor::new(&[1, 3, 2, 2], a.clone()).unwrap()];
        ok &= distill::loss_fkd(&feats, &feats).unwrap() == 0.0;
    }
    ok &= worst < 1e-6;
    notes.push(format!("random KL/CE max deviation {worst:.1e}, lkd(p,p) = fkd(f,f) = 0"));

    let mut exact = 0;
    for _ in 0..100 {
        let cfg = DistillConfig {
            rho: [0.0f32, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0][rng.random_range(0..7)],
            alpha: rng.random_range(0.0..=1.0),
            ..Default::default()
        };
        let (fkd, lkd, ce) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let want = cfg.rho as f64 * fkd + cfg.alpha as f64 * lkd + (1.0 - cfg.alpha) as f64 * ce;
        exact += (distill::total_loss(fkd, lkd, ce, &cfg) == want) as usize;
    }
    ok &= exact == 100;
    notes.push(format!("total_loss exact on {exact}/100 coefficient triples"));
    verdict(3, "loss oracles", ok, &notes.join("; "))
}

fn criterion_04_parameter_reduction() -> bool {
    let mut ok = true;
    let mut lines = Vec::new();
    for spec in ArchSpec::all(10) {
        let t = Model::build(&spec, FilterMode::Teacher).unwrap();
        let s = Model::build(&spec, FilterMode::RowStudent).unwrap();
        let exact_third = 3 * s.param_count(true) == t.param_count(true);
        let whole = s.param_count(false) as f64 / t.param_count(false) as f64;
        ok &= exact_third && whole > 1.0 / 3.0 && whole < 1.0;
        lines.push(format!("{spec} {whole:.4}"));
    }
    let detail = format!(
        "conv ratio exactly 1/3 for all {} archs; whole-model ratios: {}",
        lines.len(),
        lines.join(", ")
    );
    verdict(4, "parameter reduction", ok, &detail)
}

fn criterion_05_shape_invariant() -> bool {
    let mut ok = true;
    let mut n = 0;
    for spec in ArchSpec::all(10) {
        let shapes: Vec<_> = FilterMode::ALL
            .iter()
            .map(|&m| Model::build(&spec, m).unwrap().tap_points().unwrap().shapes)
            .collect();
        ok &= shapes[0] == shapes[1] && shapes[0] == shapes[2];
        n += 1;
    }
    verdict(5, "tap shapes across filter modes", ok, &format!("{n} architectures"))
}

fn criterion_06_pipeline_state_machine() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = small_synthetic(&[0, 1, 2], 48, 24, 16);
    let (tr_path, te_path) = (dir.path().join("train.otfd"), dir.path().join("test.otfd"));
    train.save(&tr_path).unwrap();
    test.save(&te_path).unwrap();
    let spec = ArchSpec::parse("tiny4", 3).unwrap().with_input(3, 16, 16);
    let teacher = init_weights(Model::build(&spec, FilterMode::Teacher).unwrap(), 9);
    let teacher_path = dir.path().join("teacher.pmkd");
    checkpoint::save_checkpoint(&teacher, &teacher_path).unwrap();
    let teacher_sum = checkpoint::file_checksum(&teacher_path).unwrap();

    let runs = dir.path().join("runs");
    let stdout = run_ok(pmkd_bin().args(["run-pipeline", "--arch", "tiny4", "--epochs", "0", "--seed", "4", "-q"]).args([
        "--dataset".as_ref(),
        tr_path.as_os_str(),
        "--test-dataset".as_ref(),
        te_path.as_os_str(),
        "--teacher".as_ref(),
        teacher_path.as_os_str(),
        "--runs-dir".as_ref(),
        runs.as_os_str(),
    ]));
    let run_dir = PathBuf::from(stdout.lines().find_map(|l| l.strip_prefix("run_dir=")).unwrap());
    let summary = std::fs::read_to_string(run_dir.join("summary.txt")).unwrap();
    let order: Vec<&str> = summary.lines().filter_map(|l| l.strip_prefix("checkpoint=")).map(|l| l.split('\t').next().unwrap()).collect();
    let phases: Vec<&str> = summary.lines().filter_map(|l| l.strip_prefix("phase=")).map(|l| &l[..1]).collect();
    let mut ok = order == [CKPT_PHASE1, CKPT_PHASE2, CKPT_PHASE3] && phases == ["1", "2", "3"];
    ok &= summary.contains("phase=1\tteacher=tiny4/teacher\ttrainee=pacemaker[ensemble]");
    ok &= summary.contains("phase=2\tteacher=pacemaker[ensemble]\ttrainee=tiny4/row_student");
    ok &= summary.contains("phase=3\tteacher=tiny4/teacher\ttrainee=tiny4/row_student");

    let pm = checkpoint::load_pacemaker(&run_dir.join(CKPT_PHASE1), &spec).unwrap();
    let transplanted = transplant_weights(pm.row.as_ref().unwrap(), Model::build(&spec, FilterMode::RowStudent).unwrap()).unwrap();
    let phase3 = checkpoint::load_checkpoint(&run_dir.join(CKPT_PHASE3), &spec, FilterMode::RowStudent).unwrap();
    let bitwise = transplanted
        .params()
        .iter()
        .zip(phase3.params().iter())
        .all(|((_, _, a), (_, _, b))| a.tensor.data().iter().map(|v| v.to_bits()).eq(b.tensor.data().iter().map(|v| v.to_bits())));
    ok &= bitwise;
    ok &= checkpoint::file_checksum(&teacher_path).unwrap() == teacher_sum;

    // with training: roles that are frozen in a phase stay bit-identical
    let before = checkpoint::model_bytes(&teacher).unwrap();
    let run = PipelineRun {
        spec: &spec,
        teacher: &teacher,
        train: &train,
        test: &test,
        seed: 4,
        out_dir: Some(dir.path()),
    };
    let cfg = DistillConfig {
        epochs: 1,
        batch_size: 16,
        ..Default::default()
    };
    let out = run_pipeline(&run, &cfg, &mut |_| {}).unwrap();
    let saved = checkpoint::read_checkpoint(&dir.path().join(CKPT_PHASE1)).unwrap();
    let frozen_pm = saved.iter().zip(out.pacemaker.named_tensors()).all(|((n, t), (m, u))| *n == m && t == u);
    let frozen_teacher = checkpoint::model_bytes(&teacher).unwrap() == before;
    ok &= frozen_pm && frozen_teacher;
    let detail = format!(
        "checkpoints {order:?}; phase-3 student bitwise = transplanted row member: {bitwise}; \
         teacher frozen: {frozen_teacher}; pacemaker frozen through phases 2-3: {frozen_pm}"
    );
    verdict(6, "pipeline state machine", ok, &detail)
}

fn criterion_07_streaming_equivalence() -> bool {
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut agree, mut mem_ok) = (0f32, 0, true);
    for i in 0..100 {
        let k = rng.random_range(4..=10);
        let spec = ArchSpec::parse(&format!("tiny{k}"), 10).unwrap();
        let m = init_weights(Model::build(&spec, FilterMode::RowStudent).unwrap(), rng.random());
        let x = Tensor::new(&[1, 3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random_range(-2.5f32..2.5)).collect()).unwrap();
        let eq = equivalence_check(&m, &x).unwrap();
        worst = worst.max(eq.max_abs_diff);
        agree += (eq.batch_argmax == eq.stream_argmax) as usize;

        // Σ width·channels over conv outputs, read off the batch layer shapes
        let shapes = m.layer_shapes().unwrap();
        let hand: usize = m
            .layers()
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, pmkd::model::Layer::Conv(_)))
            .map(|(_, s)| match s {
                pmkd::model::ActShape::Map { c, w, .. } => c * w,
                _ => unreachable!(),
            })
            .sum();
        if i % 10 == 0 {
            let plan = plan_stream(&m).unwrap();
            let mut st = StreamState::new(&plan);
            let mut peak = st.live_floats();
            for r in 0..32 {
                st.push_row(&plan, &image_row(&x, r)).unwrap();
                peak = peak.max(st.live_floats());
            }
            mem_ok &= peak == hand && plan.memory_budget() == hand;
        } else {
            mem_ok &= plan_stream(&m).unwrap().memory_budget() == hand;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && agree == 100 && mem_ok && secs < 120.0;
    let detail = format!(
        "100 pairs, max |stream - batch| = {worst:.2e}, argmax agree {agree}/100, \
         peak memory = Σ width·channels: {mem_ok}, {secs:.1} s"
    );
    verdict(7, "streaming equivalence", ok, &detail)
}

/// 2-class, 2 000-sample training subset plus the matching test images.
fn two_class_data() -> (Dataset, Dataset, &'static str) {
    if let Some(dir) = std::env::var_os("PMKD_CIFAR10_DIR") {
        let (train, test) = import_cifar_split(CifarVariant::Cifar10, Path::new(&dir)).unwrap();
        let mut tr = train.filter_classes(&[0, 1]).unwrap().take_balanced(2000);
        let (m, s) = tr.compute_stats().unwrap();
        tr.set_stats(m, s).unwrap();
        let mut te = test.filter_classes(&[0, 1]).unwrap();
        te.set_stats(tr.header().mean.clone(), tr.header().std.clone()).unwrap();
        (tr, te, "CIFAR-10")
    } else {
        let spec = SyntheticSpec::cifar10_like();
        let mut tr = synthetic(&spec, 10_000, 1).unwrap().filter_classes(&[0, 1]).unwrap();
        let (m, s) = tr.compute_stats().unwrap();
        tr.set_stats(m, s).unwrap();
        let mut te = synthetic(&spec, 5_000, 2).unwrap().filter_classes(&[0, 1]).unwrap();
        te.set_stats(tr.header().mean.clone(), tr.header().std.clone()).unwrap();
        (tr, te, "synthetic CIFAR-layout")
    }
}

struct EndToEnd {
    reports: Vec<PhaseReport>,
    checksum: u64,
    secs: f64,
}

fn end_to_end(train: &Dataset, test: &Dataset, seed: u64) -> EndToEnd {
    let start = Instant::now();
    let spec = ArchSpec::parse("tiny6", 2).unwrap();
    let cfg = DistillConfig {
        epochs: 15,
        batch_size: 64,
        milestones: pmkd::optim::scaled_milestones(15),
        ..Default::default()
    };
    let mut teacher = init_weights(Model::build(&spec, FilterMode::Teacher).unwrap(), sub_seed(seed, 0));
    let data = PhaseData {
        train,
        test,
        seed: sub_seed(seed, 100),
    };
    run_phase(0, TeacherRole::None, Trainee::Model(&mut teacher), &data, &cfg.supervised(), &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = PipelineRun {
        spec: &spec,
        teacher: &teacher,
        train,
        test,
        seed,
        out_dir: Some(dir.path()),
    };
    let out = run_pipeline(&run, &cfg, &mut |_| {}).unwrap();
    EndToEnd {
        reports: out.reports,
        checksum: checkpoint::file_checksum(&dir.path().join(CKPT_PHASE3)).unwrap(),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn criterion_08_and_11_end_to_end_and_determinism() -> bool {
    let (train, test, source) = two_class_data();
    let first = end_to_end(&train, &test, 2024);
    let acc = first.reports[2].test_acc;
    let losses: Vec<String> = first
        .reports
        .iter()
        .map(|r| format!("p{} {:.4}->{:.4}", r.phase, r.initial_loss.total, r.final_loss.total))
        .collect();
    let decreasing = first.reports.iter().all(|r| r.final_loss.total < r.initial_loss.total);
    let ok8 = acc >= 0.85 && decreasing && first.secs < 900.0;
    let detail = format!(
        "{source}, {} train / {} test, tiny6 15 epochs/phase batch 64: student acc {acc:.4}; losses {}; {:.0} s",
        train.len(),
        test.len(),
        losses.join(", "),
        first.secs
    );
    let pass8 = verdict(8, "end-to-end sanity", ok8, &detail);

    let second = end_to_end(&train, &test, 2024);
    let ok11 = second.checksum == first.checksum;
    let detail = format!("final checkpoint fnv1a64 {:016x} vs {:016x}", first.checksum, second.checksum);
    let pass11 = verdict(11, "determinism", ok11, &detail);
    pass8 && pass11
}

fn criterion_09_trend_check() -> bool {
    let start = Instant::now();
    let (train, test, source) = if let Some(dir) = std::env::var_os("PMKD_CIFAR10_DIR") {
        let (train, test) = import_cifar_split(CifarVariant::Cifar10, Path::new(&dir)).unwrap();
        let mut tr = train.take_balanced(5000);
        let (m, s) = tr.compute_stats().unwrap();
        tr.set_stats(m, s).unwrap();
        let mut te = test;
        te.set_stats(tr.header().mean.clone(), tr.header().std.clone()).unwrap();
        (tr, te, "CIFAR-10")
    } else {
        let spec = SyntheticSpec::cifar10_like();
        let mut tr = synthetic(&spec, 5000, 11).unwrap();
        let (m, s) = tr.compute_stats().unwrap();
        tr.set_stats(m, s).unwrap();
        let mut te = synthetic(&spec, 2000, 12).unwrap();
        te.set_stats(tr.header().mean.clone(), tr.header().std.clone()).unwrap();
        (tr, te, "synthetic CIFAR-layout")
    };
    let spec = ArchSpec::parse("tiny8", 10).unwrap();
    let cfg = DistillConfig {
        epochs: 30,
        batch_size: 128,
        milestones: pmkd::optim::scaled_milestones(30),
        ..Default::default()
    };
    let mut teacher = init_weights(Model::build(&spec, FilterMode::Teacher).unwrap(), 0);
    let tdata = PhaseData {
        train: &train,
        test: &test,
        seed: 1,
    };
    let t = run_phase(0, TeacherRole::None, Trainee::Model(&mut teacher), &tdata, &cfg.supervised(), &mut |_| {}).unwrap();
    println!("criterion  9 teacher test acc {:.4}", t.test_acc);

    let (mut pmkd_acc, mut kd_acc) = (Vec::new(), Vec::new());
    for seed in [1u64, 2, 3] {
        let run = PipelineRun {
            spec: &spec,
            teacher: &teacher,
            train: &train,
            test: &test,
            seed,
            out_dir: None,
        };
        let out = run_pipeline(&run, &cfg, &mut |_| {}).unwrap();
        pmkd_acc.push(out.reports[2].test_acc);

        let mut student = init_weights(Model::build(&spec, FilterMode::RowStudent).unwrap(), sub_seed(seed, 3));
        let data = PhaseData {
            train: &train,
            test: &test,
            seed: sub_seed(seed, 103),
        };
        let r = run_phase(3, TeacherRole::Model(&teacher), Trainee::Model(&mut student), &data, &cfg, &mut |_| {}).unwrap();
        kd_acc.push(r.test_acc);
        println!("criterion  9 seed {seed}: pmkd {:.4} direct-kd {:.4}", pmkd_acc.last().unwrap(), r.test_acc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let range = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
    let ok = mean(&pmkd_acc) >= mean(&kd_acc) && range(&pmkd_acc) <= range(&kd_acc);
    let detail = format!(
        "{source}: pmkd mean {:.4} range {:.4} {pmkd_acc:?}; direct KD mean {:.4} range {:.4} {kd_acc:?}; {:.0} s",
        mean(&pmkd_acc),
        range(&pmkd_acc),
        mean(&kd_acc),
        range(&kd_acc),
        start.elapsed().as_secs_f64()
    );
    // Non-gating by definition: the verdict is reported, not enforced.
    verdict(9, "trend check (non-gating)", ok, &detail);
    true
}

fn criterion_10_column_only_ablation() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = small_synthetic(&[0, 1], 400, 200, 16);
    let (tr_path, te_path) = (dir.path().join("train.otfd"), dir.path().join("test.otfd"));
    train.save(&tr_path).unwrap();
    test.save(&te_path).unwrap();
    let runs = dir.path().join("runs");
    let common = |cmd: &mut Command| {
        cmd.args(["--arch", "tiny4", "--epochs", "3", "-q"]).args([
            "--dataset".as_ref(),
            tr_path.as_os_str(),
            "--test-dataset".as_ref(),
            te_path.as_os_str(),
            "--runs-dir".as_ref(),
            runs.as_os_str(),
        ]);
    };
    let mut cmd = pmkd_bin();
    cmd.args(["train-teacher", "--seed", "1"]);
    common(&mut cmd);
    let out = run_ok(&mut cmd);
    let teacher = PathBuf::from(out.lines().find_map(|l| l.strip_prefix("run_dir=")).unwrap()).join("model.pmkd");

    let mut results = Vec::new();
    let mut ok = true;
    for mode in ["ensemble", "column_only"] {
        let mut accs = Vec::new();
        for seed in ["1", "2"] {
            let mut cmd = pmkd_bin();
            cmd.args(["run-pipeline", "--seed", seed, "--set"])
                .arg(format!("pacemaker_mode={mode}"))
                .arg("--teacher")
                .arg(&teacher);
            common(&mut cmd);
            let out = run_ok(&mut cmd);
            let run_dir = PathBuf::from(out.lines().find_map(|l| l.strip_prefix("run_dir=")).unwrap());
            let metrics = std::fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
            ok &= metrics.lines().count() == 9 && metrics.lines().all(|l| l.ends_with(&format!("pacemaker={mode}")));
            let summary = std::fs::read_to_string(run_dir.join("summary.txt")).unwrap();
            ok &= summary.contains(&format!("trainee=pacemaker[{mode}]"));
            accs.push(out.lines().find_map(|l| l.strip_prefix("student_test_acc=")).unwrap().parse::<f64>().unwrap());
        }
        results.push(format!("{mode} mean student acc {:.4}", accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let detail = format!("both modes ran end to end with labelled metrics; {}", results.join(", "));
    verdict(10, "column-only ablation", ok, &detail)
}

type Criterion = (&'static str, fn() -> bool, bool);

const CRITERIA: &[Criterion] = &[
    ("criterion_01_gradient_oracle", criterion_01_gradient_oracle, false),
    ("criterion_02_convolution_oracle", criterion_02_convolution_oracle, false),
    ("criterion_03_loss_oracles", criterion_03_loss_oracles, false),
    ("criterion_04_parameter_reduction", criterion_04_parameter_reduction, false),
    ("criterion_05_shape_invariant", criterion_05_shape_invariant, false),
    ("criterion_06_pipeline_state_machine", criterion_06_pipeline_state_machine, false),
    ("criterion_07_streaming_equivalence", criterion_07_streaming_equivalence, false),
    ("criterion_08_and_11_end_to_end_and_determinism", criterion_08_and_11_end_to_end_and_determinism, false),
    ("criterion_09_trend_check", criterion_09_trend_check, true),
    ("criterion_10_column_only_ablation", criterion_10_column_only_ablation, false),
];

fn main() -> std::process::ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let only_ignored = args.iter().any(|a| a == "--ignored");
    let with_ignored = only_ignored || args.iter().any(|a| a == "--include-ignored");
    let skips: Vec<&String> = args.windows(2).filter(|w| w[0] == "--skip").map(|w| &w[1]).collect();
    let filters: Vec<&String> = args
        .iter()
        .enumerate()
        .filter(|(i, a)| !a.starts_with('-') && (*i == 0 || args[i - 1] != "--skip"))
        .map(|(_, a)| a)
        .collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _, _) in CRITERIA {
            println!("{name}: test");
        }
        return std::process::ExitCode::SUCCESS;
    }

    let mut failed = Vec::new();
    let mut ran = 0;
    for &(name, run, slow) in CRITERIA {
        if (!filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())))
            || skips.iter().any(|f| name.contains(f.as_str()))
        {
            continue;
        }
        if (slow && !with_ignored) || (!slow && only_ignored) {
            println!("SKIP {name} (pass --ignored to run)");
            continue;
        }
        ran += 1;
        match panic::catch_unwind(run) {
            Ok(true) => {}
            Ok(false) => failed.push(name),
            Err(_) => {
                println!("FAIL {name}: panicked");
                failed.push(name);
            }
        }
    }
    println!("acceptance: {} run, {} failed {failed:?}", ran, failed.len());
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}
