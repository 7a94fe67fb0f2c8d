use crate::data::{minibatches, AugmentPolicy, Batch, Dataset, Minibatches};
use crate::error::{Error, Result};
use crate::model::{BnMode, BoundParams, FeatureTapSet, Model, TapeForward};
use crate::optim::{lr_at_epoch, OptimState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::{DistillConfig, EnsembleCombine, PacemakerMode, Phase1Training};
use super::pipeline::sub_seed;
use super::{combine_members, fkd_vars, lkd_scale, pacemaker_forward, forward_with_taps, ForwardOutput, Pacemaker};

/// Frozen side of a phase.
#[derive(Clone, Copy, Debug)]
pub enum TeacherRole<'a> {
    /// Supervised training only.
    None,
    Model(&'a Model),
    Pacemaker(&'a Pacemaker),
}

impl TeacherRole<'_> {
    pub fn describe(&self) -> String {
        match self {
            TeacherRole::None => "none".into(),
            TeacherRole::Model(m) => describe_model(m),
            TeacherRole::Pacemaker(pm) => format!("pacemaker[{}]", pm.mode()),
        }
    }

    fn taps(&self) -> Result<Option<FeatureTapSet>> {
        match self {
            TeacherRole::None => Ok(None),
            TeacherRole::Model(m) => m.tap_points().map(Some),
            TeacherRole::Pacemaker(pm) => pm.col.tap_points().map(Some),
        }
    }

    fn forward(&self, x: &Tensor, combine: EnsembleCombine) -> Result<Option<ForwardOutput>> {
        match self {
            TeacherRole::None => Ok(None),
            TeacherRole::Model(m) => forward_with_taps(m, x).map(Some),
            TeacherRole::Pacemaker(pm) => pacemaker_forward(pm, x, combine).map(Some),
        }
    }
}

/// Trained side of a phase.
#[derive(Debug)]
pub enum Trainee<'a> {
    Model(&'a mut Model),
    Pacemaker(&'a mut Pacemaker),
}

impl Trainee<'_> {
    pub fn describe(&self) -> String {
        match self {
            Trainee::Model(m) => describe_model(m),
            Trainee::Pacemaker(pm) => format!("pacemaker[{}]", pm.mode()),
        }
    }

    fn members(&self) -> Vec<&Model> {
        match self {
            Trainee::Model(m) => vec![&**m],
            Trainee::Pacemaker(pm) => pm.members(),
        }
    }

    fn members_mut(&mut self) -> Vec<&mut Model> {
        match self {
            Trainee::Model(m) => vec![&mut **m],
            Trainee::Pacemaker(pm) => pm.row.iter_mut().chain(std::iter::once(&mut pm.col)).collect(),
        }
    }

    fn pacemaker_mode(&self) -> Option<PacemakerMode> {
        match self {
            Trainee::Model(_) => None,
            Trainee::Pacemaker(pm) => Some(pm.mode()),
        }
    }
}

fn describe_model(m: &Model) -> String {
    match m.arch() {
        Some(a) => format!("{a}/{}", m.filter_mode()),
        None => format!("custom/{}", m.filter_mode()),
    }
}

pub struct PhaseData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    /// Drives batch order and augmentation.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub fkd: f64,
    pub lkd: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossParts {
    fn add_scaled(&mut self, o: &LossParts, w: f64) {
        self.fkd += w * o.fkd;
        self.lkd += w * o.lkd;
        self.ce += w * o.ce;
        self.total += w * o.total;
    }

    fn mean(parts: &[LossParts]) -> LossParts {
        let mut m = LossParts::default();
        for p in parts {
            m.add_scaled(p, 1.0 / parts.len() as f64);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub lr: f32,
    pub loss: LossParts,
    pub test_acc: f64,
    pub pacemaker: PacemakerMode,
}

impl EpochRecord {
    /// One tab-separated `key=value` metrics line.
    pub fn to_line(&self) -> String {
        format!(
            "phase={}\tepoch={}\tlr={}\tfkd={}\tlkd={}\tce={}\ttotal={}\ttest_acc={}\tpacemaker={}",
            self.phase,
            self.epoch,
            self.lr,
            self.loss.fkd,
            self.loss.lkd,
            self.loss.ce,
            self.loss.total,
            self.test_acc,
            self.pacemaker
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub phase: u8,
    pub teacher: String,
    pub trainee: String,
    /// Training-set loss (eval-mode, no augmentation) before the first update.
    pub initial_loss: LossParts,
    /// Same measurement after the last epoch.
    pub final_loss: LossParts,
    pub epochs: Vec<EpochRecord>,
    pub test_acc: f64,
}

fn loss_vars(
    tape: &mut Tape,
    cfg: &DistillConfig,
    teacher: Option<&(Var, Vec<Var>)>,
    logits: Var,
    features: &[Var],
    labels: &[usize],
) -> Result<(Var, LossParts)> {
    let ce = tape.cross_entropy(logits, labels)?;
    let (fkd, lkd) = match teacher {
        Some((t_logits, t_feats)) => (
            fkd_vars(tape, t_feats, features)?,
            tape.kl_temperature(*t_logits, logits, cfg.tau, lkd_scale(cfg.tau, cfg.tau_square_scaling))?,
        ),
        None => {
            let z = tape.constant(Tensor::scalar(0.0));
            (z, z)
        }
    };
    let [r, a, c] = cfg.loss_weights();
    let total = tape.weighted_sum(&[(fkd, r), (lkd, a), (ce, c)])?;
    let val = |v| tape.value(v).item() as f64;
    let parts = LossParts {
        fkd: val(fkd),
        lkd: val(lkd),
        ce: val(ce),
        total: val(total),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((total, parts))
}

/// Records the trainee's forward passes and the objective on `tape`.
#[allow(clippy::too_many_arguments)]
fn objective(
    tape: &mut Tape,
    members: &[&Model],
    bounds: &[BoundParams],
    teacher: Option<&ForwardOutput>,
    x: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
    bn: BnMode,
) -> Result<(Var, LossParts, Vec<TapeForward>)> {
    let xv = tape.constant(x.clone());
    let fwds = members
        .iter()
        .zip(bounds)
        .map(|(m, b)| m.forward(tape, b, xv, bn))
        .collect::<Result<Vec<_>>>()?;
    let t = teacher.map(|o| {
        let logits = tape.constant(o.logits.clone());
        let feats = o.features.iter().map(|f| tape.constant(f.clone())).collect();
        (logits, feats)
    });
    let independent = members.len() > 1 && cfg.phase1_training == Phase1Training::Independent;
    let (loss, parts) = if independent {
        let mut losses = Vec::new();
        let mut parts = Vec::new();
        for f in &fwds {
            let (l, p) = loss_vars(tape, cfg, t.as_ref(), f.logits, &f.features, labels)?;
            losses.push((l, 1.0));
            parts.push(p);
        }
        (tape.weighted_sum(&losses)?, LossParts::mean(&parts))
    } else {
        let refs: Vec<&TapeForward> = fwds.iter().collect();
        let (logits, feats) = combine_members(tape, &refs, cfg.ensemble_combine)?;
        loss_vars(tape, cfg, t.as_ref(), logits, &feats, labels)?
    };
    Ok((loss, parts, fwds))
}

fn needs_teacher(cfg: &DistillConfig) -> bool {
    cfg.rho != 0.0 || cfg.alpha != 0.0
}

/// Eval-mode objective over `ds` in record order, without augmentation.
pub fn evaluate_loss(teacher: TeacherRole<'_>, members: &[&Model], ds: &Dataset, cfg: &DistillConfig) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for batch in Minibatches::sequential(ds, cfg.eval_batch, true)? {
        let t = if needs_teacher(cfg) {
            teacher.forward(&batch.x, cfg.ensemble_combine)?
        } else {
            None
        };
        let mut tape = Tape::new();
        let bounds: Vec<BoundParams> = members.iter().map(|m| m.bind(&mut tape, false)).collect();
        let (_, parts, _) = objective(&mut tape, members, &bounds, t.as_ref(), &batch.x, &batch.labels, cfg, BnMode::Eval)?;
        acc.add_scaled(&parts, batch.labels.len() as f64 / ds.len() as f64);
    }
    Ok(acc)
}

/// Top-1 accuracy of the combined members on `ds`.
pub fn evaluate_accuracy(members: &[&Model], ds: &Dataset, combine: EnsembleCombine, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    for b in Minibatches::sequential(ds, batch, true)? {
        let logits = match members {
            [m] => m.predict(&b.x, batch)?,
            [row, col] => super::ensemble_forward(row, col, &b.x, combine)?.logits,
            _ => return Err(Error::Param(format!("cannot evaluate {} members", members.len()))),
        };
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&b.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn train_step(
    members: &mut [&mut Model],
    optims: &mut [OptimState],
    teacher: Option<&ForwardOutput>,
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let views: Vec<&Model> = members.iter().map(|m| &**m).collect();
    let bounds: Vec<BoundParams> = views.iter().map(|m| m.bind(&mut tape, true)).collect();
    let (loss, parts, fwds) = objective(&mut tape, &views, &bounds, teacher, &batch.x, &batch.labels, cfg, BnMode::Train)?;
    let mut grads = tape.backward(loss)?;
    drop(views);
    for ((m, opt), (bound, fwd)) in members.iter_mut().zip(optims.iter_mut()).zip(bounds.iter().zip(&fwds)) {
        let g: Vec<Tensor> = bound.iter().map(|(_, v)| grads.take(v)).collect();
        let g_refs: Vec<&Tensor> = g.iter().collect();
        opt.step(&mut m.params_mut().trainable_mut(), &g_refs)?;
        m.apply_bn_updates(&fwd.bn_updates);
    }
    Ok(parts)
}

/// Trains `trainee` against `teacher` for `cfg.epochs` epochs and reports per-epoch
/// losses and test accuracy. Teacher parameters are never touched.
pub fn run_phase(
    phase: u8,
    teacher: TeacherRole<'_>,
    mut trainee: Trainee<'_>,
    data: &PhaseData<'_>,
    cfg: &DistillConfig,
    sink: &mut dyn FnMut(&EpochRecord),
) -> Result<PhaseReport> {
    cfg.validate()?;
    if matches!(teacher, TeacherRole::None) && needs_teacher(cfg) {
        return Err(Error::Param("a phase without a teacher role needs rho = 0 and alpha = 0".into()));
    }
    let trainee_taps = trainee.members()[0].tap_points()?;
    if let Some(t) = teacher.taps()? {
        if t.shapes != trainee_taps.shapes {
            return Err(Error::Shape {
                op: "run_phase",
                axis: "feature taps".into(),
                expected: format!("{:?}", t.shapes),
                got: format!("{:?}", trainee_taps.shapes),
            });
        }
    }
    for ds in [data.train, data.test] {
        if ds.dims() != trainee.members()[0].input_shape() {
            return Err(Error::shape(
                "run_phase",
                "dataset image dims",
                format!("{:?}", trainee.members()[0].input_shape()),
                format!("{:?}", ds.dims()),
            ));
        }
    }

    let pm_mode = trainee.pacemaker_mode().unwrap_or(match teacher {
        TeacherRole::Pacemaker(pm) => pm.mode(),
        _ => cfg.pacemaker_mode,
    });
    let initial_loss = evaluate_loss(teacher, &trainee.members(), data.train, cfg)?;
    let policy = if cfg.augment {
        AugmentPolicy::cifar()
    } else {
        AugmentPolicy::disabled()
    };
    let n_members = trainee.members().len();
    let mut optims: Vec<OptimState> = (0..n_members)
        .map(|_| OptimState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay))
        .collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.base_lr, &cfg.milestones, cfg.lr_factor);
        for o in &mut optims {
            o.lr = lr;
        }
        let mut running = LossParts::default();
        for batch in minibatches(data.train, cfg.batch_size, sub_seed(data.seed, epoch as u64), true, &policy)? {
            let t = if needs_teacher(cfg) {
                teacher.forward(&batch.x, cfg.ensemble_combine)?
            } else {
                None
            };
            let mut members = trainee.members_mut();
            let parts = train_step(&mut members, &mut optims, t.as_ref(), &batch, cfg)?;
            running.add_scaled(&parts, batch.labels.len() as f64 / data.train.len() as f64);
        }
        let test_acc = evaluate_accuracy(&trainee.members(), data.test, cfg.ensemble_combine, cfg.eval_batch)?;
        let rec = EpochRecord {
            phase,
            epoch,
            lr,
            loss: running,
            test_acc,
            pacemaker: pm_mode,
        };
        sink(&rec);
        epochs.push(rec);
    }
    let final_loss = evaluate_loss(teacher, &trainee.members(), data.train, cfg)?;
    let test_acc = match epochs.last() {
        Some(r) => r.test_acc,
        None => evaluate_accuracy(&trainee.members(), data.test, cfg.ensemble_combine, cfg.eval_batch)?,
    };
    Ok(PhaseReport {
        phase,
        teacher: teacher.describe(),
        trainee: trainee.describe(),
        initial_loss,
        final_loss,
        epochs,
        test_acc,
    })
}
