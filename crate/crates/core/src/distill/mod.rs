//! Distillation losses, the ensemble pacemaker and the three-phase pipeline.

mod config;
mod pipeline;
mod train;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, BnMode, FilterMode, Model, TapeForward};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use config::{
    DistillConfig, EnsembleCombine, PacemakerMode, Phase1Loss, Phase1Training, Phase3Init,
    RHO_SWEEP,
};
pub use pipeline::{
    run_pipeline, sub_seed, PipelineOutput, PipelineRun, CKPT_PHASE1, CKPT_PHASE2, CKPT_PHASE3,
};
pub use train::{
    evaluate_accuracy, evaluate_loss, run_phase, EpochRecord, LossParts, PhaseData, PhaseReport,
    TeacherRole, Trainee,
};

/// Logits plus tapped features, in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

/// Intermediate teacher: a row member and a column member of the same architecture.
/// Without a row member it degenerates to the column model alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Pacemaker {
    pub row: Option<Model>,
    pub col: Model,
}

impl Pacemaker {
    /// Freshly initialized members; `seed` drives the row member, `seed + 1` the column member.
    pub fn new(spec: &ArchSpec, mode: PacemakerMode, seed: u64) -> Result<Self> {
        let row = match mode {
            PacemakerMode::Ensemble => Some(crate::model::init_weights(
                Model::build(spec, FilterMode::RowStudent)?,
                seed,
            )),
            PacemakerMode::ColumnOnly => None,
        };
        let col = crate::model::init_weights(Model::build(spec, FilterMode::Column)?, seed.wrapping_add(1));
        Ok(Self { row, col })
    }

    pub fn mode(&self) -> PacemakerMode {
        if self.row.is_some() {
            PacemakerMode::Ensemble
        } else {
            PacemakerMode::ColumnOnly
        }
    }

    pub fn members(&self) -> Vec<&Model> {
        self.row.iter().chain(std::iter::once(&self.col)).collect()
    }

    /// Checkpoint tensors: `row.`/`col.` prefixed member parameters.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(row) = &self.row {
            out.extend(crate::checkpoint::model_tensors(row, "row."));
        }
        out.extend(crate::checkpoint::model_tensors(&self.col, "col."));
        out
    }
}

fn eval_tape_forward(model: &Model, tape: &mut Tape, x: Var) -> Result<TapeForward> {
    let bound = model.bind(tape, false);
    model.forward(tape, &bound, x, BnMode::Eval)
}

fn read_out(tape: &Tape, logits: Var, features: &[Var]) -> ForwardOutput {
    ForwardOutput {
        logits: tape.value(logits).clone(),
        features: features.iter().map(|&f| tape.value(f).clone()).collect(),
    }
}

/// Eval-mode logits and tapped features of `model`.
pub fn forward_with_taps(model: &Model, x: &Tensor) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = eval_tape_forward(model, &mut tape, xv)?;
    Ok(read_out(&tape, out.logits, &out.features))
}

/// Combines member outputs recorded on `tape`: logits by `combine`, features by
/// elementwise mean.
pub(crate) fn combine_members(
    tape: &mut Tape,
    members: &[&TapeForward],
    combine: EnsembleCombine,
) -> Result<(Var, Vec<Var>)> {
    if members.len() == 1 {
        return Ok((members[0].logits, members[0].features.clone()));
    }
    let n_taps = members[0].features.len();
    if members.iter().any(|m| m.features.len() != n_taps) {
        return Err(Error::shape(
            "ensemble_forward",
            "member tap count",
            n_taps,
            members.iter().map(|m| m.features.len()).max().unwrap_or(0),
        ));
    }
    let logits: Vec<Var> = members.iter().map(|m| m.logits).collect();
    let logits = match combine {
        EnsembleCombine::LogitMean => tape.mean(&logits)?,
        EnsembleCombine::SoftmaxMean => tape.log_mean_softmax(&logits)?,
    };
    let mut features = Vec::with_capacity(n_taps);
    for i in 0..n_taps {
        let taps: Vec<Var> = members.iter().map(|m| m.features[i]).collect();
        features.push(tape.mean(&taps).map_err(|e| match e {
            Error::Shape { op, expected, got, .. } => Error::Shape {
                op,
                axis: format!("ensemble tap {i}"),
                expected,
                got,
            },
            other => other,
        })?);
    }
    Ok((logits, features))
}

/// Eval-mode ensemble output of a row and a column member.
pub fn ensemble_forward(row: &Model, col: &Model, x: &Tensor, combine: EnsembleCombine) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let a = eval_tape_forward(row, &mut tape, xv)?;
    let b = eval_tape_forward(col, &mut tape, xv)?;
    let (logits, features) = combine_members(&mut tape, &[&a, &b], combine)?;
    Ok(read_out(&tape, logits, &features))
}

/// Eval-mode output of a pacemaker; the column member alone when it has no row member.
pub fn pacemaker_forward(pm: &Pacemaker, x: &Tensor, combine: EnsembleCombine) -> Result<ForwardOutput> {
    match &pm.row {
        Some(row) => ensemble_forward(row, &pm.col, x, combine),
        None => forward_with_taps(&pm.col, x),
    }
}

fn check_taps(teacher: &[Tensor], student: &[Tensor]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::shape("loss_fkd", "tap count", teacher.len(), student.len()));
    }
    Ok(())
}

/// Mean over taps of the per-tap mean squared difference.
pub fn loss_fkd(teacher: &[Tensor], student: &[Tensor]) -> Result<f64> {
    check_taps(teacher, student)?;
    let mut tape = Tape::new();
    let v = fkd_on_tape(&mut tape, teacher, student)?;
    Ok(tape.value(v).item() as f64)
}

fn fkd_on_tape(tape: &mut Tape, teacher: &[Tensor], student: &[Tensor]) -> Result<Var> {
    let s: Vec<Var> = student.iter().map(|s| tape.leaf(s.clone(), false)).collect();
    let t: Vec<Var> = teacher.iter().map(|t| tape.constant(t.clone())).collect();
    fkd_vars(tape, &t, &s)
}

pub(crate) fn fkd_vars(tape: &mut Tape, teacher: &[Var], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(Error::shape("loss_fkd", "tap count", teacher.len(), student.len()));
    }
    if teacher.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let per_tap = teacher
        .iter()
        .zip(student)
        .map(|(&t, &s)| tape.mean_squared_diff(s, t))
        .collect::<Result<Vec<_>>>()?;
    tape.mean(&per_tap)
}

pub(crate) fn lkd_scale(tau: f32, tau_square_scaling: bool) -> f32 {
    if tau_square_scaling {
        tau * tau
    } else {
        1.0
    }
}

/// Batch-mean `KL(softmax(t/τ) ‖ softmax(s/τ))`, times `τ²` when scaling is on.
pub fn loss_lkd(teacher_logits: &Tensor, student_logits: &Tensor, tau: f32, tau_square_scaling: bool) -> Result<f64> {
    crate::ops::loss::kl_temperature(teacher_logits, student_logits, tau, lkd_scale(tau, tau_square_scaling))
}

/// `ρ·fkd + α·lkd + (1 − α)·ce`.
pub fn total_loss(fkd: f64, lkd: f64, ce: f64, cfg: &DistillConfig) -> f64 {
    let [r, a, c] = cfg.loss_weights();
    r as f64 * fkd + a as f64 * lkd + c as f64 * ce
}

/// Copies every tensor of the pacemaker's row member into `student`.
pub fn transplant_weights(row_member: &Model, mut student: Model) -> Result<Model> {
    for m in [row_member, &student] {
        if m.filter_mode() != FilterMode::RowStudent {
            return Err(Error::Param(format!(
                "transplant needs row_student builds, got {}",
                m.filter_mode()
            )));
        }
    }
    if row_member.arch() != student.arch() || row_member.surgery() != student.surgery() {
        let name = |m: &Model| m.arch().map_or("custom".to_string(), |a| a.to_string());
        let first_diff = row_member
            .params()
            .iter()
            .zip(student.params().iter())
            .find(|((_, na, pa), (_, nb, pb))| na != nb || pa.tensor.dims() != pb.tensor.dims())
            .map(|((_, na, _), _)| na.to_string());
        return Err(Error::ParamMismatch {
            name: first_diff.unwrap_or_else(|| "<architecture>".into()),
            msg: format!("cannot transplant {} into {}", name(row_member), name(&student)),
        });
    }
    let tensors: Vec<(String, Tensor)> = row_member
        .params()
        .iter()
        .map(|(_, n, p)| (n.to_string(), p.tensor.clone()))
        .collect();
    crate::checkpoint::assign(&mut student, &tensors, "")?;
    Ok(student)
}
