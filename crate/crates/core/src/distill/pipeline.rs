use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_weights, ArchSpec, FilterMode, Model};

use super::config::{DistillConfig, Phase3Init};
use super::train::{run_phase, EpochRecord, PhaseData, PhaseReport, TeacherRole, Trainee};
use super::{transplant_weights, Pacemaker};

pub const CKPT_PHASE1: &str = "phase1-pacemaker.pmkd";
pub const CKPT_PHASE2: &str = "phase2-student.pmkd";
pub const CKPT_PHASE3: &str = "phase3-student.pmkd";

/// Derives an independent stream seed from `seed` and `tag` (splitmix64 finalizer).
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct PipelineRun<'a> {
    pub spec: &'a ArchSpec,
    /// Pre-trained N×N teacher.
    pub teacher: &'a Model,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub seed: u64,
    /// Where phase checkpoints are written, if anywhere.
    pub out_dir: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub pacemaker: Pacemaker,
    pub phase2_student: Model,
    /// Phase-3 student before training, i.e. right after initialization.
    pub phase3_init: Model,
    pub student: Model,
    pub reports: Vec<PhaseReport>,
    pub checkpoints: Vec<PathBuf>,
}

fn in_phase<T>(phase: u8, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Phase {
        phase,
        source: Box::new(e),
    })
}

fn save(dir: Option<&Path>, name: &str, bytes: Result<Vec<u8>>, out: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = dir {
        let path = dir.join(name);
        checkpoint::write_bytes(&path, &bytes?)?;
        out.push(path);
    }
    Ok(())
}

/// Teacher → pacemaker, pacemaker → student, then teacher → student with the student
/// initialized from the pacemaker (or the phase-2 student, see [`Phase3Init`]).
pub fn run_pipeline(
    run: &PipelineRun<'_>,
    cfg: &DistillConfig,
    sink: &mut dyn FnMut(&EpochRecord),
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if run.teacher.filter_mode() != FilterMode::Teacher || run.teacher.arch() != Some(run.spec) {
        return Err(Error::Param(format!(
            "pipeline teacher must be a {} teacher build",
            run.spec
        )));
    }
    let mut checkpoints = Vec::new();
    let mut reports = Vec::with_capacity(3);
    let data = |phase: u64| PhaseData {
        train: run.train,
        test: run.test,
        seed: sub_seed(run.seed, 100 + phase),
    };

    let mut pacemaker = in_phase(1, Pacemaker::new(run.spec, cfg.pacemaker_mode, sub_seed(run.seed, 1)))?;
    let cfg1 = cfg.for_phase(1);
    let r1 = in_phase(
        1,
        run_phase(1, TeacherRole::Model(run.teacher), Trainee::Pacemaker(&mut pacemaker), &data(1), &cfg1, sink),
    )?;
    reports.push(r1);
    let named = pacemaker.named_tensors();
    in_phase(
        1,
        save(
            run.out_dir,
            CKPT_PHASE1,
            checkpoint::encode(named.iter().map(|(n, t)| (n.as_str(), *t))),
            &mut checkpoints,
        ),
    )?;

    let mut student2 = in_phase(2, Model::build(run.spec, FilterMode::RowStudent))?;
    student2 = init_weights(student2, sub_seed(run.seed, 2));
    let r2 = in_phase(
        2,
        run_phase(2, TeacherRole::Pacemaker(&pacemaker), Trainee::Model(&mut student2), &data(2), cfg, sink),
    )?;
    reports.push(r2);
    in_phase(2, save(run.out_dir, CKPT_PHASE2, checkpoint::model_bytes(&student2), &mut checkpoints))?;

    let phase3_init = match (&pacemaker.row, cfg.phase3_init) {
        (Some(row), Phase3Init::PacemakerRow) => {
            let blank = in_phase(3, Model::build(run.spec, FilterMode::RowStudent))?;
            in_phase(3, transplant_weights(row, blank))?
        }
        _ => student2.clone(),
    };
    let mut student = phase3_init.clone();
    let r3 = in_phase(
        3,
        run_phase(3, TeacherRole::Model(run.teacher), Trainee::Model(&mut student), &data(3), cfg, sink),
    )?;
    reports.push(r3);
    in_phase(3, save(run.out_dir, CKPT_PHASE3, checkpoint::model_bytes(&student), &mut checkpoints))?;

    Ok(PipelineOutput {
        pacemaker,
        phase2_student: student2,
        phase3_init,
        student,
        reports,
        checkpoints,
    })
}
