use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::{
    DEFAULT_BASE_LR, DEFAULT_LR_FACTOR, DEFAULT_MILESTONES, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY,
};

/// Values visited by `sweep-rho`.
pub const RHO_SWEEP: [f32; 6] = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0];

macro_rules! choice {
    ($(#[$m:meta])* $name:ident { $($(#[$vm:meta])* $var:ident = $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($(#[$vm])* $var),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$var),)+
                    _ => Err(Error::Param(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                        s,
                        [$($s),+].join("|")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

choice!(
    /// Pacemaker composition.
    PacemakerMode {
        Ensemble = "ensemble",
        /// Column member alone.
        ColumnOnly = "column_only",
    }
);

choice!(
    /// How the pacemaker's member logits are combined.
    EnsembleCombine {
        /// Mean of pre-softmax logits.
        LogitMean = "logit_mean",
        /// Log of the mean member softmax, used as the ensemble's logits.
        SoftmaxMean = "softmax_mean",
    }
);

choice!(
    /// How the pacemaker members are trained in phase 1.
    Phase1Training {
        /// One loss on the combined output; gradients split through the mean.
        Joint = "joint",
        /// Each member gets its own loss against the teacher.
        Independent = "independent",
    }
);

choice!(
    /// Phase-1 objective.
    Phase1Loss {
        /// Feature, logit and label terms.
        Full = "full",
        /// Feature term dropped.
        LogitsOnly = "logits_only",
    }
);

choice!(
    /// Where the phase-3 student starts from.
    Phase3Init {
        /// Transplanted pacemaker row member.
        PacemakerRow = "pacemaker_row",
        /// The student trained in phase 2.
        Phase2Student = "phase2_student",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub tau: f32,
    pub alpha: f32,
    pub rho: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub milestones: Vec<usize>,
    pub lr_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub tau_square_scaling: bool,
    pub pacemaker_mode: PacemakerMode,
    pub ensemble_combine: EnsembleCombine,
    pub phase1_training: Phase1Training,
    pub phase1_loss: Phase1Loss,
    pub phase3_init: Phase3Init,
    /// Random crop and flip on training batches.
    pub augment: bool,
    pub eval_batch: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            alpha: 0.9,
            rho: 1.0,
            epochs: 200,
            batch_size: 128,
            base_lr: DEFAULT_BASE_LR,
            milestones: DEFAULT_MILESTONES.to_vec(),
            lr_factor: DEFAULT_LR_FACTOR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            tau_square_scaling: true,
            pacemaker_mode: PacemakerMode::Ensemble,
            ensemble_combine: EnsembleCombine::LogitMean,
            phase1_training: Phase1Training::Joint,
            phase1_loss: Phase1Loss::Full,
            phase3_init: Phase3Init::PacemakerRow,
            augment: true,
            eval_batch: 256,
        }
    }
}

impl DistillConfig {
    /// Plain supervised training: `ρ = α = 0`.
    pub fn supervised(&self) -> Self {
        Self {
            rho: 0.0,
            alpha: 0.0,
            ..self.clone()
        }
    }

    /// Settings actually used in `phase`: a logits-only phase 1 drops the feature term.
    pub fn for_phase(&self, phase: u8) -> Self {
        match (phase, self.phase1_loss) {
            (1, Phase1Loss::LogitsOnly) => Self {
                rho: 0.0,
                ..self.clone()
            },
            _ => self.clone(),
        }
    }

    /// `[ρ, α, 1 − α]`.
    pub fn loss_weights(&self) -> [f32; 3] {
        [self.rho, self.alpha, 1.0 - self.alpha]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        // 0 switches the feature term off; otherwise stay inside the documented sweep range.
        if !(self.rho == 0.0 || (0.01..=5.0).contains(&self.rho)) {
            return bad(format!("rho must be 0 or lie in [0.01, 5], got {}", self.rho));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return bad(format!("lr_factor must be > 0, got {}", self.lr_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.milestones.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!("milestones must be non-decreasing, got {:?}", self.milestones));
        }
        Ok(())
    }
}
