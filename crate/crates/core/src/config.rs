//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::FilterMode;

/// Every key accepted by [`RunConfig::set`], in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "arch",
    "filter_mode",
    "dataset",
    "test_dataset",
    "teacher",
    "seed",
    "tau",
    "alpha",
    "rho",
    "epochs",
    "batch_size",
    "base_lr",
    "milestones",
    "lr_factor",
    "momentum",
    "weight_decay",
    "tau_square_scaling",
    "pacemaker_mode",
    "ensemble_combine",
    "phase1_training",
    "phase1_loss",
    "phase3_init",
    "augment",
    "eval_batch",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub filter_mode: FilterMode,
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    /// Teacher checkpoint for distillation commands.
    pub teacher: Option<PathBuf>,
    pub seed: Option<u64>,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "tiny6".into(),
            filter_mode: FilterMode::Teacher,
            dataset: None,
            test_dataset: None,
            teacher: None,
            seed: None,
            distill: DistillConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Param(format!("{key}: cannot parse `{v}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Param(format!("{key}: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Sets one key; the distillation invariants are not rechecked here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.distill;
        match key {
            "arch" => self.arch = v.to_string(),
            "filter_mode" => self.filter_mode = v.parse()?,
            "dataset" => self.dataset = Some(v.into()),
            "test_dataset" => self.test_dataset = Some(v.into()),
            "teacher" => self.teacher = Some(v.into()),
            "seed" => self.seed = Some(num(key, v)?),
            "tau" => d.tau = num(key, v)?,
            "alpha" => d.alpha = num(key, v)?,
            "rho" => d.rho = num(key, v)?,
            "epochs" => d.epochs = num(key, v)?,
            "batch_size" => d.batch_size = num(key, v)?,
            "base_lr" => d.base_lr = num(key, v)?,
            "milestones" => {
                d.milestones = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|m| num(key, m.trim())).collect::<Result<_>>()?
                }
            }
            "lr_factor" => d.lr_factor = num(key, v)?,
            "momentum" => d.momentum = num(key, v)?,
            "weight_decay" => d.weight_decay = num(key, v)?,
            "tau_square_scaling" => d.tau_square_scaling = flag(key, v)?,
            "pacemaker_mode" => d.pacemaker_mode = v.parse()?,
            "ensemble_combine" => d.ensemble_combine = v.parse()?,
            "phase1_training" => d.phase1_training = v.parse()?,
            "phase1_loss" => d.phase1_loss = v.parse()?,
            "phase3_init" => d.phase3_init = v.parse()?,
            "augment" => d.augment = flag(key, v)?,
            "eval_batch" => d.eval_batch = num(key, v)?,
            _ => return Err(Error::Param(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Config {
                line: i + 1,
                msg: match e {
                    Error::Param(m) => m,
                    other => other.to_string(),
                },
            };
            let (k, v) = line.split_once('=').ok_or_else(|| at(Error::Param(format!("expected key = value, got `{line}`"))))?;
            cfg.set(k.trim(), v).map_err(at)?;
        }
        cfg.validate().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        crate::model::ArchSpec::parse(&self.arch, 10)?;
        self.distill.validate()
    }

    /// Every key with its resolved value; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let d = &self.distill;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = String::new();
        for key in KEYS {
            let value = match *key {
                "arch" => Some(self.arch.clone()),
                "filter_mode" => Some(self.filter_mode.as_str().into()),
                "dataset" => path(&self.dataset),
                "test_dataset" => path(&self.test_dataset),
                "teacher" => path(&self.teacher),
                "seed" => self.seed.map(|s| s.to_string()),
                "tau" => Some(d.tau.to_string()),
                "alpha" => Some(d.alpha.to_string()),
                "rho" => Some(d.rho.to_string()),
                "epochs" => Some(d.epochs.to_string()),
                "batch_size" => Some(d.batch_size.to_string()),
                "base_lr" => Some(d.base_lr.to_string()),
                "milestones" => Some(d.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")),
                "lr_factor" => Some(d.lr_factor.to_string()),
                "momentum" => Some(d.momentum.to_string()),
                "weight_decay" => Some(d.weight_decay.to_string()),
                "tau_square_scaling" => Some(d.tau_square_scaling.to_string()),
                "pacemaker_mode" => Some(d.pacemaker_mode.to_string()),
                "ensemble_combine" => Some(d.ensemble_combine.to_string()),
                "phase1_training" => Some(d.phase1_training.to_string()),
                "phase1_loss" => Some(d.phase1_loss.to_string()),
                "phase3_init" => Some(d.phase3_init.to_string()),
                "augment" => Some(d.augment.to_string()),
                "eval_batch" => Some(d.eval_batch.to_string()),
                _ => unreachable!(),
            };
            match value {
                Some(v) => writeln!(out, "{key} = {v}").unwrap(),
                None => writeln!(out, "# {key} =").unwrap(),
            }
        }
        out
    }
}

/// Per-seed results of a repeated run with their mean and signed deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub deviations: Vec<f64>,
}

impl SeedSummary {
    pub fn from_values(seeds: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || seeds.len() != values.len() {
            return Err(Error::Param(format!(
                "need one value per seed and at least one run, got {} seeds and {} values",
                seeds.len(),
                values.len()
            )));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let deviations = values.iter().map(|v| v - mean).collect();
        Ok(Self {
            seeds,
            values,
            mean,
            deviations,
        })
    }

    /// max − min.
    pub fn range(&self) -> f64 {
        let max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Runs `run` for `k` seeds (`seed..seed+k`, or `seed` k times when `same_seed`).
/// On failure the completed results come back alongside the error.
pub fn seed_repeat<F>(seed: u64, k: usize, same_seed: bool, mut run: F) -> std::result::Result<SeedSummary, (Vec<(u64, f64)>, Error)>
where
    F: FnMut(u64) -> Result<f64>,
{
    if k == 0 {
        return Err((Vec::new(), Error::Param("repeat count must be at least 1".into())));
    }
    let mut done = Vec::with_capacity(k);
    for i in 0..k as u64 {
        let s = if same_seed { seed } else { seed + i };
        match run(s) {
            Ok(v) => done.push((s, v)),
            Err(e) => return Err((done, e)),
        }
    }
    let (seeds, values) = done.into_iter().unzip();
    SeedSummary::from_values(seeds, values).map_err(|e| (Vec::new(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::PacemakerMode;

    #[test]
    fn parse_and_round_trip() {
        let cfg = RunConfig::parse("arch = tiny4\n# comment\nseed=7\nrho = 0.5\nmilestones = 5,10\npacemaker_mode = column_only\n").unwrap();
        assert_eq!(cfg.arch, "tiny4");
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.distill.rho, 0.5);
        assert_eq!(cfg.distill.milestones, vec![5, 10]);
        assert_eq!(cfg.distill.pacemaker_mode, PacemakerMode::ColumnOnly);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("arch = tiny4\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
    }

    #[test]
    fn invariants_checked_at_parse() {
        assert!(RunConfig::parse("rho = 9").is_err());
        assert!(RunConfig::parse("arch = vgg11bn").is_err());
        assert!(RunConfig::parse("augment = maybe").is_err());
    }

    #[test]
    fn seed_repeat_stats() {
        let one = seed_repeat(3, 1, false, |s| Ok(s as f64 / 10.0)).unwrap();
        assert_eq!(one.mean, 0.3);
        assert_eq!(one.deviations, vec![0.0]);
        let many = seed_repeat(0, 5, false, |s| Ok(s as f64 * 0.1 + 0.3)).unwrap();
        assert_eq!(many.seeds, vec![0, 1, 2, 3, 4]);
        assert!(many.deviations.iter().sum::<f64>().abs() < 1e-12);
        let same = seed_repeat(9, 4, true, |s| Ok(s as f64)).unwrap();
        assert_eq!(same.range(), 0.0);
        let (partial, _) = seed_repeat(0, 4, false, |s| if s < 2 { Ok(1.0) } else { Err(Error::Param("x".into())) }).unwrap_err();
        assert_eq!(partial.len(), 2);
    }
}
