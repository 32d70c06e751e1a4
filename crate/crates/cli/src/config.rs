//! One JSON document per experiment: schedule, teacher, distillation,
//! optional guidance, and evaluation settings under a single master seed.
//! Every block rejects unknown keys and fills omitted fields from defaults.

use crate::CliError;
use boot_core::boot::BootConfig;
use boot_core::dataset::ToyDataset;
use boot_core::guidance::GuidanceWeight;
use boot_core::schedule::NoiseSchedule;
use boot_core::teacher::{PredictionKind, TeacherTrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

// Every command derives its generators from the master seed through fixed
// stream ids, so adding draws to one phase never shifts another.
pub const STREAM_TEACHER: u64 = 1;
pub const STREAM_STUDENT_INIT: u64 = 2;
pub const STREAM_DISTILL: u64 = 3;
pub const STREAM_EVAL: u64 = 4;
pub const STREAM_SAMPLE: u64 = 5;

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: NoiseSchedule,
    pub teacher: TeacherBlock,
    pub boot: BootConfig,
    /// Classifier-free guidance for distillation and sampling; absent means
    /// plain unguided queries.
    pub guidance: Option<GuidanceBlock>,
    pub eval: EvalBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/exp"),
            schedule: NoiseSchedule::default(),
            teacher: TeacherBlock::default(),
            boot: BootConfig::default(),
            guidance: None,
            eval: EvalBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherBlock {
    pub dataset: ToyDataset,
    pub kind: PredictionKind,
    pub hidden: Vec<usize>,
    pub train: TeacherTrainConfig,
}

impl Default for TeacherBlock {
    fn default() -> Self {
        TeacherBlock {
            dataset: ToyDataset::EightGaussians,
            kind: PredictionKind::Signal,
            hidden: vec![128, 128, 128],
            train: TeacherTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceBlock {
    /// Strength during distillation; a range trains a weight-conditioned
    /// student, a fixed value bakes that strength in.
    pub weight: GuidanceWeight,
    /// Class driving sampling and evaluation; training draws labels
    /// uniformly whenever the teacher is conditional.
    pub condition: Option<usize>,
    /// Negative branch for teacher-side guided queries; None is the null
    /// class.
    pub negative: Option<usize>,
}

impl Default for GuidanceBlock {
    fn default() -> Self {
        GuidanceBlock {
            weight: GuidanceWeight::Fixed(1.0),
            condition: None,
            negative: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub n_samples: usize,
    pub ddim_steps: usize,
    /// A mixture mode counts as covered when at least 5% of the samples land
    /// within this distance of its center.
    pub coverage_radius: f64,
    /// Emit an SVG scatter for 2-D data.
    pub scatter: bool,
    /// Guidance strengths for the sweep ablation.
    pub sweep_weights: Vec<f64>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            n_samples: 2000,
            ddim_steps: 64,
            coverage_radius: 0.5,
            scatter: true,
            sweep_weights: vec![1.0, 2.0, 3.0],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::usage(format!("config {} is invalid: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.schedule.validate().map_err(CliError::usage)?;
        self.boot.validate().map_err(CliError::usage)?;
        if self.teacher.hidden.is_empty() || self.teacher.hidden.contains(&0) {
            return Err(CliError::usage(
                "teacher.hidden needs at least one nonzero layer width",
            ));
        }
        let t = &self.teacher.train;
        if t.batch == 0 {
            return Err(CliError::usage("teacher.train.batch must be at least 1"));
        }
        if !t.lr.is_finite() || t.lr < 0.0 {
            return Err(CliError::usage(format!(
                "teacher.train.lr must be finite and nonnegative, got {}",
                t.lr
            )));
        }
        if !(0.0..=1.0).contains(&t.uncond_prob) {
            return Err(CliError::usage(format!(
                "teacher.train.uncond_prob must lie in [0, 1], got {}",
                t.uncond_prob
            )));
        }
        let e = &self.eval;
        if e.n_samples == 0 || e.ddim_steps == 0 {
            return Err(CliError::usage(
                "eval.n_samples and eval.ddim_steps must be at least 1",
            ));
        }
        if !(e.coverage_radius > 0.0) || !e.coverage_radius.is_finite() {
            return Err(CliError::usage(format!(
                "eval.coverage_radius must be positive and finite, got {}",
                e.coverage_radius
            )));
        }
        if e.sweep_weights.is_empty() || e.sweep_weights.iter().any(|w| !w.is_finite()) {
            return Err(CliError::usage(
                "eval.sweep_weights needs at least one finite weight",
            ));
        }
        if let Some(g) = &self.guidance {
            g.weight.validate().map_err(CliError::usage)?;
            let classes = self.teacher.dataset.num_classes();
            for label in [g.condition, g.negative].into_iter().flatten() {
                if classes == 0 {
                    return Err(CliError::usage(
                        "guidance labels need a labeled dataset",
                    ));
                }
                if label >= classes {
                    return Err(CliError::usage(format!(
                        "guidance label {label} out of range for {classes} classes"
                    )));
                }
            }
        }
        Ok(())
    }
}
