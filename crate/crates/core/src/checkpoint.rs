//! Versioned JSON checkpoints: the layer plan needed to rebuild a module,
//! its parameters with optimizer moments and the averaged shadow, and the
//! RNG cursor, so an interrupted run resumes bit for bit. Serialization is
//! deterministic: entries keep their order and floats round-trip exactly.

use crate::boot::{LinearStudent, MlpStudent, Student};
use crate::dataset::ToyDataset;
use crate::error::{BootError, Result};
use crate::schedule::NoiseSchedule;
use crate::teacher::{DenoiserNet, PredictionKind};
use crate::tensorcore::{ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter with its full optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub shadow: Vec<f64>,
}

/// Snapshot of a parameter set, entry order preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamState {
    pub step: u64,
    pub entries: Vec<ParamRecord>,
}

impl ParamState {
    pub fn capture(params: &ParamSet) -> ParamState {
        ParamState {
            step: params.step,
            entries: params
                .entries()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    value: p.value.data().to_vec(),
                    m: p.m.clone(),
                    v: p.v.clone(),
                    shadow: p.shadow.clone(),
                })
                .collect(),
        }
    }

    pub fn restore(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.add(e.name.clone(), Tensor::new(e.shape.clone(), e.value.clone())?)?;
        }
        for (p, e) in out.entries_mut().iter_mut().zip(&self.entries) {
            let n = p.value.len();
            if e.m.len() != n || e.v.len() != n || e.shadow.len() != n {
                return Err(BootError::shape(
                    format!("optimizer state for {}", e.name),
                    format!("{n} entries"),
                    format!("{} / {} / {}", e.m.len(), e.v.len(), e.shadow.len()),
                ));
            }
            p.m = e.m.clone();
            p.v = e.v.clone();
            p.shadow = e.shadow.clone();
        }
        out.step = self.step;
        Ok(out)
    }
}

/// Cursor of a ChaCha8 stream: seed, stream id, and word position are
/// enough to continue the exact draw sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: to_hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = from_hex(&self.seed)?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| BootError::contract("rng seed must be 32 bytes of hex"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| BootError::contract(format!("bad rng word_pos {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(text: &str) -> Result<Vec<u8>> {
    if text.len() % 2 != 0 || !text.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(BootError::contract(format!("bad hex string {text:?}")));
    }
    (0..text.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&text[i..i + 2], 16)
                .map_err(|_| BootError::contract(format!("bad hex string {text:?}")))
        })
        .collect()
}

/// Layer plan of the serialized module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelArch {
    Teacher {
        kind: PredictionKind,
        data_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        schedule: NoiseSchedule,
    },
    MlpStudent {
        adaptor: PredictionKind,
        data_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        weight_range: Option<(f64, f64)>,
        schedule: NoiseSchedule,
    },
    LinearStudent {
        basis: usize,
        schedule: NoiseSchedule,
    },
}

impl ModelArch {
    fn name(&self) -> &'static str {
        match self {
            ModelArch::Teacher { .. } => "teacher",
            ModelArch::MlpStudent { .. } => "mlp_student",
            ModelArch::LinearStudent { .. } => "linear_student",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ModelArch,
    pub params: ParamState,
    /// Training RNG cursor at the moment of the snapshot, when mid-run.
    pub rng: Option<RngState>,
    /// Optimizer steps the trainer that wrote this had finished.
    pub completed_steps: Option<u64>,
}

impl Checkpoint {
    pub fn for_teacher(net: &DenoiserNet) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: ModelArch::Teacher {
                kind: net.kind,
                data_dim: net.data_dim,
                hidden: net.hidden.clone(),
                num_classes: net.num_classes,
                schedule: net.sched,
            },
            params: ParamState::capture(&net.params),
            rng: None,
            completed_steps: None,
        }
    }

    pub fn for_mlp_student(student: &MlpStudent) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: ModelArch::MlpStudent {
                adaptor: student.adaptor(),
                data_dim: student.data_dim(),
                hidden: student.hidden_dims(),
                num_classes: student.num_classes(),
                weight_range: student.weight_range(),
                schedule: *student.schedule(),
            },
            params: ParamState::capture(student.params()),
            rng: None,
            completed_steps: None,
        }
    }

    pub fn for_linear_student(student: &LinearStudent) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: ModelArch::LinearStudent {
                basis: student.basis(),
                schedule: *student.schedule(),
            },
            params: ParamState::capture(student.params()),
            rng: None,
            completed_steps: None,
        }
    }

    pub fn with_rng(mut self, rng: &ChaCha8Rng) -> Checkpoint {
        self.rng = Some(RngState::capture(rng));
        self
    }

    pub fn with_progress(mut self, completed_steps: u64) -> Checkpoint {
        self.completed_steps = Some(completed_steps);
        self
    }

    pub fn restore_teacher(&self) -> Result<DenoiserNet> {
        match &self.arch {
            ModelArch::Teacher {
                kind,
                data_dim,
                hidden,
                num_classes,
                schedule,
            } => DenoiserNet::from_parts(
                self.params.restore()?,
                *kind,
                *data_dim,
                hidden.clone(),
                *num_classes,
                *schedule,
            ),
            other => Err(BootError::contract(format!(
                "checkpoint holds a {} model, not a teacher",
                other.name()
            ))),
        }
    }

    pub fn restore_mlp_student(&self) -> Result<MlpStudent> {
        match &self.arch {
            ModelArch::MlpStudent {
                adaptor,
                data_dim,
                hidden,
                num_classes,
                weight_range,
                schedule,
            } => MlpStudent::from_parts(
                self.params.restore()?,
                *adaptor,
                *data_dim,
                hidden.clone(),
                *num_classes,
                *weight_range,
                *schedule,
            ),
            other => Err(BootError::contract(format!(
                "checkpoint holds a {} model, not an mlp student",
                other.name()
            ))),
        }
    }

    pub fn restore_linear_student(&self) -> Result<LinearStudent> {
        match &self.arch {
            ModelArch::LinearStudent { basis, schedule } => {
                let mut student = LinearStudent::zeros(*basis, *schedule)?;
                student.params_mut().replace_with(self.params.restore()?)?;
                Ok(student)
            }
            other => Err(BootError::contract(format!(
                "checkpoint holds a {} model, not a linear student",
                other.name()
            ))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string(self)
            .map_err(|e| BootError::contract(format!("checkpoint serialization failed: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| BootError::contract(format!("malformed checkpoint: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(BootError::contract(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| BootError::contract(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BootError::contract(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_json(&text)
    }
}

/// Human-readable companion written next to teacher checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSidecar {
    pub dataset: ToyDataset,
    pub kind: PredictionKind,
    pub schedule: NoiseSchedule,
}

impl TeacherSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| BootError::contract(format!("sidecar serialization failed: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| BootError::contract(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<TeacherSidecar> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BootError::contract(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BootError::contract(format!("malformed sidecar: {e}")))
    }
}
