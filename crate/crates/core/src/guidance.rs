//! Classifier-free guidance: blending a teacher's conditional and negative
//! (usually null-class) signal predictions with a strength weight, with an
//! optional clamp on the blended prediction.

use crate::error::{BootError, Result};
use crate::teacher::Teacher;
use crate::tensorcore::Tensor;
use serde::{Deserialize, Serialize};

/// Guidance strength. `Range` bounds are inclusive and are resolved to one
/// weight per sample by whoever drives the query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceWeight {
    Fixed(f64),
    Range { lo: f64, hi: f64 },
}

impl GuidanceWeight {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GuidanceWeight::Fixed(w) => {
                if !w.is_finite() {
                    return Err(BootError::domain(format!(
                        "guidance weight must be finite, got {w}"
                    )));
                }
            }
            GuidanceWeight::Range { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(BootError::domain(format!(
                        "guidance range needs finite lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The single weight of a `Fixed` variant; `Range` has none.
    pub fn fixed(&self) -> Result<f64> {
        match *self {
            GuidanceWeight::Fixed(w) => Ok(w),
            GuidanceWeight::Range { lo, hi } => Err(BootError::contract(format!(
                "a single query needs a fixed guidance weight, got range [{lo}, {hi}]"
            ))),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            GuidanceWeight::Fixed(w) => (w, w),
            GuidanceWeight::Range { lo, hi } => (lo, hi),
        }
    }
}

/// One guided-query setup: the class label driving the positive branch, the
/// label driving the negative branch (`None` means the null class), and the
/// strength. Weight 1 is the plain conditional prediction, weight 0 the
/// negative branch; weights above 1 push away from the negative branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub condition: Option<usize>,
    pub negative: Option<usize>,
    pub weight: GuidanceWeight,
}

impl GuidanceSpec {
    pub fn fixed(condition: Option<usize>, weight: f64) -> Self {
        GuidanceSpec {
            condition,
            negative: None,
            weight: GuidanceWeight::Fixed(weight),
        }
    }

    pub fn validate_for(&self, teacher: &dyn Teacher) -> Result<()> {
        self.weight.validate()?;
        for label in [self.condition, self.negative].into_iter().flatten() {
            if teacher.num_classes() == 0 {
                return Err(BootError::contract(
                    "guided query with a class label against an unconditional teacher",
                ));
            }
            if label >= teacher.num_classes() {
                return Err(BootError::contract(format!(
                    "guidance label {label} out of range for {} classes",
                    teacher.num_classes()
                )));
            }
        }
        Ok(())
    }
}

/// Fully resolved per-row guidance used by the solvers and the distiller.
pub(crate) struct GuidePlan {
    pub cond: Vec<Option<usize>>,
    pub neg: Vec<Option<usize>>,
    pub weight: Vec<f64>,
}

impl GuidePlan {
    /// Broadcasts a spec with a fixed weight across `rows` samples.
    pub fn from_spec(spec: &GuidanceSpec, teacher: &dyn Teacher, rows: usize) -> Result<Self> {
        spec.validate_for(teacher)?;
        let w = spec.weight.fixed()?;
        Ok(GuidePlan {
            cond: vec![spec.condition; rows],
            neg: vec![spec.negative; rows],
            weight: vec![w; rows],
        })
    }

    /// Same, passing an absent spec through as an unguided plan.
    pub fn from_optional(
        spec: Option<&GuidanceSpec>,
        teacher: &dyn Teacher,
        rows: usize,
    ) -> Result<Option<Self>> {
        spec.map(|s| GuidePlan::from_spec(s, teacher, rows)).transpose()
    }

    fn check(&self, rows: usize) -> Result<()> {
        if self.cond.len() != rows || self.neg.len() != rows || self.weight.len() != rows {
            return Err(BootError::shape(
                "guidance plan",
                format!("{rows} rows"),
                format!(
                    "{} cond / {} neg / {} weight",
                    self.cond.len(),
                    self.neg.len(),
                    self.weight.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Teacher signal query with optional guidance and clamping, one time value
/// per row. Weight exactly 1 everywhere collapses to a single conditional
/// query; weight exactly 0 everywhere to a single negative query.
pub(crate) fn guided_signal(
    teacher: &dyn Teacher,
    x_t: &Tensor,
    ts: &[f64],
    plan: Option<&GuidePlan>,
    clip: Option<f64>,
) -> Result<Tensor> {
    let out = match plan {
        None => teacher.predict_signal_each(x_t, ts, None)?,
        Some(p) => {
            p.check(x_t.rows())?;
            if p.weight.iter().all(|&w| w == 0.0) {
                teacher.predict_signal_each(x_t, ts, Some(&p.neg))?
            } else {
                let pos = teacher.predict_signal_each(x_t, ts, Some(&p.cond))?;
                if p.weight.iter().all(|&w| w == 1.0) {
                    pos
                } else {
                    let neg = teacher.predict_signal_each(x_t, ts, Some(&p.neg))?;
                    let cols = x_t.cols();
                    let mut data = Vec::with_capacity(x_t.len());
                    for (r, &w) in p.weight.iter().enumerate() {
                        let pr = pos.row(r);
                        let nr = neg.row(r);
                        if w == 1.0 {
                            data.extend_from_slice(pr);
                        } else {
                            for j in 0..cols {
                                data.push(nr[j] + w * (pr[j] - nr[j]));
                            }
                        }
                    }
                    Tensor::new(x_t.shape().to_vec(), data)?
                }
            }
        }
    };
    apply_clip(out, clip)
}

/// Clamps every entry to [-clip, clip] when a clip is configured.
pub(crate) fn apply_clip(t: Tensor, clip: Option<f64>) -> Result<Tensor> {
    match clip {
        None => Ok(t),
        Some(c) => {
            if !(c > 0.0) || !c.is_finite() {
                return Err(BootError::domain(format!(
                    "clip must be a positive finite value, got {c}"
                )));
            }
            Ok(t.map(|v| v.clamp(-c, c)))
        }
    }
}

/// Guided signal prediction at a shared time. The guidance spec's weight must be
/// fixed; per-sample weights go through the distiller instead.
pub fn cfg_combine(
    teacher: &dyn Teacher,
    x_t: &Tensor,
    t: f64,
    spec: &GuidanceSpec,
    clip: Option<f64>,
) -> Result<Tensor> {
    let plan = GuidePlan::from_spec(spec, teacher, x_t.rows())?;
    let ts = vec![t; x_t.rows()];
    guided_signal(teacher, x_t, &ts, Some(&plan), clip)
}
