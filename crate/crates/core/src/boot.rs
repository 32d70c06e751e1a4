//! Data-free distillation of a frozen teacher into a single-query student.
//!
//! The student y(eps, t, ...) is trained to reproduce, directly from the
//! seed noise, the signal-space state the teacher's reverse iteration would
//! reach at time t. Each update nudges the student's value at s = t - delta
//! toward a one-step improvement of its own value at t (the teacher is
//! queried only at the mapped state, never on real data), while a periodic
//! boundary term pins the map at t_max to the teacher's direct prediction.

use crate::error::{BootError, Result};
use crate::guidance::{guided_signal, GuidePlan};
pub use crate::guidance::{GuidanceSpec, GuidanceWeight};
use crate::schedule::NoiseSchedule;
use crate::teacher::{
    check_cond, cond_row_indices, concat_cols_plain, CondBatch, DenoiserNet, PredictionKind,
    Teacher,
};
use crate::tensorcore::{
    sinusoidal_features, Linear, MlpBody, NodeId, ParamSet, Tape, TapeBinding, Tensor, EMBED_DIM,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

/// Per-sample weight applied to the squared bootstrap residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// 1 / delta^2 with the configured nominal step size.
    Uniform,
    /// 1 / c^2 with c the per-sample discrete blend coefficient; larger
    /// steps in the log noise ratio count for less.
    #[serde(rename = "inv_lambda_prime_sq")]
    InvSlopeSq,
}

/// How training times are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// t uniform on (t_min, t_max] throughout.
    Uniform,
    /// The sampling window starts pinned at t_max and widens linearly until
    /// it covers the whole range at the final step.
    Progressive,
}

/// Which stepping rule builds the bootstrap target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSolver {
    Euler,
    Heun,
}

/// Distillation settings. Serialized field names are the configuration
/// contract; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootConfig {
    pub delta: f64,
    pub beta: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub weighting: LossWeighting,
    pub time_sampling: TimeSampling,
    pub target_solver: TargetSolver,
    pub boundary_period: u64,
    pub clip: Option<f64>,
    pub ema_decay: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
}

impl Default for BootConfig {
    fn default() -> Self {
        BootConfig {
            delta: 0.04,
            beta: 1.0,
            t_min: crate::schedule::DEFAULT_T_MIN,
            t_max: crate::schedule::DEFAULT_T_MAX,
            weighting: LossWeighting::InvSlopeSq,
            time_sampling: TimeSampling::Uniform,
            target_solver: TargetSolver::Euler,
            boundary_period: 4,
            clip: None,
            ema_decay: 0.9999,
            lr: 1e-3,
            batch: 64,
            steps: 4000,
        }
    }
}

impl BootConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(BootError::domain(format!(
                "time range must satisfy 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if !(self.delta > 0.0 && self.delta < self.t_max - self.t_min) {
            return Err(BootError::domain(format!(
                "delta must lie in (0, t_max - t_min), got {}",
                self.delta
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(BootError::domain(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if self.boundary_period == 0 {
            return Err(BootError::domain("boundary_period must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(BootError::domain(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(BootError::domain(format!(
                "lr must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(BootError::domain("batch must be at least 1"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(BootError::domain(format!(
                    "clip must be positive and finite, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// A noise-to-signal map trained by distillation. Implementations expose a
/// plain forward for inference and a taped forward for training; only the
/// plain forward counts toward the query budget.
pub trait Student {
    fn data_dim(&self) -> usize;

    /// Class vocabulary size; 0 = unconditional.
    fn num_classes(&self) -> usize;

    /// Whether the map takes a guidance-strength input.
    fn takes_weight(&self) -> bool;

    /// Guidance-weight interval seen during training, when weight-conditioned.
    fn weight_range(&self) -> Option<(f64, f64)> {
        None
    }

    fn schedule(&self) -> &NoiseSchedule;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Swaps in a parameter set with identical names and shapes.
    fn adopt_params(&mut self, params: ParamSet) -> Result<()>;

    /// Inference forward: one time value, optional label, and optional
    /// guidance weight per row. Counts one query per row.
    fn forward(
        &self,
        eps: &Tensor,
        ts: &[f64],
        cond: CondBatch,
        ws: Option<&[f64]>,
    ) -> Result<Tensor>;

    /// Training forward on a tape whose binding holds this student's
    /// parameters. Does not count queries.
    fn forward_tape(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        eps: NodeId,
        ts: &[f64],
        cond: CondBatch,
        ws: Option<&[f64]>,
    ) -> Result<NodeId>;

    /// Forward passes so far, counted per sample row.
    fn nfe(&self) -> u64;

    fn reset_nfe(&self);
}

/// MLP student initialized from a teacher so that, before any training, its
/// output equals a fixed adaptor of the teacher's raw output at t_max.
///
/// Input streams, in order: the seed noise, a learned projection of the
/// (constant) t_max time features copied from the teacher, a zero-initialized
/// projection of the queried-time features, the teacher's class table when
/// conditional, and a zero-initialized projection of guidance-weight
/// features when weight-conditioned.
#[derive(Debug)]
pub struct MlpStudent {
    pub params: ParamSet,
    adaptor: PredictionKind,
    data_dim: usize,
    num_classes: usize,
    w_range: Option<(f64, f64)>,
    sched: NoiseSchedule,
    anchor: Linear,
    tgt_time: Linear,
    guide: Option<Linear>,
    body: MlpBody,
    nfe: AtomicU64,
}

impl Clone for MlpStudent {
    fn clone(&self) -> Self {
        MlpStudent {
            params: self.params.clone(),
            adaptor: self.adaptor,
            data_dim: self.data_dim,
            num_classes: self.num_classes,
            w_range: self.w_range,
            sched: self.sched,
            anchor: self.anchor.clone(),
            tgt_time: self.tgt_time.clone(),
            guide: self.guide.clone(),
            body: self.body.clone(),
            nfe: AtomicU64::new(self.nfe.load(Ordering::Relaxed)),
        }
    }
}

impl MlpStudent {
    /// Builds the student around a copy of the teacher's network. The
    /// teacher's data rows, time rows, and class rows keep their first-layer
    /// positions; the new queried-time (and guidance) rows are fresh random
    /// draws, in that order, but their projections start at zero, so the
    /// initial map ignores the queried time and weight entirely.
    pub fn from_teacher<R: Rng>(
        teacher: &DenoiserNet,
        w_range: Option<(f64, f64)>,
        rng: &mut R,
    ) -> Result<MlpStudent> {
        if let Some((lo, hi)) = w_range {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(BootError::domain(format!(
                    "weight range needs finite lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        let d = teacher.data_dim;
        let classes = teacher.num_classes;
        let conditional = classes > 0;
        let streams = 2 + usize::from(conditional) + usize::from(w_range.is_some());
        let in_s = d + EMBED_DIM * streams;
        let mut params = ParamSet::new();

        params.add("anchor.w", teacher.params.get("time.w")?.clone())?;
        params.add("anchor.b", teacher.params.get("time.b")?.clone())?;
        let anchor = Linear {
            w: "anchor.w".into(),
            b: "anchor.b".into(),
            in_dim: EMBED_DIM,
            out_dim: EMBED_DIM,
        };
        params.add("tgt_time.w", Tensor::zeros(vec![EMBED_DIM, EMBED_DIM]))?;
        params.add("tgt_time.b", Tensor::zeros(vec![EMBED_DIM]))?;
        let tgt_time = Linear {
            w: "tgt_time.w".into(),
            b: "tgt_time.b".into(),
            in_dim: EMBED_DIM,
            out_dim: EMBED_DIM,
        };
        let guide = if w_range.is_some() {
            params.add("guide.w", Tensor::zeros(vec![EMBED_DIM, EMBED_DIM]))?;
            params.add("guide.b", Tensor::zeros(vec![EMBED_DIM]))?;
            Some(Linear {
                w: "guide.w".into(),
                b: "guide.b".into(),
                in_dim: EMBED_DIM,
                out_dim: EMBED_DIM,
            })
        } else {
            None
        };
        if conditional {
            params.add("cond.table", teacher.params.get("cond.table")?.clone())?;
        }

        let first = &teacher.body.layers[0];
        let h0 = first.out_dim;
        let tw = teacher.params.get(&first.w)?;
        let std = if teacher.hidden.is_empty() {
            (1.0 / in_s as f64).sqrt()
        } else {
            (2.0 / in_s as f64).sqrt()
        };
        let fresh_tgt = Tensor::randn(rng, vec![EMBED_DIM, h0], std);
        let fresh_guide = if w_range.is_some() {
            Some(Tensor::randn(rng, vec![EMBED_DIM, h0], std))
        } else {
            None
        };
        let mut w0 = Vec::with_capacity(in_s * h0);
        let copy_rows = |dst: &mut Vec<f64>, from: usize, count: usize| {
            dst.extend_from_slice(&tw.data()[from * h0..(from + count) * h0]);
        };
        copy_rows(&mut w0, 0, d);
        copy_rows(&mut w0, d, EMBED_DIM);
        w0.extend_from_slice(fresh_tgt.data());
        if conditional {
            copy_rows(&mut w0, d + EMBED_DIM, EMBED_DIM);
        }
        if let Some(f) = &fresh_guide {
            w0.extend_from_slice(f.data());
        }
        params.add(first.w.clone(), Tensor::new(vec![in_s, h0], w0)?)?;
        params.add(first.b.clone(), teacher.params.get(&first.b)?.clone())?;
        for layer in &teacher.body.layers[1..] {
            params.add(layer.w.clone(), teacher.params.get(&layer.w)?.clone())?;
            params.add(layer.b.clone(), teacher.params.get(&layer.b)?.clone())?;
        }
        let mut body = teacher.body.clone();
        body.layers[0].in_dim = in_s;

        Ok(MlpStudent {
            params,
            adaptor: teacher.kind,
            data_dim: d,
            num_classes: classes,
            w_range,
            sched: teacher.sched,
            anchor,
            tgt_time,
            guide,
            body,
            nfe: AtomicU64::new(0),
        })
    }

    /// Rebuilds the layer structure for parameters loaded from a checkpoint.
    /// `hidden` lists the body's hidden widths, as `hidden_dims` reports.
    pub fn from_parts(
        params: ParamSet,
        adaptor: PredictionKind,
        data_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        w_range: Option<(f64, f64)>,
        sched: NoiseSchedule,
    ) -> Result<MlpStudent> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let skeleton =
            DenoiserNet::new(&mut rng, data_dim, &hidden, adaptor, num_classes, sched)?;
        let mut fresh = MlpStudent::from_teacher(&skeleton, w_range, &mut rng)?;
        for p in fresh.params.entries() {
            let loaded = params.get(&p.name)?;
            if loaded.shape() != p.value.shape() {
                return Err(BootError::shape(
                    format!("checkpoint parameter {}", p.name),
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", loaded.shape()),
                ));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn adaptor(&self) -> PredictionKind {
        self.adaptor
    }

    /// Hidden widths of the body, excluding the output layer.
    pub fn hidden_dims(&self) -> Vec<usize> {
        let n = self.body.layers.len();
        self.body.layers[..n - 1].iter().map(|l| l.out_dim).collect()
    }

    /// Copy of this student with the EMA parameters promoted to live values.
    pub fn ema_student(&self) -> MlpStudent {
        let mut out = self.clone();
        out.params = self.params.ema_snapshot();
        out
    }

    fn check_inputs(&self, eps: &Tensor, ts: &[f64], ws: Option<&[f64]>) -> Result<usize> {
        let rows = eps.rows();
        if eps.shape().len() != 2 || eps.cols() != self.data_dim || ts.len() != rows {
            return Err(BootError::shape(
                "student forward",
                format!("[n, {}] with n times", self.data_dim),
                format!("{:?} with {} times", eps.shape(), ts.len()),
            ));
        }
        match (self.guide.is_some(), ws) {
            (true, Some(w)) if w.len() == rows => {}
            (true, Some(w)) => {
                return Err(BootError::shape(
                    "student guidance weights",
                    format!("{rows}"),
                    format!("{}", w.len()),
                ));
            }
            (true, None) => {
                return Err(BootError::contract(
                    "weight-conditioned student needs one guidance weight per row",
                ));
            }
            (false, Some(_)) => {
                return Err(BootError::contract(
                    "student has no guidance-weight input",
                ));
            }
            (false, None) => {}
        }
        Ok(rows)
    }

    fn adapt_plain(&self, raw: &Tensor, eps: &Tensor) -> Result<Tensor> {
        match self.adaptor {
            PredictionKind::Signal => Ok(raw.clone()),
            PredictionKind::Noise => Tensor::lincomb(1.0, eps, -1.0, raw),
            PredictionKind::Velocity => Ok(raw.map(|v| -v)),
        }
    }
}

impl Student for MlpStudent {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn takes_weight(&self) -> bool {
        self.guide.is_some()
    }

    fn weight_range(&self) -> Option<(f64, f64)> {
        self.w_range
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn adopt_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.replace_with(params)
    }

    fn forward(
        &self,
        eps: &Tensor,
        ts: &[f64],
        cond: CondBatch,
        ws: Option<&[f64]>,
    ) -> Result<Tensor> {
        let rows = self.check_inputs(eps, ts, ws)?;
        let anchor_emb = self
            .anchor
            .forward_plain(&self.params, &sinusoidal_features(&vec![self.sched.t_max; rows]))?;
        let tgt_emb = self
            .tgt_time
            .forward_plain(&self.params, &sinusoidal_features(ts))?;
        let mut streams: Vec<&Tensor> = vec![eps, &anchor_emb, &tgt_emb];
        let cond_emb;
        if self.num_classes > 0 {
            let table = self.params.get("cond.table")?;
            let idx = cond_row_indices(self.num_classes, rows, cond)?;
            let mut data = Vec::with_capacity(rows * EMBED_DIM);
            for i in idx {
                data.extend_from_slice(table.row(i));
            }
            cond_emb = Tensor::new(vec![rows, EMBED_DIM], data)?;
            streams.push(&cond_emb);
        } else {
            check_cond(0, rows, cond)?;
        }
        let guide_emb;
        if let (Some(g), Some(w)) = (&self.guide, ws) {
            guide_emb = g.forward_plain(&self.params, &sinusoidal_features(w))?;
            streams.push(&guide_emb);
        }
        let joined = concat_cols_plain(&streams)?;
        let raw = self.body.forward_plain(&self.params, &joined)?;
        self.nfe.fetch_add(rows as u64, Ordering::Relaxed);
        self.adapt_plain(&raw, eps)
    }

    fn forward_tape(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        eps: NodeId,
        ts: &[f64],
        cond: CondBatch,
        ws: Option<&[f64]>,
    ) -> Result<NodeId> {
        let eps_vals = tape.value(eps).clone();
        let rows = self.check_inputs(&eps_vals, ts, ws)?;
        let anchor_feats = tape.leaf(sinusoidal_features(&vec![self.sched.t_max; rows]));
        let anchor_emb = self.anchor.forward_tape(tape, bind, anchor_feats)?;
        let tgt_feats = tape.leaf(sinusoidal_features(ts));
        let tgt_emb = self.tgt_time.forward_tape(tape, bind, tgt_feats)?;
        let mut streams = vec![eps, anchor_emb, tgt_emb];
        if self.num_classes > 0 {
            let table = bind.node("cond.table")?;
            let idx = cond_row_indices(self.num_classes, rows, cond)?;
            streams.push(tape.gather_rows(table, &idx)?);
        } else {
            check_cond(0, rows, cond)?;
        }
        if let (Some(g), Some(w)) = (&self.guide, ws) {
            let feats = tape.leaf(sinusoidal_features(w));
            streams.push(g.forward_tape(tape, bind, feats)?);
        }
        let joined = tape.concat_cols(&streams)?;
        let raw = self.body.forward_tape(tape, bind, joined)?;
        Ok(match self.adaptor {
            PredictionKind::Signal => raw,
            PredictionKind::Noise => tape.sub(eps, raw)?,
            PredictionKind::Velocity => tape.scale(raw, -1.0),
        })
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }
}

/// One-dimensional student that is linear in the seed noise with
/// time-dependent coefficients: y(eps, t) = a(t) eps + b(t), where a and b
/// are Chebyshev expansions over the scheduled time range. Rich enough to
/// represent the exact noise-to-signal map of any 1-D Gaussian teacher.
#[derive(Debug)]
pub struct LinearStudent {
    pub params: ParamSet,
    basis: usize,
    sched: NoiseSchedule,
    nfe: AtomicU64,
}

impl Clone for LinearStudent {
    fn clone(&self) -> Self {
        LinearStudent {
            params: self.params.clone(),
            basis: self.basis,
            sched: self.sched,
            nfe: AtomicU64::new(self.nfe.load(Ordering::Relaxed)),
        }
    }
}

impl LinearStudent {
    pub fn new<R: Rng>(basis: usize, sched: NoiseSchedule, rng: &mut R) -> Result<LinearStudent> {
        if basis == 0 {
            return Err(BootError::domain("basis must have at least one term"));
        }
        sched.validate()?;
        let mut params = ParamSet::new();
        params.add("lin.w", Tensor::randn(rng, vec![2 * basis, 1], 0.1))?;
        Ok(LinearStudent {
            params,
            basis,
            sched,
            nfe: AtomicU64::new(0),
        })
    }

    pub fn zeros(basis: usize, sched: NoiseSchedule) -> Result<LinearStudent> {
        if basis == 0 {
            return Err(BootError::domain("basis must have at least one term"));
        }
        sched.validate()?;
        let mut params = ParamSet::new();
        params.add("lin.w", Tensor::zeros(vec![2 * basis, 1]))?;
        Ok(LinearStudent {
            params,
            basis,
            sched,
            nfe: AtomicU64::new(0),
        })
    }

    pub fn basis(&self) -> usize {
        self.basis
    }

    /// Rows of [T_0(u) eps, ..., T_{K-1}(u) eps, T_0(u), ..., T_{K-1}(u)]
    /// with u the time mapped affinely onto [-1, 1].
    fn features(&self, eps: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let rows = eps.rows();
        if eps.cols() != 1 || ts.len() != rows {
            return Err(BootError::shape(
                "linear student features",
                format!("[n, 1] with n times"),
                format!("{:?} with {} times", eps.shape(), ts.len()),
            ));
        }
        let k = self.basis;
        let span = self.sched.t_max - self.sched.t_min;
        let mut data = Vec::with_capacity(rows * 2 * k);
        let mut cheb = vec![0.0; k];
        for (r, &t) in ts.iter().enumerate() {
            let u = (2.0 * (t - self.sched.t_min) / span - 1.0).clamp(-1.0, 1.0);
            for i in 0..k {
                cheb[i] = match i {
                    0 => 1.0,
                    1 => u,
                    _ => 2.0 * u * cheb[i - 1] - cheb[i - 2],
                };
            }
            let e = eps.row(r)[0];
            for &c in &cheb {
                data.push(c * e);
            }
            data.extend_from_slice(&cheb);
        }
        Tensor::new(vec![rows, 2 * k], data)
    }
}

impl Student for LinearStudent {
    fn data_dim(&self) -> usize {
        1
    }

    fn num_classes(&self) -> usize {
        0
    }

    fn takes_weight(&self) -> bool {
        false
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn adopt_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.replace_with(params)
    }

    fn forward(
        &self,
        eps: &Tensor,
        ts: &[f64],
        cond: CondBatch,
        ws: Option<&[f64]>,
    ) -> Result<Tensor> {
        check_cond(0, eps.rows(), cond)?;
        if ws.is_some() {
            return Err(BootError::contract("student has no guidance-weight input"));
        }
        let feats = self.features(eps, ts)?;
        let w = self.params.get("lin.w")?;
        let rows = eps.rows();
        let mut out = vec![0.0; rows];
        crate::tensorcore::matmul_into(feats.data(), w.data(), rows, 2 * self.basis, 1, &mut out);
        self.nfe.fetch_add(rows as u64, Ordering::Relaxed);
        Tensor::new(vec![rows, 1], out)
    }

    fn forward_tape(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        eps: NodeId,
        ts: &[f64],
        cond: CondBatch,
        ws: Option<&[f64]>,
    ) -> Result<NodeId> {
        let eps_vals = tape.value(eps).clone();
        check_cond(0, eps_vals.rows(), cond)?;
        if ws.is_some() {
            return Err(BootError::contract("student has no guidance-weight input"));
        }
        let feats = tape.leaf(self.features(&eps_vals, ts)?);
        let w = bind.node("lin.w")?;
        tape.matmul(feats, w)
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }
}

/// Where training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSampler {
    /// No labels anywhere.
    Unconditional,
    /// One label per row, uniform over the teacher's classes. Consumes one
    /// integer draw per row.
    UniformClasses,
    /// The same label (or the null condition) every row. No draws.
    Fixed(Option<usize>),
}

impl ContextSampler {
    fn draw<R: Rng>(
        &self,
        rng: &mut R,
        rows: usize,
        num_classes: usize,
    ) -> Result<Option<Vec<Option<usize>>>> {
        match *self {
            ContextSampler::Unconditional => Ok(None),
            ContextSampler::UniformClasses => {
                if num_classes == 0 {
                    return Err(BootError::contract(
                        "class sampling needs a conditional teacher",
                    ));
                }
                Ok(Some(
                    (0..rows)
                        .map(|_| Some(rng.gen_range(0..num_classes)))
                        .collect(),
                ))
            }
            ContextSampler::Fixed(label) => {
                if let Some(l) = label {
                    if l >= num_classes {
                        return Err(BootError::contract(format!(
                            "fixed label {l} out of range for {num_classes} classes"
                        )));
                    }
                }
                Ok(Some(vec![label; rows]))
            }
        }
    }
}

/// Per-step training record passed to the progress callback.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_bs: f64,
    /// Present only on steps where the boundary term was computed.
    pub loss_bc: Option<f64>,
    pub wall_ms: f64,
}

/// x rows mixed per sample time: alpha(t_i) y_i + sigma(t_i) eps_i.
fn mix_state_rows(y: &Tensor, eps: &Tensor, ts: &[f64], sched: &NoiseSchedule) -> Result<Tensor> {
    if y.shape() != eps.shape() || ts.len() != y.rows() {
        return Err(BootError::shape(
            "mix_state_rows",
            format!("matching [n, d] with n times"),
            format!("{:?} / {:?} with {} times", y.shape(), eps.shape(), ts.len()),
        ));
    }
    let cols = y.cols();
    let mut data = Vec::with_capacity(y.len());
    for (r, &t) in ts.iter().enumerate() {
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let yr = y.row(r);
        let er = eps.row(r);
        for j in 0..cols {
            data.push(alpha * yr[j] + sigma * er[j]);
        }
    }
    Tensor::new(y.shape().to_vec(), data)
}

/// One-step improvement target built from the student's own value: the
/// teacher is queried at the state mapped from y_t, and y_t is pulled toward
/// that prediction by the discrete blend coefficient
/// c = 1 - alpha_t sigma_s / (sigma_t alpha_s) over s = max(t - delta,
/// t_min). The Heun variant re-queries at the predicted next state and
/// averages the two pulls. Value-level; the training path isolates the same
/// construction behind a stop-gradient.
pub fn bootstrap_target(
    teacher: &dyn Teacher,
    y_t: &Tensor,
    eps: &Tensor,
    t: f64,
    cfg: &BootConfig,
    spec: Option<&GuidanceSpec>,
) -> Result<Tensor> {
    cfg.validate()?;
    if t <= cfg.t_min {
        return Err(BootError::contract(format!(
            "bootstrap target needs t above t_min = {}, got {t}",
            cfg.t_min
        )));
    }
    if y_t.shape() != eps.shape() {
        return Err(BootError::shape(
            "bootstrap_target",
            format!("{:?}", eps.shape()),
            format!("{:?}", y_t.shape()),
        ));
    }
    let rows = y_t.rows();
    let plan = GuidePlan::from_optional(spec, teacher, rows)?;
    let sched = teacher.schedule();
    let s = (t - cfg.delta).max(cfg.t_min);
    let c = 1.0 - sched.signal_retention(s, t)?;
    let ts = vec![t; rows];
    let ss = vec![s; rows];
    let x_t = mix_state_rows(y_t, eps, &ts, sched)?;
    let f_t = guided_signal(teacher, &x_t, &ts, plan.as_ref(), cfg.clip)?;
    let pull_t = Tensor::lincomb(1.0, &f_t, -1.0, y_t)?;
    match cfg.target_solver {
        TargetSolver::Euler => Tensor::lincomb(1.0, y_t, c, &pull_t),
        TargetSolver::Heun => {
            let mid = Tensor::lincomb(1.0, y_t, c, &pull_t)?;
            let x_s = mix_state_rows(&mid, eps, &ss, sched)?;
            let f_s = guided_signal(teacher, &x_s, &ss, plan.as_ref(), cfg.clip)?;
            let pull_s = Tensor::lincomb(1.0, &f_s, -1.0, &mid)?;
            let avg = Tensor::lincomb(0.5, &pull_t, 0.5, &pull_s)?;
            Tensor::lincomb(1.0, y_t, c, &avg)
        }
    }
}

/// Builds the scalar bootstrap-loss node on a tape: the squared gap between
/// the student's value at s and the gradient-isolated one-step target built
/// from its value at t, weighted per configuration and averaged over rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_bootstrap_node<S: Student + ?Sized>(
    tape: &mut Tape,
    bind: &TapeBinding,
    student: &S,
    teacher: &dyn Teacher,
    eps_leaf: NodeId,
    eps: &Tensor,
    ts: &[f64],
    ss: &[f64],
    cond: CondBatch,
    ws: Option<&[f64]>,
    plan: Option<&GuidePlan>,
    cfg: &BootConfig,
    use_stop_gradient: bool,
) -> Result<NodeId> {
    let rows = eps.rows();
    let sched = teacher.schedule();
    let mut coeffs = Vec::with_capacity(rows);
    for (&t, &s) in ts.iter().zip(ss) {
        coeffs.push(1.0 - sched.signal_retention(s, t)?);
    }

    let y_t = student.forward_tape(tape, bind, eps_leaf, ts, cond, ws)?;
    let y_t_vals = tape.value(y_t).clone();
    let x_t = mix_state_rows(&y_t_vals, eps, ts, sched)?;
    let f_t = guided_signal(teacher, &x_t, ts, plan, cfg.clip)?;
    let f_t_leaf = tape.leaf(f_t);
    let pull_t = tape.sub(f_t_leaf, y_t)?;
    let target = match cfg.target_solver {
        TargetSolver::Euler => {
            let scaled = tape.row_scale(pull_t, &coeffs)?;
            tape.add(y_t, scaled)?
        }
        TargetSolver::Heun => {
            let scaled = tape.row_scale(pull_t, &coeffs)?;
            let mid = tape.add(y_t, scaled)?;
            let mid_vals = tape.value(mid).clone();
            let x_s = mix_state_rows(&mid_vals, eps, ss, sched)?;
            let f_s = guided_signal(teacher, &x_s, ss, plan, cfg.clip)?;
            let f_s_leaf = tape.leaf(f_s);
            let pull_s = tape.sub(f_s_leaf, mid)?;
            let both = tape.add(pull_t, pull_s)?;
            let half: Vec<f64> = coeffs.iter().map(|c| 0.5 * c).collect();
            let scaled = tape.row_scale(both, &half)?;
            tape.add(y_t, scaled)?
        }
    };
    let target = if use_stop_gradient {
        tape.stop_gradient(target)
    } else {
        target
    };

    let y_s = student.forward_tape(tape, bind, eps_leaf, ss, cond, ws)?;
    let diff = tape.sub(y_s, target)?;
    let sq = tape.mul(diff, diff)?;
    if let Some(r) = (0..rows).find(|&r| !tape.value(sq).row(r).iter().all(|v| v.is_finite())) {
        return Err(BootError::numeric(format!(
            "non-finite bootstrap residual at t = {}",
            ts[r]
        )));
    }
    let weighted = match cfg.weighting {
        LossWeighting::Uniform => tape.scale(sq, 1.0 / (cfg.delta * cfg.delta)),
        LossWeighting::InvSlopeSq => {
            let inv: Vec<f64> = coeffs.iter().map(|c| 1.0 / (c * c)).collect();
            tape.row_scale(sq, &inv)?
        }
    };
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Builds the scalar boundary-loss node: the squared gap between the
/// student's value at t_max and the teacher's (guided) prediction with the
/// seed noise itself as the queried state, averaged over rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_boundary_node<S: Student + ?Sized>(
    tape: &mut Tape,
    bind: &TapeBinding,
    student: &S,
    teacher: &dyn Teacher,
    eps_leaf: NodeId,
    eps: &Tensor,
    cond: CondBatch,
    ws: Option<&[f64]>,
    plan: Option<&GuidePlan>,
    cfg: &BootConfig,
) -> Result<NodeId> {
    let rows = eps.rows();
    let ts = vec![cfg.t_max; rows];
    let f_b = guided_signal(teacher, eps, &ts, plan, cfg.clip)?;
    let f_b_leaf = tape.leaf(f_b);
    let y_b = student.forward_tape(tape, bind, eps_leaf, &ts, cond, ws)?;
    let diff = tape.sub(y_b, f_b_leaf)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Broadcast label/weight rows for the standalone loss entry points, which
/// take a fixed-weight spec rather than per-sample draws. Labels reach the
/// student only when it has a class input; weights only when it has a
/// guidance-strength input.
fn op_rows<S: Student + ?Sized>(
    student: &S,
    teacher: &dyn Teacher,
    spec: Option<&GuidanceSpec>,
    rows: usize,
) -> Result<(Option<Vec<Option<usize>>>, Option<Vec<f64>>, Option<GuidePlan>)> {
    let plan = GuidePlan::from_optional(spec, teacher, rows)?;
    let cond = if student.num_classes() > 0 {
        spec.and_then(|s| s.condition).map(|c| vec![Some(c); rows])
    } else {
        None
    };
    let ws = if student.takes_weight() {
        let w = match spec {
            Some(s) => s.weight.fixed()?,
            None => 1.0,
        };
        Some(vec![w; rows])
    } else {
        None
    };
    Ok((cond, ws, plan))
}

/// Bootstrap loss and its parameter gradients for a batch of times, each in
/// (t_min, t_max].
pub fn bootstrap_loss<S: Student + ?Sized>(
    student: &S,
    teacher: &dyn Teacher,
    eps: &Tensor,
    ts: &[f64],
    cfg: &BootConfig,
    spec: Option<&GuidanceSpec>,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    bootstrap_loss_impl(student, teacher, eps, ts, cfg, spec, true)
}

pub(crate) fn bootstrap_loss_impl<S: Student + ?Sized>(
    student: &S,
    teacher: &dyn Teacher,
    eps: &Tensor,
    ts: &[f64],
    cfg: &BootConfig,
    spec: Option<&GuidanceSpec>,
    use_stop_gradient: bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    cfg.validate()?;
    if ts.len() != eps.rows() {
        return Err(BootError::shape(
            "bootstrap_loss",
            format!("{} times", eps.rows()),
            format!("{}", ts.len()),
        ));
    }
    for &t in ts {
        if !(t > cfg.t_min && t <= cfg.t_max) {
            return Err(BootError::contract(format!(
                "bootstrap time must lie in ({}, {}], got {t}",
                cfg.t_min, cfg.t_max
            )));
        }
    }
    let ss: Vec<f64> = ts.iter().map(|&t| (t - cfg.delta).max(cfg.t_min)).collect();
    let (cond, ws, plan) = op_rows(student, teacher, spec, eps.rows())?;
    let mut tape = Tape::new();
    let bind = student.params().bind(&mut tape);
    let eps_leaf = tape.leaf(eps.clone());
    let loss = build_bootstrap_node(
        &mut tape,
        &bind,
        student,
        teacher,
        eps_leaf,
        eps,
        ts,
        &ss,
        cond.as_deref(),
        ws.as_deref(),
        plan.as_ref(),
        cfg,
        use_stop_gradient,
    )?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, bind.grads(&grads)))
}

/// Boundary loss and its parameter gradients.
pub fn boundary_loss<S: Student + ?Sized>(
    student: &S,
    teacher: &dyn Teacher,
    eps: &Tensor,
    spec: Option<&GuidanceSpec>,
    cfg: &BootConfig,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    cfg.validate()?;
    let (cond, ws, plan) = op_rows(student, teacher, spec, eps.rows())?;
    let mut tape = Tape::new();
    let bind = student.params().bind(&mut tape);
    let eps_leaf = tape.leaf(eps.clone());
    let loss = build_boundary_node(
        &mut tape,
        &bind,
        student,
        teacher,
        eps_leaf,
        eps,
        cond.as_deref(),
        ws.as_deref(),
        plan.as_ref(),
        cfg,
    )?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, bind.grads(&grads)))
}

/// Training times for one step. Uniform sampling covers (t_min, t_max]
/// throughout; progressive sampling starts at t_max and widens the window
/// linearly over the run. One uniform draw per row either way.
pub(crate) fn sample_times<R: Rng>(rng: &mut R, cfg: &BootConfig, step: u64) -> Vec<f64> {
    let span = match cfg.time_sampling {
        TimeSampling::Uniform => cfg.t_max - cfg.t_min,
        TimeSampling::Progressive => {
            let progress = (step + 1) as f64 / cfg.steps.max(1) as f64;
            (cfg.t_max - cfg.t_min) * progress
        }
    };
    (0..cfg.batch)
        .map(|_| cfg.t_max - rng.gen::<f64>() * span)
        .collect()
}

/// Distills the teacher into the student and returns the EMA copy.
///
/// Per step the generator is consumed in a fixed order: seed noise
/// (batch x dim standard normals, row major), then labels (one integer per
/// row, `UniformClasses` only), then times (one uniform per row), then
/// guidance weights (one uniform per row, ranged weight only). The boundary
/// term joins the loss on steps where step % boundary_period == 0.
pub fn distill<S, R, F>(
    teacher: &dyn Teacher,
    student: &mut S,
    cfg: &BootConfig,
    spec: Option<&GuidanceSpec>,
    context: ContextSampler,
    rng: &mut R,
    on_step: F,
) -> Result<S>
where
    S: Student + Clone,
    R: Rng,
    F: FnMut(&StepMetrics),
{
    distill_range(teacher, student, cfg, spec, context, rng, 0, cfg.steps, on_step)
}

/// The distillation loop over the absolute step window [start, stop), so an
/// interrupted run can pick up where its checkpoint left off. Resuming is
/// bit-exact when the student parameters (with moments and shadow) and the
/// generator cursor are restored to their values after `start` steps.
#[allow(clippy::too_many_arguments)]
pub fn distill_range<S, R, F>(
    teacher: &dyn Teacher,
    student: &mut S,
    cfg: &BootConfig,
    spec: Option<&GuidanceSpec>,
    context: ContextSampler,
    rng: &mut R,
    start: u64,
    stop: u64,
    mut on_step: F,
) -> Result<S>
where
    S: Student + Clone,
    R: Rng,
    F: FnMut(&StepMetrics),
{
    cfg.validate()?;
    if start > stop || stop > cfg.steps {
        return Err(BootError::contract(format!(
            "step window [{start}, {stop}) must sit inside the configured {} steps",
            cfg.steps
        )));
    }
    if student.data_dim() != teacher.data_dim() {
        return Err(BootError::shape(
            "distill",
            format!("student dim {}", teacher.data_dim()),
            format!("{}", student.data_dim()),
        ));
    }
    if let Some(sp) = spec {
        sp.validate_for(teacher)?;
        if matches!(sp.weight, GuidanceWeight::Range { .. }) && !student.takes_weight() {
            return Err(BootError::contract(
                "ranged guidance weight needs a weight-conditioned student",
            ));
        }
    }
    let sched = teacher.schedule();
    if cfg.t_min != sched.t_min || cfg.t_max != sched.t_max {
        log::warn!(
            "distillation range [{}, {}] differs from the teacher's [{}, {}]",
            cfg.t_min,
            cfg.t_max,
            sched.t_min,
            sched.t_max
        );
    }

    let rows = cfg.batch;
    for step in start..stop {
        let started = Instant::now();
        let eps = Tensor::randn(rng, vec![rows, teacher.data_dim()], 1.0);
        let labels = match context.draw(rng, rows, teacher.num_classes())? {
            Some(drawn) => Some(drawn),
            None => spec
                .and_then(|s| s.condition)
                .map(|c| vec![Some(c); rows]),
        };
        let ts = sample_times(rng, cfg, step);
        let weights: Option<Vec<f64>> = spec.map(|s| match s.weight {
            GuidanceWeight::Fixed(w) => vec![w; rows],
            GuidanceWeight::Range { lo, hi } => (0..rows)
                .map(|_| lo + rng.gen::<f64>() * (hi - lo))
                .collect(),
        });
        let ss: Vec<f64> = ts.iter().map(|&t| (t - cfg.delta).max(cfg.t_min)).collect();
        let plan = if spec.is_some() || (labels.is_some() && teacher.num_classes() > 0) {
            Some(GuidePlan {
                cond: labels.clone().unwrap_or_else(|| vec![None; rows]),
                neg: vec![spec.and_then(|s| s.negative); rows],
                weight: weights.clone().unwrap_or_else(|| vec![1.0; rows]),
            })
        } else {
            None
        };
        let cond = if student.num_classes() > 0 {
            labels
        } else {
            None
        };
        let ws = if student.takes_weight() {
            Some(weights.clone().unwrap_or_else(|| vec![1.0; rows]))
        } else {
            None
        };

        let mut tape = Tape::new();
        let bind = student.params().bind(&mut tape);
        let eps_leaf = tape.leaf(eps.clone());
        let loss_bs = build_bootstrap_node(
            &mut tape,
            &bind,
            student,
            teacher,
            eps_leaf,
            &eps,
            &ts,
            &ss,
            cond.as_deref(),
            ws.as_deref(),
            plan.as_ref(),
            cfg,
            true,
        )?;
        let loss_bs_val = tape.value(loss_bs).data()[0];
        let boundary_due = step % cfg.boundary_period == 0;
        let (total, loss_bc_val) = if boundary_due {
            let loss_bc = build_boundary_node(
                &mut tape,
                &bind,
                student,
                teacher,
                eps_leaf,
                &eps,
                cond.as_deref(),
                ws.as_deref(),
                plan.as_ref(),
                cfg,
            )?;
            let bc_val = tape.value(loss_bc).data()[0];
            let scaled = tape.scale(loss_bc, cfg.beta);
            (tape.add(loss_bs, scaled)?, Some(bc_val))
        } else {
            (loss_bs, None)
        };
        let total_val = tape.value(total).data()[0];
        if !total_val.is_finite() || total_val > 1e6 {
            return Err(BootError::numeric(format!(
                "distillation diverged at step {step}: loss {total_val} \
                 (bootstrap {loss_bs_val}, boundary {loss_bc_val:?}, \
                 times {:.4}..{:.4})",
                ts.iter().copied().fold(f64::INFINITY, f64::min),
                ts.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )));
        }
        let grads = tape.backward(total)?;
        let gmap = bind.grads(&grads);
        student.params_mut().adamw_step(&gmap, cfg.lr, 0.0)?;
        student.params_mut().ema_update(cfg.ema_decay)?;
        on_step(&StepMetrics {
            step,
            loss_bs: loss_bs_val,
            loss_bc: loss_bc_val,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    let mut ema = student.clone();
    ema.adopt_params(student.params().ema_snapshot())?;
    ema.reset_nfe();
    Ok(ema)
}

/// One student query at a shared time: the single-query sampler when
/// t_target = t_min. The guidance spec may carry a class label and a fixed weight;
/// a negative label is meaningless here because guidance was baked in
/// during distillation.
pub fn sample_student<S: Student + ?Sized>(
    student: &S,
    eps: &Tensor,
    t_target: f64,
    spec: Option<&GuidanceSpec>,
) -> Result<Tensor> {
    let sched = student.schedule();
    if !(sched.t_min..=sched.t_max).contains(&t_target) {
        return Err(BootError::domain(format!(
            "sample time must lie in [{}, {}], got {t_target}",
            sched.t_min, sched.t_max
        )));
    }
    let rows = eps.rows();
    let mut cond = None;
    let mut w = 1.0;
    if let Some(sp) = spec {
        if sp.negative.is_some() {
            return Err(BootError::contract(
                "students take no negative label; guidance was fixed at distillation time",
            ));
        }
        if let Some(c) = sp.condition {
            if c >= student.num_classes() {
                return Err(BootError::contract(format!(
                    "label {c} out of range for {} classes",
                    student.num_classes()
                )));
            }
            cond = Some(vec![Some(c); rows]);
        }
        w = sp.weight.fixed()?;
    }
    let ws = if student.takes_weight() {
        Some(vec![w; rows])
    } else {
        if w != 1.0 {
            return Err(BootError::contract("student has no guidance-weight input"));
        }
        None
    };
    let ts = vec![t_target; rows];
    student.forward(eps, &ts, cond.as_deref(), ws.as_deref())
}
