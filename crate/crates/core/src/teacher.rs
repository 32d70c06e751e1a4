//! Diffusion teachers: the trait the solvers and the distiller query, a
//! trainable MLP denoiser over the toy datasets, and an analytic teacher for
//! Gaussian data whose posterior mean is available in closed form.
//!
//! A teacher may parameterize its network output as the clean signal, the
//! noise, or the velocity mix of the two; `predict_signal` always converts
//! to signal space, which is the only representation the rest of the crate
//! consumes.

use crate::dataset::ToyDataset;
use crate::error::{BootError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensorcore::{sinusoidal_features, Linear, MlpBody, ParamSet, Tape, Tensor, EMBED_DIM};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// What the raw network output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Signal,
    Noise,
    Velocity,
}

/// Converts a raw network output into a signal (clean data) prediction.
///
/// noise kind: x0 = (x_t - sigma * out) / alpha, velocity kind:
/// x0 = alpha * x_t - sigma * out. Requires alpha above 1e-12 for the
/// noise-kind division.
pub fn signal_from_prediction(
    kind: PredictionKind,
    raw: &Tensor,
    x_t: &Tensor,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if raw.shape() != x_t.shape() {
        return Err(BootError::shape(
            "signal_from_prediction",
            format!("{:?}", x_t.shape()),
            format!("{:?}", raw.shape()),
        ));
    }
    let (alpha, sigma) = sched.alpha_sigma(t)?;
    match kind {
        PredictionKind::Signal => Ok(raw.clone()),
        PredictionKind::Noise => {
            if alpha.abs() < 1e-12 {
                return Err(BootError::numeric(format!(
                    "noise-kind conversion needs alpha above 1e-12, got {alpha} at t = {t}"
                )));
            }
            let data = x_t
                .data()
                .iter()
                .zip(raw.data())
                .map(|(x, e)| (x - sigma * e) / alpha)
                .collect();
            Tensor::new(raw.shape().to_vec(), data)
        }
        PredictionKind::Velocity => {
            let data = x_t
                .data()
                .iter()
                .zip(raw.data())
                .map(|(x, v)| alpha * x - sigma * v)
                .collect();
            Tensor::new(raw.shape().to_vec(), data)
        }
    }
}

/// Row-wise variant of `signal_from_prediction` for per-sample times.
pub fn signal_from_prediction_rows(
    kind: PredictionKind,
    raw: &Tensor,
    x_t: &Tensor,
    ts: &[f64],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if raw.shape() != x_t.shape() || ts.len() != x_t.rows() {
        return Err(BootError::shape(
            "signal_from_prediction_rows",
            format!("{:?} with {} times", x_t.shape(), x_t.rows()),
            format!("{:?} with {} times", raw.shape(), ts.len()),
        ));
    }
    if kind == PredictionKind::Signal {
        return Ok(raw.clone());
    }
    let cols = x_t.cols();
    let mut data = Vec::with_capacity(x_t.len());
    for (r, &t) in ts.iter().enumerate() {
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let xr = x_t.row(r);
        let or = raw.row(r);
        match kind {
            PredictionKind::Signal => unreachable!(),
            PredictionKind::Noise => {
                if alpha.abs() < 1e-12 {
                    return Err(BootError::numeric(format!(
                        "noise-kind conversion needs alpha above 1e-12, got {alpha} at t = {t}"
                    )));
                }
                for j in 0..cols {
                    data.push((xr[j] - sigma * or[j]) / alpha);
                }
            }
            PredictionKind::Velocity => {
                for j in 0..cols {
                    data.push(alpha * xr[j] - sigma * or[j]);
                }
            }
        }
    }
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Inverse of `signal_from_prediction`: the raw output a net of the given
/// kind would have to emit for its signal prediction to equal `signal`.
pub fn prediction_from_signal(
    kind: PredictionKind,
    signal: &Tensor,
    x_t: &Tensor,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let (alpha, sigma) = sched.alpha_sigma(t)?;
    match kind {
        PredictionKind::Signal => Ok(signal.clone()),
        PredictionKind::Noise => {
            if sigma.abs() < 1e-12 {
                return Err(BootError::numeric(format!(
                    "signal-to-noise conversion needs sigma above 1e-12, got {sigma} at t = {t}"
                )));
            }
            let data = x_t
                .data()
                .iter()
                .zip(signal.data())
                .map(|(x, s)| (x - alpha * s) / sigma)
                .collect();
            Tensor::new(signal.shape().to_vec(), data)
        }
        PredictionKind::Velocity => {
            // v = alpha * eps - sigma * x0 with eps reconstructed from x_t.
            if sigma.abs() < 1e-12 {
                return Err(BootError::numeric(format!(
                    "signal-to-velocity conversion needs sigma above 1e-12, got {sigma} at t = {t}"
                )));
            }
            let data = x_t
                .data()
                .iter()
                .zip(signal.data())
                .map(|(x, s)| {
                    let eps = (x - alpha * s) / sigma;
                    alpha * eps - sigma * s
                })
                .collect();
            Tensor::new(signal.shape().to_vec(), data)
        }
    }
}

/// Per-sample conditioning labels; `None` entries query the teacher's
/// unconditional (null) branch.
pub type CondBatch<'a> = Option<&'a [Option<usize>]>;

/// Frozen denoiser interface. Implementations count every row of every
/// query so sampling cost can be audited.
pub trait Teacher: Sync {
    fn data_dim(&self) -> usize;

    /// Number of class labels the teacher understands; 0 = unconditional.
    fn num_classes(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Signal prediction for a batch of rows at shared time `t`.
    fn predict_signal(&self, x_t: &Tensor, t: f64, cond: CondBatch) -> Result<Tensor>;

    /// Signal prediction with one time value per row. The default loops
    /// single-row queries; batched implementations override it.
    fn predict_signal_each(&self, x_t: &Tensor, ts: &[f64], cond: CondBatch) -> Result<Tensor> {
        let rows = x_t.rows();
        if ts.len() != rows {
            return Err(BootError::shape(
                "predict_signal_each",
                format!("{rows} times"),
                format!("{}", ts.len()),
            ));
        }
        check_cond(self.num_classes(), rows, cond)?;
        let mut out = Vec::with_capacity(x_t.len());
        for r in 0..rows {
            let xr = Tensor::new(vec![1, x_t.cols()], x_t.row(r).to_vec())?;
            let cr = cond.map(|labels| vec![labels[r]]);
            let yr = self.predict_signal(&xr, ts[r], cr.as_deref())?;
            out.extend_from_slice(yr.data());
        }
        Tensor::new(x_t.shape().to_vec(), out)
    }

    /// Network function evaluations so far, counted per sample row.
    fn nfe(&self) -> u64;

    fn reset_nfe(&self);
}

pub(crate) fn check_cond(num_classes: usize, rows: usize, cond: CondBatch) -> Result<()> {
    if let Some(labels) = cond {
        if labels.len() != rows {
            return Err(BootError::shape(
                "conditioning batch",
                format!("{rows} labels"),
                format!("{}", labels.len()),
            ));
        }
        for l in labels.iter().flatten() {
            if num_classes == 0 {
                return Err(BootError::contract(
                    "conditional query against an unconditional teacher",
                ));
            }
            if *l >= num_classes {
                return Err(BootError::contract(format!(
                    "class label {l} out of range for {num_classes} classes"
                )));
            }
        }
    }
    Ok(())
}

/// Embedding-table row index per sample: label k maps to row k, `None` to
/// the trailing null row.
pub(crate) fn cond_row_indices(
    num_classes: usize,
    rows: usize,
    cond: CondBatch,
) -> Result<Vec<usize>> {
    check_cond(num_classes, rows, cond)?;
    Ok(match cond {
        None => vec![num_classes; rows],
        Some(labels) => labels.iter().map(|l| l.unwrap_or(num_classes)).collect(),
    })
}

/// Trainable MLP denoiser. Input streams: data coordinates, a learned
/// projection of sinusoidal time features, and (for labeled data) a learned
/// class-embedding row, where row `num_classes` is the null condition.
#[derive(Debug)]
pub struct DenoiserNet {
    pub params: ParamSet,
    pub kind: PredictionKind,
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub sched: NoiseSchedule,
    pub(crate) time_proj: Linear,
    pub(crate) body: MlpBody,
    nfe: AtomicU64,
}

impl DenoiserNet {
    pub fn new<R: Rng>(
        rng: &mut R,
        data_dim: usize,
        hidden: &[usize],
        kind: PredictionKind,
        num_classes: usize,
        sched: NoiseSchedule,
    ) -> Result<Self> {
        sched.validate()?;
        let mut params = ParamSet::new();
        let time_proj = Linear::init(
            &mut params,
            "time",
            EMBED_DIM,
            EMBED_DIM,
            (1.0 / EMBED_DIM as f64).sqrt(),
            rng,
        )?;
        if num_classes > 0 {
            params.add(
                "cond.table",
                Tensor::randn(rng, vec![num_classes + 1, EMBED_DIM], 0.02),
            )?;
        }
        let in_dim = data_dim + EMBED_DIM + if num_classes > 0 { EMBED_DIM } else { 0 };
        let body = MlpBody::init(&mut params, "body", in_dim, hidden, data_dim, rng)?;
        Ok(DenoiserNet {
            params,
            kind,
            data_dim,
            hidden: hidden.to_vec(),
            num_classes,
            sched,
            time_proj,
            body,
            nfe: AtomicU64::new(0),
        })
    }

    /// Rebuilds the layer structure for parameters loaded from a checkpoint.
    pub fn from_parts(
        params: ParamSet,
        kind: PredictionKind,
        data_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        sched: NoiseSchedule,
    ) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut fresh = DenoiserNet::new(&mut rng, data_dim, hidden.as_slice(), kind, num_classes, sched)?;
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

    pub(crate) fn cond_indices(&self, rows: usize, cond: CondBatch) -> Result<Vec<usize>> {
        cond_row_indices(self.num_classes, rows, cond)
    }

    /// Raw network output in `kind` space, no tape.
    pub fn raw_forward(&self, x_t: &Tensor, t: f64, cond: CondBatch) -> Result<Tensor> {
        let rows = x_t.rows();
        let ts = vec![t; rows];
        self.raw_forward_per_sample(x_t, &ts, cond)
    }

    /// Same, with one time value per row.
    pub fn raw_forward_per_sample(&self, x_t: &Tensor, ts: &[f64], cond: CondBatch) -> Result<Tensor> {
        let rows = x_t.rows();
        if x_t.cols() != self.data_dim || ts.len() != rows {
            return Err(BootError::shape(
                "raw_forward",
                format!("[n, {}] with n times", self.data_dim),
                format!("{:?} with {} times", x_t.shape(), ts.len()),
            ));
        }
        let time_emb = self
            .time_proj
            .forward_plain(&self.params, &sinusoidal_features(ts))?;
        let mut streams: Vec<&Tensor> = vec![x_t, &time_emb];
        let cond_emb;
        if self.num_classes > 0 {
            let table = self.params.get("cond.table")?;
            let idx = self.cond_indices(rows, cond)?;
            let mut data = Vec::with_capacity(rows * EMBED_DIM);
            for i in idx {
                data.extend_from_slice(table.row(i));
            }
            cond_emb = Tensor::new(vec![rows, EMBED_DIM], data)?;
            streams.push(&cond_emb);
        } else {
            check_cond(0, rows, cond)?;
        }
        let joined = concat_cols_plain(&streams)?;
        self.body.forward_plain(&self.params, &joined)
    }

    /// Tape-recorded forward returning the output node; used for training.
    pub(crate) fn raw_forward_tape(
        &self,
        tape: &mut Tape,
        bind: &crate::tensorcore::TapeBinding,
        x_t: crate::tensorcore::NodeId,
        ts: &[f64],
        cond: CondBatch,
    ) -> Result<crate::tensorcore::NodeId> {
        let rows = tape.value(x_t).rows();
        let feats = tape.leaf(sinusoidal_features(ts));
        let time_emb = self.time_proj.forward_tape(tape, bind, feats)?;
        let mut streams = vec![x_t, time_emb];
        if self.num_classes > 0 {
            let table = bind.node("cond.table")?;
            let idx = self.cond_indices(rows, cond)?;
            streams.push(tape.gather_rows(table, &idx)?);
        } else {
            check_cond(0, rows, cond)?;
        }
        let joined = tape.concat_cols(&streams)?;
        self.body.forward_tape(tape, bind, joined)
    }
}

pub(crate) fn concat_cols_plain(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            if p.rows() != rows {
                return Err(BootError::shape(
                    "concat streams",
                    format!("{rows} rows"),
                    format!("{}", p.rows()),
                ));
            }
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, total], data)
}

impl Teacher for DenoiserNet {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn predict_signal(&self, x_t: &Tensor, t: f64, cond: CondBatch) -> Result<Tensor> {
        let raw = self.raw_forward(x_t, t, cond)?;
        self.nfe.fetch_add(x_t.rows() as u64, Ordering::Relaxed);
        signal_from_prediction(self.kind, &raw, x_t, t, &self.sched)
    }

    fn predict_signal_each(&self, x_t: &Tensor, ts: &[f64], cond: CondBatch) -> Result<Tensor> {
        let raw = self.raw_forward_per_sample(x_t, ts, cond)?;
        self.nfe.fetch_add(x_t.rows() as u64, Ordering::Relaxed);
        signal_from_prediction_rows(self.kind, &raw, x_t, ts, &self.sched)
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }
}

/// Exact denoiser for Gaussian data N(mean, cov): the posterior mean
/// E[x0 | x_t] = mean + alpha_t cov (alpha_t^2 cov + sigma_t^2 I)^-1
/// (x_t - alpha_t mean).
pub struct AnalyticGaussianTeacher {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance; symmetric positive definite.
    pub cov: Vec<f64>,
    pub sched: NoiseSchedule,
    nfe: AtomicU64,
}

impl AnalyticGaussianTeacher {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, sched: NoiseSchedule) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(BootError::shape(
                "AnalyticGaussianTeacher",
                format!("{d}x{d} covariance"),
                format!("{} entries", cov.len()),
            ));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-12 {
                    return Err(BootError::contract("covariance must be symmetric"));
                }
            }
        }
        // Positive definiteness via an unpivoted Cholesky attempt.
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = cov[i * d + j];
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(BootError::contract(
                            "covariance must be positive definite",
                        ));
                    }
                    l[i * d + i] = s.sqrt();
                } else {
                    l[i * d + j] = s / l[j * d + j];
                }
            }
        }
        Ok(AnalyticGaussianTeacher {
            mean,
            cov,
            sched,
            nfe: AtomicU64::new(0),
        })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64, sched: NoiseSchedule) -> Result<Self> {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        AnalyticGaussianTeacher::new(mean, cov, sched)
    }
}

impl Teacher for AnalyticGaussianTeacher {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn num_classes(&self) -> usize {
        0
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn predict_signal(&self, x_t: &Tensor, t: f64, cond: CondBatch) -> Result<Tensor> {
        let d = self.mean.len();
        if x_t.cols() != d {
            return Err(BootError::shape(
                "AnalyticGaussianTeacher::predict_signal",
                format!("[n, {d}]"),
                format!("{:?}", x_t.shape()),
            ));
        }
        check_cond(0, x_t.rows(), cond)?;
        let (alpha, sigma) = self.sched.alpha_sigma(t)?;
        // System matrix alpha^2 cov + sigma^2 I, factored once per call.
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = alpha * alpha * self.cov[i * d + j];
            }
            a[i * d + i] += sigma * sigma;
        }
        let lu = LuFactors::new(a, d)?;
        let rows = x_t.rows();
        let mut out = Vec::with_capacity(rows * d);
        let mut rhs = vec![0.0; d];
        for r in 0..rows {
            let x = x_t.row(r);
            for i in 0..d {
                rhs[i] = x[i] - alpha * self.mean[i];
            }
            let z = lu.solve(&rhs);
            for i in 0..d {
                let mut acc = self.mean[i];
                for j in 0..d {
                    acc += alpha * self.cov[i * d + j] * z[j];
                }
                out.push(acc);
            }
        }
        self.nfe.fetch_add(rows as u64, Ordering::Relaxed);
        Tensor::new(vec![rows, d], out)
    }

    fn predict_signal_each(&self, x_t: &Tensor, ts: &[f64], cond: CondBatch) -> Result<Tensor> {
        let d = self.mean.len();
        let rows = x_t.rows();
        if x_t.cols() != d || ts.len() != rows {
            return Err(BootError::shape(
                "AnalyticGaussianTeacher::predict_signal_each",
                format!("[n, {d}] with n times"),
                format!("{:?} with {} times", x_t.shape(), ts.len()),
            ));
        }
        check_cond(0, rows, cond)?;
        let mut out = Vec::with_capacity(rows * d);
        let mut a = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for r in 0..rows {
            let (alpha, sigma) = self.sched.alpha_sigma(ts[r])?;
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] = alpha * alpha * self.cov[i * d + j];
                }
                a[i * d + i] += sigma * sigma;
            }
            let lu = LuFactors::new(a.clone(), d)?;
            let x = x_t.row(r);
            for i in 0..d {
                rhs[i] = x[i] - alpha * self.mean[i];
            }
            let z = lu.solve(&rhs);
            for i in 0..d {
                let mut acc = self.mean[i];
                for j in 0..d {
                    acc += alpha * self.cov[i * d + j] * z[j];
                }
                out.push(acc);
            }
        }
        self.nfe.fetch_add(rows as u64, Ordering::Relaxed);
        Tensor::new(vec![rows, d], out)
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }
}

/// Dense LU with partial pivoting for the tiny posterior systems.
struct LuFactors {
    lu: Vec<f64>,
    piv: Vec<usize>,
    d: usize,
}

impl LuFactors {
    fn new(mut a: Vec<f64>, d: usize) -> Result<Self> {
        let mut piv: Vec<usize> = (0..d).collect();
        for col in 0..d {
            let mut best = col;
            for r in col + 1..d {
                if a[r * d + col].abs() > a[best * d + col].abs() {
                    best = r;
                }
            }
            if a[best * d + col].abs() < 1e-300 {
                return Err(BootError::numeric("singular posterior system"));
            }
            if best != col {
                for j in 0..d {
                    a.swap(col * d + j, best * d + j);
                }
                piv.swap(col, best);
            }
            let pivot = a[col * d + col];
            for r in col + 1..d {
                let f = a[r * d + col] / pivot;
                a[r * d + col] = f;
                for j in col + 1..d {
                    a[r * d + j] -= f * a[col * d + j];
                }
            }
        }
        Ok(LuFactors { lu: a, piv, d })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut y: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 1..d {
            for j in 0..i {
                y[i] -= self.lu[i * d + j] * y[j];
            }
        }
        for i in (0..d).rev() {
            for j in i + 1..d {
                y[i] -= self.lu[i * d + j] * y[j];
            }
            y[i] /= self.lu[i * d + i];
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    /// Probability of replacing a class label with the null condition, so a
    /// conditional teacher also learns its unconditional branch.
    pub uncond_prob: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            steps: 20_000,
            lr: 1e-3,
            batch: 64,
            uncond_prob: 0.2,
        }
    }
}

/// Denoising regression: draw clean data, corrupt to x_t = alpha x + sigma
/// noise at a uniform time, and regress the signal prediction back onto x
/// with unit weighting.
///
/// Per-step RNG consumption order: data batch, label dropout decisions,
/// times, then noise.
pub fn train_teacher<R: Rng>(
    net: &mut DenoiserNet,
    data: &ToyDataset,
    cfg: &TeacherTrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    if data.dim() != net.data_dim {
        return Err(BootError::shape(
            "train_teacher",
            format!("data dim {}", net.data_dim),
            format!("{}", data.dim()),
        ));
    }
    if data.num_classes() != net.num_classes {
        return Err(BootError::contract(format!(
            "dataset has {} classes but teacher expects {}",
            data.num_classes(),
            net.num_classes
        )));
    }
    if cfg.batch == 0 || !(0.0..=1.0).contains(&cfg.uncond_prob) {
        return Err(BootError::contract(
            "batch must be positive and uncond_prob within [0, 1]",
        ));
    }
    let sched = net.sched;
    let d = net.data_dim;
    for step in 0..cfg.steps {
        let (x0, labels) = data.sample(rng, cfg.batch);
        let cond: Option<Vec<Option<usize>>> = labels.map(|ls| {
            ls.into_iter()
                .map(|l| {
                    if rng.gen::<f64>() < cfg.uncond_prob {
                        None
                    } else {
                        Some(l)
                    }
                })
                .collect()
        });
        let ts: Vec<f64> = (0..cfg.batch)
            .map(|_| sched.t_min + rng.gen::<f64>() * (sched.t_max - sched.t_min))
            .collect();
        let mut noise = Vec::with_capacity(cfg.batch * d);
        for _ in 0..cfg.batch * d {
            noise.push(rng.sample::<f64, _>(StandardNormal));
        }

        let mut alphas = Vec::with_capacity(cfg.batch);
        let mut sigmas = Vec::with_capacity(cfg.batch);
        for &t in &ts {
            let (a, s) = sched.alpha_sigma(t)?;
            alphas.push(a);
            sigmas.push(s);
        }
        let mut xt = vec![0.0; cfg.batch * d];
        for i in 0..cfg.batch {
            for j in 0..d {
                xt[i * d + j] = alphas[i] * x0.data()[i * d + j] + sigmas[i] * noise[i * d + j];
            }
        }
        let xt = Tensor::new(vec![cfg.batch, d], xt)?;

        let mut tape = Tape::new();
        let bind = net.params.bind(&mut tape);
        let xt_id = tape.leaf(xt);
        let raw = net.raw_forward_tape(&mut tape, &bind, xt_id, &ts, cond.as_deref())?;
        let pred = match net.kind {
            PredictionKind::Signal => raw,
            PredictionKind::Noise => {
                let scaled_raw = tape.row_scale(raw, &sigmas)?;
                let num = tape.sub(xt_id, scaled_raw)?;
                let inv: Vec<f64> = alphas.iter().map(|a| 1.0 / a).collect();
                tape.row_scale(num, &inv)?
            }
            PredictionKind::Velocity => {
                let ax = tape.row_scale(xt_id, &alphas)?;
                let sv = tape.row_scale(raw, &sigmas)?;
                tape.sub(ax, sv)?
            }
        };
        let target = tape.leaf(x0);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / cfg.batch as f64);

        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() || loss_val > 1e6 {
            return Err(BootError::numeric(format!(
                "teacher training diverged at step {step}: loss = {loss_val}"
            )));
        }
        let grads = tape.backward(loss)?;
        net.params.adamw_step(&bind.grads(&grads), cfg.lr, 0.0)?;
        net.params.ema_update(0.9999)?;
        on_step(step, loss_val);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn signal_kind_conversion_is_identity() {
        let raw = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let xt = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let out = signal_from_prediction(PredictionKind::Signal, &raw, &xt, 0.5, &sched()).unwrap();
        assert_eq!(out.data(), raw.data());
    }

    /// Feeding the exact noise into a noise-kind conversion recovers the
    /// exact clean signal that built x_t.
    #[test]
    fn noise_kind_recovers_truth() {
        let s = sched();
        let t = 0.37;
        let (a, sg) = s.alpha_sigma(t).unwrap();
        let x0 = [1.25, -0.5];
        let eps = [0.3, 2.0];
        let xt = Tensor::new(vec![1, 2], vec![a * x0[0] + sg * eps[0], a * x0[1] + sg * eps[1]])
            .unwrap();
        let raw = Tensor::new(vec![1, 2], eps.to_vec()).unwrap();
        let out = signal_from_prediction(PredictionKind::Noise, &raw, &xt, t, &s).unwrap();
        for (o, x) in out.data().iter().zip(x0) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_kind_recovers_truth() {
        let s = sched();
        let t = 0.61;
        let (a, sg) = s.alpha_sigma(t).unwrap();
        let (x0, eps) = (0.8, -1.1);
        let xt = Tensor::new(vec![1, 1], vec![a * x0 + sg * eps]).unwrap();
        let v = Tensor::new(vec![1, 1], vec![a * eps - sg * x0]).unwrap();
        let out = signal_from_prediction(PredictionKind::Velocity, &v, &xt, t, &s).unwrap();
        assert!((out.data()[0] - x0).abs() < 1e-12);
    }

    #[test]
    fn conversion_roundtrips_through_every_kind() {
        let s = sched();
        let t = 0.44;
        let xt = Tensor::new(vec![2, 1], vec![0.9, -0.3]).unwrap();
        let signal = Tensor::new(vec![2, 1], vec![1.7, 0.2]).unwrap();
        for kind in [PredictionKind::Signal, PredictionKind::Noise, PredictionKind::Velocity] {
            let raw = prediction_from_signal(kind, &signal, &xt, t, &s).unwrap();
            let back = signal_from_prediction(kind, &raw, &xt, t, &s).unwrap();
            for (b, v) in back.data().iter().zip(signal.data()) {
                assert!((b - v).abs() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn analytic_teacher_near_zero_time_returns_input() {
        let t = AnalyticGaussianTeacher::isotropic(vec![1.0, -2.0], 3.0, sched()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.9]).unwrap();
        let out = t.predict_signal(&x, 1e-7, None).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_teacher_standard_normal_shrinks_by_alpha() {
        let t = AnalyticGaussianTeacher::isotropic(vec![0.0, 0.0], 1.0, sched()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.5, -0.25]).unwrap();
        let tt = 0.63;
        let (a, _) = sched().alpha_sigma(tt).unwrap();
        // alpha^2 + sigma^2 = 1 collapses the posterior mean to alpha * x_t.
        let out = t.predict_signal(&x, tt, None).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - a * v).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_teacher_matches_hand_computed_one_d_case() {
        let t = AnalyticGaussianTeacher::isotropic(vec![1.0], 4.0, sched()).unwrap();
        let xt = 0.7;
        let x = Tensor::new(vec![1, 1], vec![xt]).unwrap();
        let out = t.predict_signal(&x, 0.5, None).unwrap();
        let r = (2.0f64).sqrt() / 2.0;
        let expected = 1.0 + r * 4.0 / 2.5 * (xt - r);
        assert!((out.data()[0] - expected).abs() < 1e-14);
    }

    /// Quadrature oracle: integrate the posterior mean directly from the
    /// definition E[x0 | x_t] over a dense grid and compare.
    #[test]
    fn analytic_teacher_matches_quadrature() {
        let (mu, var) = (0.6, 2.25);
        let teacher = AnalyticGaussianTeacher::isotropic(vec![mu], var, sched()).unwrap();
        for (xt, t) in [(0.9, 0.3), (-1.4, 0.7), (0.2, 0.95)] {
            let (a, s) = sched().alpha_sigma(t).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            let n = 40_000;
            let (lo, hi) = (mu - 12.0 * var.sqrt(), mu + 12.0 * var.sqrt());
            let h = (hi - lo) / n as f64;
            for i in 0..=n {
                let x = lo + h * i as f64;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let prior = (-(x - mu) * (x - mu) / (2.0 * var)).exp();
                let lik = (-(xt - a * x) * (xt - a * x) / (2.0 * s * s)).exp();
                num += w * x * prior * lik;
                den += w * prior * lik;
            }
            let oracle = num / den;
            let got = teacher
                .predict_signal(&Tensor::new(vec![1, 1], vec![xt]).unwrap(), t, None)
                .unwrap()
                .data()[0];
            assert!(
                (got - oracle).abs() < 1e-8,
                "t = {t}: closed form {got} vs quadrature {oracle}"
            );
        }
    }

    #[test]
    fn analytic_teacher_rejects_bad_covariance_and_conditioning() {
        assert!(AnalyticGaussianTeacher::new(vec![0.0, 0.0], vec![1.0, 0.5, -0.5, 1.0], sched())
            .is_err());
        assert!(AnalyticGaussianTeacher::new(vec![0.0], vec![-1.0], sched()).is_err());
        let t = AnalyticGaussianTeacher::isotropic(vec![0.0], 1.0, sched()).unwrap();
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let cond = [Some(0usize)];
        assert!(t.predict_signal(&x, 0.5, Some(&cond)).is_err());
    }

    #[test]
    fn nfe_counts_rows() {
        let t = AnalyticGaussianTeacher::isotropic(vec![0.0], 1.0, sched()).unwrap();
        let x = Tensor::new(vec![5, 1], vec![0.1; 5]).unwrap();
        t.predict_signal(&x, 0.5, None).unwrap();
        t.predict_signal(&x, 0.4, None).unwrap();
        assert_eq!(t.nfe(), 10);
        t.reset_nfe();
        assert_eq!(t.nfe(), 0);
    }

    /// Per-row time queries must agree with shared-time queries row by row,
    /// for both the MLP teacher and the analytic one.
    #[test]
    fn per_sample_times_match_shared_time_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net =
            DenoiserNet::new(&mut rng, 2, &[16], PredictionKind::Noise, 0, sched()).unwrap();
        let gauss = AnalyticGaussianTeacher::new(
            vec![0.5, -0.25],
            vec![2.0, 0.3, 0.3, 1.0],
            sched(),
        )
        .unwrap();
        let x = Tensor::randn(&mut rng, vec![4, 2], 1.0);
        let ts = [0.1, 0.37, 0.62, 0.9];
        for teacher in [&net as &dyn Teacher, &gauss as &dyn Teacher] {
            let batched = teacher.predict_signal_each(&x, &ts, None).unwrap();
            for r in 0..4 {
                let xr = Tensor::new(vec![1, 2], x.row(r).to_vec()).unwrap();
                let yr = teacher.predict_signal(&xr, ts[r], None).unwrap();
                assert_eq!(batched.row(r), yr.data());
            }
        }
    }

    /// A net that always outputs the true clean signal has zero training
    /// loss: zero body weights with the output bias pinned to the constant.
    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenoiserNet::new(
            &mut rng,
            1,
            &[8],
            PredictionKind::Signal,
            0,
            sched(),
        )
        .unwrap();
        for p in net.params.entries_mut() {
            p.value.data_mut().fill(0.0);
        }
        net.params
            .get_mut("body.out.b")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.7]);
        let data = ToyDataset::Constant(vec![0.7]);
        let mut losses = Vec::new();
        let cfg = TeacherTrainConfig {
            steps: 3,
            lr: 0.0,
            batch: 4,
            uncond_prob: 0.0,
        };
        train_teacher(&mut net, &data, &cfg, &mut rng, |_, l| losses.push(l)).unwrap();
        assert!(losses.iter().all(|&l| l == 0.0), "{losses:?}");
    }

    #[test]
    fn training_loss_decreases_on_ring_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net =
            DenoiserNet::new(&mut rng, 2, &[32, 32], PredictionKind::Signal, 0, sched()).unwrap();
        let mut losses = Vec::new();
        let cfg = TeacherTrainConfig {
            steps: 100,
            lr: 3e-3,
            batch: 32,
            uncond_prob: 0.0,
        };
        train_teacher(
            &mut net,
            &ToyDataset::EightGaussians,
            &cfg,
            &mut rng,
            |_, l| losses.push(l),
        )
        .unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    /// On constant data the unique loss minimizer outputs the constant for
    /// every (x_t, t); a short training run must approach it.
    #[test]
    fn converges_to_constant_on_point_mass_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net =
            DenoiserNet::new(&mut rng, 1, &[32, 32], PredictionKind::Signal, 0, sched()).unwrap();
        let cfg = TeacherTrainConfig {
            steps: 1500,
            lr: 3e-3,
            batch: 32,
            uncond_prob: 0.0,
        };
        train_teacher(&mut net, &ToyDataset::Constant(vec![0.7]), &cfg, &mut rng, |_, _| {})
            .unwrap();
        for (x, t) in [(0.9, 0.1), (-0.4, 0.5), (0.1, 0.93)] {
            let out = net
                .predict_signal(&Tensor::new(vec![1, 1], vec![x]).unwrap(), t, None)
                .unwrap();
            assert!(
                (out.data()[0] - 0.7).abs() < 0.05,
                "x_t = {x}, t = {t}: {}",
                out.data()[0]
            );
        }
    }

    #[test]
    fn conditional_net_answers_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net =
            DenoiserNet::new(&mut rng, 2, &[16], PredictionKind::Signal, 2, sched()).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        let cond = [Some(0), None];
        let a = net.predict_signal(&x, 0.5, Some(&cond)).unwrap();
        let b = net.predict_signal(&x, 0.5, None).unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        // Row 1 used the null row in both calls, row 0 differs by class.
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(0), b.row(0));
        let bad = [Some(5), None];
        assert!(net.predict_signal(&x, 0.5, Some(&bad)).is_err());
    }

    #[test]
    fn teacher_training_is_deterministic_per_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut net =
                DenoiserNet::new(&mut rng, 2, &[16], PredictionKind::Signal, 0, sched()).unwrap();
            let cfg = TeacherTrainConfig {
                steps: 20,
                lr: 1e-3,
                batch: 8,
                uncond_prob: 0.0,
            };
            train_teacher(&mut net, &ToyDataset::EightGaussians, &cfg, &mut rng, |_, _| {})
                .unwrap();
            net.params
                .entries()
                .iter()
                .flat_map(|p| p.value.data().to_vec())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }
}
