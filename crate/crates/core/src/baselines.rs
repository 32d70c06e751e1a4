//! Reference trainers the distilled student is judged against: direct
//! regression onto the teacher's full sampling map, and a consistency model
//! that needs real data. Neither touches the bootstrap objective; they give
//! the evaluation harness honest quality and cost comparison points.

use crate::boot::Student;
use crate::dataset::ToyDataset;
use crate::error::{BootError, Result};
use crate::schedule::NoiseSchedule;
use crate::solvers::{ddim_step, signal_ode_sample, SignalSolver, YBoundary};
use crate::teacher::Teacher;
use crate::tensorcore::{Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Settings for the direct regression baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectDistillConfig {
    pub steps: u64,
    /// Teacher solver steps spent building every regression target.
    pub n_ode_steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DirectDistillConfig {
    fn default() -> Self {
        DirectDistillConfig {
            steps: 4000,
            n_ode_steps: 64,
            batch: 64,
            lr: 1e-3,
        }
    }
}

impl DirectDistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ode_steps == 0 || self.batch == 0 {
            return Err(BootError::contract(
                "n_ode_steps and batch must be positive",
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(BootError::contract("lr must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Trains the student to reproduce the teacher's full noise-to-signal map by
/// plain regression: every update solves the reverse recursion from a fresh
/// noise batch and fits the single-query output at the time floor to the
/// result. Quality tracks many-step sampling, but each update costs
/// n_ode_steps teacher queries per sample, which is the cost this baseline
/// exists to expose.
///
/// Per-step RNG consumption order: the noise batch, row-major.
pub fn direct_distill_baseline<S: Student, R: Rng>(
    teacher: &dyn Teacher,
    student: &mut S,
    cfg: &DirectDistillConfig,
    rng: &mut R,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    cfg.validate()?;
    if teacher.data_dim() != student.data_dim() {
        return Err(BootError::shape(
            "direct distillation",
            format!("teacher dim {}", teacher.data_dim()),
            format!("student dim {}", student.data_dim()),
        ));
    }
    let d = student.data_dim();
    let ts = vec![student.schedule().t_min; cfg.batch];
    let ws: Option<Vec<f64>> = student.takes_weight().then(|| vec![1.0; cfg.batch]);
    for step in 0..cfg.steps {
        let mut noise = Vec::with_capacity(cfg.batch * d);
        for _ in 0..cfg.batch * d {
            noise.push(rng.sample::<f64, _>(StandardNormal));
        }
        let eps = Tensor::new(vec![cfg.batch, d], noise)?;
        let target = signal_ode_sample(
            teacher,
            &eps,
            cfg.n_ode_steps,
            SignalSolver::Blend,
            YBoundary::MatchData,
            None,
            None,
        )?
        .final_state()
        .clone();

        let mut tape = Tape::new();
        let bind = student.params().bind(&mut tape);
        let eps_id = tape.leaf(eps);
        let pred = student.forward_tape(&mut tape, &bind, eps_id, &ts, None, ws.as_deref())?;
        let want = tape.leaf(target);
        let diff = tape.sub(pred, want)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / cfg.batch as f64);

        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() || loss_val > 1e6 {
            return Err(BootError::numeric(format!(
                "direct distillation diverged at step {step}: loss = {loss_val}"
            )));
        }
        let grads = tape.backward(loss)?;
        student
            .params_mut()
            .adamw_step(&bind.grads(&grads), cfg.lr, 0.0)?;
        on_step(step, loss_val);
    }
    Ok(())
}

/// Settings for the consistency baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    /// Intervals in the training time grid; each update picks one adjacent
    /// node pair.
    pub grid_steps: usize,
    /// Decay of the frozen target network that anchors every regression.
    pub ema_decay: f64,
    /// Data scale in the skip/output interpolation.
    pub sigma_data: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            steps: 20_000,
            lr: 1e-3,
            batch: 64,
            grid_steps: 32,
            ema_decay: 0.999,
            sigma_data: 1.0,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_steps == 0 || self.batch == 0 {
            return Err(BootError::contract(
                "grid_steps and batch must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(BootError::contract("ema_decay must lie in [0, 1)"));
        }
        if !(self.sigma_data.is_finite() && self.sigma_data > 0.0) {
            return Err(BootError::contract("sigma_data must be finite and positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(BootError::contract("lr must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Skip and output scales at time t. The output scale vanishes at the time
/// floor, which pins the wrapped map to the identity there regardless of the
/// network.
fn skip_out(sched: &NoiseSchedule, sigma_data: f64, t: f64) -> Result<(f64, f64)> {
    let (a_t, s_t) = sched.alpha_sigma(t)?;
    let (a_min, s_min) = sched.alpha_sigma(sched.t_min)?;
    // Noise-to-signal scale accumulated since the floor.
    let se = s_t / a_t - s_min / a_min;
    let denom = se * se + sigma_data * sigma_data;
    Ok((
        sigma_data * sigma_data / denom,
        sigma_data * se / denom.sqrt(),
    ))
}

fn map_rows<S: Student + ?Sized>(
    net: &S,
    sigma_data: f64,
    x: &Tensor,
    ts: &[f64],
) -> Result<Tensor> {
    let ws: Option<Vec<f64>> = net.takes_weight().then(|| vec![1.0; x.rows()]);
    let raw = net.forward(x, ts, None, ws.as_deref())?;
    let d = x.cols();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let (cs, co) = skip_out(net.schedule(), sigma_data, ts[r])?;
        for j in 0..d {
            out[r * d + j] = cs * x.data()[r * d + j] + co * raw.data()[r * d + j];
        }
    }
    Tensor::new(vec![x.rows(), d], out)
}

/// One-query sampler that interpolates between the identity and a trained
/// network, exactly the identity at the time floor by construction.
#[derive(Debug, Clone)]
pub struct ConsistencyModel<S> {
    pub net: S,
    pub sigma_data: f64,
}

impl<S: Student> ConsistencyModel<S> {
    /// Skip and output scales (c_skip, c_out) at time t.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        skip_out(self.net.schedule(), self.sigma_data, t)
    }

    /// g(x, t) = c_skip(t) x + c_out(t) net(x, t), one time per row.
    pub fn map(&self, x: &Tensor, ts: &[f64]) -> Result<Tensor> {
        map_rows(&self.net, self.sigma_data, x, ts)
    }

    /// One-query sampling: treat the noise as the state at t_max and map it
    /// straight to the floor.
    pub fn one_shot(&self, eps: &Tensor) -> Result<Tensor> {
        self.map(eps, &vec![self.net.schedule().t_max; eps.rows()])
    }
}

/// Trains a consistency model on real data: corrupt a clean batch to a grid
/// time, pull it one reverse step with the teacher, and regress the live map
/// at the noisier time onto the frozen target map at the cleaner one. The
/// target network follows the live one by exponential averaging and never
/// receives gradients. Returns the model wrapped around the averaged weights.
///
/// Labels are ignored; the baseline is unconditional. Per-step RNG
/// consumption order: clean batch, grid interval index, then noise.
pub fn consistency_baseline<S: Student + Clone, R: Rng>(
    teacher: &dyn Teacher,
    data: &ToyDataset,
    mut student: S,
    cfg: &ConsistencyConfig,
    rng: &mut R,
    mut on_step: impl FnMut(u64, f64),
) -> Result<ConsistencyModel<S>> {
    cfg.validate()?;
    if data.dim() != student.data_dim() || teacher.data_dim() != student.data_dim() {
        return Err(BootError::shape(
            "consistency training",
            format!("data dim {}", student.data_dim()),
            format!(
                "{} from dataset, {} from teacher",
                data.dim(),
                teacher.data_dim()
            ),
        ));
    }
    let sched = *student.schedule();
    let grid = sched.descending_grid(cfg.grid_steps)?;
    let d = student.data_dim();
    let ws: Option<Vec<f64>> = student.takes_weight().then(|| vec![1.0; cfg.batch]);
    let mut target = student.clone();
    for step in 0..cfg.steps {
        let (x0, _labels) = data.sample(rng, cfg.batch);
        let k = rng.gen_range(0..cfg.grid_steps);
        // Grid is descending, so node k is the noisier end of the pair.
        let (t, s) = (grid[k], grid[k + 1]);
        let mut noise = Vec::with_capacity(cfg.batch * d);
        for _ in 0..cfg.batch * d {
            noise.push(rng.sample::<f64, _>(StandardNormal));
        }
        let (a_t, s_t) = sched.alpha_sigma(t)?;
        let mut xt = vec![0.0; cfg.batch * d];
        for i in 0..cfg.batch * d {
            xt[i] = a_t * x0.data()[i] + s_t * noise[i];
        }
        let xt = Tensor::new(vec![cfg.batch, d], xt)?;
        let xs = ddim_step(teacher, &xt, t, s, None, None)?;
        let tgt = map_rows(&target, cfg.sigma_data, &xs, &vec![s; cfg.batch])?;

        let mut tape = Tape::new();
        let bind = student.params().bind(&mut tape);
        let xt_id = tape.leaf(xt);
        let raw = student.forward_tape(
            &mut tape,
            &bind,
            xt_id,
            &vec![t; cfg.batch],
            None,
            ws.as_deref(),
        )?;
        let (cs, co) = skip_out(&sched, cfg.sigma_data, t)?;
        let pred = {
            let skip = tape.scale(xt_id, cs);
            let out = tape.scale(raw, co);
            tape.add(skip, out)?
        };
        let want = tape.leaf(tgt);
        let diff = tape.sub(pred, want)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / cfg.batch as f64);

        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() || loss_val > 1e6 {
            return Err(BootError::numeric(format!(
                "consistency training diverged at step {step}: loss = {loss_val}"
            )));
        }
        let grads = tape.backward(loss)?;
        student
            .params_mut()
            .adamw_step(&bind.grads(&grads), cfg.lr, 0.0)?;
        student.params_mut().ema_update(cfg.ema_decay)?;
        target.adopt_params(student.params().ema_snapshot())?;
        on_step(step, loss_val);
    }
    target.reset_nfe();
    Ok(ConsistencyModel {
        net: target,
        sigma_data: cfg.sigma_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boot::LinearStudent;
    use crate::tensorcore::{NodeId, ParamSet, TapeBinding};
    use crate::teacher::{AnalyticGaussianTeacher, CondBatch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicU64, Ordering};

    struct ConstTeacher {
        value: Vec<f64>,
        sched: NoiseSchedule,
        nfe: AtomicU64,
    }

    impl ConstTeacher {
        fn new(value: Vec<f64>) -> Self {
            ConstTeacher {
                value,
                sched: NoiseSchedule::default(),
                nfe: AtomicU64::new(0),
            }
        }
    }

    impl Teacher for ConstTeacher {
        fn data_dim(&self) -> usize {
            self.value.len()
        }

        fn num_classes(&self) -> usize {
            0
        }

        fn schedule(&self) -> &NoiseSchedule {
            &self.sched
        }

        fn predict_signal(&self, x_t: &Tensor, _t: f64, _cond: CondBatch) -> Result<Tensor> {
            self.nfe.fetch_add(x_t.rows() as u64, Ordering::Relaxed);
            let mut data = Vec::with_capacity(x_t.len());
            for _ in 0..x_t.rows() {
                data.extend_from_slice(&self.value);
            }
            Tensor::new(vec![x_t.rows(), self.value.len()], data)
        }

        fn nfe(&self) -> u64 {
            self.nfe.load(Ordering::Relaxed)
        }

        fn reset_nfe(&self) {
            self.nfe.store(0, Ordering::Relaxed);
        }
    }

    fn randn(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows * d {
            data.push(rng.sample::<f64, _>(StandardNormal));
        }
        Tensor::new(vec![rows, d], data).unwrap()
    }

    #[test]
    fn configs_reject_bad_values_and_round_trip() {
        let mut direct = DirectDistillConfig::default();
        direct.n_ode_steps = 0;
        assert!(direct.validate().is_err());
        let text = serde_json::to_string(&DirectDistillConfig::default()).unwrap();
        let back: DirectDistillConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, DirectDistillConfig::default());

        let mut cm = ConsistencyConfig::default();
        cm.ema_decay = 1.0;
        assert!(cm.validate().is_err());
        cm = ConsistencyConfig::default();
        cm.sigma_data = 0.0;
        assert!(cm.validate().is_err());
        assert!(serde_json::from_str::<ConsistencyConfig>("{\"stepz\": 3}").is_err());
        let back: ConsistencyConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(back, ConsistencyConfig::default());
    }

    #[test]
    fn already_exact_student_sits_at_zero_loss() {
        let teacher = ConstTeacher::new(vec![0.6]);
        let sched = teacher.sched;
        // For a constant teacher the solver map is affine in the noise:
        // retention telescopes across the grid, so the endpoint is
        // (1 - R) v + R (1 - sigma_max) / alpha_max eps.
        let r = sched.signal_retention(sched.t_min, sched.t_max).unwrap();
        let (a_max, s_max) = sched.alpha_sigma(sched.t_max).unwrap();
        let mut student = LinearStudent::zeros(1, sched).unwrap();
        student.params_mut().get_mut("lin.w").unwrap().data_mut()[0] = r * (1.0 - s_max) / a_max;
        student.params_mut().get_mut("lin.w").unwrap().data_mut()[1] = (1.0 - r) * 0.6;

        let cfg = DirectDistillConfig {
            steps: 3,
            n_ode_steps: 64,
            batch: 4,
            lr: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut losses = Vec::new();
        direct_distill_baseline(&teacher, &mut student, &cfg, &mut rng, |_, l| losses.push(l))
            .unwrap();
        assert_eq!(losses.len(), 3);
        for l in losses {
            assert!(l < 1e-20, "exact student scored {l}");
        }
    }

    #[test]
    fn teacher_queries_scale_with_target_depth() {
        let teacher = ConstTeacher::new(vec![0.2]);
        let mut student = LinearStudent::zeros(2, teacher.sched).unwrap();
        let cfg = DirectDistillConfig {
            steps: 2,
            n_ode_steps: 5,
            batch: 1,
            lr: 0.01,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        direct_distill_baseline(&teacher, &mut student, &cfg, &mut rng, |_, _| {}).unwrap();
        assert_eq!(teacher.nfe(), 2 * 5);
        assert_eq!(student.nfe(), 0, "taped passes must not count as queries");
    }

    #[test]
    fn direct_regression_recovers_the_solver_map() {
        let sched = NoiseSchedule::default();
        let teacher = AnalyticGaussianTeacher::isotropic(vec![1.2], 0.49, sched).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut student = LinearStudent::new(3, sched, &mut rng).unwrap();
        let cfg = DirectDistillConfig {
            steps: 3000,
            n_ode_steps: 48,
            batch: 32,
            lr: 0.01,
        };
        direct_distill_baseline(&teacher, &mut student, &cfg, &mut rng, |_, _| {}).unwrap();

        let eps = randn(&mut ChaCha8Rng::seed_from_u64(8), 200, 1);
        let want = signal_ode_sample(
            &teacher,
            &eps,
            48,
            SignalSolver::Blend,
            YBoundary::MatchData,
            None,
            None,
        )
        .unwrap();
        let got = student
            .forward(&eps, &vec![sched.t_min; 200], None, None)
            .unwrap();
        let mse: f64 = want
            .final_state()
            .data()
            .iter()
            .zip(got.data())
            .map(|(w, g)| (w - g) * (w - g))
            .sum::<f64>()
            / 200.0;
        assert!(mse.sqrt() < 1e-3, "rmse {} against the solver map", mse.sqrt());
    }

    /// Student whose wrapped map equals the constant-zero teacher's exact
    /// flow, so every consistency pair agrees up to roundoff.
    struct FlowStudent {
        sched: NoiseSchedule,
        sigma_data: f64,
        params: ParamSet,
        nfe: AtomicU64,
    }

    impl FlowStudent {
        fn new(sigma_data: f64) -> Self {
            FlowStudent {
                sched: NoiseSchedule::default(),
                sigma_data,
                params: ParamSet::new(),
                nfe: AtomicU64::new(0),
            }
        }

        // The zero teacher's flow scales states by sigma_min / sigma_t, so
        // the raw net must output (sigma_min / sigma_t - c_skip) / c_out x.
        fn gain(&self, t: f64) -> f64 {
            let (cs, co) = skip_out(&self.sched, self.sigma_data, t).unwrap();
            if co == 0.0 {
                return 0.0;
            }
            let (_, s_t) = self.sched.alpha_sigma(t).unwrap();
            let (_, s_min) = self.sched.alpha_sigma(self.sched.t_min).unwrap();
            (s_min / s_t - cs) / co
        }
    }

    impl Clone for FlowStudent {
        fn clone(&self) -> Self {
            FlowStudent {
                sched: self.sched,
                sigma_data: self.sigma_data,
                params: self.params.clone(),
                nfe: AtomicU64::new(self.nfe.load(Ordering::Relaxed)),
            }
        }
    }

    impl Student for FlowStudent {
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
            self.params = params;
            Ok(())
        }

        fn forward(
            &self,
            eps: &Tensor,
            ts: &[f64],
            _cond: CondBatch,
            _ws: Option<&[f64]>,
        ) -> Result<Tensor> {
            self.nfe.fetch_add(eps.rows() as u64, Ordering::Relaxed);
            let d = eps.cols();
            let mut out = vec![0.0; eps.len()];
            for r in 0..eps.rows() {
                let g = self.gain(ts[r]);
                for j in 0..d {
                    out[r * d + j] = g * eps.data()[r * d + j];
                }
            }
            Tensor::new(vec![eps.rows(), d], out)
        }

        fn forward_tape(
            &self,
            tape: &mut Tape,
            _bind: &TapeBinding,
            eps: NodeId,
            ts: &[f64],
            _cond: CondBatch,
            _ws: Option<&[f64]>,
        ) -> Result<NodeId> {
            let gains: Vec<f64> = ts.iter().map(|&t| self.gain(t)).collect();
            tape.row_scale(eps, &gains)
        }

        fn nfe(&self) -> u64 {
            self.nfe.load(Ordering::Relaxed)
        }

        fn reset_nfe(&self) {
            self.nfe.store(0, Ordering::Relaxed);
        }
    }

    #[test]
    fn consistency_map_is_the_identity_at_the_floor() {
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ConsistencyModel {
            net: LinearStudent::new(3, sched, &mut rng).unwrap(),
            sigma_data: 0.5,
        };
        let (cs, co) = model.coefficients(sched.t_min).unwrap();
        assert_eq!((cs, co), (1.0, 0.0));
        let x = Tensor::new(vec![3, 1], vec![0.4, -1.7, 2.2]).unwrap();
        let mapped = model.map(&x, &vec![sched.t_min; 3]).unwrap();
        assert_eq!(mapped.data(), x.data());
        let (cs, co) = model.coefficients(sched.t_max).unwrap();
        assert!(cs < 1e-3 && co > 0.0);
    }

    #[test]
    fn trainer_scores_zero_loss_on_a_one_step_consistent_map() {
        let teacher = ConstTeacher::new(vec![0.0]);
        let data = ToyDataset::Constant(vec![0.7]);
        let student = FlowStudent::new(0.8);
        let cfg = ConsistencyConfig {
            steps: 6,
            lr: 0.1,
            batch: 8,
            grid_steps: 12,
            ema_decay: 0.5,
            sigma_data: 0.8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut losses = Vec::new();
        let model =
            consistency_baseline(&teacher, &data, student, &cfg, &mut rng, |_, l| {
                losses.push(l)
            })
            .unwrap();
        assert_eq!(losses.len(), 6);
        for l in &losses {
            assert!(*l < 1e-24, "consistent map scored {l}");
        }

        // The learned one-shot map is the teacher flow from the prior time.
        let sched = teacher.sched;
        let (_, s_min) = sched.alpha_sigma(sched.t_min).unwrap();
        let (_, s_max) = sched.alpha_sigma(sched.t_max).unwrap();
        let eps = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let got = model.one_shot(&eps).unwrap();
        for (g, e) in got.data().iter().zip(eps.data()) {
            assert!((g - s_min / s_max * e).abs() < 1e-12);
        }
    }

    #[test]
    fn target_network_follows_by_averaging_not_gradients() {
        let teacher = ConstTeacher::new(vec![0.8]);
        let data = ToyDataset::Constant(vec![0.8]);
        let sched = teacher.sched;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let student = LinearStudent::new(3, sched, &mut rng).unwrap();
        let init: Vec<f64> = student.params().get("lin.w").unwrap().data().to_vec();

        let mut cfg = ConsistencyConfig {
            steps: 80,
            lr: 0.05,
            batch: 8,
            grid_steps: 8,
            ema_decay: 0.999_999,
            sigma_data: 1.0,
        };
        let run = |cfg: &ConsistencyConfig| {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            consistency_baseline(&teacher, &data, student.clone(), cfg, &mut rng, |_, _| {})
                .unwrap()
        };
        let frozen = run(&cfg);
        cfg.ema_decay = 0.0;
        let live = run(&cfg);

        let drift = |m: &ConsistencyModel<LinearStudent>| {
            m.net
                .params()
                .get("lin.w")
                .unwrap()
                .data()
                .iter()
                .zip(&init)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max)
        };
        let live_drift = drift(&live);
        let frozen_drift = drift(&frozen);
        assert!(live_drift > 1e-3, "training never moved the live weights");
        assert!(
            frozen_drift < live_drift * 1e-2,
            "target drifted {frozen_drift} while the live net moved {live_drift}"
        );
    }

    #[test]
    fn one_shot_map_learns_the_teacher_flow() {
        let sched = NoiseSchedule::default();
        let teacher = AnalyticGaussianTeacher::isotropic(vec![1.5], 0.04, sched).unwrap();
        let data = ToyDataset::Constant(vec![1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let student = LinearStudent::new(4, sched, &mut rng).unwrap();
        let cfg = ConsistencyConfig {
            steps: 1500,
            lr: 0.02,
            batch: 16,
            grid_steps: 16,
            ema_decay: 0.95,
            sigma_data: 1.0,
        };
        let before = ConsistencyModel {
            net: student.clone(),
            sigma_data: cfg.sigma_data,
        };
        let model = consistency_baseline(&teacher, &data, student, &cfg, &mut rng, |_, _| {})
            .unwrap();

        // The consistency map targets the data-space endpoint of the
        // teacher's reverse run started from the same noise.
        let eps = randn(&mut ChaCha8Rng::seed_from_u64(14), 200, 1);
        let want = crate::solvers::ddim_sample(&teacher, &eps, 256, None, None).unwrap();
        let rmse = |m: &ConsistencyModel<LinearStudent>| {
            let got = m.one_shot(&eps).unwrap();
            let mse: f64 = want
                .final_state()
                .data()
                .iter()
                .zip(got.data())
                .map(|(w, g)| (w - g) * (w - g))
                .sum::<f64>()
                / 200.0;
            mse.sqrt()
        };
        let trained = rmse(&model);
        let untrained = rmse(&before);
        assert!(
            trained < 0.15 && trained < untrained * 0.3,
            "one-shot rmse {trained} (untrained {untrained})"
        );
    }
}
