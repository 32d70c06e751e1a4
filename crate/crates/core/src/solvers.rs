//! Trajectory samplers over a frozen teacher: the standard data-space
//! reverse iteration and an equivalent signal-space iteration, the latter in
//! an exact blending form plus first- and second-order stepped forms.
//!
//! The signal-space state y_t is related to the data-space state by
//! x_t = alpha_t y_t + sigma_t eps for the fixed seed noise eps, so a
//! signal trajectory never needs the data-space state explicitly.

use crate::error::{BootError, Result};
use crate::guidance::{guided_signal, GuidePlan, GuidanceSpec};
use crate::schedule::NoiseSchedule;
use crate::teacher::Teacher;
use crate::tensorcore::Tensor;
use serde::{Deserialize, Serialize};

/// Which variable a recorded trajectory stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    Data,
    Signal,
}

/// Start value for the signal iteration at t_max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YBoundary {
    /// y = eps. The convention the distilled students train against.
    Noise,
    /// y = (1 - sigma_max) / alpha_max * eps, which makes the mapped state
    /// alpha y + sigma eps equal eps, so the signal run starts exactly
    /// where the data-space run starts.
    MatchData,
    /// y = the teacher's own denoise of eps at t_max.
    TeacherDenoise,
}

/// Stepping rule for the signal iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSolver {
    /// Exponential blend toward the frozen prediction; reproduces the
    /// data-space iteration exactly.
    Blend,
    /// First-order step in the log noise ratio.
    Euler,
    /// Second-order predictor-corrector step in the log noise ratio; costs
    /// two teacher queries per step.
    Heun,
}

/// A sampled trajectory: strictly decreasing times, one state per time, and
/// the seed noise that started the run.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    space: StateSpace,
    times: Vec<f64>,
    states: Vec<Tensor>,
    noise: Tensor,
}

impl TrajectoryRecord {
    fn new(space: StateSpace, noise: Tensor) -> Self {
        TrajectoryRecord {
            space,
            times: Vec::new(),
            states: Vec::new(),
            noise,
        }
    }

    fn push(&mut self, t: f64, state: Tensor) -> Result<()> {
        if let Some(&last) = self.times.last() {
            if t >= last {
                return Err(BootError::contract(format!(
                    "trajectory times must strictly decrease, got {t} after {last}"
                )));
            }
        }
        if state.shape() != self.noise.shape() {
            return Err(BootError::shape(
                "trajectory state",
                format!("{:?}", self.noise.shape()),
                format!("{:?}", state.shape()),
            ));
        }
        if !state.is_finite() {
            return Err(BootError::numeric(format!(
                "non-finite trajectory state at t = {t}"
            )));
        }
        self.times.push(t);
        self.states.push(state);
        Ok(())
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Tensor] {
        &self.states
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory never constructed empty")
    }

    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trajectory never constructed empty")
    }

    /// Maps a signal-space record into data space via
    /// x = alpha y + sigma eps at each recorded time.
    pub fn to_data_space(&self, sched: &NoiseSchedule) -> Result<TrajectoryRecord> {
        if self.space != StateSpace::Signal {
            return Err(BootError::contract(
                "to_data_space needs a signal-space trajectory",
            ));
        }
        let mut out = TrajectoryRecord::new(StateSpace::Data, self.noise.clone());
        for (&t, y) in self.times.iter().zip(&self.states) {
            let (alpha, sigma) = sched.alpha_sigma(t)?;
            out.push(t, Tensor::lincomb(alpha, y, sigma, &self.noise)?)?;
        }
        Ok(out)
    }
}

fn check_state(teacher: &dyn Teacher, state: &Tensor, what: &str) -> Result<()> {
    if state.cols() != teacher.data_dim() || state.shape().len() != 2 {
        return Err(BootError::shape(
            what,
            format!("[n, {}]", teacher.data_dim()),
            format!("{:?}", state.shape()),
        ));
    }
    Ok(())
}

fn check_pair(t: f64, s: f64) -> Result<()> {
    if !(s <= t) {
        return Err(BootError::contract(format!(
            "reverse step needs s <= t, got s = {s}, t = {t}"
        )));
    }
    Ok(())
}

/// One reverse step of the teacher's data-space iteration:
/// x_s = (sigma_s / sigma_t) x_t + (alpha_s - alpha_t sigma_s / sigma_t) f,
/// where f is the (optionally guided, clamped) signal prediction at x_t.
/// s == t returns x_t unchanged without querying the teacher.
pub fn ddim_step(
    teacher: &dyn Teacher,
    x_t: &Tensor,
    t: f64,
    s: f64,
    guidance: Option<&GuidanceSpec>,
    clip: Option<f64>,
) -> Result<Tensor> {
    check_state(teacher, x_t, "ddim_step state")?;
    check_pair(t, s)?;
    if s == t {
        return Ok(x_t.clone());
    }
    let sched = teacher.schedule();
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    let (alpha_s, sigma_s) = sched.alpha_sigma(s)?;
    if sigma_t <= 0.0 {
        return Err(BootError::domain(format!(
            "data-space step needs sigma_t > 0, got t = {t}"
        )));
    }
    let plan = GuidePlan::from_optional(guidance, teacher, x_t.rows())?;
    let f = guided_signal(teacher, x_t, &vec![t; x_t.rows()], plan.as_ref(), clip)?;
    let ratio = sigma_s / sigma_t;
    Tensor::lincomb(ratio, x_t, alpha_s - alpha_t * ratio, &f)
}

/// One exact blending step of the signal iteration:
/// y_s = (1 - r) f + r y_t with r = the signal retention between s and t
/// and f the teacher's prediction at the mapped state
/// alpha_t y_t + sigma_t eps. Equivalent to `ddim_step` under the state map.
pub fn signal_ode_step(
    teacher: &dyn Teacher,
    y_t: &Tensor,
    eps: &Tensor,
    t: f64,
    s: f64,
    guidance: Option<&GuidanceSpec>,
    clip: Option<f64>,
) -> Result<Tensor> {
    check_state(teacher, y_t, "signal_ode_step state")?;
    check_pair(t, s)?;
    let sched = teacher.schedule();
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    let x_t = Tensor::lincomb(alpha_t, y_t, sigma_t, eps)?;
    let plan = GuidePlan::from_optional(guidance, teacher, y_t.rows())?;
    let f = guided_signal(teacher, &x_t, &vec![t; y_t.rows()], plan.as_ref(), clip)?;
    let r = sched.signal_retention(s, t)?;
    Tensor::lincomb(1.0 - r, &f, r, y_t)
}

/// First-order signal step over delta = t - s, taken in the log noise
/// ratio: y_s = y_t + (lambda_t - lambda_s)(f - y_t).
pub fn signal_ode_euler_step(
    teacher: &dyn Teacher,
    y_t: &Tensor,
    eps: &Tensor,
    t: f64,
    delta: f64,
    guidance: Option<&GuidanceSpec>,
    clip: Option<f64>,
) -> Result<Tensor> {
    check_state(teacher, y_t, "signal_ode_euler_step state")?;
    let s = step_target(t, delta)?;
    let sched = teacher.schedule();
    let gap = sched.log_noise_ratio(t)? - sched.log_noise_ratio(s)?;
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    let x_t = Tensor::lincomb(alpha_t, y_t, sigma_t, eps)?;
    let plan = GuidePlan::from_optional(guidance, teacher, y_t.rows())?;
    let f = guided_signal(teacher, &x_t, &vec![t; y_t.rows()], plan.as_ref(), clip)?;
    Tensor::lincomb(1.0 - gap, y_t, gap, &f)
}

/// Second-order signal step over delta = t - s: an Euler predictor followed
/// by a trapezoidal correction, both slopes measured in the log noise
/// ratio. Two teacher queries.
pub fn signal_ode_heun_step(
    teacher: &dyn Teacher,
    y_t: &Tensor,
    eps: &Tensor,
    t: f64,
    delta: f64,
    guidance: Option<&GuidanceSpec>,
    clip: Option<f64>,
) -> Result<Tensor> {
    check_state(teacher, y_t, "signal_ode_heun_step state")?;
    let s = step_target(t, delta)?;
    let sched = teacher.schedule();
    let gap = sched.log_noise_ratio(t)? - sched.log_noise_ratio(s)?;
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    let (alpha_s, sigma_s) = sched.alpha_sigma(s)?;
    let plan = GuidePlan::from_optional(guidance, teacher, y_t.rows())?;
    let x_t = Tensor::lincomb(alpha_t, y_t, sigma_t, eps)?;
    let f_t = guided_signal(teacher, &x_t, &vec![t; y_t.rows()], plan.as_ref(), clip)?;
    let slope_t = Tensor::lincomb(1.0, &f_t, -1.0, y_t)?;
    let y_mid = Tensor::lincomb(1.0, y_t, gap, &slope_t)?;
    let x_s = Tensor::lincomb(alpha_s, &y_mid, sigma_s, eps)?;
    let f_s = guided_signal(teacher, &x_s, &vec![s; y_t.rows()], plan.as_ref(), clip)?;
    let slope_s = Tensor::lincomb(1.0, &f_s, -1.0, &y_mid)?;
    let avg = Tensor::lincomb(0.5, &slope_t, 0.5, &slope_s)?;
    Tensor::lincomb(1.0, y_t, gap, &avg)
}

fn step_target(t: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(BootError::domain(format!(
            "step size must be positive, got {delta}"
        )));
    }
    let s = t - delta;
    if s <= 0.0 {
        return Err(BootError::domain(format!(
            "step from t = {t} by {delta} leaves the time domain"
        )));
    }
    Ok(s)
}

/// The signal iteration's start state at t_max for a given convention.
pub fn initial_signal_state(
    teacher: &dyn Teacher,
    eps: &Tensor,
    boundary: YBoundary,
    guidance: Option<&GuidanceSpec>,
    clip: Option<f64>,
) -> Result<Tensor> {
    check_state(teacher, eps, "initial signal state")?;
    let sched = teacher.schedule();
    let t_max = sched.t_max;
    match boundary {
        YBoundary::Noise => Ok(eps.clone()),
        YBoundary::MatchData => {
            let (alpha, sigma) = sched.alpha_sigma(t_max)?;
            Ok(eps.map(|v| (1.0 - sigma) / alpha * v))
        }
        YBoundary::TeacherDenoise => {
            let plan = GuidePlan::from_optional(guidance, teacher, eps.rows())?;
            guided_signal(teacher, eps, &vec![t_max; eps.rows()], plan.as_ref(), clip)
        }
    }
}

/// Full data-space reverse run from x = eps at t_max down to t_min on a
/// uniform time grid, recording every state.
pub fn ddim_sample(
    teacher: &dyn Teacher,
    eps: &Tensor,
    n_steps: usize,
    guidance: Option<&GuidanceSpec>,
    clip: Option<f64>,
) -> Result<TrajectoryRecord> {
    check_state(teacher, eps, "ddim_sample noise")?;
    let grid = teacher.schedule().descending_grid(n_steps)?;
    let mut record = TrajectoryRecord::new(StateSpace::Data, eps.clone());
    let mut x = eps.clone();
    record.push(grid[0], x.clone())?;
    for pair in grid.windows(2) {
        x = ddim_step(teacher, &x, pair[0], pair[1], guidance, clip)?;
        record.push(pair[1], x.clone())?;
    }
    Ok(record)
}

/// Full signal-space run from the chosen boundary at t_max down to t_min on
/// a uniform time grid, recording every state.
pub fn signal_ode_sample(
    teacher: &dyn Teacher,
    eps: &Tensor,
    n_steps: usize,
    solver: SignalSolver,
    boundary: YBoundary,
    guidance: Option<&GuidanceSpec>,
    clip: Option<f64>,
) -> Result<TrajectoryRecord> {
    check_state(teacher, eps, "signal_ode_sample noise")?;
    let grid = teacher.schedule().descending_grid(n_steps)?;
    let mut record = TrajectoryRecord::new(StateSpace::Signal, eps.clone());
    let mut y = initial_signal_state(teacher, eps, boundary, guidance, clip)?;
    record.push(grid[0], y.clone())?;
    for pair in grid.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        y = match solver {
            SignalSolver::Blend => signal_ode_step(teacher, &y, eps, t, s, guidance, clip)?,
            SignalSolver::Euler => {
                signal_ode_euler_step(teacher, &y, eps, t, t - s, guidance, clip)?
            }
            SignalSolver::Heun => {
                signal_ode_heun_step(teacher, &y, eps, t, t - s, guidance, clip)?
            }
        };
        record.push(s, y.clone())?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{AnalyticGaussianTeacher, CondBatch, DenoiserNet, PredictionKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicU64, Ordering};

    /// Teacher whose prediction is a constant vector regardless of input.
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

    #[test]
    fn coincident_times_return_the_state_without_a_query() {
        let teacher = ConstTeacher::new(vec![0.5]);
        let x = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let out = ddim_step(&teacher, &x, 0.5, 0.5, None, None).unwrap();
        assert_eq!(out.data(), x.data());
        assert_eq!(teacher.nfe(), 0);
        assert!(ddim_step(&teacher, &x, 0.4, 0.5, None, None).is_err());
    }

    /// Halving the time from 0.5 to 0.25: both mixing coefficients equal
    /// sqrt(2) sin(pi/8). Constants were computed at 40-digit precision.
    #[test]
    fn data_step_matches_frozen_coefficients() {
        let teacher = ConstTeacher::new(vec![0.9]);
        let x = Tensor::new(vec![1, 1], vec![1.3]).unwrap();
        let out = ddim_step(&teacher, &x, 0.5, 0.25, None, None).unwrap();
        let c = 0.5411961001461969844_f64;
        assert!((out.data()[0] - (c * 1.3 + c * 0.9)).abs() < 5e-15);
    }

    /// Same pair in signal space: the retention is sqrt(2) - 1.
    #[test]
    fn signal_step_matches_frozen_retention() {
        let teacher = ConstTeacher::new(vec![0.9]);
        let y = Tensor::new(vec![1, 1], vec![1.3]).unwrap();
        let eps = Tensor::new(vec![1, 1], vec![0.4]).unwrap();
        let out = signal_ode_step(&teacher, &y, &eps, 0.5, 0.25, None, None).unwrap();
        let r = 0.4142135623730950488_f64;
        assert!((out.data()[0] - ((1.0 - r) * 0.9 + r * 1.3)).abs() < 5e-15);
    }

    /// A state already equal to the constant prediction is a fixed point of
    /// every stepping rule.
    #[test]
    fn constant_prediction_is_a_fixed_point() {
        let teacher = ConstTeacher::new(vec![0.7, -0.2]);
        let y = Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let eps = Tensor::new(vec![1, 2], vec![1.1, 0.3]).unwrap();
        for (t, s) in [(0.9, 0.5), (0.5, 0.25), (0.3, 0.02)] {
            let blend = signal_ode_step(&teacher, &y, &eps, t, s, None, None).unwrap();
            let euler = signal_ode_euler_step(&teacher, &y, &eps, t, t - s, None, None).unwrap();
            let heun = signal_ode_heun_step(&teacher, &y, &eps, t, t - s, None, None).unwrap();
            for out in [blend, euler, heun] {
                for (o, v) in out.data().iter().zip(y.data()) {
                    assert!((o - v).abs() < 1e-15, "t={t} s={s}");
                }
            }
        }
    }

    /// Four blending steps on a constant teacher, checked against a scalar
    /// recursion evaluated at 40-digit precision.
    #[test]
    fn blend_run_matches_scalar_recursion_oracle() {
        let teacher = ConstTeacher::new(vec![0.9]);
        let eps = Tensor::new(vec![1, 1], vec![1.3]).unwrap();
        let rec = signal_ode_sample(
            &teacher,
            &eps,
            4,
            SignalSolver::Blend,
            YBoundary::Noise,
            None,
            None,
        )
        .unwrap();
        assert!((rec.final_state().data()[0] - 0.90039504407897099416).abs() < 1e-12);
        assert_eq!(rec.len(), 5);
        assert_eq!(rec.times()[0], teacher.sched.t_max);
        assert_eq!(rec.final_time(), teacher.sched.t_min);
    }

    /// With a zero prediction every data step is a pure sigma ratio, so the
    /// whole run telescopes to sigma_min / sigma_max.
    #[test]
    fn zero_teacher_telescopes_the_sigma_ratio() {
        let teacher = ConstTeacher::new(vec![0.0]);
        let eps = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let rec = ddim_sample(&teacher, &eps, 16, None, None).unwrap();
        let expect = 0.031426266043351147819_f64 * 2.0;
        assert!((rec.final_state().data()[0] - expect).abs() < 1e-14);
    }

    /// The data-space run and the blended signal-space run are the same
    /// iteration written in different variables: mapped back to data space
    /// with the matched boundary, every recorded state agrees.
    #[test]
    fn data_and_signal_iterations_agree_along_the_whole_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for kind in [PredictionKind::Signal, PredictionKind::Noise] {
            let teacher = DenoiserNet::new(
                &mut rng,
                2,
                &[24, 24],
                kind,
                0,
                NoiseSchedule::default(),
            )
            .unwrap();
            let eps = Tensor::randn(&mut rng, vec![3, 2], 1.0);
            let ddim = ddim_sample(&teacher, &eps, 64, None, None).unwrap();
            let sig = signal_ode_sample(
                &teacher,
                &eps,
                64,
                SignalSolver::Blend,
                YBoundary::MatchData,
                None,
                None,
            )
            .unwrap();
            let mapped = sig.to_data_space(teacher.schedule()).unwrap();
            assert_eq!(ddim.len(), mapped.len());
            let mut worst = 0.0_f64;
            for (xs, ys) in ddim.states().iter().zip(mapped.states()) {
                for (a, b) in xs.data().iter().zip(ys.data()) {
                    worst = worst.max((a - b).abs());
                }
            }
            assert!(worst < 1e-10, "kind {kind:?}: max deviation {worst}");
        }
    }

    /// Step halving against a fine reference: the Euler error ratio sits
    /// near 2, the Heun ratio near 4.
    #[test]
    fn euler_is_first_order_and_heun_second_order() {
        let teacher = AnalyticGaussianTeacher::isotropic(
            vec![0.7],
            2.25,
            NoiseSchedule::default(),
        )
        .unwrap();
        let eps = Tensor::new(vec![2, 1], vec![1.5, -0.4]).unwrap();
        let reference = signal_ode_sample(
            &teacher,
            &eps,
            2048,
            SignalSolver::Heun,
            YBoundary::Noise,
            None,
            None,
        )
        .unwrap();
        let err = |solver: SignalSolver, n: usize| -> f64 {
            let run =
                signal_ode_sample(&teacher, &eps, n, solver, YBoundary::Noise, None, None)
                    .unwrap();
            run.final_state()
                .data()
                .iter()
                .zip(reference.final_state().data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let euler_ratio = err(SignalSolver::Euler, 32) / err(SignalSolver::Euler, 64);
        let heun_ratio = err(SignalSolver::Heun, 32) / err(SignalSolver::Heun, 64);
        assert!(
            (1.7..=2.3).contains(&euler_ratio),
            "euler ratio {euler_ratio}"
        );
        assert!((3.3..=4.7).contains(&heun_ratio), "heun ratio {heun_ratio}");
    }

    /// The data-space run is itself a first-order scheme: its own halving
    /// ratio also sits near 2.
    #[test]
    fn data_space_run_is_first_order() {
        let teacher = AnalyticGaussianTeacher::isotropic(
            vec![0.7],
            2.25,
            NoiseSchedule::default(),
        )
        .unwrap();
        let eps = Tensor::new(vec![2, 1], vec![1.5, -0.4]).unwrap();
        let reference = {
            let rec = signal_ode_sample(
                &teacher,
                &eps,
                2048,
                SignalSolver::Heun,
                YBoundary::MatchData,
                None,
                None,
            )
            .unwrap();
            rec.to_data_space(teacher.schedule())
                .unwrap()
                .final_state()
                .clone()
        };
        let err = |n: usize| -> f64 {
            let run = ddim_sample(&teacher, &eps, n, None, None).unwrap();
            run.final_state()
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(32) / err(64);
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn records_enforce_decreasing_times_and_space_conversion_rules() {
        let noise = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let mut rec = TrajectoryRecord::new(StateSpace::Signal, noise.clone());
        rec.push(0.9, noise.clone()).unwrap();
        assert!(rec.push(0.9, noise.clone()).is_err());
        assert!(rec.push(0.95, noise.clone()).is_err());
        rec.push(0.5, noise.clone()).unwrap();

        let data_rec = rec.to_data_space(&NoiseSchedule::default()).unwrap();
        assert_eq!(data_rec.space(), StateSpace::Data);
        assert!(data_rec.to_data_space(&NoiseSchedule::default()).is_err());
    }

    #[test]
    fn boundary_conventions_map_where_they_should() {
        let teacher = ConstTeacher::new(vec![0.25]);
        let eps = Tensor::new(vec![1, 1], vec![1.8]).unwrap();
        let sched = NoiseSchedule::default();
        let (alpha, sigma) = sched.alpha_sigma(sched.t_max).unwrap();

        let noise = initial_signal_state(&teacher, &eps, YBoundary::Noise, None, None).unwrap();
        assert_eq!(noise.data(), eps.data());

        let matched =
            initial_signal_state(&teacher, &eps, YBoundary::MatchData, None, None).unwrap();
        let mapped = alpha * matched.data()[0] + sigma * eps.data()[0];
        assert!((mapped - eps.data()[0]).abs() < 1e-15);

        let denoise =
            initial_signal_state(&teacher, &eps, YBoundary::TeacherDenoise, None, None).unwrap();
        assert_eq!(denoise.data(), &[0.25]);
    }

    #[test]
    fn query_counts_follow_the_stepping_rule() {
        let teacher = ConstTeacher::new(vec![0.0, 0.0]);
        let eps = Tensor::new(vec![3, 2], vec![0.1; 6]).unwrap();
        ddim_sample(&teacher, &eps, 8, None, None).unwrap();
        assert_eq!(teacher.nfe(), 24);
        teacher.reset_nfe();
        signal_ode_sample(
            &teacher,
            &eps,
            8,
            SignalSolver::Heun,
            YBoundary::Noise,
            None,
            None,
        )
        .unwrap();
        assert_eq!(teacher.nfe(), 48);
        teacher.reset_nfe();
        signal_ode_sample(
            &teacher,
            &eps,
            8,
            SignalSolver::Blend,
            YBoundary::TeacherDenoise,
            None,
            None,
        )
        .unwrap();
        assert_eq!(teacher.nfe(), 27);
    }

    #[test]
    fn mismatched_noise_width_is_rejected() {
        let teacher = ConstTeacher::new(vec![0.0, 0.0]);
        let eps = Tensor::new(vec![3, 1], vec![0.1; 3]).unwrap();
        assert!(ddim_sample(&teacher, &eps, 8, None, None).is_err());
        assert!(signal_ode_sample(
            &teacher,
            &eps,
            8,
            SignalSolver::Blend,
            YBoundary::Noise,
            None,
            None
        )
        .is_err());
    }
}
