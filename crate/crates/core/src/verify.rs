//! Runtime audit of the numerical core. Every identity the trainer relies on
//! is re-measured against an independent oracle (finite differences,
//! quadrature, closed forms, a many-step reference) and reported with its
//! allowance. One check deliberately breaks the reverse recursion and must
//! see the equivalence gap blow up, which guards the audit itself.

use crate::boot::{
    bootstrap_loss, bootstrap_loss_impl, bootstrap_target, boundary_loss, BootConfig, MlpStudent,
    Student,
};
use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::solvers::{
    ddim_sample, initial_signal_state, signal_ode_sample, SignalSolver, YBoundary,
};
use crate::teacher::{AnalyticGaussianTeacher, DenoiserNet, PredictionKind, Teacher};
use crate::tensorcore::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Outcome of one audit: the measured value must land inside [lo, hi].
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub measured: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CheckReport {
    fn below(name: &'static str, measured: f64, tol: f64) -> CheckReport {
        CheckReport {
            name,
            measured,
            lo: 0.0,
            hi: tol,
        }
    }

    fn above(name: &'static str, measured: f64, floor: f64) -> CheckReport {
        CheckReport {
            name,
            measured,
            lo: floor,
            hi: f64::INFINITY,
        }
    }

    fn window(name: &'static str, measured: f64, lo: f64, hi: f64) -> CheckReport {
        CheckReport {
            name,
            measured,
            lo,
            hi,
        }
    }

    pub fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured >= self.lo && self.measured <= self.hi
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        if self.hi.is_infinite() {
            write!(
                f,
                "{:<44} {:>11.4e}  needs >= {:.1e}  {verdict}",
                self.name, self.measured, self.lo
            )
        } else if self.lo == 0.0 {
            write!(
                f,
                "{:<44} {:>11.4e}  allowed <= {:.1e}  {verdict}",
                self.name, self.measured, self.hi
            )
        } else {
            write!(
                f,
                "{:<44} {:>11.4e}  window [{}, {}]  {verdict}",
                self.name, self.measured, self.lo, self.hi
            )
        }
    }
}

/// Runs the whole audit with reproducible draws. Deterministic for a fixed
/// seed; every report carries its measured value and allowance.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        alpha_sigma_power_split()?,
        retention_matches_log_slope_exp()?,
        log_slope_finite_difference()?,
        gaussian_posterior_quadrature()?,
        reverse_path_equivalence(seed)?,
        retention_sign_mutation_detected(seed)?,
        euler_error_halving_ratio(seed)?,
        heun_error_halving_ratio(seed)?,
        primitive_gradcheck(seed)?,
        stop_gradient_passes_values_blocks_grads(seed)?,
        training_loss_gradcheck(seed)?,
        target_branch_carries_gradient_unless_frozen(seed)?,
    ])
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(CheckReport::passed)
}

fn alpha_sigma_power_split() -> Result<CheckReport> {
    let sched = NoiseSchedule::default();
    let mut worst = 0.0_f64;
    for k in 0..=2000 {
        let t = sched.t_min + (sched.t_max - sched.t_min) * k as f64 / 2000.0;
        let (a, s) = sched.alpha_sigma(t)?;
        worst = worst.max((a * a + s * s - 1.0).abs());
    }
    Ok(CheckReport::below("alpha_sigma_power_split", worst, 1e-12))
}

fn retention_matches_log_slope_exp() -> Result<CheckReport> {
    let sched = NoiseSchedule::default();
    let span = sched.t_max - sched.t_min;
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let t = sched.t_min + span * (i as f64 + 0.5) / 100.0;
        let (a_t, s_t) = sched.alpha_sigma(t)?;
        for j in 0..100 {
            let s = sched.t_min + (t - sched.t_min) * j as f64 / 100.0;
            let (a_s, s_s) = sched.alpha_sigma(s)?;
            let via_ratio = a_t * s_s / (s_t * a_s);
            let via_exp = (sched.log_noise_ratio(s)? - sched.log_noise_ratio(t)?).exp();
            worst = worst.max((via_ratio - via_exp).abs());
        }
    }
    Ok(CheckReport::below(
        "retention_matches_log_slope_exp",
        worst,
        1e-12,
    ))
}

fn log_slope_finite_difference() -> Result<CheckReport> {
    let sched = NoiseSchedule::default();
    let h = 1e-6;
    let mut worst = 0.0_f64;
    for k in 0..50 {
        let t = 0.05 + 0.9 * k as f64 / 49.0;
        // d/dt log tan(pi t / 2) = pi / sin(pi t)
        let analytic = std::f64::consts::PI / (std::f64::consts::PI * t).sin();
        let fd = (sched.log_noise_ratio(t + h)? - sched.log_noise_ratio(t - h)?) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / analytic.abs());
    }
    Ok(CheckReport::below(
        "log_slope_finite_difference",
        worst,
        1e-6,
    ))
}

fn gaussian_posterior_quadrature() -> Result<CheckReport> {
    let sched = NoiseSchedule::default();
    let (mean, var) = (0.7, 0.3);
    let teacher = AnalyticGaussianTeacher::isotropic(vec![mean], var, sched)?;
    let t = 0.5;
    let (alpha, sigma) = sched.alpha_sigma(t)?;
    let xs = Tensor::new(vec![5, 1], vec![-2.0, -0.5, 0.0, 1.0, 2.5])?;
    let got = teacher.predict_signal(&xs, t, None)?;

    // Simpson quadrature of E[x0 | x_t] over a wide clean-data range.
    let lo = mean - 12.0 * var.sqrt();
    let hi = mean + 12.0 * var.sqrt();
    let n = 4000;
    let step = (hi - lo) / n as f64;
    let mut worst = 0.0_f64;
    for r in 0..xs.rows() {
        let x_t = xs.data()[r];
        let mut numer = 0.0;
        let mut denom = 0.0;
        for i in 0..=n {
            let x0 = lo + step * i as f64;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let p = (-(x0 - mean) * (x0 - mean) / (2.0 * var)
                - (x_t - alpha * x0) * (x_t - alpha * x0) / (2.0 * sigma * sigma))
                .exp();
            numer += w * p * x0;
            denom += w * p;
        }
        worst = worst.max((numer / denom - got.data()[r]).abs());
    }
    Ok(CheckReport::below(
        "gaussian_posterior_quadrature",
        worst,
        1e-8,
    ))
}

fn reverse_path_equivalence(seed: u64) -> Result<CheckReport> {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst = 0.0_f64;
    for kind in [
        PredictionKind::Signal,
        PredictionKind::Noise,
        PredictionKind::Velocity,
    ] {
        let net = DenoiserNet::new(&mut rng, 2, &[8], kind, 0, sched)?;
        let eps = Tensor::randn(&mut rng, vec![8, 2], 1.0);
        let direct = ddim_sample(&net, &eps, 64, None, None)?;
        let blended = signal_ode_sample(
            &net,
            &eps,
            64,
            SignalSolver::Blend,
            YBoundary::MatchData,
            None,
            None,
        )?
        .to_data_space(&sched)?;
        for (a, b) in direct
            .final_state()
            .data()
            .iter()
            .zip(blended.final_state().data())
        {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckReport::below("reverse_path_equivalence", worst, 1e-10))
}

/// Reruns the blend recursion with the retention exponent flipped; the
/// equivalence gap must blow far past the tolerance, proving the check
/// above can actually catch a broken recursion.
fn retention_sign_mutation_detected(seed: u64) -> Result<CheckReport> {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let net = DenoiserNet::new(&mut rng, 2, &[8], PredictionKind::Signal, 0, sched)?;
    let eps = Tensor::randn(&mut rng, vec![4, 2], 1.0);
    let direct = ddim_sample(&net, &eps, 64, None, None)?;

    let grid = sched.descending_grid(64)?;
    let mut y = initial_signal_state(&net, &eps, YBoundary::MatchData, None, None)?;
    for win in grid.windows(2) {
        let (t, s) = (win[0], win[1]);
        let (a_t, s_t) = sched.alpha_sigma(t)?;
        let mixed: Vec<f64> = y
            .data()
            .iter()
            .zip(eps.data())
            .map(|(yv, ev)| a_t * yv + s_t * ev)
            .collect();
        let x_t = Tensor::new(eps.shape().to_vec(), mixed)?;
        let f = net.predict_signal(&x_t, t, None)?;
        // Arguments swapped on purpose: e^(lambda_t - lambda_s) instead of
        // e^(lambda_s - lambda_t).
        let r = sched.signal_retention(t, s)?;
        let next: Vec<f64> = f
            .data()
            .iter()
            .zip(y.data())
            .map(|(fv, yv)| (1.0 - r) * fv + r * yv)
            .collect();
        y = Tensor::new(eps.shape().to_vec(), next)?;
    }
    let (a_min, s_min) = sched.alpha_sigma(sched.t_min)?;
    let mut worst = 0.0_f64;
    for ((yv, ev), xv) in y
        .data()
        .iter()
        .zip(eps.data())
        .zip(direct.final_state().data())
    {
        worst = worst.max((a_min * yv + s_min * ev - xv).abs());
    }
    Ok(CheckReport::above(
        "retention_sign_mutation_detected",
        worst,
        1e-6,
    ))
}

fn solver_halving_ratio(seed: u64, solver: SignalSolver) -> Result<f64> {
    let sched = NoiseSchedule::default();
    let teacher = AnalyticGaussianTeacher::isotropic(vec![0.8], 0.25, sched)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let eps = Tensor::randn(&mut rng, vec![12, 1], 1.0);
    let reference = signal_ode_sample(
        &teacher,
        &eps,
        2048,
        SignalSolver::Heun,
        YBoundary::MatchData,
        None,
        None,
    )?;
    let err = |n: usize| -> Result<f64> {
        let run = signal_ode_sample(
            &teacher,
            &eps,
            n,
            solver,
            YBoundary::MatchData,
            None,
            None,
        )?;
        Ok(run
            .final_state()
            .data()
            .iter()
            .zip(reference.final_state().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    };
    Ok(err(64)? / err(128)?)
}

fn euler_error_halving_ratio(seed: u64) -> Result<CheckReport> {
    Ok(CheckReport::window(
        "euler_error_halving_ratio",
        solver_halving_ratio(seed, SignalSolver::Euler)?,
        1.7,
        2.3,
    ))
}

fn heun_error_halving_ratio(seed: u64) -> Result<CheckReport> {
    Ok(CheckReport::window(
        "heun_error_halving_ratio",
        solver_halving_ratio(seed, SignalSolver::Heun)?,
        3.3,
        4.7,
    ))
}

/// Worst relative deviation between taped gradients and central finite
/// differences of a scalar expression over its leaf inputs.
fn gradcheck(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.dense(ids[k], input.len());
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max((fd - g[i]).abs() / denom);
        }
    }
    Ok(worst)
}

fn primitive_gradcheck(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let a = Tensor::randn(&mut rng, vec![2, 3], 1.0);
    let b = Tensor::randn(&mut rng, vec![2, 3], 1.0);
    let m = Tensor::randn(&mut rng, vec![3, 2], 1.0);
    let bias = Tensor::randn(&mut rng, vec![3], 1.0);
    let small = Tensor::randn(&mut rng, vec![2, 2], 1.0);
    let table = Tensor::randn(&mut rng, vec![4, 3], 1.0);

    // Each case squares the op's output before summing so the finite
    // difference sees a non-constant gradient.
    let cases: Vec<(Vec<Tensor>, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>)> = vec![
        (
            vec![a.clone(), m.clone()],
            Box::new(move |tape, ids| {
                let mm = tape.matmul(ids[0], ids[1])?;
                let s = tape.mul(mm, mm)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            vec![a.clone(), b.clone()],
            Box::new(move |tape, ids| {
                let x = tape.add(ids[0], ids[1])?;
                let s = tape.mul(x, x)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            vec![a.clone(), b.clone()],
            Box::new(move |tape, ids| {
                let x = tape.sub(ids[0], ids[1])?;
                let s = tape.mul(x, x)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            vec![a.clone(), b.clone()],
            Box::new(move |tape, ids| {
                let x = tape.mul(ids[0], ids[1])?;
                let s = tape.mul(x, x)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            vec![a.clone(), bias.clone()],
            Box::new(move |tape, ids| {
                let x = tape.add_row(ids[0], ids[1])?;
                let s = tape.mul(x, x)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            vec![a.clone()],
            Box::new(move |tape, ids| {
                let x = tape.row_scale(ids[0], &[0.7, -1.3])?;
                let s = tape.mul(x, x)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            vec![a.clone()],
            Box::new(move |tape, ids| {
                let s = tape.mul(ids[0], ids[0])?;
                let total = tape.sum(s);
                Ok(tape.scale(total, 0.7))
            }),
        ),
        (
            vec![a.clone()],
            Box::new(move |tape, ids| {
                let x = tape.silu(ids[0]);
                Ok(tape.sum(x))
            }),
        ),
        (
            vec![a.clone(), small.clone()],
            Box::new(move |tape, ids| {
                let x = tape.concat_cols(&[ids[0], ids[1]])?;
                let s = tape.mul(x, x)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            vec![table.clone()],
            Box::new(move |tape, ids| {
                let x = tape.gather_rows(ids[0], &[2, 0, 2, 1])?;
                let s = tape.mul(x, x)?;
                Ok(tape.sum(s))
            }),
        ),
    ];
    let mut worst = 0.0_f64;
    for (inputs, build) in &cases {
        worst = worst.max(gradcheck(inputs, build.as_ref())?);
    }
    Ok(CheckReport::below("primitive_gradcheck", worst, 1e-5))
}

/// sum(a * stop_gradient(a)) must evaluate to sum(a^2) while its gradient is
/// exactly a, the frozen branch contributing nothing.
fn stop_gradient_passes_values_blocks_grads(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
    let a = Tensor::randn(&mut rng, vec![3, 2], 1.0);
    let mut tape = Tape::new();
    let id = tape.leaf(a.clone());
    let frozen = tape.stop_gradient(id);
    let prod = tape.mul(id, frozen)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).data()[0];
    let expect: f64 = a.data().iter().map(|v| v * v).sum();
    let grads = tape.backward(loss)?;
    let g = grads.dense(id, a.len());
    let mut worst = (value - expect).abs();
    for (gv, av) in g.iter().zip(a.data()) {
        worst = worst.max((gv - av).abs());
    }
    Ok(CheckReport::below(
        "stop_gradient_passes_values_blocks_grads",
        worst,
        1e-15,
    ))
}

fn verify_student(seed: u64) -> Result<(DenoiserNet, MlpStudent, BootConfig, Tensor, Vec<f64>)> {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(6));
    let teacher = DenoiserNet::new(&mut rng, 1, &[4], PredictionKind::Signal, 0, sched)?;
    let mut student = MlpStudent::from_teacher(&teacher, None, &mut rng)?;
    // Nudge every weight off its initialization so no gradient sits at a
    // structurally zero point.
    for p in student.params.entries_mut() {
        for v in p.value.data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let cfg = BootConfig {
        delta: 0.05,
        ..BootConfig::default()
    };
    let eps = Tensor::randn(&mut rng, vec![2, 1], 1.0);
    let ts = vec![0.55, 0.71];
    Ok((teacher, student, cfg, eps, ts))
}

/// Central differences of the full training objective over a spread of
/// parameter coordinates. The bootstrap term is differenced with its targets
/// pinned at the base parameters, which is exactly what the stop gradient
/// freezes on the tape; the boundary term has no student-dependent target.
fn training_loss_gradcheck(seed: u64) -> Result<CheckReport> {
    let (teacher, mut student, cfg, eps, ts) = verify_student(seed)?;
    let rows = eps.rows();

    let y_base = student.forward(&eps, &ts, None, None)?;
    let mut targets = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    for r in 0..rows {
        let y_r = Tensor::new(vec![1, 1], vec![y_base.data()[r]])?;
        let e_r = Tensor::new(vec![1, 1], vec![eps.data()[r]])?;
        targets.push(bootstrap_target(&teacher, &y_r, &e_r, ts[r], &cfg, None)?);
        let s = (ts[r] - cfg.delta).max(cfg.t_min);
        let c = 1.0 - teacher.schedule().signal_retention(s, ts[r])?;
        weights.push(1.0 / (c * c));
    }
    let ss: Vec<f64> = ts.iter().map(|&t| (t - cfg.delta).max(cfg.t_min)).collect();
    let frozen_loss = |student: &MlpStudent| -> Result<f64> {
        let y_s = student.forward(&eps, &ss, None, None)?;
        let mut total = 0.0;
        for r in 0..rows {
            let d = y_s.data()[r] - targets[r].data()[0];
            total += weights[r] * d * d;
        }
        Ok(total / rows as f64)
    };

    let (_, g_bs) = bootstrap_loss(&student, &teacher, &eps, &ts, &cfg, None)?;
    let (_, g_bc) = boundary_loss(&student, &teacher, &eps, None, &cfg)?;

    // Up to six evenly spread coordinates per parameter.
    let mut coords = Vec::new();
    for p in student.params.entries() {
        let n = p.value.len();
        let take = 6.min(n);
        for k in 0..take {
            coords.push((p.name.clone(), k * n / take));
        }
    }
    let h = 1e-4;
    let mut worst = 0.0_f64;
    for (name, idx) in coords {
        let base = student.params.get(&name)?.data()[idx];
        let mut probe = |v: f64| -> Result<(f64, f64)> {
            student.params.get_mut(&name)?.data_mut()[idx] = v;
            let bs = frozen_loss(&student)?;
            let bc = boundary_loss(&student, &teacher, &eps, None, &cfg)?.0;
            Ok((bs, bc))
        };
        let (bs_p, bc_p) = probe(base + h)?;
        let (bs_m, bc_m) = probe(base - h)?;
        probe(base)?;
        let fd = (bs_p - bs_m) / (2.0 * h) + cfg.beta * (bc_p - bc_m) / (2.0 * h);
        let g = g_bs[&name][idx] + cfg.beta * g_bc[&name][idx];
        let denom = fd.abs().max(g.abs()).max(1e-6);
        worst = worst.max((fd - g).abs() / denom);
    }
    Ok(CheckReport::below("training_loss_gradcheck", worst, 1e-5))
}

/// With the freeze lifted, gradient must also flow through the student's
/// appearance inside the target, so the two gradient fields must differ.
fn target_branch_carries_gradient_unless_frozen(seed: u64) -> Result<CheckReport> {
    let (teacher, student, cfg, eps, ts) = verify_student(seed)?;
    let (_, frozen) = bootstrap_loss(&student, &teacher, &eps, &ts, &cfg, None)?;
    let (_, full) = bootstrap_loss_impl(&student, &teacher, &eps, &ts, &cfg, None, false)?;
    let mut gap = 0.0_f64;
    for (name, g) in &frozen {
        for (a, b) in g.iter().zip(&full[name]) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(CheckReport::above(
        "target_branch_carries_gradient_unless_frozen",
        gap,
        1e-9,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_the_honest_build() {
        let reports = run_all(0).unwrap();
        assert_eq!(reports.len(), 12);
        let mut names = std::collections::BTreeSet::new();
        for r in &reports {
            assert!(r.passed(), "{r}");
            assert!(names.insert(r.name), "duplicate check name {}", r.name);
        }
        assert!(all_passed(&reports));
    }

    #[test]
    fn checks_are_deterministic_for_a_seed() {
        let a = run_all(7).unwrap();
        let b = run_all(7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reports_format_with_verdicts() {
        let good = CheckReport::below("demo_upper_bound", 1e-13, 1e-12);
        assert!(good.to_string().contains("ok"));
        let bad = CheckReport::below("demo_upper_bound", 1.0, 1e-12);
        assert!(!bad.passed());
        assert!(bad.to_string().contains("FAIL"));
        let floor = CheckReport::above("demo_floor", 0.5, 1e-6);
        assert!(floor.passed());
        assert!(floor.to_string().contains("needs >="));
        let window = CheckReport::window("demo_window", 2.0, 1.7, 2.3);
        assert!(window.passed());
        let nan = CheckReport::below("demo_nan", f64::NAN, 1.0);
        assert!(!nan.passed());
    }
}
