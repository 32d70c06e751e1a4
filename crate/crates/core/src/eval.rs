//! Desk-scale sample metrics: two-sample energy distance, mixture mode
//! coverage, divergence of a distilled map from a fine-grid solver
//! reference, guidance-strength sweeps, and wall-clock/query accounting.

use crate::boot::{sample_student, GuidanceSpec, GuidanceWeight, Student};
use crate::error::{BootError, Result};
use crate::solvers::{initial_signal_state, signal_ode_heun_step, YBoundary};
use crate::teacher::Teacher;
use crate::tensorcore::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// A batch of generated points together with how they were produced.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Tensor,
    pub labels: Option<Vec<Option<usize>>>,
    pub seed: u64,
    pub tag: String,
}

impl SampleSet {
    pub fn new(points: Tensor, seed: u64, tag: impl Into<String>) -> Result<SampleSet> {
        if points.shape().len() != 2 {
            return Err(BootError::shape(
                "sample set",
                "[n, d]",
                format!("{:?}", points.shape()),
            ));
        }
        Ok(SampleSet {
            points,
            labels: None,
            seed,
            tag: tag.into(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<Option<usize>>) -> Result<SampleSet> {
        if labels.len() != self.points.rows() {
            return Err(BootError::shape(
                "sample labels",
                format!("{}", self.points.rows()),
                format!("{}", labels.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise distance over all ordered pairs, diagonal included.
fn mean_cross_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            acc += row_distance(ra, b.row(j));
        }
    }
    acc / (a.rows() * b.rows()) as f64
}

/// Two-sample energy distance 2 E|A-B| - E|A-A'| - E|B-B'| over all pairs.
/// Nonnegative up to rounding, zero for identical multisets, and symmetric.
pub fn energy_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(BootError::contract(
            "energy distance needs nonempty sample sets",
        ));
    }
    if a.dim() != b.dim() {
        return Err(BootError::shape(
            "energy distance",
            format!("dimension {}", a.dim()),
            format!("{}", b.dim()),
        ));
    }
    Ok(2.0 * mean_cross_distance(&a.points, &b.points)
        - mean_cross_distance(&a.points, &a.points)
        - mean_cross_distance(&b.points, &b.points))
}

/// Share of samples near each mixture center, and how many centers clear
/// the coverage threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeCoverage {
    /// Centers with at least 5% of the samples within the radius.
    pub covered: usize,
    /// Per-center fraction of samples within the radius.
    pub fractions: Vec<f64>,
}

/// The 5% rule: a mode counts as covered when at least that share of the
/// samples lands within `radius` of its center.
pub const COVERAGE_THRESHOLD: f64 = 0.05;

pub fn mode_coverage(
    samples: &SampleSet,
    centers: &[Vec<f64>],
    radius: f64,
) -> Result<ModeCoverage> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(BootError::domain(format!(
            "coverage radius must be positive and finite, got {radius}"
        )));
    }
    if samples.is_empty() || centers.is_empty() {
        return Err(BootError::contract(
            "mode coverage needs samples and at least one center",
        ));
    }
    let d = samples.dim();
    if let Some(c) = centers.iter().find(|c| c.len() != d) {
        return Err(BootError::shape(
            "mode centers",
            format!("dimension {d}"),
            format!("{}", c.len()),
        ));
    }
    let n = samples.len();
    let mut fractions = Vec::with_capacity(centers.len());
    for center in centers {
        let hits = (0..n)
            .filter(|&i| row_distance(samples.points.row(i), center) <= radius)
            .count();
        fractions.push(hits as f64 / n as f64);
    }
    let covered = fractions.iter().filter(|&&f| f >= COVERAGE_THRESHOLD).count();
    Ok(ModeCoverage { covered, fractions })
}

/// Mean distance between the student's map and the solver reference at each
/// requested time, sorted from t_max downward. The reference integrates the
/// teacher with second-order steps, budgeting `REFERENCE_STEPS` across the
/// requested span, and starts from the teacher's own denoise of the noise.
pub const REFERENCE_STEPS: usize = 512;

pub fn trajectory_divergence<S: Student + ?Sized>(
    student: &S,
    teacher: &dyn Teacher,
    eps: &Tensor,
    grid: &[f64],
    spec: Option<&GuidanceSpec>,
) -> Result<Vec<(f64, f64)>> {
    let sched = teacher.schedule();
    if grid.is_empty() {
        return Err(BootError::contract("trajectory grid is empty"));
    }
    for &t in grid {
        if !(sched.t_min..=sched.t_max).contains(&t) {
            return Err(BootError::domain(format!(
                "grid time {t} outside [{}, {}]",
                sched.t_min, sched.t_max
            )));
        }
    }
    let mut times = grid.to_vec();
    times.sort_by(|a, b| b.partial_cmp(a).expect("grid times are finite"));
    times.dedup();

    let span = (sched.t_max - *times.last().expect("nonempty")).max(f64::EPSILON);
    let mut y = initial_signal_state(teacher, eps, YBoundary::TeacherDenoise, spec, None)?;
    let mut at = sched.t_max;
    let rows = eps.rows();
    let mut out = Vec::with_capacity(times.len());
    for &t in &times {
        let gap = at - t;
        if gap > 0.0 {
            let n = ((REFERENCE_STEPS as f64 * gap / span).ceil() as usize).max(1);
            let h = gap / n as f64;
            for k in 0..n {
                // Last substep lands on t exactly to avoid drift.
                let delta = if k + 1 == n { at - t } else { h };
                y = signal_ode_heun_step(teacher, &y, eps, at, delta, spec, None)?;
                at -= h;
            }
            at = t;
        }
        let mapped = sample_student(student, eps, t, spec)?;
        let mean = (0..rows)
            .map(|r| row_distance(mapped.row(r), y.row(r)))
            .sum::<f64>()
            / rows as f64;
        out.push((t, mean));
    }
    Ok(out)
}

/// One row of a guidance sweep: sample quality (distance to the nearest
/// mixture center) against diversity (total variance of the samples).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceRow {
    pub weight: f64,
    pub mean_nearest_mode: f64,
    pub covariance_trace: f64,
}

pub(crate) fn nearest_mode_and_trace(points: &Tensor, centers: &[Vec<f64>]) -> (f64, f64) {
    let n = points.rows();
    let d = points.cols();
    let mut nearest = 0.0;
    for i in 0..n {
        let row = points.row(i);
        nearest += centers
            .iter()
            .map(|c| row_distance(row, c))
            .fold(f64::INFINITY, f64::min);
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut trace = 0.0;
    for i in 0..n {
        for (m, v) in mean.iter().zip(points.row(i)) {
            trace += (v - m) * (v - m);
        }
    }
    (nearest / n as f64, trace / n as f64)
}

/// Samples the student once per guidance weight over a fixed noise batch and
/// reports quality/diversity per weight. Weights outside the trained range
/// are evaluated anyway, with a warning.
pub fn guidance_sweep<S: Student + ?Sized>(
    student: &S,
    weights: &[f64],
    condition: Option<usize>,
    centers: &[Vec<f64>],
    eps: &Tensor,
) -> Result<Vec<GuidanceRow>> {
    if !student.takes_weight() {
        return Err(BootError::contract(
            "guidance sweep needs a weight-conditioned student",
        ));
    }
    if centers.is_empty() || weights.is_empty() {
        return Err(BootError::contract(
            "guidance sweep needs centers and at least one weight",
        ));
    }
    let mut out = Vec::with_capacity(weights.len());
    for &w in weights {
        if let Some((lo, hi)) = student.weight_range() {
            if w < lo || w > hi {
                log::warn!("guidance weight {w} outside the trained range [{lo}, {hi}]");
            }
        }
        let spec = GuidanceSpec {
            condition,
            negative: None,
            weight: GuidanceWeight::Fixed(w),
        };
        let points = sample_student(student, eps, student.schedule().t_min, Some(&spec))?;
        let (mean_nearest_mode, covariance_trace) = nearest_mode_and_trace(&points, centers);
        out.push(GuidanceRow {
            weight: w,
            mean_nearest_mode,
            covariance_trace,
        });
    }
    Ok(out)
}

/// Wall-clock and query-count comparison between the teacher's iterative
/// sampler and the student's single query over the same noise batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedReport {
    pub teacher_seconds: f64,
    pub student_seconds: f64,
    /// teacher_seconds / student_seconds.
    pub wall_ratio: f64,
    pub teacher_nfe: u64,
    pub student_nfe: u64,
}

pub fn speed_report<S: Student + ?Sized>(
    teacher: &dyn Teacher,
    student: &S,
    eps: &Tensor,
    ddim_steps: usize,
    spec: Option<&GuidanceSpec>,
) -> Result<SpeedReport> {
    teacher.reset_nfe();
    student.reset_nfe();
    let started = Instant::now();
    crate::solvers::ddim_sample(teacher, eps, ddim_steps, spec, None)?;
    let teacher_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    sample_student(student, eps, student.schedule().t_min, spec)?;
    let student_seconds = started.elapsed().as_secs_f64();
    Ok(SpeedReport {
        teacher_seconds,
        student_seconds,
        wall_ratio: teacher_seconds / student_seconds,
        teacher_nfe: teacher.nfe(),
        student_nfe: student.nfe(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boot::LinearStudent;
    use crate::schedule::NoiseSchedule;
    use crate::teacher::{AnalyticGaussianTeacher, CondBatch};
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

    fn set(values: &[f64], dim: usize, tag: &str) -> SampleSet {
        let rows = values.len() / dim;
        SampleSet::new(
            Tensor::new(vec![rows, dim], values.to_vec()).unwrap(),
            0,
            tag,
        )
        .unwrap()
    }

    #[test]
    fn energy_distance_matches_hand_computations() {
        let a = set(&[0.0], 1, "a");
        let b = set(&[1.0], 1, "b");
        assert!((energy_distance(&a, &b).unwrap() - 2.0).abs() < 1e-15);

        // Two against one in 2-D: cross mean (1 + sqrt(2))/2, self mean 1/2.
        let a = set(&[0.0, 0.0, 1.0, 0.0], 2, "a");
        let b = set(&[0.0, 1.0], 2, "b");
        let want = 1.0 + 2.0_f64.sqrt() - 0.5;
        assert!((energy_distance(&a, &b).unwrap() - want).abs() < 1e-15);
        assert_eq!(
            energy_distance(&a, &b).unwrap(),
            energy_distance(&b, &a).unwrap()
        );
    }

    #[test]
    fn energy_distance_vanishes_on_identical_multisets() {
        let a = set(&[0.3, -1.0, 0.3, 2.5], 2, "a");
        let b = set(&[0.3, 2.5, 0.3, -1.0], 2, "b");
        let d = energy_distance(&a, &b).unwrap();
        assert!(d.abs() < 1e-12, "permuted copy scored {d}");
    }

    #[test]
    fn energy_distance_rejects_bad_inputs() {
        let a = set(&[0.0], 1, "a");
        let empty = SampleSet::new(Tensor::zeros(vec![0, 1]), 0, "none").unwrap();
        assert!(energy_distance(&a, &empty).is_err());
        let wide = set(&[0.0, 1.0], 2, "wide");
        assert!(energy_distance(&a, &wide).is_err());
    }

    #[test]
    fn mode_coverage_applies_the_five_percent_rule() {
        let centers = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0]];
        let all_first = set(&[0.1, 0.0, 0.0, 0.1, -0.1, 0.0, 0.0, -0.1], 2, "s");
        let cov = mode_coverage(&all_first, &centers, 0.5).unwrap();
        assert_eq!(cov.covered, 1);
        assert_eq!(cov.fractions, vec![1.0, 0.0, 0.0]);

        // One of twenty samples sits at the second center: exactly 5%.
        let mut pts = vec![0.0; 40];
        pts[38] = 4.0;
        pts[39] = 0.0;
        let edge = set(&pts, 2, "s");
        let cov = mode_coverage(&edge, &centers, 0.5).unwrap();
        assert_eq!(cov.covered, 2);
        assert!((cov.fractions[1] - 0.05).abs() < 1e-15);

        assert!(mode_coverage(&edge, &centers, 0.0).is_err());
    }

    #[test]
    fn divergence_is_zero_when_the_student_is_the_fixed_point() {
        // A constant teacher pins the reference at its value from the
        // boundary down, so a student emitting that constant matches exactly.
        let v = 0.7;
        let teacher = ConstTeacher::new(vec![v]);
        let sched = *teacher.schedule();
        let mut student = LinearStudent::zeros(1, sched).unwrap();
        student.params.get_mut("lin.w").unwrap().data_mut()[1] = v;
        let eps = Tensor::new(vec![3, 1], vec![-1.0, 0.2, 1.5]).unwrap();
        let grid = [0.9, 0.5, sched.t_min];
        let rows = trajectory_divergence(&student, &teacher, &eps, &grid, None).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].0, 0.9);
        assert_eq!(rows[2].0, sched.t_min);
        for (t, err) in rows {
            assert!(err.abs() < 1e-12, "divergence {err} at t {t}");
        }

        let mut offset = LinearStudent::zeros(1, sched).unwrap();
        offset.params.get_mut("lin.w").unwrap().data_mut()[1] = v + 0.1;
        let rows = trajectory_divergence(&offset, &teacher, &eps, &grid, None).unwrap();
        for (t, err) in rows {
            assert!((err - 0.1).abs() < 1e-12, "divergence {err} at t {t}");
        }
    }

    #[test]
    fn divergence_reference_handles_irregular_grids() {
        let sched = NoiseSchedule::default();
        let teacher = AnalyticGaussianTeacher::isotropic(vec![0.8], 0.3, sched).unwrap();
        let student = LinearStudent::zeros(2, sched).unwrap();
        let eps = Tensor::new(vec![2, 1], vec![0.4, -0.7]).unwrap();
        // Duplicates collapse, order is normalized, t_max needs no stepping.
        let rows =
            trajectory_divergence(&student, &teacher, &eps, &[0.5, sched.t_max, 0.5], None)
                .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, sched.t_max);
        assert!(rows.iter().all(|(_, e)| e.is_finite() && *e > 0.0));
        assert!(trajectory_divergence(&student, &teacher, &eps, &[], None).is_err());
        assert!(trajectory_divergence(&student, &teacher, &eps, &[0.001], None).is_err());
    }

    #[test]
    fn nearest_mode_and_trace_match_hand_values() {
        let points = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let centers = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let (nearest, trace) = nearest_mode_and_trace(&points, &centers);
        assert!((nearest - 1.0).abs() < 1e-15);
        assert!((trace - 2.0).abs() < 1e-15);
    }

    #[test]
    fn guidance_sweep_needs_and_uses_weight_conditioning() {
        use crate::teacher::{DenoiserNet, PredictionKind};
        use rand::SeedableRng;
        let sched = NoiseSchedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let teacher =
            DenoiserNet::new(&mut rng, 2, &[8], PredictionKind::Signal, 2, sched).unwrap();
        let student =
            crate::boot::MlpStudent::from_teacher(&teacher, Some((1.0, 3.0)), &mut rng).unwrap();
        let centers = vec![vec![0.0, 0.0], vec![4.0, 0.0]];
        let eps = Tensor::new(vec![3, 2], vec![0.2, -0.4, 1.0, 0.3, -0.8, 0.5]).unwrap();
        // 5.0 sits outside the trained range: warned about, still evaluated.
        let rows = guidance_sweep(&student, &[1.0, 2.0, 5.0], Some(0), &centers, &eps).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| {
            r.mean_nearest_mode.is_finite() && r.covariance_trace.is_finite()
        }));

        let plain = LinearStudent::zeros(1, sched).unwrap();
        assert!(guidance_sweep(&plain, &[1.0], None, &centers, &eps).is_err());
    }

    #[test]
    fn speed_report_counts_queries_exactly() {
        let teacher = ConstTeacher::new(vec![0.0]);
        let student = LinearStudent::zeros(2, *teacher.schedule()).unwrap();
        let eps = Tensor::new(vec![5, 1], vec![0.1, -0.2, 0.3, -0.4, 0.5]).unwrap();
        let report = speed_report(&teacher, &student, &eps, 8, None).unwrap();
        assert_eq!(report.teacher_nfe, 40);
        assert_eq!(report.student_nfe, 5);
        assert!(report.teacher_seconds >= 0.0 && report.student_seconds >= 0.0);
        assert!(report.wall_ratio.is_finite() || report.student_seconds == 0.0);
    }
}
