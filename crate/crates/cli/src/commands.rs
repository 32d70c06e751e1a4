//! The six commands behind the binary: teacher training, distillation with
//! split-run resume, sampling, evaluation, the numerical audit, and paired
//! ablations. All of them resolve the master seed into per-phase generator
//! streams and leave their artifacts under the output directory.

use crate::artifacts::{
    write_file, write_json, write_metrics_json, write_samples_csv, write_scatter_svg, MetricsLog,
    ScatterGroup,
};
use crate::config::{
    rng_stream, ExperimentConfig, STREAM_DISTILL, STREAM_EVAL, STREAM_SAMPLE, STREAM_STUDENT_INIT,
    STREAM_TEACHER,
};
use crate::{AblationName, CliError, SolverChoice};
use boot_core::boot::{
    distill_range, sample_student, BootConfig, ContextSampler, MlpStudent, Student, TargetSolver,
    TimeSampling,
};
use boot_core::checkpoint::{Checkpoint, TeacherSidecar};
use boot_core::eval::{
    energy_distance, guidance_sweep, mode_coverage, speed_report, SampleSet,
};
use boot_core::guidance::{GuidanceSpec, GuidanceWeight};
use boot_core::solvers::{ddim_sample, signal_ode_sample, SignalSolver, YBoundary};
use boot_core::teacher::{train_teacher, DenoiserNet, Teacher};
use boot_core::tensorcore::Tensor;
use boot_core::verify;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

const TEACHER_COLOR: &str = "#6b7280";
const STUDENT_COLOR: &str = "#b91c1c";

pub fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, out: Option<&Path>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_teacher_net(path: &Path) -> Result<DenoiserNet, CliError> {
    let ckpt = Checkpoint::load(path).map_err(CliError::usage)?;
    ckpt.restore_teacher().map_err(CliError::usage)
}

/// The sidecar written next to a teacher checkpoint: foo.json -> foo.meta.json.
fn sidecar_path(teacher: &Path) -> PathBuf {
    teacher.with_extension("meta.json")
}

fn load_sidecar(teacher: &Path) -> Result<TeacherSidecar, CliError> {
    TeacherSidecar::load(&sidecar_path(teacher)).map_err(CliError::usage)
}

fn load_student(path: &Path) -> Result<MlpStudent, CliError> {
    let ckpt = Checkpoint::load(path).map_err(CliError::usage)?;
    ckpt.restore_mlp_student().map_err(CliError::usage)
}

/// Swaps the averaged shadow weights in; checkpoints carry the raw training
/// state, sampling always uses the average.
fn ema_copy(mut student: MlpStudent) -> Result<MlpStudent, CliError> {
    let snapshot = student.params().ema_snapshot();
    student.adopt_params(snapshot)?;
    student.reset_nfe();
    Ok(student)
}

fn distill_spec(cfg: &ExperimentConfig) -> Option<GuidanceSpec> {
    cfg.guidance.as_ref().map(|g| GuidanceSpec {
        condition: g.condition,
        negative: g.negative,
        weight: g.weight,
    })
}

fn weight_range(spec: Option<&GuidanceSpec>) -> Option<(f64, f64)> {
    match spec.map(|s| s.weight) {
        Some(GuidanceWeight::Range { lo, hi }) => Some((lo, hi)),
        _ => None,
    }
}

fn context_for(teacher: &DenoiserNet) -> ContextSampler {
    if teacher.num_classes() > 0 {
        ContextSampler::UniformClasses
    } else {
        ContextSampler::Unconditional
    }
}

/// Guidance for a single-shot draw: the weight resolved to one value (flag,
/// then the configured value or range floor), the label from the flag or the
/// config. Student queries drop the negative label, which was baked in
/// during distillation. Returns None when the query would be plain anyway.
fn sampling_spec(
    cfg: &ExperimentConfig,
    weight: Option<f64>,
    label: Option<usize>,
    for_student: bool,
) -> Option<GuidanceSpec> {
    let block = cfg.guidance.as_ref();
    let condition = label.or_else(|| block.and_then(|g| g.condition));
    let w = weight.unwrap_or(match block.map(|g| g.weight) {
        Some(GuidanceWeight::Fixed(v)) => v,
        Some(GuidanceWeight::Range { lo, .. }) => lo,
        None => 1.0,
    });
    let negative = if for_student {
        None
    } else {
        block.and_then(|g| g.negative)
    };
    if !for_student && condition.is_none() && negative.is_none() && w == 1.0 {
        return None;
    }
    Some(GuidanceSpec {
        condition,
        negative,
        weight: GuidanceWeight::Fixed(w),
    })
}

pub fn cmd_train_teacher(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    apply_overrides(&mut cfg, seed, out);
    ensure_dir(&cfg.out_dir)?;
    let dataset = cfg.teacher.dataset.clone();
    let mut rng = rng_stream(cfg.seed, STREAM_TEACHER);
    let mut net = DenoiserNet::new(
        &mut rng,
        dataset.dim(),
        &cfg.teacher.hidden,
        cfg.teacher.kind,
        dataset.num_classes(),
        cfg.schedule,
    )?;
    train_teacher(&mut net, &dataset, &cfg.teacher.train, &mut rng, |step, loss| {
        if step % 1000 == 0 {
            log::info!("teacher step {step}: loss {loss:.6}");
        }
    })?;
    let ckpt_path = cfg.out_dir.join("teacher.json");
    Checkpoint::for_teacher(&net).save(&ckpt_path)?;
    TeacherSidecar {
        dataset,
        kind: cfg.teacher.kind,
        schedule: cfg.schedule,
    }
    .save(&sidecar_path(&ckpt_path))?;
    write_file(&cfg.out_dir.join("config.json"), &cfg.to_json())?;
    log::info!("teacher checkpoint at {}", ckpt_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_distill(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    teacher: &Path,
    resume: Option<&Path>,
    steps: Option<u64>,
    halt_after: Option<u64>,
    log: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    apply_overrides(&mut cfg, seed, out);
    let mut boot_cfg = cfg.boot.clone();
    if let Some(n) = steps {
        boot_cfg.steps = n;
    }
    boot_cfg.validate().map_err(CliError::usage)?;

    let net = load_teacher_net(teacher)?;
    let spec = distill_spec(&cfg);
    if let Some(sp) = &spec {
        sp.validate_for(&net).map_err(CliError::usage)?;
    }
    let w_range = weight_range(spec.as_ref());

    let (mut student, mut rng, start) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(CliError::usage)?;
            let student = ckpt.restore_mlp_student().map_err(CliError::usage)?;
            let rng = ckpt
                .rng
                .as_ref()
                .ok_or_else(|| {
                    CliError::usage(format!(
                        "{} has no generator state to resume from",
                        path.display()
                    ))
                })?
                .restore()
                .map_err(CliError::usage)?;
            let start = ckpt.completed_steps.ok_or_else(|| {
                CliError::usage(format!("{} has no step counter", path.display()))
            })?;
            if student.weight_range() != w_range {
                return Err(CliError::usage(
                    "resume checkpoint was trained with a different guidance range",
                ));
            }
            (student, rng, start)
        }
        None => {
            let mut init_rng = rng_stream(cfg.seed, STREAM_STUDENT_INIT);
            let student = MlpStudent::from_teacher(&net, w_range, &mut init_rng)?;
            (student, rng_stream(cfg.seed, STREAM_DISTILL), 0)
        }
    };
    if student.data_dim() != net.data_dim() {
        return Err(CliError::usage(format!(
            "student dimension {} does not match the teacher's {}",
            student.data_dim(),
            net.data_dim()
        )));
    }

    let stop = halt_after.unwrap_or(boot_cfg.steps).min(boot_cfg.steps);
    if start > stop {
        return Err(CliError::usage(format!(
            "checkpoint is already at step {start}, past the requested stop {stop}"
        )));
    }

    ensure_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.json"), &cfg.to_json())?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("metrics.csv"));
    let mut log_out = MetricsLog::open(&log_path, start > 0)?;
    let mut log_err = None;
    distill_range(
        &net,
        &mut student,
        &boot_cfg,
        spec.as_ref(),
        context_for(&net),
        &mut rng,
        start,
        stop,
        |m| {
            if log_err.is_none() {
                log_err = log_out.record(m, boot_cfg.ema_decay).err();
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(CliError::runtime(format!("metrics log failed: {e}")));
    }
    log_out.finish()?;

    let ckpt_path = cfg.out_dir.join("student.json");
    Checkpoint::for_mlp_student(&student)
        .with_rng(&rng)
        .with_progress(stop)
        .save(&ckpt_path)?;
    log::info!(
        "student checkpoint at {} after step {stop} of {}",
        ckpt_path.display(),
        boot_cfg.steps
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    teacher: Option<&Path>,
    student: Option<&Path>,
    solver: SolverChoice,
    steps: Option<usize>,
    n: Option<usize>,
    weight: Option<f64>,
    label: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    apply_overrides(&mut cfg, seed, out);
    ensure_dir(&cfg.out_dir)?;
    let n = n.unwrap_or(cfg.eval.n_samples);
    let steps = steps.unwrap_or(cfg.eval.ddim_steps);
    let mut rng = rng_stream(cfg.seed, STREAM_SAMPLE);

    let points = if solver == SolverChoice::Student {
        let path = student
            .ok_or_else(|| CliError::usage("--solver student needs --student PATH"))?;
        let map = ema_copy(load_student(path)?)?;
        let eps = Tensor::randn(&mut rng, vec![n, map.data_dim()], 1.0);
        let spec = sampling_spec(&cfg, weight, label, true);
        sample_student(&map, &eps, map.schedule().t_min, spec.as_ref())?
    } else {
        let path = teacher
            .ok_or_else(|| CliError::usage("teacher solvers need --teacher PATH"))?;
        let net = load_teacher_net(path)?;
        let eps = Tensor::randn(&mut rng, vec![n, net.data_dim()], 1.0);
        let spec = sampling_spec(&cfg, weight, label, false);
        if let Some(sp) = &spec {
            sp.validate_for(&net).map_err(CliError::usage)?;
        }
        let clip = cfg.boot.clip;
        match solver {
            SolverChoice::Ddim => ddim_sample(&net, &eps, steps, spec.as_ref(), clip)?
                .final_state()
                .clone(),
            SolverChoice::SignalEuler | SolverChoice::SignalHeun => {
                let ode_solver = if solver == SolverChoice::SignalEuler {
                    SignalSolver::Euler
                } else {
                    SignalSolver::Heun
                };
                signal_ode_sample(
                    &net,
                    &eps,
                    steps,
                    ode_solver,
                    YBoundary::MatchData,
                    spec.as_ref(),
                    clip,
                )?
                .to_data_space(net.schedule())?
                .final_state()
                .clone()
            }
            SolverChoice::Student => unreachable!("handled above"),
        }
    };

    let path = cfg.out_dir.join("samples.csv");
    write_samples_csv(&path, &points)?;
    log::info!("wrote {} samples to {}", points.rows(), path.display());
    Ok(())
}

pub fn cmd_eval(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    teacher: &Path,
    student: &Path,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    apply_overrides(&mut cfg, seed, out);
    ensure_dir(&cfg.out_dir)?;
    let net = load_teacher_net(teacher)?;
    let sidecar = load_sidecar(teacher)?;
    let map = ema_copy(load_student(student)?)?;
    if map.data_dim() != net.data_dim() {
        return Err(CliError::usage(format!(
            "student dimension {} does not match the teacher's {}",
            map.data_dim(),
            net.data_dim()
        )));
    }

    let n = cfg.eval.n_samples;
    let d = net.data_dim();
    // Draw order: student noises, two teacher reference sets, speed batch.
    let mut rng = rng_stream(cfg.seed, STREAM_EVAL);
    let eps_student = Tensor::randn(&mut rng, vec![n, d], 1.0);
    let eps_a = Tensor::randn(&mut rng, vec![n, d], 1.0);
    let eps_b = Tensor::randn(&mut rng, vec![n, d], 1.0);
    let eps_speed = Tensor::randn(&mut rng, vec![n.min(256), d], 1.0);

    let spec_student = sampling_spec(&cfg, None, None, true);
    let spec_teacher = sampling_spec(&cfg, None, None, false);
    if let Some(sp) = &spec_teacher {
        sp.validate_for(&net).map_err(CliError::usage)?;
    }
    let clip = cfg.boot.clip;
    let student_pts = sample_student(&map, &eps_student, map.schedule().t_min, spec_student.as_ref())?;
    let teacher_a = ddim_sample(&net, &eps_a, cfg.eval.ddim_steps, spec_teacher.as_ref(), clip)?
        .final_state()
        .clone();
    let teacher_b = ddim_sample(&net, &eps_b, cfg.eval.ddim_steps, spec_teacher.as_ref(), clip)?
        .final_state()
        .clone();

    let set_student = SampleSet::new(student_pts.clone(), cfg.seed, "student")?;
    let set_a = SampleSet::new(teacher_a.clone(), cfg.seed, "teacher_a")?;
    let set_b = SampleSet::new(teacher_b, cfg.seed, "teacher_b")?;

    let mut metrics = BTreeMap::new();
    metrics.insert(
        "energy_student_teacher".to_string(),
        energy_distance(&set_student, &set_a)?,
    );
    metrics.insert(
        "energy_teacher_pair".to_string(),
        energy_distance(&set_a, &set_b)?,
    );
    let centers = sidecar.dataset.mode_centers();
    let covered = mode_coverage(&set_student, &centers, cfg.eval.coverage_radius)?;
    metrics.insert("modes_covered_student".to_string(), covered.covered as f64);
    for (i, f) in covered.fractions.iter().enumerate() {
        metrics.insert(format!("mode_fraction_{i}"), *f);
    }
    let covered_teacher = mode_coverage(&set_a, &centers, cfg.eval.coverage_radius)?;
    metrics.insert(
        "modes_covered_teacher".to_string(),
        covered_teacher.covered as f64,
    );
    // The shared spec must suit both sides, so the negative label is dropped.
    let speed = speed_report(&net, &map, &eps_speed, cfg.eval.ddim_steps, spec_student.as_ref())?;
    metrics.insert("teacher_queries".to_string(), speed.teacher_nfe as f64);
    metrics.insert("student_queries".to_string(), speed.student_nfe as f64);
    log::info!(
        "teacher {:.3}s vs student {:.3}s over {} noises (x{:.1})",
        speed.teacher_seconds,
        speed.student_seconds,
        eps_speed.rows(),
        speed.wall_ratio
    );

    write_metrics_json(&cfg.out_dir.join("metrics.json"), &metrics)?;
    if d == 2 && cfg.eval.scatter {
        write_scatter_svg(
            &cfg.out_dir.join("scatter.svg"),
            &[
                ScatterGroup { points: &teacher_a, color: TEACHER_COLOR },
                ScatterGroup { points: &student_pts, color: STUDENT_COLOR },
            ],
        )?;
    }
    log::info!("metrics at {}", cfg.out_dir.join("metrics.json").display());
    Ok(())
}

pub fn cmd_verify(seed: u64) -> Result<(), CliError> {
    let reports = verify::run_all(seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::runtime(format!(
            "{failed} of {} checks failed",
            reports.len()
        )));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationReport {
    ablation: String,
    arms: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn cmd_ablate(
    name: AblationName,
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    teacher: &Path,
    threads: usize,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    apply_overrides(&mut cfg, seed, out);
    let dir = cfg.out_dir.join(name.dir_name());
    ensure_dir(&dir)?;
    let net = load_teacher_net(teacher)?;
    let sidecar = load_sidecar(teacher)?;

    let n = cfg.eval.n_samples;
    let d = net.data_dim();
    // Shared draws so every arm is compared on identical noises.
    let mut rng = rng_stream(cfg.seed, STREAM_EVAL);
    let eps_eval = Tensor::randn(&mut rng, vec![n, d], 1.0);
    let eps_ref = Tensor::randn(&mut rng, vec![n, d], 1.0);

    let arms = match name {
        AblationName::Guidance => {
            return guidance_ablation(&cfg, &net, &sidecar, &dir, &eps_eval, &eps_ref)
        }
        AblationName::Boundary => vec![
            ("beta_on", cfg.boot.clone()),
            ("beta_off", BootConfig { beta: 0.0, ..cfg.boot.clone() }),
        ],
        AblationName::TimeSampling => vec![
            (
                "uniform",
                BootConfig { time_sampling: TimeSampling::Uniform, ..cfg.boot.clone() },
            ),
            (
                "progressive",
                BootConfig { time_sampling: TimeSampling::Progressive, ..cfg.boot.clone() },
            ),
        ],
        AblationName::SolverOrder => vec![
            (
                "euler",
                BootConfig { target_solver: TargetSolver::Euler, ..cfg.boot.clone() },
            ),
            (
                "heun",
                BootConfig { target_solver: TargetSolver::Heun, ..cfg.boot.clone() },
            ),
        ],
    };

    let spec = distill_spec(&cfg);
    if let Some(sp) = &spec {
        sp.validate_for(&net).map_err(CliError::usage)?;
    }
    let spec_teacher = sampling_spec(&cfg, None, None, false);
    let spec_student = sampling_spec(&cfg, None, None, true);
    let clip = cfg.boot.clip;
    let teacher_ref = ddim_sample(&net, &eps_ref, cfg.eval.ddim_steps, spec_teacher.as_ref(), clip)?
        .final_state()
        .clone();
    // A fine-grid map on the evaluation noises scores per-noise fidelity.
    let ref_map = if name == AblationName::SolverOrder {
        Some(
            ddim_sample(&net, &eps_eval, 256, spec_teacher.as_ref(), clip)?
                .final_state()
                .clone(),
        )
    } else {
        None
    };

    // Both arms share the init and loop streams, so they differ only by
    // configuration.
    let run_arm = |boot_cfg: &BootConfig| -> Result<(MlpStudent, Tensor), CliError> {
        let mut init_rng = rng_stream(cfg.seed, STREAM_STUDENT_INIT);
        let mut student = MlpStudent::from_teacher(&net, weight_range(spec.as_ref()), &mut init_rng)?;
        let mut loop_rng = rng_stream(cfg.seed, STREAM_DISTILL);
        let averaged = distill_range(
            &net,
            &mut student,
            boot_cfg,
            spec.as_ref(),
            context_for(&net),
            &mut loop_rng,
            0,
            boot_cfg.steps,
            |_| {},
        )?;
        let points = sample_student(
            &averaged,
            &eps_eval,
            averaged.schedule().t_min,
            spec_student.as_ref(),
        )?;
        Ok((student, points))
    };
    let results = run_pair(
        threads,
        || run_arm(&arms[0].1),
        || run_arm(&arms[1].1),
    );

    let set_ref = SampleSet::new(teacher_ref.clone(), cfg.seed, "teacher")?;
    let centers = sidecar.dataset.mode_centers();
    let mut report = AblationReport {
        ablation: name.dir_name().to_string(),
        arms: BTreeMap::new(),
    };
    for ((label, _), result) in arms.iter().zip(results) {
        let (student, points) = result?;
        let set = SampleSet::new(points.clone(), cfg.seed, *label)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("energy_vs_teacher".to_string(), energy_distance(&set, &set_ref)?);
        let coverage = mode_coverage(&set, &centers, cfg.eval.coverage_radius)?;
        metrics.insert("modes_covered".to_string(), coverage.covered as f64);
        for (i, f) in coverage.fractions.iter().enumerate() {
            metrics.insert(format!("mode_fraction_{i}"), *f);
        }
        if let Some(reference) = &ref_map {
            metrics.insert("one_shot_rmse".to_string(), rmse(&points, reference));
        }
        Checkpoint::for_mlp_student(&student)
            .with_progress(cfg.boot.steps)
            .save(&dir.join(format!("student_{label}.json")))?;
        if d == 2 && cfg.eval.scatter {
            write_scatter_svg(
                &dir.join(format!("scatter_{label}.svg")),
                &[
                    ScatterGroup { points: &teacher_ref, color: TEACHER_COLOR },
                    ScatterGroup { points: &points, color: STUDENT_COLOR },
                ],
            )?;
        }
        report.arms.insert(label.to_string(), metrics);
    }
    write_comparison(&dir, &report)?;
    Ok(())
}

/// Trains one weight-conditioned student across the sweep range and scores
/// each strength: distance to the conditioned class's own modes against
/// sample spread.
fn guidance_ablation(
    cfg: &ExperimentConfig,
    net: &DenoiserNet,
    sidecar: &TeacherSidecar,
    dir: &Path,
    eps_eval: &Tensor,
    eps_ref: &Tensor,
) -> Result<(), CliError> {
    if net.num_classes() == 0 {
        return Err(CliError::usage(
            "the guidance ablation needs a class-labeled teacher",
        ));
    }
    let weights = cfg.eval.sweep_weights.clone();
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let condition = cfg
        .guidance
        .as_ref()
        .and_then(|g| g.condition)
        .unwrap_or(0);
    let negative = cfg.guidance.as_ref().and_then(|g| g.negative);
    let spec = GuidanceSpec {
        condition: None,
        negative,
        weight: GuidanceWeight::Range { lo, hi },
    };
    spec.validate_for(net).map_err(CliError::usage)?;

    let mut init_rng = rng_stream(cfg.seed, STREAM_STUDENT_INIT);
    let mut student = MlpStudent::from_teacher(net, Some((lo, hi)), &mut init_rng)?;
    let mut loop_rng = rng_stream(cfg.seed, STREAM_DISTILL);
    let averaged = distill_range(
        net,
        &mut student,
        &cfg.boot,
        Some(&spec),
        ContextSampler::UniformClasses,
        &mut loop_rng,
        0,
        cfg.boot.steps,
        |_| {},
    )?;
    Checkpoint::for_mlp_student(&student)
        .with_progress(cfg.boot.steps)
        .save(&dir.join("student_ranged.json"))?;

    let class_centers = sidecar
        .dataset
        .class_centers(condition)
        .map_err(CliError::usage)?;
    let rows = guidance_sweep(&averaged, &weights, Some(condition), &class_centers, eps_eval)?;

    let teacher_ref = ddim_sample(
        net,
        eps_ref,
        cfg.eval.ddim_steps,
        Some(&GuidanceSpec::fixed(Some(condition), 1.0)),
        cfg.boot.clip,
    )?
    .final_state()
    .clone();
    let mut report = AblationReport {
        ablation: "guidance".to_string(),
        arms: BTreeMap::new(),
    };
    for row in &rows {
        let label = format!("w_{}", row.weight);
        let mut metrics = BTreeMap::new();
        metrics.insert("mean_nearest_mode".to_string(), row.mean_nearest_mode);
        metrics.insert("covariance_trace".to_string(), row.covariance_trace);
        if net.data_dim() == 2 && cfg.eval.scatter {
            let points = sample_student(
                &averaged,
                eps_eval,
                averaged.schedule().t_min,
                Some(&GuidanceSpec::fixed(Some(condition), row.weight)),
            )?;
            write_scatter_svg(
                &dir.join(format!("scatter_{label}.svg")),
                &[
                    ScatterGroup { points: &teacher_ref, color: TEACHER_COLOR },
                    ScatterGroup { points: &points, color: STUDENT_COLOR },
                ],
            )?;
        }
        report.arms.insert(label, metrics);
    }
    write_comparison(dir, &report)?;
    Ok(())
}

/// report.json plus a metric-by-arm CSV table.
fn write_comparison(dir: &Path, report: &AblationReport) -> Result<(), CliError> {
    write_json(&dir.join("report.json"), report)?;
    let mut names: Vec<&String> = Vec::new();
    for metrics in report.arms.values() {
        for key in metrics.keys() {
            if !names.contains(&key) {
                names.push(key);
            }
        }
    }
    names.sort();
    let mut table = String::from("metric");
    for arm in report.arms.keys() {
        table.push(',');
        table.push_str(arm);
    }
    table.push('\n');
    for name in names {
        table.push_str(name);
        for metrics in report.arms.values() {
            table.push(',');
            if let Some(v) = metrics.get(name) {
                table.push_str(&v.to_string());
            }
        }
        table.push('\n');
    }
    write_file(&dir.join("compare.csv"), &table)?;
    log::info!("ablation report at {}", dir.join("report.json").display());
    Ok(())
}

fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (total / a.len() as f64).sqrt()
}

/// Runs the two arm jobs, side by side when the thread budget allows.
fn run_pair<T: Send>(
    threads: usize,
    left: impl FnOnce() -> T + Send,
    right: impl FnOnce() -> T + Send,
) -> Vec<T> {
    if threads >= 2 {
        let (a, b) = std::thread::scope(|scope| {
            let handle = scope.spawn(left);
            let b = right();
            (handle.join().expect("arm thread"), b)
        });
        vec![a, b]
    } else {
        vec![left(), right()]
    }
}
