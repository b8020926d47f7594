//! The experiment commands. Each reads the resolved config, writes its
//! artifacts under the output directory and finishes with a manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use scott_core::adversarial::train_scott_full;
use scott_core::diffusion::train_teacher;
use scott_core::distill::{train_scott_cd_only, StudentCheckpoint, TrainAbort};
use scott_core::metrics::eval_report;
use scott_core::numerics::{streams, Params, RngStream};
use scott_core::sampling::{default_time_sequence, multistep_consistency_sample, teacher_sample, SampleBatch};
use scott_core::solvers::{estimate_order, substep_errors, OrderProblem};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{fmt_f64, histogram_svg, read_samples, write_manifest, write_samples, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainTeacher,
    Distill,
    Sample,
    Eval,
    SolverBench,
    OrderCheck,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::TrainTeacher,
        Command::Distill,
        Command::Sample,
        Command::Eval,
        Command::SolverBench,
        Command::OrderCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::SolverBench => "solver-bench",
            Command::OrderCheck => "order-check",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Artifact names under the output directory.
pub mod paths {
    pub const TEACHER: &str = "teacher.ckpt";
    pub const TEACHER_LOSS: &str = "teacher_loss.csv";
    pub const STUDENT: &str = "student.ckpt";
    pub const STUDENT_LAST_GOOD: &str = "student_last_good.ckpt";
    pub const DISCRIMINATOR: &str = "discriminator.ckpt";
    pub const DISTILL_LOSS: &str = "distill_loss.csv";
    pub const EVAL: &str = "eval.csv";
    pub const EVAL_SUMMARY: &str = "eval_summary.csv";
    pub const SOLVER_BENCH: &str = "solver_bench.csv";
    pub const ORDER: &str = "order.csv";

    pub fn samples(generator: &str, steps: usize, seed: u64) -> String {
        format!("samples/{generator}_k{steps}_s{seed}.csv")
    }
}

/// Files a command wrote, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    outcome: Outcome,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> CliResult<PathBuf> {
        let p = self.out.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
        }
        self.outcome.written.push(PathBuf::from(name));
        Ok(p)
    }
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> CliResult<Outcome> {
    let start = Instant::now();
    let mut r = Run {
        cfg,
        out: &cfg.out_dir,
        outcome: Outcome::default(),
    };
    match command {
        Command::TrainTeacher => cmd_train_teacher(&mut r)?,
        Command::Distill => cmd_distill(&mut r)?,
        Command::Sample => cmd_sample(&mut r)?,
        Command::Eval => cmd_eval(&mut r)?,
        Command::SolverBench => cmd_solver_bench(&mut r)?,
        Command::OrderCheck => cmd_order_check(&mut r)?,
    }
    let manifest = r.path(&format!("{}.manifest", command.name()))?;
    write_manifest(
        &manifest,
        command.name(),
        &cfg.raw.render(),
        &cfg.raw.hash(),
        cfg.seed,
        start.elapsed().as_secs_f64(),
    )?;
    r.outcome.written.push(PathBuf::from(format!("{}.cfg", command.name())));
    Ok(r.outcome)
}

fn load_teacher(r: &Run) -> CliResult<scott_core::diffusion::ScoreModel> {
    Checkpoint::load_expecting(&r.out.join(paths::TEACHER), ModelKind::Teacher, &r.cfg.raw.teacher_hash())?.to_teacher()
}

fn cmd_train_teacher(r: &mut Run) -> CliResult<()> {
    let cfg = r.cfg;
    let run = train_teacher(&cfg.teacher, &cfg.spec, &cfg.schedule, cfg.seed)?;
    if !run.ema.net.all_finite() {
        return Err(CliError::Numeric("teacher weights are not finite".into()));
    }
    let ckpt = Checkpoint::from_teacher(&run.ema, cfg.seed, &cfg.raw.teacher_hash(), &cfg.schedule);
    ckpt.save(&r.path(paths::TEACHER)?)?;
    let mut t = Table::new(&["iteration", "loss"]);
    for rec in &run.records {
        t.push(vec![rec.iteration.to_string(), fmt_f64(rec.loss)]);
    }
    t.write(&r.path(paths::TEACHER_LOSS)?)
}

fn student_checkpoint(r: &Run, s: &StudentCheckpoint) -> Checkpoint {
    let cfg = r.cfg;
    Checkpoint::from_student(
        &s.model,
        &s.teacher_fingerprint,
        s.iterations_done,
        cfg.seed,
        &cfg.raw.student_hash(),
        &cfg.schedule,
    )
}

fn cmd_distill(r: &mut Run) -> CliResult<()> {
    let cfg = r.cfg;
    let teacher = load_teacher(r)?;
    let result = match &cfg.gan {
        None => train_scott_cd_only(&teacher, &cfg.distill, &cfg.spec, &cfg.schedule, cfg.seed).map(|s| (s, None)),
        Some(gan) => train_scott_full(&teacher, &cfg.distill, gan, &cfg.spec, &cfg.schedule, cfg.seed).map(|(s, d)| (s, Some(d))),
    };
    let (student, disc) = match result {
        Ok(v) => v,
        Err(TrainAbort { error, last_good }) => {
            if let Some(last) = last_good {
                student_checkpoint(r, &last).save(&r.path(paths::STUDENT_LAST_GOOD)?)?;
            }
            return Err(match error {
                scott_core::Error::Diverged { .. } => CliError::Numeric(error.to_string()),
                e => e.into(),
            });
        }
    };
    student_checkpoint(r, &student).save(&r.path(paths::STUDENT)?)?;
    if let Some(d) = disc {
        Checkpoint::from_discriminator(&d, cfg.seed, &cfg.raw.student_hash(), &cfg.schedule)
            .save(&r.path(paths::DISCRIMINATOR)?)?;
    }
    let mut t = Table::new(&["iteration", "cd_loss", "gen_loss", "disc_loss"]);
    for rec in &student.records {
        t.push(vec![
            rec.iteration.to_string(),
            fmt_f64(rec.cd_loss),
            fmt_f64(rec.gen_loss),
            fmt_f64(rec.disc_loss),
        ]);
    }
    t.write(&r.path(paths::DISTILL_LOSS)?)
}

fn save_batch(r: &mut Run, batch: &SampleBatch) -> CliResult<()> {
    let name = paths::samples(&batch.generator, batch.steps, batch.seed);
    write_samples(batch, &r.path(&name)?)?;
    if batch.vectors.ncols() == 1 {
        let title = format!("{} samples, {} steps, seed {}", batch.generator, batch.steps, batch.seed);
        let svg = histogram_svg(&batch.vectors.column(0).to_vec(), r.cfg.sample.histogram_range, &title);
        let svg_path = r.path(&name.replace(".csv", ".svg"))?;
        std::fs::write(&svg_path, svg).map_err(|e| CliError::Io(format!("{}: {e}", svg_path.display())))?;
    }
    Ok(())
}

/// Sample files the sample command writes for this config.
pub fn sample_files(cfg: &ExperimentConfig) -> Vec<(String, usize, u64)> {
    let mut out = Vec::new();
    for &seed in &cfg.sample.seeds {
        for &k in &cfg.sample.steps {
            out.push(("student".to_string(), k, seed));
        }
        if cfg.sample.teacher {
            out.push(("teacher".to_string(), teacher_steps(cfg), seed));
        }
    }
    out
}

/// The teacher solve cannot take more steps than the grid has intervals.
fn teacher_steps(cfg: &ExperimentConfig) -> usize {
    cfg.sample.teacher_steps.min(cfg.schedule.len() - 1)
}

fn cmd_sample(r: &mut Run) -> CliResult<()> {
    let cfg = r.cfg;
    let student =
        Checkpoint::load_expecting(&r.out.join(paths::STUDENT), ModelKind::Student, &cfg.raw.student_hash())?.to_student()?;
    let teacher = if cfg.sample.teacher { Some(load_teacher(r)?) } else { None };
    for &seed in &cfg.sample.seeds {
        for &k in &cfg.sample.steps {
            let times = default_time_sequence(&cfg.schedule, k)?;
            let mut rng = RngStream::new(seed, streams::SAMPLING);
            let batch = multistep_consistency_sample(
                &student,
                &times,
                cfg.sample.setting,
                &cfg.schedule,
                &mut rng,
                cfg.sample.count,
            )?;
            save_batch(r, &batch)?;
        }
        if let Some(teacher) = &teacher {
            let batch = teacher_sample(
                teacher,
                &cfg.spec,
                &cfg.schedule,
                teacher_steps(cfg),
                &cfg.sample.teacher_solver,
                cfg.sample.teacher_labels,
                cfg.sample.teacher_omega,
                seed,
                cfg.sample.count,
            )?;
            save_batch(r, &batch)?;
        }
    }
    Ok(())
}

fn cmd_eval(r: &mut Run) -> CliResult<()> {
    let cfg = r.cfg;
    let mut t = Table::new(&[
        "generator",
        "steps",
        "seed",
        "n_samples",
        "n_reference",
        "w1",
        "sliced_w1",
        "coverage",
        "mode_weight_max_error",
        "mode_weights",
    ]);
    // (generator, steps) -> per-seed (w1, coverage, mode error)
    type Summary = Vec<(String, usize, Vec<(f64, f64, f64)>)>;
    let mut summary: Summary = Vec::new();
    for (generator, steps, seed) in sample_files(cfg) {
        let batch = read_samples(&r.out.join(paths::samples(&generator, steps, seed)))?;
        let (reference, _) = cfg
            .spec
            .sample(cfg.eval.reference, &mut RngStream::new(seed, streams::REFERENCE));
        let mut proj = RngStream::new(seed, streams::PROJECTIONS);
        let rep = eval_report(
            &generator,
            steps,
            batch.vectors.view(),
            reference.view(),
            &cfg.spec,
            cfg.eval.k,
            &mut proj,
        )?;
        t.push(vec![
            generator.clone(),
            steps.to_string(),
            seed.to_string(),
            rep.n_samples.to_string(),
            rep.n_reference.to_string(),
            fmt_f64(rep.w1),
            rep.sliced_w1.map(fmt_f64).unwrap_or_default(),
            fmt_f64(rep.coverage),
            fmt_f64(rep.mode_weight_max_error),
            rep.mode_weights.iter().map(|&w| fmt_f64(w)).collect::<Vec<_>>().join(";"),
        ]);
        let entry = (rep.w1, rep.coverage, rep.mode_weight_max_error);
        match summary.iter_mut().find(|(g, k, _)| *g == generator && *k == steps) {
            Some((_, _, v)) => v.push(entry),
            None => summary.push((generator, steps, vec![entry])),
        }
    }
    t.write(&r.path(paths::EVAL)?)?;
    let mut s = Table::new(&[
        "generator",
        "steps",
        "seeds",
        "mean_w1",
        "mean_coverage",
        "mean_mode_weight_max_error",
    ]);
    for (generator, steps, v) in summary {
        let n = v.len() as f64;
        let mean = |f: fn(&(f64, f64, f64)) -> f64| fmt_f64(v.iter().map(f).sum::<f64>() / n);
        s.push(vec![
            generator,
            steps.to_string(),
            v.len().to_string(),
            mean(|e| e.0),
            mean(|e| e.1),
            mean(|e| e.2),
        ]);
    }
    s.write(&r.path(paths::EVAL_SUMMARY)?)
}

fn cmd_solver_bench(r: &mut Run) -> CliResult<()> {
    let cfg = r.cfg;
    let b = &cfg.bench;
    if cfg.spec.dim() != 1 {
        return Err(CliError::Config("solver-bench needs 1-D data".into()));
    }
    let errors = substep_errors(
        &cfg.spec,
        &cfg.schedule,
        &b.solver,
        b.from,
        b.to,
        &b.substeps,
        b.trajectories,
        cfg.seed,
    )?;
    let mut t = Table::new(&["solver", "eta", "from", "to", "substeps", "trajectories", "w1"]);
    for (&h, &e) in b.substeps.iter().zip(&errors) {
        t.push(vec![
            b.solver.family.name().to_string(),
            fmt_f64(b.solver.eta),
            b.from.to_string(),
            b.to.to_string(),
            h.to_string(),
            b.trajectories.to_string(),
            fmt_f64(e),
        ]);
    }
    t.write(&r.path(paths::SOLVER_BENCH)?)
}

fn cmd_order_check(r: &mut Run) -> CliResult<()> {
    let cfg = r.cfg;
    let problem = OrderProblem::standard();
    let mut t = Table::new(&[
        "solver",
        "steps",
        "error",
        "fitted_order",
        "residual",
        "floor",
        "floor_limited",
    ]);
    for solver in &cfg.order.solvers {
        let est = estimate_order(&problem, solver, &cfg.order.steps, cfg.order.trajectories, cfg.seed)?;
        for (&k, &e) in est.step_counts.iter().zip(&est.errors) {
            t.push(vec![
                solver.family.name().to_string(),
                k.to_string(),
                fmt_f64(e),
                fmt_f64(est.order),
                fmt_f64(est.residual),
                fmt_f64(est.floor),
                est.floor_limited.to_string(),
            ]);
        }
    }
    t.write(&r.path(paths::ORDER)?)
}
