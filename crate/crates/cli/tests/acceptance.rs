//! Exit criteria, run in order with one PASS/FAIL line each.
//!
//! `cargo test --release --test acceptance` runs everything; trailing
//! numbers select criteria, e.g. `-- 4 5 7`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;

use scott_lab::core::adversarial::{hinge_values, train_scott_full, Discriminator, GanConfig, LossWeights};
use scott_lab::core::diffusion::{
    train_teacher, CfgSetting, InputLayout, Label, MixtureSpec, Schedule, ScoreModel, TeacherConfig, TimeEmbedding,
};
use scott_lab::core::distill::{
    train_scott_cd_only, Branch, ConsistencyHead, ConsistencyModel, DistillConfig, StudentCheckpoint,
};
use scott_lab::core::gradcheck;
use scott_lab::core::metrics::{coverage, eval_report, w1_1d, MetricsReport};
use scott_lab::core::numerics::{streams, Activation, Params, RngStream};
use scott_lab::core::sampling::{default_time_sequence, multistep_consistency_sample, teacher_sample, TeacherLabels};
use scott_lab::core::solvers::{estimate_order, substep_errors, OrderProblem, SolverConfig};
use scott_lab::{run, Command, ExperimentConfig};

const TEACHER_SEED: u64 = 1;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const N_EVAL: usize = 4096;
const ETA_SDE: f64 = 0.2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type StudentKey = (u64, u64, Option<u64>);

/// Shared teacher and students; training time is charged to the first
/// criterion that needs each model.
struct Lab {
    spec: MixtureSpec,
    schedule: Schedule,
    teacher: Option<(ScoreModel, Duration)>,
    students: BTreeMap<StudentKey, (StudentCheckpoint, Duration)>,
}

impl Lab {
    fn new() -> Self {
        Self {
            spec: MixtureSpec::three_mode(),
            schedule: Schedule::default_cosine(),
            teacher: None,
            students: BTreeMap::new(),
        }
    }

    /// Default configuration: 20k iterations.
    fn teacher(&mut self) -> (&ScoreModel, Duration) {
        if self.teacher.is_none() {
            let start = Instant::now();
            let run = train_teacher(&TeacherConfig::default(), &self.spec, &self.schedule, TEACHER_SEED).expect("teacher trains");
            self.teacher = Some((run.ema, start.elapsed()));
        }
        let (t, d) = self.teacher.as_ref().unwrap();
        (t, *d)
    }

    fn distill_config(&self, eta: f64) -> DistillConfig {
        let base = DistillConfig::for_grid(self.schedule.len());
        DistillConfig {
            solver: SolverConfig::ddim(eta).with_substeps(base.solver.substeps),
            ..base
        }
    }

    /// CD-only student at `eta`, or the adversarial run when `lambda` is set.
    fn student(&mut self, eta: f64, seed: u64, lambda: Option<f64>) -> Result<(&StudentCheckpoint, Duration), String> {
        let key = (eta.to_bits(), seed, lambda.map(f64::to_bits));
        if !self.students.contains_key(&key) {
            let config = self.distill_config(eta);
            self.teacher();
            let teacher = &self.teacher.as_ref().unwrap().0;
            let start = Instant::now();
            let ckpt = match lambda {
                None => train_scott_cd_only(teacher, &config, &self.spec, &self.schedule, seed),
                Some(l) => {
                    let gan = GanConfig {
                        weights: LossWeights { lambda_adv: l },
                        ..GanConfig::default()
                    };
                    train_scott_full(teacher, &config, &gan, &self.spec, &self.schedule, seed).map(|(s, _)| s)
                }
            }
            .map_err(|e| e.to_string())?;
            self.students.insert(key, (ckpt, start.elapsed()));
        }
        let (c, d) = &self.students[&key];
        Ok((c, *d))
    }

    fn evaluate(&self, model: &ConsistencyModel, steps: usize, seed: u64) -> MetricsReport {
        let times = default_time_sequence(&self.schedule, steps).expect("time sequence");
        let mut rng = RngStream::new(seed, streams::SAMPLING);
        let batch = multistep_consistency_sample(model, &times, CfgSetting::unconditional(), &self.schedule, &mut rng, N_EVAL)
            .expect("sampling");
        let (reference, _) = self.spec.sample(N_EVAL, &mut RngStream::new(seed, streams::REFERENCE));
        let mut proj = RngStream::new(seed, streams::PROJECTIONS);
        eval_report(
            "student",
            steps,
            batch.vectors.view(),
            reference.view(),
            &self.spec,
            3,
            &mut proj,
        )
        .expect("metrics")
    }

    /// Reports for every seed at `steps`, plus the summed training time.
    fn reports(&mut self, eta: f64, lambda: Option<f64>, steps: usize) -> Result<(Vec<MetricsReport>, Duration), String> {
        let mut out = Vec::new();
        let mut spent = Duration::ZERO;
        for seed in SEEDS {
            let (ckpt, d) = self.student(eta, seed, lambda)?;
            let model = ckpt.model.clone();
            spent += d;
            out.push(self.evaluate(&model, steps, seed));
        }
        Ok((out, spent))
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_w1(r: &[MetricsReport]) -> f64 {
    mean(r.iter().map(|r| r.w1))
}

fn criterion_1(lab: &mut Lab) -> Outcome {
    let start = Instant::now();
    let (teacher, train_time) = lab.teacher();
    let teacher = teacher.clone();
    let steps = 64.min(lab.schedule.len() - 1);
    let sample = |labels, omega| {
        teacher_sample(
            &teacher,
            &lab.spec,
            &lab.schedule,
            steps,
            &SolverConfig::ddim(0.0),
            labels,
            omega,
            TEACHER_SEED,
            N_EVAL,
        )
        .expect("teacher sampling")
    };
    let (direct, _) = lab.spec.sample(N_EVAL, &mut RngStream::new(TEACHER_SEED, streams::REFERENCE));
    let direct = direct.column(0).to_vec();
    let w1 = w1_1d(&sample(TeacherLabels::Mixture, 1.0).vectors.column(0).to_vec(), &direct).unwrap();
    let w1_null = w1_1d(&sample(TeacherLabels::Null, 0.0).vectors.column(0).to_vec(), &direct).unwrap();
    let secs = (start.elapsed().max(train_time)).as_secs_f64();
    outcome(
        w1 < 0.05 && secs <= 180.0,
        format!("{steps}-step DDIM(0) W1 {w1:.4} < 0.05 (null branch {w1_null:.4}); {secs:.0} s <= 180 s"),
    )
}

fn criterion_2(lab: &mut Lab) -> Outcome {
    let start = Instant::now();
    let ode = lab.reports(0.0, None, 1);
    let sde = lab.reports(ETA_SDE, None, 1);
    let (Ok((ode, t_ode)), Ok((sde, t_sde))) = (ode, sde) else {
        return outcome(false, "a student run aborted".into());
    };
    let secs = (start.elapsed().max(t_ode + t_sde)).as_secs_f64();
    let modes = |r: &[MetricsReport]| r.iter().map(|r| r.mode_weight_max_error).fold(0.0, f64::max);
    let (m_ode, m_sde) = (modes(&ode), modes(&sde));
    let (w_ode, w_sde) = (mean_w1(&ode), mean_w1(&sde));
    outcome(
        m_ode < 0.1 && m_sde < 0.1 && w_sde <= 1.1 * w_ode && secs <= 600.0,
        format!(
            "mode error max ODE {m_ode:.3} SDE {m_sde:.3} < 0.1; 1-step W1 SDE {w_sde:.4} <= 1.1 x ODE {w_ode:.4} (ratio {:.3}); {secs:.0} s <= 600 s",
            w_sde / w_ode
        ),
    )
}

fn criterion_3(lab: &mut Lab) -> Outcome {
    let mut w = Vec::new();
    for k in [1, 2, 4] {
        match lab.reports(ETA_SDE, None, k) {
            Ok((r, _)) => w.push(mean_w1(&r)),
            Err(e) => return outcome(false, e),
        }
    }
    outcome(
        w[1] <= w[0] && w[2] <= 1.05 * w[1],
        format!("W1 1/2/4 steps {:.4} / {:.4} / {:.4}", w[0], w[1], w[2]),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let problem = OrderProblem::standard();
    let mut pass = true;
    let mut parts = Vec::new();
    for solver in [SolverConfig::dpm_sde1(), SolverConfig::pf_euler()] {
        let est = estimate_order(&problem, &solver, &[8, 16, 32, 64], 20_000, 1).expect("order estimate");
        let decreasing = est.errors.windows(2).all(|w| w[1] < w[0]);
        pass &= (0.5..=1.5).contains(&est.order) && decreasing;
        parts.push(format!(
            "{} order {:.3} errors {:?}",
            solver.family.name(),
            est.order,
            est.errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>()
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs <= 120.0, format!("{}; {secs:.0} s <= 120 s", parts.join("; ")))
}

fn criterion_5(lab: &mut Lab) -> Outcome {
    let e =
        substep_errors(&lab.spec, &lab.schedule, &SolverConfig::ddim(0.2), 48, 24, &[1, 3], 10_000, 1).expect("substep errors");
    outcome(e[1] <= e[0], format!("endpoint W1 h=3 {:.4} <= h=1 {:.4}", e[1], e[0]))
}

fn criterion_6(lab: &mut Lab) -> Outcome {
    let mut w = Vec::new();
    for eta in [0.0, 0.2, 0.6] {
        match lab.reports(eta, None, 1) {
            Ok((r, _)) => w.push((eta, mean_w1(&r))),
            Err(e) => return outcome(false, e),
        }
    }
    let best = w.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    outcome(
        best.0 != 0.6,
        format!(
            "1-step W1 by eta {}; minimum at eta {}",
            w.iter().map(|(e, v)| format!("{e}: {v:.4}")).collect::<Vec<_>>().join(", "),
            best.0
        ),
    )
}

fn criterion_7(lab: &mut Lab) -> Outcome {
    let tau = lab.schedule.tau();
    let mut mismatches = 0;
    for i in 0..1000u64 {
        let rng = &mut RngStream::new(77, i);
        let dim = 1 + rng.index(3);
        let n_classes = rng.index(4);
        let layout = InputLayout {
            data_dim: dim,
            time: TimeEmbedding::Fourier {
                frequencies: 1 + rng.index(3),
            },
            n_classes,
            t_max: lab.schedule.t_max(),
        };
        let mut net = ScoreModel::new(layout, &[1 + rng.index(8), 1 + rng.index(8)], Activation::Tanh, rng).unwrap();
        let scale = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let flat: Vec<f64> = rng.gauss_draw(net.net.param_count()).iter().map(|v| v * scale).collect();
        net.net.assign_flat(&flat).unwrap();
        let model = ConsistencyModel::new(net, ConsistencyHead::for_schedule(&lab.schedule), 0.95).unwrap();
        let rows = 1 + rng.index(8);
        let x_scale = 10f64.powf(6.0 * rng.uniform() - 3.0);
        let x = Array2::from_shape_vec((rows, dim), rng.gauss_draw(rows * dim).iter().map(|v| v * x_scale).collect()).unwrap();
        let labels: Vec<Label> = if n_classes == 0 {
            Vec::new()
        } else {
            (0..rows)
                .map(|_| {
                    let c = rng.index(n_classes);
                    (rng.uniform() < 0.8).then_some(c)
                })
                .collect()
        };
        let out = model.predict(Branch::Online, x.view(), &vec![tau; rows], &labels).unwrap();
        if out.iter().zip(x.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of 1000 random (theta, x) differ from x at tau"),
    )
}

fn criterion_8() -> Outcome {
    const TOL: f64 = 1e-4;
    type Suite = fn(usize, u64) -> scott_lab::core::Result<gradcheck::SuiteResult>;
    let suites: [(&str, Suite); 4] = [
        ("mlp_backward", gradcheck::mlp_backward_suite),
        ("dsm_loss", gradcheck::dsm_loss_suite),
        ("cd_loss", gradcheck::cd_loss_suite),
        ("disc_forward", gradcheck::disc_forward_suite),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, suite) in suites {
        let r = suite(100, 2024).expect("gradient suite");
        pass &= r.instances == 100 && r.passes(TOL);
        parts.push(format!("{name} {:.2e}", r.max_rel_error));
    }
    outcome(
        pass,
        format!("max relative error over 100 instances: {} (< 1e-4)", parts.join(", ")),
    )
}

fn criterion_9(lab: &mut Lab) -> Outcome {
    let hinge_ok = hinge_values(&[2.0], &[-2.0]).unwrap().0 == 0.0
        && hinge_values(&[0.0], &[0.0]).unwrap().0 == 2.0
        && hinge_values(&[0.0], &[-0.5]).unwrap().1 == 0.5;

    let (teacher, _) = lab.teacher();
    let disc = Discriminator::from_teacher(teacher, 4, 1.0, &mut RngStream::new(TEACHER_SEED, streams::DISCRIMINATOR)).unwrap();
    let fraction = disc.trainable_fraction();

    let zero = lab
        .student(ETA_SDE, SEEDS[0], Some(0.0))
        .map(|(c, _)| c.model.online.net.flatten());
    let plain = lab.student(ETA_SDE, SEEDS[0], None).map(|(c, _)| c.model.clone());
    let bit_equal = match (zero, plain) {
        (Ok(z), Ok(p)) => {
            let q = p.online.net.flatten();
            z.len() == q.len() && z.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits())
        }
        _ => false,
    };

    let mut finite = true;
    let mut completed = 0;
    let mut gan_w1 = Vec::new();
    for seed in SEEDS {
        match lab.student(ETA_SDE, seed, Some(0.4)) {
            Ok((c, _)) => {
                completed += usize::from(c.iterations_done == 2000);
                finite &= c
                    .records
                    .iter()
                    .all(|r| r.cd_loss.is_finite() && r.gen_loss.is_finite() && r.disc_loss.is_finite());
                let model = c.model.clone();
                gan_w1.push(lab.evaluate(&model, 1, seed).w1);
            }
            Err(_) => finite = false,
        }
    }
    let cd = lab.reports(ETA_SDE, None, 1).map(|(r, _)| mean_w1(&r)).unwrap_or(f64::NAN);
    let gan = if gan_w1.len() == SEEDS.len() { mean(gan_w1) } else { f64::NAN };
    outcome(
        hinge_ok && fraction < 0.10 && bit_equal && finite && completed == SEEDS.len() && gan <= 1.1 * cd,
        format!(
            "hinge examples {}; trainable fraction {fraction:.4} < 0.10; lambda 0 bit-equal {bit_equal}; \
             lambda 0.4 runs completed {completed}/5, losses finite {finite}; 1-step W1 {gan:.4} <= 1.1 x CD-only {cd:.4}",
            if hinge_ok { "exact" } else { "wrong" }
        ),
    )
}

fn brute_force_coverage(real: &Array2<f64>, fake: &Array2<f64>, k: usize) -> f64 {
    let d = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let n = real.nrows();
    let mut covered = 0;
    for i in 0..n {
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d(real.row(i), real.row(j))).collect();
        others.sort_by(f64::total_cmp);
        let radius = others[k - 1];
        if fake.rows().into_iter().any(|f| d(real.row(i), f) <= radius) {
            covered += 1;
        }
    }
    covered as f64 / n as f64
}

fn criterion_10(lab: &mut Lab) -> Outcome {
    let mut exact = 0;
    for i in 0..100u64 {
        let rng = &mut RngStream::new(1010, i);
        let dim = 1 + rng.index(3);
        let n = 5 + rng.index(46);
        let m = 1 + rng.index(50);
        let k = 1 + rng.index(4);
        // A coarse lattice forces ties between distances.
        let draw = |rng: &mut RngStream, rows: usize| {
            Array2::from_shape_vec(
                (rows, dim),
                rng.gauss_draw(rows * dim).iter().map(|v| (v * 4.0).round() / 4.0).collect(),
            )
            .unwrap()
        };
        let real = draw(rng, n);
        let fake = draw(rng, m);
        if coverage(real.view(), fake.view(), k).unwrap() == brute_force_coverage(&real, &fake, k) {
            exact += 1;
        }
    }
    let cov = |r: Result<(Vec<MetricsReport>, Duration), String>| {
        r.map(|(r, _)| mean(r.iter().map(|r| r.coverage))).unwrap_or(f64::NAN)
    };
    let ode = cov(lab.reports(0.0, None, 1));
    let sde = cov(lab.reports(ETA_SDE, None, 1));
    outcome(
        exact == 100 && sde >= ode - 0.02,
        format!("coverage equals brute force on {exact}/100 instances; coverage SDE {sde:.4} >= ODE {ode:.4} - 0.02"),
    )
}

const TINY: &str = "\
teacher.hidden = 16,16
teacher.iterations = 400
distill.iterations = 60
sample.count = 512
sample.steps = 1,2,4
sample.seeds = 1,2
sample.teacher = true
eval.reference = 512
bench.trajectories = 1000
order.trajectories = 1000
gan.enabled = true
";

fn run_all(dir: &Path) -> scott_lab::CliResult<()> {
    let cfg_path = dir.join("input.cfg");
    std::fs::write(&cfg_path, TINY).unwrap();
    let cfg = ExperimentConfig::load(Some(&cfg_path), &[], Some(3), Some(&dir.join("run")))?;
    for c in Command::ALL {
        run(c, &cfg)?;
    }
    Ok(())
}

fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e != "manifest") {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_11() -> Outcome {
    // Same output directory both times so the resolved configs are equal.
    let dir = tempfile::tempdir().unwrap();
    let first = run_all(dir.path()).and_then(|_| {
        std::fs::rename(dir.path().join("run"), dir.path().join("first")).unwrap();
        run_all(dir.path())
    });
    if let Err(e) = first {
        return outcome(false, format!("pipeline failed: {e:?}"));
    }
    let (fa, fb) = (artifacts(&dir.path().join("first")), artifacts(&dir.path().join("run")));
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let ckpts = fa.keys().filter(|k| k.ends_with(".ckpt")).count();
    let csvs = fa.keys().filter(|k| k.ends_with(".csv")).count();
    outcome(
        differing.is_empty() && fa.len() == fb.len() && ckpts == 3 && csvs > 0,
        format!(
            "all six commands twice: {ckpts} checkpoints, {csvs} CSV files, {} other files; differing {differing:?}",
            fa.len() - ckpts - csvs
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| selected.is_empty() || selected.contains(&i);
    let mut lab = Lab::new();
    let mut failed = Vec::new();
    for i in 1..=11 {
        if !wanted(i) {
            continue;
        }
        let start = Instant::now();
        let o = match i {
            1 => criterion_1(&mut lab),
            2 => criterion_2(&mut lab),
            3 => criterion_3(&mut lab),
            4 => criterion_4(),
            5 => criterion_5(&mut lab),
            6 => criterion_6(&mut lab),
            7 => criterion_7(&mut lab),
            8 => criterion_8(),
            9 => criterion_9(&mut lab),
            10 => criterion_10(&mut lab),
            _ => criterion_11(),
        };
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {i:>2} {verdict}: {} [{:.0} s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(i);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
