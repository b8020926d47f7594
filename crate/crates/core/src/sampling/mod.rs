//! Multi-step consistency sampling: alternate one-step jumps to the data
//! end with re-noising to the next, smaller time.

use ndarray::Array2;

use crate::diffusion::{CfgSetting, Guided, Label, MixtureSpec, Schedule, ScoreModel};
use crate::distill::{Branch, ConsistencyModel};
use crate::error::{Error, Result};
use crate::numerics::{streams, RngStream};
use crate::solvers::{solve_trajectory, uniform_time_sequence, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub vectors: Array2<f64>,
    pub generator: String,
    pub steps: usize,
    pub seed: u64,
}

impl SampleBatch {
    pub fn new(vectors: Array2<f64>, generator: &str, steps: usize, seed: u64) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::contract("a sample batch needs at least one row"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("sample batch contains non-finite values"));
        }
        Ok(Self {
            vectors,
            generator: generator.to_string(),
            steps,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// `K` grid times from `T` down, geometrically spaced toward `tau`:
/// `T (tau / T)^(i / K)` for `i < K`, snapped to the grid and kept strictly
/// decreasing.
pub fn default_time_sequence(schedule: &Schedule, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::config("a sampler needs at least one step"));
    }
    if steps > schedule.len() {
        return Err(Error::config(format!(
            "{steps} steps exceed the {}-point grid",
            schedule.len()
        )));
    }
    let (t_max, tau) = (schedule.t_max(), schedule.tau());
    let mut idx: Vec<usize> = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = t_max * (tau / t_max).powf(i as f64 / steps as f64);
        // Leave one grid point for each remaining step.
        let mut j = schedule.nearest_index(t).max(steps - 1 - i);
        if let Some(&prev) = idx.last() {
            j = j.min(prev - 1);
        }
        idx.push(j);
    }
    Ok(idx.into_iter().map(|j| schedule.time(j)).collect())
}

/// Draws `z_T ~ N(0, I)` and maps it to the data end at `times[0] = T`;
/// then for every later time re-noises the estimate to that time and maps
/// it back. A `K`-point sequence makes `K` student evaluations and `K`
/// Gaussian batch draws. Samples use the EMA weights `theta^-`.
pub fn multistep_consistency_sample(
    model: &ConsistencyModel,
    times: &[f64],
    setting: CfgSetting,
    schedule: &Schedule,
    rng: &mut RngStream,
    n: usize,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::contract("sample count must be at least 1"));
    }
    setting.validate()?;
    let idx = times.iter().map(|&t| schedule.index_of(t)).collect::<Result<Vec<_>>>()?;
    match idx.first() {
        Some(&first) if first == schedule.len() - 1 => {}
        _ => return Err(Error::contract("time sequence must start at T")),
    }
    if idx.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::contract("time sequence must be strictly decreasing"));
    }
    let dim = model.online.layout.data_dim;
    let labels: Vec<Label> = match setting.condition {
        Some(c) => vec![Some(c); n],
        None => Vec::new(),
    };
    let start = Array2::from_shape_vec((n, dim), rng.gauss_draw(n * dim)).expect("shape");
    let mut z = model.predict(Branch::Target, start.view(), &vec![schedule.t_max(); n], &labels)?;
    for &i in &idx[1..] {
        let xi = rng.gauss_draw(n * dim);
        let (sa, s) = (schedule.alpha_bar(i).sqrt(), schedule.sigma(i));
        let noisy = Array2::from_shape_fn((n, dim), |(r, c)| sa * z[[r, c]] + s * xi[r * dim + c]);
        z = model.predict(Branch::Target, noisy.view(), &vec![schedule.time(i); n], &labels)?;
    }
    SampleBatch::new(z, "student", times.len(), rng.seed())
}

/// Which labels the teacher is queried with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherLabels {
    /// The null label on every row.
    Null,
    /// A class per row drawn from the mixture weights, so that the
    /// class-conditional samples together follow the mixture.
    Mixture,
    Class(usize),
}

impl TeacherLabels {
    pub fn name(self) -> String {
        match self {
            TeacherLabels::Null => "null".into(),
            TeacherLabels::Mixture => "mixture".into(),
            TeacherLabels::Class(c) => format!("class:{c}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "null" => Some(TeacherLabels::Null),
            "mixture" => Some(TeacherLabels::Mixture),
            _ => s.strip_prefix("class:")?.parse().ok().map(TeacherLabels::Class),
        }
    }
}

/// Solves the teacher from `z_T ~ N(0, I)` over `steps` uniform grid
/// intervals. Labelled rows are blended with guidance weight `omega`
/// (1 is the plain conditional prediction). Starting noise, labels and
/// solver noise come from separate streams of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn teacher_sample(
    teacher: &ScoreModel,
    spec: &MixtureSpec,
    schedule: &Schedule,
    steps: usize,
    solver: &SolverConfig,
    labels: TeacherLabels,
    omega: f64,
    seed: u64,
    n: usize,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::contract("sample count must be at least 1"));
    }
    solver.validate()?;
    let dim = teacher.layout.data_dim;
    if dim != spec.dim() {
        return Err(Error::config("teacher and data dimensions differ"));
    }
    let rows: Vec<Label> = match labels {
        TeacherLabels::Null => vec![None; n],
        TeacherLabels::Mixture => spec
            .draw_labels(n, &mut RngStream::new(seed, streams::DATA))
            .into_iter()
            .map(Some)
            .collect(),
        TeacherLabels::Class(c) => vec![Some(c); n],
    };
    if labels != TeacherLabels::Null && !teacher.is_conditional() {
        return Err(Error::config("class labels need a conditional teacher"));
    }
    let guided = Guided::new(teacher, rows, if labels == TeacherLabels::Null { 0.0 } else { omega })?;
    let mut rng = RngStream::new(seed, streams::SAMPLING);
    let start = Array2::from_shape_vec((n, dim), rng.gauss_draw(n * dim)).expect("shape");
    let seq = uniform_time_sequence(schedule, steps)?;
    let out = solve_trajectory(
        &guided,
        start.view(),
        &seq,
        solver,
        schedule,
        &mut RngStream::new(seed, streams::SOLVER_NOISE),
    )?;
    SampleBatch::new(out, "teacher", seq.len() - 1, seed)
}
