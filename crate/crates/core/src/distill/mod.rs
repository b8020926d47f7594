//! Consistency distillation: the boundary-respecting consistency head, the
//! online/target student pair, the CD loss against a multi-step teacher
//! solve, and the training loop.

mod train;

use ndarray::{Array2, ArrayView2};

pub use train::{train_scott_cd_only, CdTrainer, DistillRecord, StudentCheckpoint, TrainAbort};

use crate::diffusion::{perturb_rows, EpsPredictor, Label, Schedule, ScoreModel};
use crate::error::{Error, Result};
use crate::numerics::{Ema, MlpParams, RngStream, Tape};
use crate::solvers::{multi_step_solve_rows, NoiseSource, SolverConfig};

/// Data-scale constant of the head.
pub const SIGMA_DATA: f64 = 0.5;

/// `f(z, t) = c_skip(t) z + c_out(t) F(z, t)` with `c_skip(tau) = 1` and
/// `c_out(tau) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyHead {
    pub tau: f64,
    pub sigma_data: f64,
}

impl ConsistencyHead {
    pub fn new(tau: f64, sigma_data: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite() && sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::config(format!("invalid head: tau={tau}, sigma_data={sigma_data}")));
        }
        Ok(Self { tau, sigma_data })
    }

    pub fn for_schedule(schedule: &Schedule) -> Self {
        Self {
            tau: schedule.tau(),
            sigma_data: SIGMA_DATA,
        }
    }

    fn check(&self, t: f64) -> Result<()> {
        if t < self.tau || t.is_nan() {
            return Err(Error::contract(format!(
                "consistency head evaluated at t={t} < tau={}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        let d = t - self.tau;
        let s2 = self.sigma_data * self.sigma_data;
        s2 / (d * d + s2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        self.sigma_data * (t - self.tau) / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    /// Row `i` is evaluated at `t[i]`. Rows at the boundary return `z`
    /// unchanged whatever the raw output holds.
    pub fn apply(&self, raw: ArrayView2<f64>, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        if raw.dim() != z.dim() || t.len() != z.nrows() {
            return Err(Error::contract("head inputs disagree in shape"));
        }
        let mut out = z.to_owned();
        for (i, &ti) in t.iter().enumerate() {
            self.check(ti)?;
            let c_out = self.c_out(ti);
            if c_out == 0.0 {
                continue;
            }
            let c_skip = self.c_skip(ti);
            for j in 0..z.ncols() {
                out[[i, j]] = c_skip * z[[i, j]] + c_out * raw[[i, j]];
            }
        }
        Ok(out)
    }
}

/// Which parameter set of the student to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `theta`, the trained weights.
    Online,
    /// `theta^-`, the EMA target.
    Target,
}

/// Online and EMA-target students sharing one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    pub online: ScoreModel,
    pub target: ScoreModel,
    pub head: ConsistencyHead,
    pub ema_rate: f64,
}

/// Activations of an online evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct OnlineForward {
    pub output: Array2<f64>,
    pub tape: Tape,
    pub c_out: Vec<f64>,
}

impl ConsistencyModel {
    /// Both branches start from `init`.
    pub fn new(init: ScoreModel, head: ConsistencyHead, ema_rate: f64) -> Result<Self> {
        if !(ema_rate > 0.0 && ema_rate <= 1.0) {
            return Err(Error::config(format!("EMA rate must lie in (0, 1], got {ema_rate}")));
        }
        Ok(Self {
            target: init.clone(),
            online: init,
            head,
            ema_rate,
        })
    }

    fn branch(&self, branch: Branch) -> &ScoreModel {
        match branch {
            Branch::Online => &self.online,
            Branch::Target => &self.target,
        }
    }

    pub fn predict(&self, branch: Branch, z: ArrayView2<f64>, t: &[f64], labels: &[Label]) -> Result<Array2<f64>> {
        let raw = self.branch(branch).predict(z, t, labels)?;
        self.head.apply(raw.view(), z, t)
    }

    pub fn forward_online(&self, z: ArrayView2<f64>, t: &[f64], labels: &[Label]) -> Result<OnlineForward> {
        for &ti in t {
            self.head.check(ti)?;
        }
        let (raw, tape) = self.online.forward(z, t, labels)?;
        let output = self.head.apply(raw.view(), z, t)?;
        Ok(OnlineForward {
            output,
            tape,
            c_out: t.iter().map(|&ti| self.head.c_out(ti)).collect(),
        })
    }

    /// Parameter gradient for a cotangent on the head output.
    pub fn backward_online(&self, fwd: &OnlineForward, cot: ArrayView2<f64>) -> Result<MlpParams> {
        if cot.dim() != fwd.output.dim() {
            return Err(Error::contract("cotangent shape differs from the forward output"));
        }
        let mut raw_cot = cot.to_owned();
        for (mut row, &c) in raw_cot.rows_mut().into_iter().zip(&fwd.c_out) {
            row *= c;
        }
        Ok(self.online.net.backward(&fwd.tape, raw_cot.view())?.0)
    }

    /// `theta^- <- mu theta^- + (1 - mu) theta`.
    pub fn update_target(&mut self) -> Result<()> {
        let mut ema = Ema {
            shadow: std::mem::replace(&mut self.target.net, self.online.net.zeros_like()),
            rate: self.ema_rate,
        };
        let r = ema.update(&self.online.net);
        self.target.net = ema.shadow;
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    SquaredL2,
    L1,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::SquaredL2 => "squared-l2",
            Distance::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared-l2" | "l2" => Some(Distance::SquaredL2),
            "l1" => Some(Distance::L1),
            _ => None,
        }
    }
}

/// How the student's weights are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    Teacher,
    Random,
}

impl StudentInit {
    pub fn name(self) -> &'static str {
        match self {
            StudentInit::Teacher => "teacher",
            StudentInit::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher" => Some(StudentInit::Teacher),
            "random" => Some(StudentInit::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// `k` in `t_m = t_{n-k}`.
    pub grid_skip: usize,
    /// Teacher solver; its `substeps` is `h`.
    pub solver: SolverConfig,
    pub distance: Distance,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// EMA rate `mu` of the target branch.
    pub ema_rate: f64,
    /// Guidance scale applied to the teacher; with 0 the teacher and the
    /// student run unconditionally.
    pub teacher_omega: f64,
    pub init: StudentInit,
    pub sigma_data: f64,
    pub log_every: usize,
}

/// `ceil(24 / 1000 * N)`, the large-scale skip scaled to an `N`-point grid.
pub fn default_grid_skip(n_grid: usize) -> usize {
    ((24 * n_grid) as f64 / 1000.0).ceil().max(1.0) as usize
}

impl DistillConfig {
    pub fn for_grid(n_grid: usize) -> Self {
        Self {
            grid_skip: default_grid_skip(n_grid),
            solver: SolverConfig::ddim(0.2).with_substeps(3),
            distance: Distance::L1,
            iterations: 2000,
            batch_size: 256,
            learning_rate: 1e-3,
            ema_rate: 0.95,
            teacher_omega: 0.0,
            init: StudentInit::Teacher,
            sigma_data: SIGMA_DATA,
            log_every: 100,
        }
    }

    pub fn validate(&self, n_grid: usize) -> Result<()> {
        self.solver.validate()?;
        if self.grid_skip == 0 || self.grid_skip >= n_grid {
            return Err(Error::config(format!(
                "grid skip must satisfy 1 <= k < {n_grid}, got {}",
                self.grid_skip
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::config(format!("EMA rate must lie in (0, 1], got {}", self.ema_rate)));
        }
        if !(self.teacher_omega >= 0.0 && self.teacher_omega.is_finite()) {
            return Err(Error::config("teacher guidance scale must be finite and >= 0"));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::config("sigma_data must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log interval must be positive"));
        }
        Ok(())
    }
}

/// 1-based target index `max(1, n - k)`.
pub fn pick_subinterval(n: usize, grid_skip: usize) -> usize {
    n.saturating_sub(grid_skip).max(1)
}

/// Random streams consumed by one CD evaluation.
#[derive(Debug, Clone)]
pub struct CdStreams {
    pub times: RngStream,
    pub noise: RngStream,
    pub solver: RngStream,
}

impl CdStreams {
    pub fn new(seed: u64) -> Self {
        use crate::numerics::streams;
        Self {
            times: RngStream::new(seed, streams::TIMES),
            noise: RngStream::new(seed, streams::FORWARD_NOISE),
            solver: RngStream::new(seed, streams::SOLVER_NOISE),
        }
    }
}

/// Everything a CD evaluation produces; the online forward pass is kept so
/// further loss terms on the same student output can share its backward.
#[derive(Debug, Clone)]
pub struct CdOutput {
    pub loss: f64,
    /// `d loss / d f_theta(z_n, t_n)`.
    pub cot: Array2<f64>,
    pub online: OnlineForward,
    pub target: Array2<f64>,
    /// 0-based grid indices of `t_n` and `t_m`.
    pub n_index: Vec<usize>,
    pub m_index: Vec<usize>,
    pub t_n: Vec<f64>,
}

/// Per-row distance between online and target outputs, with its cotangent
/// scaled for the batch mean.
fn distance_and_cot(distance: Distance, f: &Array2<f64>, g: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = f.nrows() as f64;
    let diff = f - g;
    match distance {
        Distance::SquaredL2 => (diff.iter().map(|d| d * d).sum::<f64>() / b, diff * (2.0 / b)),
        Distance::L1 => (
            diff.iter().map(|d| d.abs()).sum::<f64>() / b,
            diff.mapv(|d| {
                if d > 0.0 {
                    1.0 / b
                } else if d < 0.0 {
                    -1.0 / b
                } else {
                    0.0
                }
            }),
        ),
    }
}

/// Forward CD evaluation with explicit grid indices (0-based, `m <= n`)
/// and forward noise.
#[allow(clippy::too_many_arguments)]
pub fn cd_forward_at(
    model: &ConsistencyModel,
    teacher: &dyn EpsPredictor,
    x0: ArrayView2<f64>,
    student_labels: &[Label],
    n_index: &[usize],
    m_index: &[usize],
    eps: ArrayView2<f64>,
    schedule: &Schedule,
    config: &DistillConfig,
    solver_noise: &mut dyn NoiseSource,
) -> Result<CdOutput> {
    let z_n = perturb_rows(x0, n_index, eps, schedule)?;
    let z_m = multi_step_solve_rows(teacher, z_n.view(), n_index, m_index, &config.solver, schedule, solver_noise)?;
    let t_n: Vec<f64> = n_index.iter().map(|&i| schedule.time(i)).collect();
    let t_m: Vec<f64> = m_index.iter().map(|&i| schedule.time(i)).collect();
    let online = model.forward_online(z_n.view(), &t_n, student_labels)?;
    let target = model.predict(Branch::Target, z_m.view(), &t_m, student_labels)?;
    let (loss, cot) = distance_and_cot(config.distance, &online.output, &target);
    Ok(CdOutput {
        loss,
        cot,
        online,
        target,
        n_index: n_index.to_vec(),
        m_index: m_index.to_vec(),
        t_n,
    })
}

/// Draws `n` uniformly from `{2..N}`, sets `m = max(1, n - k)`, draws the
/// forward noise and evaluates the loss. The teacher solve is a constant
/// for the gradient, as is the whole target branch.
pub fn cd_forward(
    model: &ConsistencyModel,
    teacher: &dyn EpsPredictor,
    x0: ArrayView2<f64>,
    student_labels: &[Label],
    schedule: &Schedule,
    config: &DistillConfig,
    streams: &mut CdStreams,
) -> Result<CdOutput> {
    let rows = x0.nrows();
    if rows == 0 {
        return Err(Error::contract("empty batch"));
    }
    let n_grid = schedule.len();
    let n_index: Vec<usize> = (0..rows).map(|_| streams.times.index(n_grid - 1) + 1).collect();
    let m_index: Vec<usize> = n_index
        .iter()
        .map(|&i| pick_subinterval(i + 1, config.grid_skip) - 1)
        .collect();
    let eps = Array2::from_shape_vec(x0.raw_dim(), streams.noise.gauss_draw(rows * x0.ncols())).expect("shape");
    cd_forward_at(
        model,
        teacher,
        x0,
        student_labels,
        &n_index,
        &m_index,
        eps.view(),
        schedule,
        config,
        &mut streams.solver,
    )
}

/// Loss value and gradient with respect to the online weights.
pub fn cd_loss(
    model: &ConsistencyModel,
    teacher: &dyn EpsPredictor,
    x0: ArrayView2<f64>,
    student_labels: &[Label],
    schedule: &Schedule,
    config: &DistillConfig,
    streams: &mut CdStreams,
) -> Result<(f64, MlpParams)> {
    let out = cd_forward(model, teacher, x0, student_labels, schedule, config, streams)?;
    let grads = model.backward_online(&out.online, out.cot.view())?;
    Ok((out.loss, grads))
}
