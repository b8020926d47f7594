use ndarray::Array2;

use super::{solve_trajectory, uniform_time_sequence, PerRowStreams, SolverConfig};
use crate::diffusion::{AnalyticEps, MixtureSpec, Schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::metrics::w1_1d;

/// A 1-D mixture with a schedule fine enough for every step count under test.
#[derive(Debug, Clone)]
pub struct OrderProblem {
    pub spec: MixtureSpec,
    pub schedule: Schedule,
}

impl OrderProblem {
    pub fn new(spec: MixtureSpec, schedule: Schedule) -> Result<Self> {
        if spec.dim() != 1 {
            return Err(Error::contract("order estimation needs 1-D data"));
        }
        Ok(Self { spec, schedule })
    }

    /// Single Gaussian `N(0.5, 0.8^2)` under a log-SNR-linear schedule on a
    /// 1025-point grid, so 8 to 64 equal steps land on grid points and every
    /// step has the same log-SNR length.
    pub fn standard() -> Self {
        let spec = MixtureSpec::single_gaussian(0.5, 0.8).expect("valid spec");
        let kind = ScheduleKind::LogSnrLinear {
            lambda_max: 3.0,
            lambda_min: -3.0,
        };
        let schedule = Schedule::new(kind, 1025, 0.002, 1.0).expect("valid schedule");
        Self { spec, schedule }
    }

    /// Stratified starting states: the exact marginal quantiles at `T`.
    /// Deterministic solvers then carry no sampling noise at all.
    pub fn initial(&self, n: usize) -> Result<Array2<f64>> {
        let q = self
            .spec
            .marginal_quantiles_1d(n, self.schedule.alpha_bar(self.schedule.len() - 1))?;
        Ok(Array2::from_shape_vec((n, 1), q).expect("n x 1"))
    }

    /// Exact marginal quantiles at `tau`, used as the reference sample.
    pub fn reference(&self, n: usize) -> Result<Vec<f64>> {
        self.spec.marginal_quantiles_1d(n, self.schedule.alpha_bar(0))
    }

    /// Expected W1 between `n` exact samples and the target at `tau`:
    /// `sqrt(2 / (pi n)) * integral of sqrt(F (1 - F))`.
    pub fn monte_carlo_floor(&self, n: usize) -> Result<f64> {
        let ab = self.schedule.alpha_bar(0);
        let q = self.spec.marginal_quantiles_1d(2001, ab)?;
        let (lo, hi) = (q[0] - 1.0, q[q.len() - 1] + 1.0);
        let cells = 4000;
        let dx = (hi - lo) / cells as f64;
        let mut integral = 0.0;
        for i in 0..cells {
            let x = lo + (i as f64 + 0.5) * dx;
            let f = self.spec.marginal_cdf_1d(x, ab)?;
            integral += (f * (1.0 - f)).max(0.0).sqrt() * dx;
        }
        Ok((2.0 / (std::f64::consts::PI * n as f64)).sqrt() * integral)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderEstimate {
    pub step_counts: Vec<usize>,
    pub errors: Vec<f64>,
    /// Negative slope of `log error` against `log steps`.
    pub order: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub floor: f64,
    /// Set when the smallest error is within a small multiple of the
    /// Monte-Carlo floor, so the slope mostly measures sampling noise.
    pub floor_limited: bool,
}

/// Least-squares fit of `log error = c - order * log steps`.
pub fn fit_order(step_counts: &[usize], errors: &[f64], floor: f64) -> Result<OrderEstimate> {
    if step_counts.len() != errors.len() || step_counts.len() < 3 {
        return Err(Error::Fit("need at least three (steps, error) pairs".into()));
    }
    if step_counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Fit("step counts must be strictly increasing".into()));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::Fit("errors must be finite and positive".into()));
    }
    let xs: Vec<f64> = step_counts.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (my + slope * (x - mx))).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let min_err = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(OrderEstimate {
        step_counts: step_counts.to_vec(),
        errors: errors.to_vec(),
        order: -slope,
        residual,
        floor,
        floor_limited: min_err < 3.0 * floor,
    })
}

/// Solves `n_traj` stratified exact-start trajectories with the analytic noise
/// prediction for every step count and fits the convergence order of the
/// W1 distance to the exact marginal at `tau`.
pub fn estimate_order(
    problem: &OrderProblem,
    cfg: &SolverConfig,
    step_counts: &[usize],
    n_traj: usize,
    seed: u64,
) -> Result<OrderEstimate> {
    if n_traj < 2 {
        return Err(Error::config("order estimation needs at least two trajectories"));
    }
    let intervals = problem.schedule.len() - 1;
    if let Some(&k) = step_counts.iter().find(|&&k| k == 0 || intervals % k != 0) {
        return Err(Error::config(format!(
            "{k} steps do not divide the {intervals} grid intervals"
        )));
    }
    let eps = AnalyticEps {
        spec: &problem.spec,
        schedule: &problem.schedule,
    };
    let z_t = problem.initial(n_traj)?;
    let reference = problem.reference(n_traj)?;
    let mut errors = Vec::with_capacity(step_counts.len());
    for &k in step_counts {
        let seq = uniform_time_sequence(&problem.schedule, k)?;
        let mut noise = PerRowStreams::new(seed, 0, n_traj);
        let out = solve_trajectory(&eps, z_t.view(), &seq, cfg, &problem.schedule, &mut noise)?;
        errors.push(w1_1d(&out.column(0).to_vec(), &reference)?);
    }
    let floor = if cfg.is_deterministic() {
        0.0
    } else {
        problem.monte_carlo_floor(n_traj)?
    };
    fit_order(step_counts, &errors, floor)
}

/// Endpoint error of a teacher solve split into `h` sub-steps, for each
/// `h` in `substeps`: stratified exact starts at grid index `from`, one
/// stochastic solve to `to`, W1 against the exact marginal quantiles there.
/// Every `h` replays the same per-trajectory noise streams.
#[allow(clippy::too_many_arguments)]
pub fn substep_errors(
    spec: &MixtureSpec,
    schedule: &Schedule,
    cfg: &SolverConfig,
    from: usize,
    to: usize,
    substeps: &[usize],
    n_traj: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if to >= from || from >= schedule.len() {
        return Err(Error::config(format!(
            "need grid indices to < from < {}, got {to} and {from}",
            schedule.len()
        )));
    }
    if n_traj < 2 {
        return Err(Error::config("substep comparison needs at least two trajectories"));
    }
    let eps = AnalyticEps { spec, schedule };
    let start = spec.marginal_quantiles_1d(n_traj, schedule.alpha_bar(from))?;
    let start = Array2::from_shape_vec((n_traj, 1), start).expect("n x 1");
    let reference = spec.marginal_quantiles_1d(n_traj, schedule.alpha_bar(to))?;
    substeps
        .iter()
        .map(|&h| {
            let mut noise = PerRowStreams::new(seed, 0, n_traj);
            let out = super::multi_step_solve_rows(
                &eps,
                start.view(),
                &vec![from; n_traj],
                &vec![to; n_traj],
                &cfg.with_substeps(h),
                schedule,
                &mut noise,
            )?;
            w1_1d(&out.column(0).to_vec(), &reference)
        })
        .collect()
}
