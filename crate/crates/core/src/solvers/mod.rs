//! Reverse-process solvers: probability-flow Euler, DDIM with a noise
//! coefficient, and a first-order DPM SDE step; multi-step teacher solves,
//! whole trajectories, empirical order estimation and a fine-grid
//! consistency-function oracle.
//!
//! All steps move from a grid time `t_n` to an earlier grid time `t_m`.
//! Batched variants accept a separate pair of grid indices per row.

mod noise;
mod order;

use ndarray::{Array2, ArrayView2};

pub use noise::{NoiseSource, PerRowStreams};
pub use order::{estimate_order, fit_order, substep_errors, OrderEstimate, OrderProblem};

use crate::diffusion::{EpsPredictor, Schedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverFamily {
    PfEuler,
    Ddim,
    DpmSde1,
}

impl SolverFamily {
    pub fn name(self) -> &'static str {
        match self {
            SolverFamily::PfEuler => "pf-euler",
            SolverFamily::Ddim => "ddim",
            SolverFamily::DpmSde1 => "dpm-sde1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pf-euler" => Some(SolverFamily::PfEuler),
            "ddim" => Some(SolverFamily::Ddim),
            "dpm-sde1" => Some(SolverFamily::DpmSde1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub family: SolverFamily,
    /// Noise coefficient of the DDIM family; ignored by the others.
    pub eta: f64,
    /// Number of sub-steps `h` a teacher solve is split into.
    pub substeps: usize,
    /// Multiplier of the noise-prediction term of the DPM SDE step. The
    /// default 2 is the reverse-SDE form; 1 gives the ODE-like variant.
    pub dpm_drift_factor: f64,
    /// Which sigma scales the DPM SDE noise term.
    pub dpm_noise_scale: DpmNoiseScale,
}

/// The printed DPM SDE step scales its noise by `sigma` at the source time;
/// the cited solver uses the target time. Both are first-order consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DpmNoiseScale {
    #[default]
    Source,
    Target,
}

impl DpmNoiseScale {
    pub fn name(self) -> &'static str {
        match self {
            DpmNoiseScale::Source => "source",
            DpmNoiseScale::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(DpmNoiseScale::Source),
            "target" => Some(DpmNoiseScale::Target),
            _ => None,
        }
    }
}

impl SolverConfig {
    pub fn ddim(eta: f64) -> Self {
        Self {
            family: SolverFamily::Ddim,
            eta,
            substeps: 1,
            dpm_drift_factor: 2.0,
            dpm_noise_scale: DpmNoiseScale::Source,
        }
    }

    pub fn pf_euler() -> Self {
        Self {
            family: SolverFamily::PfEuler,
            ..Self::ddim(0.0)
        }
    }

    pub fn dpm_sde1() -> Self {
        Self {
            family: SolverFamily::DpmSde1,
            ..Self::ddim(0.0)
        }
    }

    pub fn with_substeps(mut self, h: usize) -> Self {
        self.substeps = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::config("solver sub-step count must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !self.dpm_drift_factor.is_finite() {
            return Err(Error::config("DPM drift factor must be finite"));
        }
        Ok(())
    }

    /// True when a step never draws noise.
    pub fn is_deterministic(&self) -> bool {
        match self.family {
            SolverFamily::PfEuler => true,
            SolverFamily::Ddim => self.eta == 0.0,
            SolverFamily::DpmSde1 => false,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::ddim(0.0)
    }
}

/// Injected noise scale `sigma(eta)` of a DDIM step between squared signal
/// coefficients `alpha_bar_n` (source) and `alpha_bar_m` (target), together
/// with the direction coefficient `sqrt(1 - alpha_bar_m - sigma^2)`.
pub fn sigma_eta_from_alpha_bar(eta: f64, alpha_bar_n: f64, alpha_bar_m: f64) -> Result<(f64, f64)> {
    let limit = 1.0 - alpha_bar_m;
    let sigma = if eta == 0.0 {
        0.0
    } else {
        eta * ((1.0 - alpha_bar_m) / (1.0 - alpha_bar_n)).sqrt() * (1.0 - alpha_bar_n / alpha_bar_m).max(0.0).sqrt()
    };
    let sigma_sq = sigma * sigma;
    if sigma_sq > limit {
        return Err(Error::InvalidEta { eta, sigma_sq, limit });
    }
    Ok((sigma, (limit - sigma_sq).sqrt()))
}

/// [`sigma_eta_from_alpha_bar`] for grid times `t_m < t_n`.
pub fn sigma_eta(eta: f64, t_n: f64, t_m: f64, schedule: &Schedule) -> Result<(f64, f64)> {
    let (n, m) = ordered_pair(t_n, t_m, schedule)?;
    if m == n {
        return Err(Error::contract("sigma_eta needs t_m < t_n"));
    }
    sigma_eta_from_alpha_bar(eta, schedule.alpha_bar(n), schedule.alpha_bar(m))
}

fn ordered_pair(t_n: f64, t_m: f64, schedule: &Schedule) -> Result<(usize, usize)> {
    let n = schedule.index_of(t_n)?;
    let m = schedule.index_of(t_m)?;
    if m > n {
        return Err(Error::contract(format!("step must go backward in time, got {t_n} -> {t_m}")));
    }
    Ok((n, m))
}

fn times_of(idx: &[usize], schedule: &Schedule) -> Vec<f64> {
    idx.iter().map(|&i| schedule.time(i)).collect()
}

fn check_rows(z: ArrayView2<f64>, from: &[usize], to: &[usize], schedule: &Schedule) -> Result<()> {
    if from.len() != z.nrows() || to.len() != z.nrows() {
        return Err(Error::contract("one (from, to) index pair per row is required"));
    }
    for (&n, &m) in from.iter().zip(to) {
        if n >= schedule.len() || m > n {
            return Err(Error::contract(format!("invalid step {n} -> {m}")));
        }
    }
    Ok(())
}

/// Row-wise DDIM(eta) step. Rows with `from == to` are copied unchanged.
/// One full batch of noise is drawn iff some row injects noise.
pub fn ddim_step_rows(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    from: &[usize],
    to: &[usize],
    eta: f64,
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    check_rows(z, from, to, schedule)?;
    let coefs = from
        .iter()
        .zip(to)
        .map(|(&n, &m)| {
            if n == m {
                Ok((0.0, 0.0))
            } else {
                sigma_eta_from_alpha_bar(eta, schedule.alpha_bar(n), schedule.alpha_bar(m))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let eps = eps_fn.eps(z, &times_of(from, schedule))?;
    let xi = if coefs.iter().any(|&(s, _)| s > 0.0) {
        let mut xi = Array2::zeros(z.raw_dim());
        noise.fill(&mut xi);
        Some(xi)
    } else {
        None
    };
    let mut out = z.to_owned();
    for (r, ((&n, &m), &(sigma, dir))) in from.iter().zip(to).zip(&coefs).enumerate() {
        if n == m {
            continue;
        }
        let (sa_n, s_n, sa_m) = (schedule.alpha_bar(n).sqrt(), schedule.sigma(n), schedule.alpha_bar(m).sqrt());
        for j in 0..z.ncols() {
            let x0_hat = (z[[r, j]] - s_n * eps[[r, j]]) / sa_n;
            let mut v = sa_m * x0_hat + dir * eps[[r, j]];
            if let Some(xi) = &xi {
                v += sigma * xi[[r, j]];
            }
            out[[r, j]] = v;
        }
    }
    Ok(out)
}

/// `z' = sqrt(ab_m) x0_hat + sqrt(1 - ab_m - sigma^2) eps_hat + sigma xi`
/// with `x0_hat = (z - sqrt(1 - ab_n) eps_hat) / sqrt(ab_n)`.
pub fn ddim_step(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    t_n: f64,
    t_m: f64,
    eta: f64,
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    let (n, m) = ordered_pair(t_n, t_m, schedule)?;
    let rows = z.nrows();
    ddim_step_rows(eps_fn, z, &vec![n; rows], &vec![m; rows], eta, schedule, noise)
}

/// Coefficients `(a, b, c)` of `z' = a z - b eps_hat + c xi` for the
/// first-order DPM SDE step between squared signal coefficients.
pub fn dpm_sde1_coefficients(
    alpha_bar_n: f64,
    alpha_bar_m: f64,
    drift_factor: f64,
    noise_scale: DpmNoiseScale,
) -> (f64, f64, f64) {
    let (sigma_n, sigma_m) = ((1.0 - alpha_bar_n).sqrt(), (1.0 - alpha_bar_m).sqrt());
    let lambda = |ab: f64, s: f64| (ab.sqrt() / s).ln();
    let h = lambda(alpha_bar_m, sigma_m) - lambda(alpha_bar_n, sigma_n);
    let a = alpha_bar_m.sqrt() / alpha_bar_n.sqrt();
    let b = drift_factor * sigma_m * h.exp_m1();
    let scale = match noise_scale {
        DpmNoiseScale::Source => sigma_n,
        DpmNoiseScale::Target => sigma_m,
    };
    let c = scale * (2.0 * h).exp_m1().max(0.0).sqrt();
    (a, b, c)
}

/// Row-wise DPM SDE step; rows with `from == to` are copied unchanged.
#[allow(clippy::too_many_arguments)]
pub fn dpm_sde1_step_rows(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    from: &[usize],
    to: &[usize],
    drift_factor: f64,
    noise_scale: DpmNoiseScale,
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    check_rows(z, from, to, schedule)?;
    for (&n, &m) in from.iter().zip(to) {
        if n != m && schedule.lambda(m) <= schedule.lambda(n) {
            return Err(Error::StepDirection {
                from: schedule.lambda(n),
                to: schedule.lambda(m),
            });
        }
    }
    let eps = eps_fn.eps(z, &times_of(from, schedule))?;
    let moving = from.iter().zip(to).any(|(n, m)| n != m);
    let mut xi = Array2::zeros(z.raw_dim());
    if moving {
        noise.fill(&mut xi);
    }
    let mut out = z.to_owned();
    for (r, (&n, &m)) in from.iter().zip(to).enumerate() {
        if n == m {
            continue;
        }
        let (a, b, c) = dpm_sde1_coefficients(schedule.alpha_bar(n), schedule.alpha_bar(m), drift_factor, noise_scale);
        for j in 0..z.ncols() {
            out[[r, j]] = a * z[[r, j]] - b * eps[[r, j]] + c * xi[[r, j]];
        }
    }
    Ok(out)
}

pub fn dpm_sde1_step(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    t_n: f64,
    t_m: f64,
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    let (n, m) = ordered_pair(t_n, t_m, schedule)?;
    if schedule.lambda(m) <= schedule.lambda(n) {
        return Err(Error::StepDirection {
            from: schedule.lambda(n),
            to: schedule.lambda(m),
        });
    }
    let rows = z.nrows();
    dpm_sde1_step_rows(
        eps_fn,
        z,
        &vec![n; rows],
        &vec![m; rows],
        2.0,
        DpmNoiseScale::Source,
        schedule,
        noise,
    )
}

/// Row-wise explicit Euler step of the probability-flow ODE.
pub fn pf_euler_step_rows(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    from: &[usize],
    to: &[usize],
    schedule: &Schedule,
) -> Result<Array2<f64>> {
    check_rows(z, from, to, schedule)?;
    let eps = eps_fn.eps(z, &times_of(from, schedule))?;
    let mut out = z.to_owned();
    for (r, (&n, &m)) in from.iter().zip(to).enumerate() {
        if n == m {
            continue;
        }
        let dt = schedule.time(m) - schedule.time(n);
        let f = schedule.drift(n);
        let k = schedule.diffusion_sq(n) / (2.0 * schedule.sigma(n));
        for j in 0..z.ncols() {
            out[[r, j]] = z[[r, j]] + dt * (f * z[[r, j]] + k * eps[[r, j]]);
        }
    }
    Ok(out)
}

/// `z' = z + (t_m - t_n) [f z + g^2 / (2 sigma) eps_hat]` at the source time.
pub fn pf_euler_step(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    t_n: f64,
    t_m: f64,
    schedule: &Schedule,
) -> Result<Array2<f64>> {
    let (n, m) = ordered_pair(t_n, t_m, schedule)?;
    let rows = z.nrows();
    pf_euler_step_rows(eps_fn, z, &vec![n; rows], &vec![m; rows], schedule)
}

/// One step of the configured family, row-wise.
pub fn step_rows(
    cfg: &SolverConfig,
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    from: &[usize],
    to: &[usize],
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    match cfg.family {
        SolverFamily::PfEuler => pf_euler_step_rows(eps_fn, z, from, to, schedule),
        SolverFamily::Ddim => ddim_step_rows(eps_fn, z, from, to, cfg.eta, schedule, noise),
        SolverFamily::DpmSde1 => dpm_sde1_step_rows(
            eps_fn,
            z,
            from,
            to,
            cfg.dpm_drift_factor,
            cfg.dpm_noise_scale,
            schedule,
            noise,
        ),
    }
}

/// Grid indices visited when splitting `from -> to` into `h` parts: the
/// nearest grid points to the uniform partition, starting at `from` and
/// ending at `to`.
pub fn sub_times(from: usize, to: usize, h: usize) -> Vec<usize> {
    let span = (from - to) as f64;
    (0..=h)
        .map(|j| (from as f64 - j as f64 * span / h as f64).round() as usize)
        .collect()
}

/// Row-wise multi-step solve; zero-length sub-steps are skipped.
pub fn multi_step_solve_rows(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    from: &[usize],
    to: &[usize],
    cfg: &SolverConfig,
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_rows(z, from, to, schedule)?;
    let partitions: Vec<Vec<usize>> = from.iter().zip(to).map(|(&n, &m)| sub_times(n, m, cfg.substeps)).collect();
    let mut state = z.to_owned();
    for j in 0..cfg.substeps {
        let a: Vec<usize> = partitions.iter().map(|p| p[j]).collect();
        let b: Vec<usize> = partitions.iter().map(|p| p[j + 1]).collect();
        if a == b {
            continue;
        }
        state = step_rows(cfg, eps_fn, state.view(), &a, &b, schedule, noise)?;
    }
    Ok(state)
}

/// Solves from `t_n` to `t_m` with `cfg.substeps` steps of `cfg.family`.
pub fn multi_step_solve(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    t_n: f64,
    t_m: f64,
    cfg: &SolverConfig,
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    let (n, m) = ordered_pair(t_n, t_m, schedule)?;
    let rows = z.nrows();
    multi_step_solve_rows(eps_fn, z, &vec![n; rows], &vec![m; rows], cfg, schedule, noise)
}

/// `steps + 1` grid times from `T` down to `tau`, as close to uniform as the
/// grid allows. More steps than grid intervals uses every grid point.
pub fn uniform_time_sequence(schedule: &Schedule, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::config("a time sequence needs at least one step"));
    }
    let last = schedule.len() - 1;
    let steps = steps.min(last);
    let mut idx: Vec<usize> = (0..=steps)
        .map(|k| ((last * (steps - k)) as f64 / steps as f64).round() as usize)
        .collect();
    idx.dedup();
    Ok(idx.into_iter().map(|i| schedule.time(i)).collect())
}

/// Chains solver steps along `time_sequence`, which must be strictly
/// decreasing grid times; each interval uses `cfg.substeps` sub-steps.
pub fn solve_trajectory(
    eps_fn: &dyn EpsPredictor,
    z_start: ArrayView2<f64>,
    time_sequence: &[f64],
    cfg: &SolverConfig,
    schedule: &Schedule,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    if time_sequence.len() < 2 {
        return Err(Error::contract("a trajectory needs a start and at least one target time"));
    }
    let idx = time_sequence
        .iter()
        .map(|&t| schedule.index_of(t))
        .collect::<Result<Vec<_>>>()?;
    if idx.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::contract("time sequence must be strictly decreasing"));
    }
    let rows = z_start.nrows();
    let mut z = z_start.to_owned();
    for w in idx.windows(2) {
        z = multi_step_solve_rows(eps_fn, z.view(), &vec![w[0]; rows], &vec![w[1]; rows], cfg, schedule, noise)?;
    }
    Ok(z)
}

/// Ground-truth consistency map `(z, t) -> z_tau`: a fine deterministic
/// probability-flow solve with `fine_steps` sub-steps equally spaced in
/// log-SNR, using the closed-form schedule so the sub-times need not lie on
/// the grid. Each sub-step is the DDIM update with the noise prediction taken
/// at the log-SNR midpoint, which makes the map second order while staying
/// exact whenever the noise prediction is constant along the path.
pub fn consistency_oracle(
    eps_fn: &dyn EpsPredictor,
    z: ArrayView2<f64>,
    t: f64,
    fine_steps: usize,
    schedule: &Schedule,
) -> Result<Array2<f64>> {
    if fine_steps < 256 {
        return Err(Error::config(format!(
            "consistency oracle needs >= 256 steps, got {fine_steps}"
        )));
    }
    let tau = schedule.tau();
    if t < tau || t > schedule.t_max() {
        return Err(Error::contract(format!("time {t} outside [tau, T]")));
    }
    let mut state = z.to_owned();
    if t == tau {
        return Ok(state);
    }
    let rows = z.nrows();
    let lambda = |ab: f64| 0.5 * (ab / (1.0 - ab)).ln();
    let (l_start, l_end) = (lambda(schedule.alpha_bar_at(t)), lambda(schedule.alpha_bar_at(tau)));
    let mut times = vec![t];
    for k in 1..fine_steps {
        let target = l_start + (l_end - l_start) * k as f64 / fine_steps as f64;
        times.push(time_at_lambda(schedule, target, tau, t));
    }
    times.push(tau);
    for w in times.windows(2) {
        let (ab_n, ab_m) = (schedule.alpha_bar_at(w[0]), schedule.alpha_bar_at(w[1]));
        let t_mid = time_at_lambda(schedule, 0.5 * (lambda(ab_n) + lambda(ab_m)), w[1], w[0]);
        let ab_s = schedule.alpha_bar_at(t_mid);
        let eps = eps_fn.eps(state.view(), &vec![w[0]; rows])?;
        let mut mid = state.clone();
        mid.zip_mut_with(&eps, |zv, &e| *zv = ddim_deterministic(*zv, e, ab_n, ab_s));
        let eps_mid = eps_fn.eps(mid.view(), &vec![t_mid; rows])?;
        state.zip_mut_with(&eps_mid, |zv, &e| *zv = ddim_deterministic(*zv, e, ab_n, ab_m));
    }
    Ok(state)
}

fn ddim_deterministic(z: f64, eps: f64, ab_n: f64, ab_m: f64) -> f64 {
    let x0_hat = (z - (1.0 - ab_n).sqrt() * eps) / ab_n.sqrt();
    ab_m.sqrt() * x0_hat + (1.0 - ab_m).sqrt() * eps
}

/// Inverts the (decreasing) log-SNR on `[lo, hi]` by bisection.
fn time_at_lambda(schedule: &Schedule, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let ab = schedule.alpha_bar_at(mid);
        if 0.5 * (ab / (1.0 - ab)).ln() > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}
