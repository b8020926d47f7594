//! Variance-preserving noise schedules on a uniform time grid.
//!
//! `alpha_bar(t)` is the squared signal coefficient, so a noisy state is
//! `z_t = sqrt(alpha_bar) x + sigma x eps` with `sigma^2 = 1 - alpha_bar`.

use crate::error::{Error, Result};

/// Offset of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
/// `alpha_bar(T)` reached by the (time-rescaled) cosine schedule.
pub const COSINE_TERMINAL_ALPHA_BAR: f64 = 1e-3;
const LINEAR_BETA_MIN: f64 = 0.1;
const LINEAR_BETA_MAX: f64 = 20.0;

/// Largest admissible `alpha_bar(T)`.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 5e-3;
/// Smallest admissible `alpha_bar(tau)`.
pub const MIN_BOUNDARY_ALPHA_BAR: f64 = 0.98;

/// Default boundary time as a fraction of the terminal time.
pub const DEFAULT_TAU_FRACTION: f64 = 0.002;
pub const DEFAULT_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// Squared-cosine schedule, time-rescaled so that `alpha_bar(T)` equals
    /// [`COSINE_TERMINAL_ALPHA_BAR`].
    Cosine,
    /// Continuous linear-beta VP schedule (`beta` from 0.1 to 20 over `[0, T]`).
    LinearBeta,
    /// `alpha_bar(t) = exp(-2 rate t)`, i.e. a constant drift `f_t = -rate`.
    /// Used to pose linear test problems for the ODE integrators.
    Exponential { rate: f64 },
    /// Log-SNR falling linearly from `lambda_max` at `t = 0` to `lambda_min`
    /// at `T`, so equal steps in `t` are equal steps in log-SNR.
    LogSnrLinear { lambda_max: f64, lambda_min: f64 },
}

impl ScheduleKind {
    pub fn name(&self) -> String {
        match self {
            ScheduleKind::Cosine => "cosine".into(),
            ScheduleKind::LinearBeta => "linear-beta".into(),
            ScheduleKind::Exponential { rate } => format!("exponential:{rate}"),
            ScheduleKind::LogSnrLinear { lambda_max, lambda_min } => format!("log-snr:{lambda_max}:{lambda_min}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(ScheduleKind::Cosine),
            "linear-beta" | "linear" => Some(ScheduleKind::LinearBeta),
            _ => {
                if let Some(r) = s.strip_prefix("exponential:") {
                    return r.parse().ok().map(|rate| ScheduleKind::Exponential { rate });
                }
                let (hi, lo) = s.strip_prefix("log-snr:")?.split_once(':')?;
                Some(ScheduleKind::LogSnrLinear {
                    lambda_max: hi.parse().ok()?,
                    lambda_min: lo.parse().ok()?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    tau: f64,
    t_max: f64,
    /// Cosine phase reached at `t_max`.
    cosine_end: f64,
    times: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    lambda: Vec<f64>,
    drift: Vec<f64>,
    diffusion_sq: Vec<f64>,
}

fn cosine_raw(u: f64) -> f64 {
    let phase = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
    (phase(u) / phase(0.0)).powi(2)
}

impl Schedule {
    /// Builds a schedule with `n_grid` uniformly spaced times from `tau` to `t_max`.
    pub fn new(kind: ScheduleKind, n_grid: usize, tau: f64, t_max: f64) -> Result<Self> {
        if n_grid < 8 {
            return Err(Error::Schedule(format!("grid needs at least 8 points, got {n_grid}")));
        }
        if !(tau > 0.0 && tau < t_max && t_max.is_finite()) {
            return Err(Error::Schedule(format!("need 0 < tau < T, got tau={tau}, T={t_max}")));
        }
        if let ScheduleKind::Exponential { rate } = kind {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::Schedule(format!("exponential rate must be positive, got {rate}")));
            }
        }
        if let ScheduleKind::LogSnrLinear { lambda_max, lambda_min } = kind {
            if !(lambda_max.is_finite() && lambda_min.is_finite() && lambda_max > lambda_min) {
                return Err(Error::Schedule(format!(
                    "log-SNR must decrease, got {lambda_max} -> {lambda_min}"
                )));
            }
        }
        // Phase u_end with cosine_raw(u_end) = terminal value.
        let c0 = ((COSINE_OFFSET / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2).cos();
        let cosine_end =
            (1.0 + COSINE_OFFSET) * (COSINE_TERMINAL_ALPHA_BAR.sqrt() * c0).acos() / std::f64::consts::FRAC_PI_2 - COSINE_OFFSET;

        let mut s = Self {
            kind,
            tau,
            t_max,
            cosine_end,
            times: Vec::new(),
            alpha_bar: Vec::new(),
            sigma: Vec::new(),
            lambda: Vec::new(),
            drift: Vec::new(),
            diffusion_sq: Vec::new(),
        };
        let dt = (t_max - tau) / (n_grid - 1) as f64;
        s.times = (0..n_grid)
            .map(|i| if i == n_grid - 1 { t_max } else { tau + i as f64 * dt })
            .collect();
        s.alpha_bar = s.times.iter().map(|&t| s.alpha_bar_at(t)).collect();
        s.sigma = s.alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        s.lambda = s.alpha_bar.iter().zip(&s.sigma).map(|(a, sg)| (a.sqrt() / sg).ln()).collect();

        for w in s.alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::Schedule("alpha_bar is not strictly decreasing".into()));
            }
        }
        if s.alpha_bar[0] < MIN_BOUNDARY_ALPHA_BAR {
            return Err(Error::Schedule(format!(
                "alpha_bar(tau) = {} is too far from 1",
                s.alpha_bar[0]
            )));
        }
        let terminal = *s.alpha_bar.last().expect("non-empty grid");
        if terminal > MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::Schedule(format!("alpha_bar(T) = {terminal} is not small enough")));
        }

        // Finite-difference derivatives: central inside, one-sided at the ends.
        let n = n_grid;
        let deriv = |v: &[f64], i: usize| -> f64 {
            let t = &s.times;
            if i == 0 {
                (v[1] - v[0]) / (t[1] - t[0])
            } else if i == n - 1 {
                (v[n - 1] - v[n - 2]) / (t[n - 1] - t[n - 2])
            } else {
                (v[i + 1] - v[i - 1]) / (t[i + 1] - t[i - 1])
            }
        };
        let log_alpha: Vec<f64> = s.alpha_bar.iter().map(|a| 0.5 * a.ln()).collect();
        let sigma_sq: Vec<f64> = s.alpha_bar.iter().map(|a| 1.0 - a).collect();
        s.drift = (0..n).map(|i| deriv(&log_alpha, i)).collect();
        s.diffusion_sq = (0..n).map(|i| deriv(&sigma_sq, i) - 2.0 * s.drift[i] * sigma_sq[i]).collect();
        Ok(s)
    }

    /// Cosine schedule on the default 64-point grid with `tau = 0.002 T`, `T = 1`.
    pub fn default_cosine() -> Self {
        Self::new(ScheduleKind::Cosine, DEFAULT_GRID, DEFAULT_TAU_FRACTION, 1.0).expect("valid defaults")
    }

    /// Closed-form `alpha_bar` at any `t` in `[0, T]`; agrees bit-exactly with
    /// the stored grid values.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => cosine_raw(t / self.t_max * self.cosine_end),
            ScheduleKind::LinearBeta => {
                let u = t / self.t_max;
                let integral = self.t_max * (LINEAR_BETA_MIN * u + 0.5 * (LINEAR_BETA_MAX - LINEAR_BETA_MIN) * u * u);
                (-integral).exp()
            }
            ScheduleKind::Exponential { rate } => (-2.0 * rate * t).exp(),
            ScheduleKind::LogSnrLinear { lambda_max, lambda_min } => {
                let lambda = lambda_max + (lambda_min - lambda_max) * (t / self.t_max);
                1.0 / (1.0 + (-2.0 * lambda).exp())
            }
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bar[i]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma[i]
    }

    pub fn lambda(&self, i: usize) -> f64 {
        self.lambda[i]
    }

    /// `f_t = d log sqrt(alpha_bar) / dt`.
    pub fn drift(&self, i: usize) -> f64 {
        self.drift[i]
    }

    /// `g_t^2 = d sigma^2/dt - 2 f_t sigma^2`.
    pub fn diffusion_sq(&self, i: usize) -> f64 {
        self.diffusion_sq[i]
    }

    /// Grid index of `t`; times within a relative `1e-9` of a grid point match.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let n = self.times.len();
        let dt = (self.t_max - self.tau) / (n - 1) as f64;
        let pos = (t - self.tau) / dt;
        if !pos.is_finite() || pos < -0.5 || pos > n as f64 - 0.5 {
            return Err(Error::OffGrid { t });
        }
        let i = pos.round() as usize;
        if (self.times[i] - t).abs() <= 1e-9 * self.t_max {
            Ok(i)
        } else {
            Err(Error::OffGrid { t })
        }
    }

    /// Index of the grid point closest to `t` (clamped to the grid).
    pub fn nearest_index(&self, t: f64) -> usize {
        let n = self.times.len();
        let dt = (self.t_max - self.tau) / (n - 1) as f64;
        ((t - self.tau) / dt).round().clamp(0.0, (n - 1) as f64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::default_cosine();
        assert!(s.alpha_bar(0) >= 0.999, "{}", s.alpha_bar(0));
        assert!(s.sigma(0) <= 0.05);
        let last = s.alpha_bar(s.len() - 1);
        assert!((last - COSINE_TERMINAL_ALPHA_BAR).abs() < 1e-12, "{last}");
        assert_eq!(s.time(s.len() - 1), 1.0);
        assert_eq!(s.time(0), 0.002);
    }

    #[test]
    fn vp_identity_and_positive_diffusion() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::LinearBeta] {
            for n in [8, 64, 1025] {
                let s = Schedule::new(kind, n, 0.002, 1.0).unwrap();
                for i in 0..s.len() {
                    let sum = s.alpha_bar(i) + s.sigma(i).powi(2);
                    assert!((sum - 1.0).abs() <= 2.0 * f64::EPSILON, "{kind:?} {i} {sum}");
                    assert!(s.diffusion_sq(i) >= 0.0);
                    assert!(s.drift(i) < 0.0);
                    assert_eq!(s.alpha_bar(i), s.alpha_bar_at(s.time(i)));
                }
                for i in 1..s.len() {
                    assert!(s.lambda(i) < s.lambda(i - 1));
                }
            }
        }
    }

    #[test]
    fn finite_differences_track_the_analytic_cosine_derivative() {
        let s = Schedule::new(ScheduleKind::Cosine, 1025, 0.002, 1.0).unwrap();
        // f_t = d/dt log cos(phase(t)) = -tan(phase) * dphase/dt
        let k = s.cosine_end / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        for i in (1..s.len() - 1).step_by(97) {
            let phase = (s.time(i) * s.cosine_end + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            let exact = -phase.tan() * k;
            assert!((s.drift(i) - exact).abs() < 1e-4 * exact.abs().max(1.0), "{i}");
        }
    }

    #[test]
    fn exponential_schedule_has_constant_drift() {
        let s = Schedule::new(ScheduleKind::Exponential { rate: 1.0 }, 257, 0.006, 3.0).unwrap();
        for i in 0..s.len() {
            assert!((s.drift(i) + 1.0).abs() < 1e-12, "{}", s.drift(i));
        }
    }

    #[test]
    fn degenerate_inputs_fail() {
        assert!(Schedule::new(ScheduleKind::Cosine, 64, 1.0, 1.0).is_err());
        assert!(Schedule::new(ScheduleKind::Cosine, 64, 2.0, 1.0).is_err());
        assert!(Schedule::new(ScheduleKind::Cosine, 4, 0.002, 1.0).is_err());
        // alpha_bar(T) = e^-0.2 is far from the noise limit.
        assert!(Schedule::new(ScheduleKind::Exponential { rate: 0.1 }, 64, 0.002, 1.0).is_err());
    }

    #[test]
    fn grid_lookup() {
        let s = Schedule::default_cosine();
        assert_eq!(s.index_of(s.time(17)).unwrap(), 17);
        assert_eq!(s.index_of(1.0).unwrap(), 63);
        assert!(matches!(s.index_of(0.5), Err(Error::OffGrid { .. })));
        assert!(s.index_of(-1.0).is_err());
        assert_eq!(s.nearest_index(0.5), 31);
        assert_eq!(s.nearest_index(7.0), 63);
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in [
            ScheduleKind::Cosine,
            ScheduleKind::LinearBeta,
            ScheduleKind::Exponential { rate: 1.5 },
            ScheduleKind::LogSnrLinear {
                lambda_max: 3.0,
                lambda_min: -3.0,
            },
        ] {
            assert_eq!(ScheduleKind::parse(&kind.name()), Some(kind));
        }
        assert_eq!(ScheduleKind::parse("log-snr:1"), None);
    }

    #[test]
    fn log_snr_linear_spacing() {
        let s = Schedule::new(
            ScheduleKind::LogSnrLinear {
                lambda_max: 3.0,
                lambda_min: -3.0,
            },
            65,
            0.002,
            1.0,
        )
        .unwrap();
        let steps: Vec<f64> = (1..s.len()).map(|i| s.lambda(i - 1) - s.lambda(i)).collect();
        for d in &steps[1..] {
            assert!((d - steps[1]).abs() < 1e-9);
        }
        assert!((s.lambda(s.len() - 1) + 3.0).abs() < 1e-12);
        assert!(Schedule::new(
            ScheduleKind::LogSnrLinear {
                lambda_max: -1.0,
                lambda_min: 1.0
            },
            65,
            0.002,
            1.0
        )
        .is_err());
    }
}
