//! Isotropic Gaussian mixtures with closed-form diffused marginals.
//!
//! Under the VP forward process component `i` diffuses to
//! `N(sqrt(a) mu_i, (a s_i^2 + 1 - a) I)` where `a = alpha_bar(t)`, so the
//! marginal density, its score and the optimal noise prediction are exact.

use ndarray::{Array2, ArrayView1, ArrayView2};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    components: Vec<Component>,
    dim: usize,
}

impl MixtureSpec {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::config("a mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::config(format!(
                    "component {i} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.std > 0.0 && c.std.is_finite()) {
                return Err(Error::config(format!("component {i} std must be positive, got {}", c.std)));
            }
            if !(c.weight > 0.0) {
                return Err(Error::config(format!(
                    "component {i} weight must be positive, got {}",
                    c.weight
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config(format!("component {i} mean is not finite")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    /// Three equally weighted 1-D modes at -1.5, 0 and 1.5 with std 0.2.
    pub fn three_mode() -> Self {
        Self::new(
            [-1.5, 0.0, 1.5]
                .into_iter()
                .map(|m| Component {
                    mean: vec![m],
                    std: 0.2,
                    weight: 1.0 / 3.0,
                })
                .collect(),
        )
        .expect("valid preset")
    }

    pub fn single_gaussian(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![Component {
            mean: vec![mean],
            std,
            weight: 1.0,
        }])
    }

    /// `n_modes` equally weighted 2-D modes on a circle.
    pub fn ring_2d(n_modes: usize, radius: f64, std: f64) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::config("ring needs at least one mode"));
        }
        Self::new(
            (0..n_modes)
                .map(|k| {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / n_modes as f64;
                    Component {
                        mean: vec![radius * angle.cos(), radius * angle.sin()],
                        std,
                        weight: 1.0 / n_modes as f64,
                    }
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Draws `n` points and their component labels. Per point: one uniform
    /// for the component, then `dim` standard normals.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        let mut noise = vec![0.0; self.dim];
        for i in 0..n {
            let k = self.pick_component(rng.uniform());
            rng.fill_gauss(&mut noise);
            let c = &self.components[k];
            for j in 0..self.dim {
                x[[i, j]] = c.mean[j] + c.std * noise[j];
            }
            labels.push(k);
        }
        (x, labels)
    }

    /// `n` component labels drawn by weight, one uniform each.
    pub fn draw_labels(&self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        (0..n).map(|_| self.pick_component(rng.uniform())).collect()
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        self.components.len() - 1
    }

    /// Per-component log-likelihood terms `log w_i + log N(z; sqrt(a) mu_i, v_i I)`.
    fn log_terms(&self, z: ArrayView1<f64>, alpha_bar: f64, out: &mut Vec<f64>) {
        let sa = alpha_bar.sqrt();
        let d = self.dim as f64;
        out.clear();
        for c in &self.components {
            let v = alpha_bar * c.std * c.std + (1.0 - alpha_bar);
            let sq: f64 = z.iter().zip(&c.mean).map(|(zi, m)| (zi - sa * m).powi(2)).sum();
            out.push(c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * sq / v);
        }
    }

    /// Log density of the diffused marginal at `z`.
    pub fn log_marginal_density(&self, z: ArrayView1<f64>, alpha_bar: f64) -> f64 {
        let mut terms = Vec::with_capacity(self.components.len());
        self.log_terms(z, alpha_bar, &mut terms);
        log_sum_exp(&terms)
    }

    /// Optimal noise prediction `-sigma * grad log p_t(z)` for each row of `z`.
    pub fn analytic_eps(&self, z: ArrayView2<f64>, alpha_bar: f64) -> Array2<f64> {
        self.eps_rows(z, |_| alpha_bar, None)
    }

    /// Optimal noise prediction given the component label (the conditional score).
    pub fn analytic_eps_given(&self, z: ArrayView2<f64>, alpha_bar: f64, component: usize) -> Array2<f64> {
        self.eps_rows(z, |_| alpha_bar, Some(component))
    }

    pub(crate) fn eps_rows(
        &self,
        z: ArrayView2<f64>,
        alpha_bar_of_row: impl Fn(usize) -> f64,
        component: Option<usize>,
    ) -> Array2<f64> {
        let mut out = Array2::zeros(z.raw_dim());
        let mut terms = Vec::with_capacity(self.components.len());
        for (i, row) in z.outer_iter().enumerate() {
            let a = alpha_bar_of_row(i);
            let sa = a.sqrt();
            let sigma = (1.0 - a).sqrt();
            match component {
                Some(k) => {
                    let c = &self.components[k];
                    let v = a * c.std * c.std + (1.0 - a);
                    for j in 0..self.dim {
                        out[[i, j]] = sigma * (row[j] - sa * c.mean[j]) / v;
                    }
                }
                None => {
                    self.log_terms(row, a, &mut terms);
                    let lse = log_sum_exp(&terms);
                    for (c, lt) in self.components.iter().zip(&terms) {
                        let r = (lt - lse).exp();
                        if r == 0.0 {
                            continue;
                        }
                        let v = a * c.std * c.std + (1.0 - a);
                        for j in 0..self.dim {
                            out[[i, j]] += r * sigma * (row[j] - sa * c.mean[j]) / v;
                        }
                    }
                }
            }
        }
        out
    }

    /// CDF of the diffused 1-D marginal.
    pub fn marginal_cdf_1d(&self, x: f64, alpha_bar: f64) -> Result<f64> {
        self.require_1d()?;
        let sa = alpha_bar.sqrt();
        Ok(self
            .components
            .iter()
            .map(|c| {
                let sd = (alpha_bar * c.std * c.std + 1.0 - alpha_bar).sqrt();
                c.weight * 0.5 * erfc(-(x - sa * c.mean[0]) / (sd * std::f64::consts::SQRT_2))
            })
            .sum())
    }

    /// The `n` quantiles at levels `(i + 0.5) / n` of the diffused 1-D
    /// marginal: a deterministic, stratified stand-in for `n` samples.
    pub fn marginal_quantiles_1d(&self, n: usize, alpha_bar: f64) -> Result<Vec<f64>> {
        self.require_1d()?;
        let sa = alpha_bar.sqrt();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in &self.components {
            let sd = (alpha_bar * c.std * c.std + 1.0 - alpha_bar).sqrt();
            lo = lo.min(sa * c.mean[0] - 12.0 * sd);
            hi = hi.max(sa * c.mean[0] + 12.0 * sd);
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let level = (i as f64 + 0.5) / n as f64;
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if self.marginal_cdf_1d(mid, alpha_bar)? < level {
                    a = mid;
                } else {
                    b = mid;
                }
                if b - a <= 1e-14 * (1.0 + mid.abs()) {
                    break;
                }
            }
            out.push(0.5 * (a + b));
        }
        Ok(out)
    }

    /// Exact samples of the diffused marginal at `alpha_bar`.
    pub fn sample_marginal(&self, n: usize, alpha_bar: f64, rng: &mut RngStream) -> Array2<f64> {
        let (x0, _) = self.sample(n, rng);
        let eps = Array2::from_shape_vec((n, self.dim), rng.gauss_draw(n * self.dim)).expect("shape");
        x0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt()
    }

    /// Smallest pairwise distance between component means.
    pub fn min_mean_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.components.iter().enumerate() {
            for b in &self.components[i + 1..] {
                let d: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        best
    }

    pub fn max_std(&self) -> f64 {
        self.components.iter().map(|c| c.std).fold(0.0, f64::max)
    }

    fn require_1d(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::contract("operation is only defined for 1-D mixtures"));
        }
        Ok(())
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
