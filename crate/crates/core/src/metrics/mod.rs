//! Sample-quality metrics: exact 1-D Wasserstein distance, sliced W1,
//! k-NN coverage and mixture mode-weight recovery.

use ndarray::{Array1, ArrayView2};

use crate::diffusion::MixtureSpec;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const DEFAULT_COVERAGE_K: usize = 3;
pub const DEFAULT_PROJECTIONS: usize = 64;

fn sorted_finite(a: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::contract("W1 of an empty sample"));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("W1 input contains non-finite values"));
    }
    let mut v = a.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Exact W1 between two empirical measures on the line. Equal sizes use
/// the sorted coupling; otherwise the CDF difference is integrated.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted_finite(a)?, sorted_finite(b)?);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut last = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - last);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        last = next;
    }
    Ok(total)
}

/// Mean over columns of the per-coordinate W1.
pub fn w1_per_dim(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    let mut sum = 0.0;
    for j in 0..a.ncols() {
        sum += w1_1d(&a.column(j).to_vec(), &b.column(j).to_vec())?;
    }
    Ok(sum / a.ncols() as f64)
}

/// Average 1-D W1 over random unit projections. Exact W1 for `d = 1`.
pub fn sliced_w1(a: ArrayView2<f64>, b: ArrayView2<f64>, projections: usize, rng: &mut RngStream) -> Result<f64> {
    check_dims(a, b)?;
    if a.ncols() == 1 {
        return w1_1d(&a.column(0).to_vec(), &b.column(0).to_vec());
    }
    if projections == 0 {
        return Err(Error::config("sliced W1 needs at least one projection"));
    }
    let mut sum = 0.0;
    for _ in 0..projections {
        let mut dir = Array1::from(rng.gauss_draw(a.ncols()));
        let norm = dir.dot(&dir).sqrt();
        dir /= norm;
        sum += w1_1d(&a.dot(&dir).to_vec(), &b.dot(&dir).to_vec())?;
    }
    Ok(sum / projections as f64)
}

fn check_dims(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::contract(format!("dimension mismatch: {} vs {}", a.ncols(), b.ncols())));
    }
    Ok(())
}

fn dist(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distance from each point to its `k`-th nearest other point of the set.
pub fn knn_radii(set: ArrayView2<f64>, k: usize) -> Result<Vec<f64>> {
    let n = set.nrows();
    if k == 0 || k >= n {
        return Err(Error::contract(format!("k-NN radius needs 1 <= k < n, got k={k}, n={n}")));
    }
    if set.ncols() == 1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| set[[i, 0]].total_cmp(&set[[j, 0]]));
        let mut radii = vec![0.0; n];
        for (pos, &i) in order.iter().enumerate() {
            let lo = pos.saturating_sub(k);
            let hi = (pos + k).min(n - 1);
            let mut d: Vec<f64> = (lo..=hi)
                .filter(|&p| p != pos)
                .map(|p| (set[[order[p], 0]] - set[[i, 0]]).abs())
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            radii[i] = *kth;
        }
        return Ok(radii);
    }
    let mut radii = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n - 1);
    for i in 0..n {
        d.clear();
        d.extend((0..n).filter(|&j| j != i).map(|j| dist(set, i, set, j)));
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        radii.push(*kth);
    }
    Ok(radii)
}

/// Fraction of real points whose k-NN ball (radius to the k-th nearest
/// other real point) contains at least one fake point.
pub fn coverage(real: ArrayView2<f64>, fake: ArrayView2<f64>, k: usize) -> Result<f64> {
    check_dims(real, fake)?;
    let radii = knn_radii(real, k)?;
    if fake.nrows() == 0 {
        return Ok(0.0);
    }
    let covered = if real.ncols() == 1 {
        let mut f = fake.column(0).to_vec();
        f.sort_by(f64::total_cmp);
        (0..real.nrows())
            .filter(|&i| {
                let x = real[[i, 0]];
                let p = f.partition_point(|&v| v < x);
                let mut best = f64::INFINITY;
                if p < f.len() {
                    best = best.min((x - f[p]).abs());
                }
                if p > 0 {
                    best = best.min((x - f[p - 1]).abs());
                }
                best <= radii[i]
            })
            .count()
    } else {
        (0..real.nrows())
            .filter(|&i| (0..fake.nrows()).any(|j| dist(real, i, fake, j) <= radii[i]))
            .count()
    };
    Ok(covered as f64 / real.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeWeights {
    pub counts: Vec<usize>,
    pub weights: Vec<f64>,
    pub max_error: f64,
}

/// Assigns every sample to the nearest component mean.
pub fn mode_weights(samples: ArrayView2<f64>, spec: &MixtureSpec) -> Result<ModeWeights> {
    if samples.nrows() == 0 {
        return Err(Error::contract("mode weights of an empty sample"));
    }
    if samples.ncols() != spec.dim() {
        return Err(Error::contract("sample dimension differs from the mixture"));
    }
    if spec.n_components() > 1 && spec.min_mean_separation() <= 4.0 * spec.max_std() {
        return Err(Error::MetricUndefined(format!(
            "component means {:.3} apart, need > 4 x std {:.3}",
            spec.min_mean_separation(),
            spec.max_std()
        )));
    }
    let mut counts = vec![0; spec.n_components()];
    for row in samples.rows() {
        let nearest = spec
            .components()
            .iter()
            .enumerate()
            .map(|(c, comp)| (c, comp.mean.iter().zip(row).map(|(m, x)| (m - x) * (m - x)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("at least one component");
        counts[nearest] += 1;
    }
    let n = samples.nrows() as f64;
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let max_error = weights
        .iter()
        .zip(spec.weights())
        .map(|(w, s)| (w - s).abs())
        .fold(0.0, f64::max);
    Ok(ModeWeights {
        counts,
        weights,
        max_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub generator: String,
    pub steps: usize,
    pub n_samples: usize,
    pub n_reference: usize,
    /// Exact W1 in 1-D; mean per-coordinate W1 otherwise.
    pub w1: f64,
    /// Sliced W1 over random projections, for `d > 1`.
    pub sliced_w1: Option<f64>,
    pub coverage: f64,
    pub mode_weights: Vec<f64>,
    pub mode_weight_max_error: f64,
}

/// Compares `samples` with `reference` draws from `spec`.
pub fn eval_report(
    generator: &str,
    steps: usize,
    samples: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    spec: &MixtureSpec,
    k: usize,
    rng: &mut RngStream,
) -> Result<MetricsReport> {
    if samples.nrows() == 0 || reference.nrows() == 0 {
        return Err(Error::contract("evaluation needs non-empty samples and reference"));
    }
    check_dims(samples, reference)?;
    let w1 = w1_per_dim(samples, reference)?;
    let sliced_w1 = if samples.ncols() > 1 {
        Some(sliced_w1(samples, reference, DEFAULT_PROJECTIONS, rng)?)
    } else {
        None
    };
    let modes = mode_weights(samples, spec)?;
    Ok(MetricsReport {
        generator: generator.to_string(),
        steps,
        n_samples: samples.nrows(),
        n_reference: reference.nrows(),
        w1,
        sliced_w1,
        coverage: coverage(reference, samples, k)?,
        mode_weights: modes.weights,
        mode_weight_max_error: modes.max_error,
    })
}
