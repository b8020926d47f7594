//! Central finite-difference checks of the hand-written gradients on
//! random small instances.

use ndarray::Array2;

use crate::adversarial::Discriminator;
use crate::diffusion::{dsm_loss, InputLayout, Label, MixtureSpec, Schedule, ScoreModel, TimeEmbedding};
use crate::distill::{cd_forward_at, ConsistencyHead, ConsistencyModel, Distance, DistillConfig};
use crate::error::Result;
use crate::numerics::{Activation, MlpParams, Params, RngStream};
use crate::solvers::SolverConfig;

const STEP: f64 = 1e-5;

/// Worst relative error over a suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteResult {
    pub instances: usize,
    pub max_rel_error: f64,
}

impl SuiteResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `max |a - b| / max(max |a|, max |b|, 1e-8)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Central differences of `f` with respect to every entry of `flat`.
pub fn numeric_gradient(flat: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = flat.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(&x)?;
        x[i] = orig - STEP;
        let down = f(&x)?;
        x[i] = orig;
        g.push((up - down) / (2.0 * STEP));
    }
    Ok(g)
}

fn between(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

fn gauss(rng: &mut RngStream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), rng.gauss_draw(rows * cols)).expect("shape")
}

fn random_labels(rng: &mut RngStream, rows: usize, n_classes: usize) -> Vec<Label> {
    (0..rows)
        .map(|_| {
            let c = rng.index(n_classes + 1);
            (c < n_classes).then_some(c)
        })
        .collect()
}

fn small_model(rng: &mut RngStream, data_dim: usize, n_classes: usize, t_max: f64) -> Result<ScoreModel> {
    let layout = InputLayout {
        data_dim,
        time: TimeEmbedding::Fourier { frequencies: 1 },
        n_classes,
        t_max,
    };
    let hidden: Vec<usize> = (0..between(rng, 1, 2)).map(|_| between(rng, 2, 4)).collect();
    ScoreModel::new(layout, &hidden, Activation::Tanh, rng)
}

/// Reverse pass of the MLP: parameter and input gradients of
/// `sum(output * cot)`.
pub fn mlp_backward_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let rng = &mut RngStream::new(seed, i as u64);
        let depth = between(rng, 1, 3);
        let mut sizes = vec![between(rng, 1, 4)];
        sizes.extend((0..depth).map(|_| between(rng, 2, 5)));
        sizes.push(between(rng, 1, 3));
        let activation = if rng.uniform() < 0.8 {
            Activation::Tanh
        } else {
            Activation::Identity
        };
        let net = MlpParams::init(&sizes, activation, rng)?;
        let batch = between(rng, 1, 4);
        let x = gauss(rng, batch, sizes[0]);
        let cot = gauss(rng, batch, *sizes.last().expect("sizes"));
        let (_, tape) = net.forward(x.view())?;
        let (grads, input_grad) = net.backward(&tape, cot.view())?;
        let objective = |n: &MlpParams, x: &Array2<f64>| (n.predict(x.view()) * &cot).sum();

        let numeric = numeric_gradient(&net.flatten(), |flat| {
            let mut n = net.clone();
            n.assign_flat(flat)?;
            Ok(objective(&n, &x))
        })?;
        worst = worst.max(rel_error(&grads.flatten(), &numeric));

        let numeric_x = numeric_gradient(x.as_slice().expect("contiguous"), |flat| {
            let xp = Array2::from_shape_vec(x.raw_dim(), flat.to_vec()).expect("shape");
            Ok(objective(&net, &xp))
        })?;
        worst = worst.max(rel_error(input_grad.as_slice().expect("contiguous"), &numeric_x));
    }
    Ok(SuiteResult {
        instances,
        max_rel_error: worst,
    })
}

/// Denoising score-matching loss with the draws held fixed.
pub fn dsm_loss_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let schedule = Schedule::default_cosine();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let rng = &mut RngStream::new(seed, i as u64);
        let dim = between(rng, 1, 2);
        let n_classes = if rng.uniform() < 0.5 { 0 } else { 2 };
        let model = small_model(rng, dim, n_classes, schedule.t_max())?;
        let batch = between(rng, 1, 5);
        let x0 = gauss(rng, batch, dim);
        let labels = if n_classes > 0 {
            random_labels(rng, batch, n_classes)
        } else {
            Vec::new()
        };
        let draws = RngStream::new(seed ^ 0x5eed, i as u64);
        let (_, grads) = dsm_loss(&model, x0.view(), &labels, &schedule, &mut draws.clone())?;
        let numeric = numeric_gradient(&model.net.flatten(), |flat| {
            let mut m = model.clone();
            m.net.assign_flat(flat)?;
            Ok(dsm_loss(&m, x0.view(), &labels, &schedule, &mut draws.clone())?.0)
        })?;
        worst = worst.max(rel_error(&grads.flatten(), &numeric));
    }
    Ok(SuiteResult {
        instances,
        max_rel_error: worst,
    })
}

/// CD loss with respect to the online weights of students with at most
/// 50 parameters; the target weights differ from the online ones and the
/// teacher solve is stochastic with its noise replayed per evaluation.
pub fn cd_loss_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let schedule = Schedule::default_cosine();
    let spec = MixtureSpec::three_mode();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let rng = &mut RngStream::new(seed, i as u64);
        let layout = InputLayout {
            data_dim: 1,
            time: TimeEmbedding::Fourier { frequencies: 1 },
            n_classes: 0,
            t_max: schedule.t_max(),
        };
        let hidden = between(rng, 2, 6);
        let online = ScoreModel::new(layout, &[hidden], Activation::Tanh, rng)?;
        debug_assert!(online.net.param_count() <= 50);
        let target = ScoreModel::new(layout, &[hidden], Activation::Tanh, rng)?;
        let teacher = ScoreModel::new(layout, &[3], Activation::Tanh, rng)?;
        let mut model = ConsistencyModel::new(online, ConsistencyHead::for_schedule(&schedule), 0.9)?;
        model.target = target;

        let batch = between(rng, 1, 6);
        let (x0, _) = spec.sample(batch, rng);
        let n_index: Vec<usize> = (0..batch).map(|_| between(rng, 1, schedule.len() - 1)).collect();
        let k = between(rng, 1, 4);
        let m_index: Vec<usize> = n_index.iter().map(|&n| n.saturating_sub(k)).collect();
        let eps = gauss(rng, batch, 1);
        let config = DistillConfig {
            distance: Distance::SquaredL2,
            solver: SolverConfig::ddim(0.3).with_substeps(between(rng, 1, 3)),
            ..DistillConfig::for_grid(schedule.len())
        };
        let noise = RngStream::new(seed ^ 0xcd, i as u64);
        let eval = |m: &ConsistencyModel| {
            cd_forward_at(
                m,
                &teacher,
                x0.view(),
                &[],
                &n_index,
                &m_index,
                eps.view(),
                &schedule,
                &config,
                &mut noise.clone(),
            )
        };
        let out = eval(&model)?;
        let grads = model.backward_online(&out.online, out.cot.view())?;
        let numeric = numeric_gradient(&model.online.net.flatten(), |flat| {
            let mut m = model.clone();
            m.online.net.assign_flat(flat)?;
            Ok(eval(&m)?.loss)
        })?;
        worst = worst.max(rel_error(&grads.flatten(), &numeric));
    }
    Ok(SuiteResult {
        instances,
        max_rel_error: worst,
    })
}

/// Discriminator logits: gradients of `sum(logit * cot)` with respect to
/// the adapter factors and head, and to the data input.
pub fn disc_forward_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let rng = &mut RngStream::new(seed, i as u64);
        let dim = between(rng, 1, 2);
        let layout = InputLayout {
            data_dim: dim,
            time: TimeEmbedding::Fourier { frequencies: 1 },
            n_classes: 3,
            t_max: 1.0,
        };
        let hidden: Vec<usize> = (0..between(rng, 2, 4)).map(|_| between(rng, 2, 4)).collect();
        let teacher = ScoreModel::new(layout, &hidden, Activation::Tanh, rng)?;
        let rank = between(rng, 1, 2);
        let mut disc = Discriminator::from_teacher(&teacher, rank, 1.0, rng)?;
        // Move off the zero-initialized adapters so every factor matters.
        let mut phi = disc.params();
        let flat: Vec<f64> = phi.flatten().iter().map(|v| v + 0.3 * rng.gauss_draw(1)[0]).collect();
        phi.assign_flat(&flat)?;
        disc.set_params(&phi)?;

        let batch = between(rng, 1, 4);
        let z = gauss(rng, batch, dim);
        let labels = random_labels(rng, batch, 3);
        let t: Vec<f64> = (0..batch)
            .map(|_| if rng.uniform() < 0.3 { 0.0 } else { rng.uniform() })
            .collect();
        let cot = rng.gauss_draw(batch);
        let objective = |d: &Discriminator, z: &Array2<f64>| -> Result<f64> {
            Ok(d.logits(z.view(), &labels, &t)?.iter().zip(&cot).map(|(l, c)| l * c).sum())
        };
        let (_, tape) = disc.forward(z.view(), &labels, &t)?;
        let (grads, z_grad) = disc.backward(&tape, &cot)?;

        let numeric = numeric_gradient(&phi.flatten(), |flat| {
            let mut d = disc.clone();
            let mut p = d.params();
            p.assign_flat(flat)?;
            d.set_params(&p)?;
            objective(&d, &z)
        })?;
        worst = worst.max(rel_error(&grads.flatten(), &numeric));

        let numeric_z = numeric_gradient(z.as_slice().expect("contiguous"), |flat| {
            let zp = Array2::from_shape_vec(z.raw_dim(), flat.to_vec()).expect("shape");
            objective(&disc, &zp)
        })?;
        worst = worst.max(rel_error(z_grad.as_slice().expect("contiguous"), &numeric_z));
    }
    Ok(SuiteResult {
        instances,
        max_rel_error: worst,
    })
}
