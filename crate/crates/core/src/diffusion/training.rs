//! Teacher training by denoising score matching.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numerics::{streams, Activation, AdamConfig, AdamState, Ema, MlpParams, RngStream};

use super::{perturb_rows, EpsPredictor, InputLayout, Label, MixtureSpec, Schedule, ScoreModel, TimeEmbedding};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
    /// Train with class labels (dropped with `label_dropout`) so that
    /// guidance is available.
    pub conditional: bool,
    pub label_dropout: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub ema_rate: f64,
    pub log_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64; 4],
            activation: Activation::Tanh,
            time_embedding: TimeEmbedding::Fourier { frequencies: 1 },
            conditional: true,
            label_dropout: 0.1,
            iterations: 20_000,
            batch_size: 256,
            learning_rate: 1e-3,
            cosine_decay: false,
            ema_rate: 0.999,
            log_every: 500,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("teacher batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::config("label dropout must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("teacher learning rate must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self, spec: &MixtureSpec, schedule: &Schedule) -> InputLayout {
        InputLayout {
            data_dim: spec.dim(),
            time: self.time_embedding,
            n_classes: if self.conditional { spec.n_components() } else { 0 },
            t_max: schedule.t_max(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRun {
    pub online: ScoreModel,
    /// EMA of the online weights; this is the model used downstream.
    pub ema: ScoreModel,
    pub records: Vec<LossRecord>,
}

/// Draws grid indices and noise for a DSM evaluation: `n` uniform indices,
/// then `n * dim` standard normals.
fn draw_dsm_inputs(n: usize, dim: usize, schedule: &Schedule, rng: &mut RngStream) -> (Vec<usize>, Array2<f64>) {
    let idx: Vec<usize> = (0..n).map(|_| rng.index(schedule.len())).collect();
    let eps = Array2::from_shape_vec((n, dim), rng.gauss_draw(n * dim)).expect("shape");
    (idx, eps)
}

/// Denoising score-matching loss `mean_i |eps_hat(z_t, c, t) - eps|^2` and
/// its exact parameter gradient.
pub fn dsm_loss(
    model: &ScoreModel,
    x0: ArrayView2<f64>,
    labels: &[Label],
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<(f64, MlpParams)> {
    let n = x0.nrows();
    if n == 0 {
        return Err(Error::contract("empty batch"));
    }
    let (idx, eps) = draw_dsm_inputs(n, x0.ncols(), schedule, rng);
    let z = perturb_rows(x0, &idx, eps.view(), schedule)?;
    let t: Vec<f64> = idx.iter().map(|&i| schedule.time(i)).collect();
    let (pred, tape) = model.forward(z.view(), &t, labels)?;
    let diff = &pred - &eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let cot = diff * (2.0 / n as f64);
    let (grads, _) = model.net.backward(&tape, cot.view())?;
    Ok((loss, grads))
}

/// The DSM loss of an arbitrary predictor for the same draws `dsm_loss`
/// would make from `rng`.
pub fn dsm_loss_value(
    predictor: &dyn EpsPredictor,
    x0: ArrayView2<f64>,
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<f64> {
    let n = x0.nrows();
    if n == 0 {
        return Err(Error::contract("empty batch"));
    }
    let (idx, eps) = draw_dsm_inputs(n, x0.ncols(), schedule, rng);
    let z = perturb_rows(x0, &idx, eps.view(), schedule)?;
    let t: Vec<f64> = idx.iter().map(|&i| schedule.time(i)).collect();
    let pred = predictor.eps(z.view(), &t)?;
    Ok((&pred - &eps).iter().map(|d| d * d).sum::<f64>() / n as f64)
}

pub fn train_teacher(config: &TeacherConfig, spec: &MixtureSpec, schedule: &Schedule, seed: u64) -> Result<TeacherRun> {
    config.validate()?;
    let layout = config.layout(spec, schedule);
    let mut init_rng = RngStream::new(seed, streams::INIT);
    let mut online = ScoreModel::new(layout, &config.hidden, config.activation, &mut init_rng)?;
    let mut ema = Ema::new(&online.net, config.ema_rate)?;
    let mut adam = AdamState::new(&online.net, AdamConfig::with_lr(config.learning_rate));

    let mut data_rng = RngStream::new(seed, streams::DATA);
    let mut noise_rng = RngStream::new(seed, streams::FORWARD_NOISE);
    let mut drop_rng = RngStream::new(seed, streams::LABEL_DROP);
    let mut records = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;

    for it in 0..config.iterations {
        let (x0, classes) = spec.sample(config.batch_size, &mut data_rng);
        let labels: Vec<Label> = if config.conditional {
            classes
                .iter()
                .map(|&c| (drop_rng.uniform() >= config.label_dropout).then_some(c))
                .collect()
        } else {
            Vec::new()
        };
        if config.cosine_decay {
            let progress = it as f64 / config.iterations as f64;
            adam.config.learning_rate = 0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        let (loss, grads) = dsm_loss(&online, x0.view(), &labels, schedule, &mut noise_rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: format!("teacher loss is {loss}"),
            });
        }
        adam.step(&mut online.net, &grads).map_err(|e| Error::Diverged {
            iteration: it,
            reason: e.to_string(),
        })?;
        ema.update(&online.net)?;
        running += loss;
        running_n += 1;
        if config.log_every > 0 && ((it + 1) % config.log_every == 0 || it + 1 == config.iterations) {
            records.push(LossRecord {
                iteration: it + 1,
                loss: running / running_n as f64,
            });
            running = 0.0;
            running_n = 0;
        }
    }
    let ema_model = ScoreModel::from_parts(layout, ema.shadow)?;
    Ok(TeacherRun {
        online,
        ema: ema_model,
        records,
    })
}
