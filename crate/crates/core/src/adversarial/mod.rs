//! Conditional discriminator on top of the teacher backbone: the first half
//! of the teacher's layers is a frozen encoder, the remaining hidden layers
//! are adapted with low-rank factors, and a fresh head emits one logit.
//! Hinge losses for both players and the combined training loop.

mod train;

use ndarray::{Array1, Array2, ArrayView2};

pub use train::train_scott_full;

use crate::diffusion::{InputLayout, Label, ScoreModel};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Dense, Params, RngStream};

/// Largest logit magnitude tolerated before training is stopped.
pub const MAX_LOGIT: f64 = 1e6;

/// `W + scale B A` with `W` frozen; `A` starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub base: Dense,
    /// `r x n_in`.
    pub a: Array2<f64>,
    /// `n_out x r`.
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LowRankAdapter {
    pub fn new(base: Dense, rank: usize, scale: f64, rng: &mut RngStream) -> Result<Self> {
        if rank == 0 || rank > base.n_in().min(base.n_out()) {
            return Err(Error::config(format!(
                "adapter rank must lie in [1, {}], got {rank}",
                base.n_in().min(base.n_out())
            )));
        }
        let bound = (1.0 / rank as f64).sqrt();
        let b = Array2::from_shape_fn((base.n_out(), rank), |_| bound * (2.0 * rng.uniform() - 1.0));
        Ok(Self {
            a: Array2::zeros((rank, base.n_in())),
            b,
            base,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        &self.base.weight + &(self.b.dot(&self.a) * self.scale)
    }

    /// Pre-activation and the rank-space projection `x A^T`.
    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let u = x.dot(&self.a.t());
        let mut y = self.base.forward(x);
        y.scaled_add(self.scale, &u.dot(&self.b.t()));
        (y, u)
    }
}

/// The discriminator's trainable parameters `phi`: adapter factors and the
/// logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscParams {
    /// `(A, B)` per decoder layer.
    pub factors: Vec<(Array2<f64>, Array2<f64>)>,
    pub head: Dense,
}

impl Params for DiscParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (a, b) in &self.factors {
            out.push(a.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice().expect("standard layout"));
        out.push(self.head.bias.as_slice().expect("standard layout"));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (a, b) in &mut self.factors {
            out.push(a.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice_mut().expect("standard layout"));
        out.push(self.head.bias.as_slice_mut().expect("standard layout"));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub layout: InputLayout,
    pub activation: Activation,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<LowRankAdapter>,
    pub head: Dense,
}

/// Activations recorded by [`Discriminator::forward`].
#[derive(Debug, Clone)]
pub struct DiscTape {
    /// Input of every encoder and decoder layer, then the head input.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of every encoder and decoder layer.
    outputs: Vec<Array2<f64>>,
    /// `x A^T` of every decoder layer.
    projections: Vec<Array2<f64>>,
}

impl Discriminator {
    /// Encoder: the first `ceil(L / 2)` of the teacher's `L` layers. Decoder:
    /// the remaining hidden layers, each with a rank-`rank` adapter. The
    /// teacher's output layer is replaced by a fresh scalar head.
    pub fn from_teacher(teacher: &ScoreModel, rank: usize, scale: f64, rng: &mut RngStream) -> Result<Self> {
        if !teacher.is_conditional() {
            return Err(Error::config("the discriminator needs a conditional teacher backbone"));
        }
        let layers = &teacher.net.layers;
        if layers.len() < 2 {
            return Err(Error::config("the teacher needs at least one hidden layer"));
        }
        if rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        let n_enc = layers.len().div_ceil(2).min(layers.len() - 1);
        let encoder = layers[..n_enc].to_vec();
        let decoder = layers[n_enc..layers.len() - 1]
            .iter()
            .map(|l| LowRankAdapter::new(l.clone(), rank, scale, rng))
            .collect::<Result<Vec<_>>>()?;
        let width = layers[layers.len() - 2].n_out();
        Ok(Self {
            layout: teacher.layout,
            activation: teacher.net.activation,
            encoder,
            decoder,
            head: Dense::init(width, 1, rng),
        })
    }

    pub fn params(&self) -> DiscParams {
        DiscParams {
            factors: self.decoder.iter().map(|d| (d.a.clone(), d.b.clone())).collect(),
            head: self.head.clone(),
        }
    }

    pub fn set_params(&mut self, p: &DiscParams) -> Result<()> {
        if p.factors.len() != self.decoder.len() || p.shapes() != self.params().shapes() {
            return Err(Error::contract("discriminator parameter layout mismatch"));
        }
        for (d, (a, b)) in self.decoder.iter_mut().zip(&p.factors) {
            d.a.assign(a);
            d.b.assign(b);
        }
        self.head = p.head.clone();
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params().param_count()
    }

    pub fn total_count(&self) -> usize {
        let frozen: usize = self.encoder.iter().map(Dense::param_count).sum::<usize>()
            + self.decoder.iter().map(|d| d.base.param_count()).sum::<usize>();
        frozen + self.trainable_count()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_count() as f64 / self.total_count() as f64
    }

    /// One logit per row; real data enters at `t = 0`.
    pub fn forward(&self, z: ArrayView2<f64>, labels: &[Label], t: &[f64]) -> Result<(Array1<f64>, DiscTape)> {
        if labels.len() != z.nrows() {
            return Err(Error::contract(format!("{} conditions for {} rows", labels.len(), z.nrows())));
        }
        if let Some(&tt) = t.iter().find(|&&tt| !(0.0..=self.layout.t_max).contains(&tt)) {
            return Err(Error::contract(format!("discriminator time {tt} outside [0, T]")));
        }
        let input = self.layout.build(z, t, labels)?;
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite discriminator input"));
        }
        let mut tape = DiscTape {
            inputs: vec![input],
            outputs: Vec::new(),
            projections: Vec::new(),
        };
        for layer in &self.encoder {
            let mut h = layer.forward(tape.inputs.last().expect("input").view());
            self.activation.apply_inplace(&mut h);
            tape.outputs.push(h.clone());
            tape.inputs.push(h);
        }
        for layer in &self.decoder {
            let (mut h, u) = layer.forward(tape.inputs.last().expect("input").view());
            self.activation.apply_inplace(&mut h);
            tape.projections.push(u);
            tape.outputs.push(h.clone());
            tape.inputs.push(h);
        }
        let logits = self
            .head
            .forward(tape.inputs.last().expect("input").view())
            .column(0)
            .to_owned();
        Ok((logits, tape))
    }

    pub fn logits(&self, z: ArrayView2<f64>, labels: &[Label], t: &[f64]) -> Result<Array1<f64>> {
        Ok(self.forward(z, labels, t)?.0)
    }

    /// Gradients of `sum(logits * cot)` with respect to `phi` and to the
    /// data columns of the input.
    pub fn backward(&self, tape: &DiscTape, cot: &[f64]) -> Result<(DiscParams, Array2<f64>)> {
        let rows = tape.inputs[0].nrows();
        if cot.len() != rows {
            return Err(Error::contract("one logit cotangent per row is required"));
        }
        let mut grads = self.params();
        for (a, b) in &mut grads.factors {
            a.fill(0.0);
            b.fill(0.0);
        }
        grads.head = Dense::zeros(self.head.n_in(), 1);
        let delta_out = Array2::from_shape_vec((rows, 1), cot.to_vec()).expect("shape");
        let n_layers = self.encoder.len() + self.decoder.len();
        let mut delta = self
            .head
            .backward(tape.inputs[n_layers].view(), delta_out.view(), &mut grads.head);
        for (k, layer) in self.decoder.iter().enumerate().rev() {
            let l = self.encoder.len() + k;
            self.activation.backprop_inplace(&mut delta, &tape.outputs[l]);
            let x = tape.inputs[l].view();
            let u = &tape.projections[k];
            let (ga, gb) = &mut grads.factors[k];
            gb.scaled_add(layer.scale, &delta.t().dot(u));
            let delta_u = delta.dot(&layer.b);
            ga.scaled_add(layer.scale, &delta_u.t().dot(&x));
            let mut next = delta.dot(&layer.base.weight);
            next.scaled_add(layer.scale, &delta_u.dot(&layer.a));
            delta = next;
        }
        for (l, layer) in self.encoder.iter().enumerate().rev() {
            self.activation.backprop_inplace(&mut delta, &tape.outputs[l]);
            delta = delta.dot(&layer.weight);
        }
        let dim = self.layout.data_dim;
        Ok((grads, delta.slice(ndarray::s![.., ..dim]).to_owned()))
    }
}

/// `L_D = mean max(0, 1 - D(real)) + mean max(0, 1 + D(fake))` and
/// `L_G = -mean D(fake)`.
pub fn hinge_values(real_logits: &[f64], fake_logits: &[f64]) -> Result<(f64, f64)> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::contract("hinge loss of an empty batch"));
    }
    let nr = real_logits.len() as f64;
    let nf = fake_logits.len() as f64;
    let l_d = real_logits.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / nr
        + fake_logits.iter().map(|x| (1.0 + x).max(0.0)).sum::<f64>() / nf;
    let l_g = -fake_logits.iter().sum::<f64>() / nf;
    Ok((l_d, l_g))
}

#[derive(Debug, Clone)]
pub struct HingeOutput {
    pub disc_loss: f64,
    pub gen_loss: f64,
    /// `d L_D / d phi`; `L_G` contributes nothing here.
    pub grads_phi: DiscParams,
    /// `d L_G / d fake`; `L_D` contributes nothing here.
    pub grads_fake: Array2<f64>,
    pub real_logits: Array1<f64>,
    pub fake_logits: Array1<f64>,
}

/// Evaluates both hinge players. Real samples are scored at `t = 0`, fakes
/// at their source times `t_fake`; both carry the true condition.
pub fn hinge_losses(
    disc: &Discriminator,
    real: ArrayView2<f64>,
    fake: ArrayView2<f64>,
    conds: &[Label],
    t_fake: &[f64],
) -> Result<HingeOutput> {
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(Error::contract("hinge loss of an empty batch"));
    }
    let (real_logits, real_tape) = disc.forward(real, conds, &vec![0.0; real.nrows()])?;
    let (fake_logits, fake_tape) = disc.forward(fake, conds, t_fake)?;
    let (disc_loss, gen_loss) = hinge_values(
        real_logits.as_slice().expect("contiguous"),
        fake_logits.as_slice().expect("contiguous"),
    )?;

    let nr = real.nrows() as f64;
    let nf = fake.nrows() as f64;
    let real_cot: Vec<f64> = real_logits.iter().map(|&x| if x < 1.0 { -1.0 / nr } else { 0.0 }).collect();
    let fake_cot: Vec<f64> = fake_logits.iter().map(|&x| if x > -1.0 { 1.0 / nf } else { 0.0 }).collect();
    let (mut grads_phi, _) = disc.backward(&real_tape, &real_cot)?;
    let (fake_phi, _) = disc.backward(&fake_tape, &fake_cot)?;
    grads_phi.add_scaled(1.0, &fake_phi);
    let (_, grads_fake) = disc.backward(&fake_tape, &vec![-1.0 / nf; fake.nrows()])?;
    Ok(HingeOutput {
        disc_loss,
        gen_loss,
        grads_phi,
        grads_fake,
        real_logits,
        fake_logits,
    })
}

/// Weight of the adversarial term in the student objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_adv: 0.4 }
    }
}

/// `L_CD + lambda_adv L_adv`.
pub fn scott_loss(cd_value: f64, adv_generator_value: f64, weights: LossWeights) -> f64 {
    if weights.lambda_adv == 0.0 {
        return cd_value;
    }
    cd_value + weights.lambda_adv * adv_generator_value
}

/// Time at which the discriminator scores the student's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FakeTime {
    /// The source time `t_n` of each output.
    Source,
    /// `t = 0`, like the real samples.
    Zero,
}

impl FakeTime {
    pub fn name(self) -> &'static str {
        match self {
            FakeTime::Source => "source",
            FakeTime::Zero => "zero",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(FakeTime::Source),
            "zero" => Some(FakeTime::Zero),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanConfig {
    pub weights: LossWeights,
    pub rank: usize,
    pub adapter_scale: f64,
    /// Discriminator learning rate as a multiple of the student's.
    pub lr_ratio: f64,
    pub fake_time: FakeTime,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            rank: 4,
            adapter_scale: 1.0,
            lr_ratio: 2.5,
            fake_time: FakeTime::Source,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.weights.lambda_adv;
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::config(format!("lambda_adv must be finite and >= 0, got {l}")));
        }
        if self.rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        if !self.adapter_scale.is_finite() {
            return Err(Error::config("adapter scale must be finite"));
        }
        if !(self.lr_ratio > 0.0 && self.lr_ratio.is_finite()) {
            return Err(Error::config("discriminator learning-rate ratio must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
