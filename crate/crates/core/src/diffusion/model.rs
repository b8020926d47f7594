//! Conditional epsilon-prediction networks and classifier-free guidance.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numerics::{Activation, MlpParams, RngStream, Tape};

use super::{MixtureSpec, Schedule};

/// Class label of a sample; `None` is the null (unconditional) label.
pub type Label = Option<usize>;

/// Anything that predicts the injected noise for a batch of states.
/// Row `i` of `z` is evaluated at time `t[i]`.
pub trait EpsPredictor {
    fn eps(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>>;
}

impl<F> EpsPredictor for F
where
    F: Fn(ArrayView2<f64>, &[f64]) -> Result<Array2<f64>>,
{
    fn eps(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        self(z, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeEmbedding {
    /// `t / T`.
    Scalar,
    /// `sin(2^j pi t/T), cos(2^j pi t/T)` for `j < frequencies`.
    Fourier { frequencies: usize },
}

impl TimeEmbedding {
    pub fn width(self) -> usize {
        match self {
            TimeEmbedding::Scalar => 1,
            TimeEmbedding::Fourier { frequencies } => 2 * frequencies,
        }
    }

    fn write(self, unit_time: f64, out: &mut [f64]) {
        match self {
            TimeEmbedding::Scalar => out[0] = unit_time,
            TimeEmbedding::Fourier { frequencies } => {
                for j in 0..frequencies {
                    let w = std::f64::consts::PI * (1u64 << j) as f64 * unit_time;
                    out[2 * j] = w.sin();
                    out[2 * j + 1] = w.cos();
                }
            }
        }
    }

    pub fn name(self) -> String {
        match self {
            TimeEmbedding::Scalar => "scalar".into(),
            TimeEmbedding::Fourier { frequencies } => format!("fourier:{frequencies}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "scalar" {
            return Some(TimeEmbedding::Scalar);
        }
        s.strip_prefix("fourier:")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n > 0)
            .map(|frequencies| TimeEmbedding::Fourier { frequencies })
    }
}

/// How `(z, t, label)` is laid out as a network input row:
/// `[z | time features | one-hot label]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputLayout {
    pub data_dim: usize,
    pub time: TimeEmbedding,
    /// Zero for unconditional models.
    pub n_classes: usize,
    pub t_max: f64,
}

impl InputLayout {
    pub fn width(&self) -> usize {
        self.data_dim + self.time.width() + self.label_width()
    }

    /// One-hot classes plus a trailing slot for the null label.
    pub fn label_width(&self) -> usize {
        if self.n_classes == 0 {
            0
        } else {
            self.n_classes + 1
        }
    }

    pub fn build(&self, z: ArrayView2<f64>, t: &[f64], labels: &[Label]) -> Result<Array2<f64>> {
        let n = z.nrows();
        if z.ncols() != self.data_dim {
            return Err(Error::contract(format!(
                "state has {} features, model expects {}",
                z.ncols(),
                self.data_dim
            )));
        }
        if t.len() != n {
            return Err(Error::contract(format!("{} times for {n} rows", t.len())));
        }
        if !labels.is_empty() && labels.len() != n {
            return Err(Error::contract(format!("{} labels for {n} rows", labels.len())));
        }
        let mut input = Array2::zeros((n, self.width()));
        let tw = self.time.width();
        for i in 0..n {
            let mut row = input.row_mut(i);
            let row = row.as_slice_mut().expect("standard layout");
            for j in 0..self.data_dim {
                row[j] = z[[i, j]];
            }
            self.time
                .write(t[i] / self.t_max, &mut row[self.data_dim..self.data_dim + tw]);
            if let Some(Some(c)) = labels.get(i) {
                if *c >= self.n_classes {
                    return Err(Error::contract(if self.n_classes == 0 {
                        "label given to an unconditional model".to_string()
                    } else {
                        format!("label {c} out of range for {} classes", self.n_classes)
                    }));
                }
                row[self.data_dim + tw + c] = 1.0;
            } else if self.n_classes > 0 {
                row[self.data_dim + tw + self.n_classes] = 1.0;
            }
        }
        Ok(input)
    }
}

/// Guidance scale and the condition it applies to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfgSetting {
    pub omega: f64,
    pub condition: Label,
}

impl CfgSetting {
    pub fn unconditional() -> Self {
        Self {
            omega: 0.0,
            condition: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::config(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.omega
            )));
        }
        if self.omega > 0.0 && self.condition.is_none() {
            return Err(Error::config("guidance scale > 0 needs a condition"));
        }
        Ok(())
    }
}

/// An epsilon-prediction network with its input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub layout: InputLayout,
    pub net: MlpParams,
}

impl ScoreModel {
    pub fn new(layout: InputLayout, hidden: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        let mut sizes = vec![layout.width()];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.data_dim);
        Ok(Self {
            layout,
            net: MlpParams::init(&sizes, activation, rng)?,
        })
    }

    pub fn from_parts(layout: InputLayout, net: MlpParams) -> Result<Self> {
        if net.input_width() != layout.width() || net.output_width() != layout.data_dim {
            return Err(Error::config(format!(
                "network {:?} does not fit input layout of width {} and data dimension {}",
                net.layer_sizes(),
                layout.width(),
                layout.data_dim
            )));
        }
        Ok(Self { layout, net })
    }

    pub fn is_conditional(&self) -> bool {
        self.layout.n_classes > 0
    }

    pub fn forward(&self, z: ArrayView2<f64>, t: &[f64], labels: &[Label]) -> Result<(Array2<f64>, Tape)> {
        let input = self.layout.build(z, t, labels)?;
        self.net.forward(input.view())
    }

    pub fn predict(&self, z: ArrayView2<f64>, t: &[f64], labels: &[Label]) -> Result<Array2<f64>> {
        let input = self.layout.build(z, t, labels)?;
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite network input"));
        }
        Ok(self.net.predict(input.view()))
    }

    /// `eps_uncond + omega (eps_cond - eps_uncond)` at a single time.
    pub fn cfg_eps(&self, z: ArrayView2<f64>, t: f64, setting: CfgSetting) -> Result<Array2<f64>> {
        setting.validate()?;
        let labels = vec![setting.condition; z.nrows()];
        Guided::new(self, labels, setting.omega)?.eps(z, &vec![t; z.nrows()])
    }
}

/// The unconditional prediction.
impl EpsPredictor for ScoreModel {
    fn eps(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        self.predict(z, t, &[])
    }
}

/// Classifier-free guided predictor with a per-row condition.
#[derive(Debug, Clone)]
pub struct Guided<'a> {
    model: &'a ScoreModel,
    labels: Vec<Label>,
    omega: f64,
}

impl<'a> Guided<'a> {
    pub fn new(model: &'a ScoreModel, labels: Vec<Label>, omega: f64) -> Result<Self> {
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(Error::config(format!("guidance scale must be finite and >= 0, got {omega}")));
        }
        if omega > 0.0 {
            if !model.is_conditional() {
                return Err(Error::contract("guidance requested from an unconditional model"));
            }
            if labels.iter().any(Option::is_none) {
                return Err(Error::config("guidance scale > 0 needs a condition for every row"));
            }
        }
        Ok(Self { model, labels, omega })
    }
}

impl EpsPredictor for Guided<'_> {
    fn eps(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        if self.omega == 0.0 {
            return self.model.predict(z, t, &[]);
        }
        let cond = self.model.predict(z, t, &self.labels)?;
        if self.omega == 1.0 {
            return Ok(cond);
        }
        let uncond = self.model.predict(z, t, &[])?;
        Ok(&uncond + &((&cond - &uncond) * self.omega))
    }
}

/// The exact noise prediction of a mixture under a schedule.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticEps<'a> {
    pub spec: &'a MixtureSpec,
    pub schedule: &'a Schedule,
}

impl EpsPredictor for AnalyticEps<'_> {
    fn eps(&self, z: ArrayView2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        if t.len() != z.nrows() {
            return Err(Error::contract(format!("{} times for {} rows", t.len(), z.nrows())));
        }
        Ok(self.spec.eps_rows(z, |i| self.schedule.alpha_bar_at(t[i]), None))
    }
}
