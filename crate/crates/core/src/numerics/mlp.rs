//! A small fully connected network with a hand-written reverse pass.
//!
//! Batches are row-major `batch x features` matrices. The forward pass
//! records every layer input on a [`Tape`]; `backward` replays it.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{Params, RngStream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn apply_inplace(self, a: &mut Array2<f64>) {
        if self != Activation::Identity {
            a.mapv_inplace(|x| self.apply(x));
        }
    }

    pub(crate) fn backprop_inplace(self, delta: &mut Array2<f64>, output: &Array2<f64>) {
        if self != Activation::Identity {
            delta.zip_mut_with(output, |d, &y| *d *= self.slope_from_output(y));
        }
    }
}

/// Affine layer `y = x Wᵀ + b` with `W` stored `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
        }
    }

    /// Weights uniform in `±sqrt(1/n_in)`, zero bias.
    pub fn init(n_in: usize, n_out: usize, rng: &mut RngStream) -> Self {
        let bound = (1.0 / n_in as f64).sqrt();
        let weight = Array2::from_shape_fn((n_out, n_in), |_| bound * (2.0 * rng.uniform() - 1.0));
        Self {
            weight,
            bias: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients for cotangent `delta` at input `x` and
    /// returns the input cotangent.
    pub(crate) fn backward(&self, x: ArrayView2<f64>, delta: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &delta.t().dot(&x);
        grad.bias += &delta.sum_axis(Axis(0));
        delta.dot(&self.weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Layer inputs recorded by [`MlpParams::forward`]: entry `l` is the input of
/// layer `l`, the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape is never empty")
    }

    pub fn batch(&self) -> usize {
        self.activations[0].nrows()
    }
}

pub fn parameter_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(format!(
            "an MLP needs at least an input and an output width, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config(format!("zero-width layer in {layer_sizes:?}")));
    }
    Ok(())
}

impl MlpParams {
    pub fn init(layer_sizes: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        check_layer_sizes(layer_sizes)?;
        let layers = layer_sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        check_layer_sizes(layer_sizes)?;
        let layers = layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::config(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].n_out(),
                    i + 1,
                    pair[1].n_in()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.n_out() {
                return Err(Error::config(format!("layer {i} bias has the wrong length")));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.n_in(), l.n_out())).collect(),
            activation: self.activation,
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].n_in()];
        sizes.extend(self.layers.iter().map(Dense::n_out));
        sizes
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(Dense::n_out).unwrap_or(0)
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = self.layers[0].forward(input);
        if last > 0 {
            self.activation.apply_inplace(&mut a);
        }
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            a = layer.forward(a.view());
            if l < last {
                self.activation.apply_inplace(&mut a);
            }
        }
        a
    }

    /// Hidden layers use `activation`; the output layer is affine.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        if input.ncols() != self.input_width() {
            return Err(Error::contract(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.input_width()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite network input"));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = layer.forward(activations[l].view());
            if l < last {
                self.activation.apply_inplace(&mut a);
            }
            activations.push(a);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((out, Tape { activations }))
    }

    pub fn forward_vec(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::contract(e.to_string()))?;
        let (y, tape) = self.forward(x)?;
        Ok((y.iter().copied().collect(), tape))
    }

    /// Gradients of `sum(output ⊙ cotangent)` with respect to the parameters
    /// (summed over the batch) and to the input.
    pub fn backward(&self, tape: &Tape, cotangent: ArrayView2<f64>) -> Result<(MlpParams, Array2<f64>)> {
        self.check_tape(tape)?;
        if cotangent.dim() != tape.output().dim() {
            return Err(Error::contract(format!(
                "cotangent shape {:?} does not match output shape {:?}",
                cotangent.dim(),
                tape.output().dim()
            )));
        }
        let mut grads = self.zeros_like();
        let last = self.layers.len() - 1;
        let mut delta = cotangent.to_owned();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                self.activation.backprop_inplace(&mut delta, &tape.activations[l + 1]);
            }
            delta = self.layers[l].backward(tape.activations[l].view(), delta.view(), &mut grads.layers[l]);
        }
        Ok((grads, delta))
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::contract("tape was recorded by a network of different depth"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if tape.activations[l].ncols() != layer.n_in() || tape.activations[l + 1].ncols() != layer.n_out() {
                return Err(Error::contract(format!("tape width mismatch at layer {l}")));
            }
        }
        Ok(())
    }
}

impl Params for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng() -> RngStream {
        RngStream::new(7, 1)
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpParams::init(&[3, 64, 64, 64, 1], Activation::Tanh, &mut rng()).unwrap();
        let b = MlpParams::init(&[3, 64, 64, 64, 1], Activation::Tanh, &mut rng()).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let bound = (1.0f64 / 64.0).sqrt();
        assert!(a.layers[1].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn parameter_count_matches_formula() {
        let sizes = [3, 64, 64, 64, 1];
        let net = MlpParams::init(&sizes, Activation::Tanh, &mut rng()).unwrap();
        // 3*64+64 + 2*(64*64+64) + 64*1+1
        assert_eq!(net.param_count(), 256 + 2 * 4160 + 65);
        assert_eq!(parameter_count(&sizes), 8641);
    }

    #[test]
    fn degenerate_layouts_are_rejected() {
        assert!(matches!(
            MlpParams::init(&[2], Activation::Tanh, &mut rng()),
            Err(Error::Config(_))
        ));
        assert!(MlpParams::init(&[2, 0, 1], Activation::Tanh, &mut rng()).is_err());
        let bad = vec![Dense::zeros(2, 3), Dense::zeros(4, 1)];
        assert!(MlpParams::from_layers(bad, Activation::Tanh).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpParams::zeros(&[4, 8, 2], Activation::Tanh).unwrap();
        let (y, _) = net.forward(array![[0.3, -1.0, 2.0, 5.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_single_layer() {
        let mut layer = Dense::zeros(3, 3);
        layer.weight = Array2::eye(3);
        let net = MlpParams::from_layers(vec![layer], Activation::Tanh).unwrap();
        let (y, _) = net.forward_vec(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(y, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_is_pure_and_predict_agrees() {
        let net = MlpParams::init(&[2, 16, 16, 3], Activation::Tanh, &mut rng()).unwrap();
        let x = array![[0.1, 0.7], [-1.2, 3.0]];
        let (a, _) = net.forward(x.view()).unwrap();
        let (b, _) = net.forward(x.view()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(x.view()));
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let net = MlpParams::init(&[2, 4, 1], Activation::Tanh, &mut rng()).unwrap();
        assert!(matches!(net.forward(array![[f64::NAN, 0.0]].view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn linear_layer_gradient_is_the_input() {
        let mut layer = Dense::zeros(3, 1);
        layer.weight = array![[0.5, -0.25, 2.0]];
        let net = MlpParams::from_layers(vec![layer], Activation::Tanh).unwrap();
        let x = [1.0, 2.0, -3.0];
        let (_, tape) = net.forward_vec(&x).unwrap();
        let (g, gx) = net.backward(&tape, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].weight, array![[1.0, 2.0, -3.0]]);
        assert_eq!(g.layers[0].bias, array![1.0]);
        assert_eq!(gx, array![[0.5, -0.25, 2.0]]);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let net = MlpParams::init(&[2, 8, 8, 1], Activation::Tanh, &mut rng()).unwrap();
        let (_, tape) = net.forward(array![[0.3, 0.4], [1.0, -1.0]].view()).unwrap();
        let (g, gx) = net.backward(&tape, Array2::zeros((2, 1)).view()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_tape_is_rejected() {
        let a = MlpParams::init(&[2, 8, 1], Activation::Tanh, &mut rng()).unwrap();
        let b = MlpParams::init(&[2, 8, 8, 1], Activation::Tanh, &mut rng()).unwrap();
        let (_, tape) = a.forward(array![[0.3, 0.4]].view()).unwrap();
        assert!(matches!(b.backward(&tape, array![[1.0]].view()), Err(Error::Contract(_))));
        assert!(matches!(
            a.backward(&tape, array![[1.0, 2.0]].view()),
            Err(Error::Contract(_))
        ));
    }
}
