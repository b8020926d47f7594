//! Fixtures shared by the benchmarks.

use ndarray::Array2;

use scott_core::diffusion::{InputLayout, Label, MixtureSpec, Schedule, ScoreModel, TimeEmbedding};
use scott_core::numerics::{Activation, RngStream};

/// The default teacher architecture on the 1-D three-mode task, untrained.
pub fn default_model(schedule: &Schedule, seed: u64) -> ScoreModel {
    let layout = InputLayout {
        data_dim: 1,
        time: TimeEmbedding::Fourier { frequencies: 1 },
        n_classes: 3,
        t_max: schedule.t_max(),
    };
    ScoreModel::new(layout, &[64; 4], Activation::Tanh, &mut RngStream::new(seed, 0)).expect("valid layout")
}

pub fn mixture_batch(n: usize, seed: u64) -> (Array2<f64>, Vec<Label>) {
    let (x, classes) = MixtureSpec::three_mode().sample(n, &mut RngStream::new(seed, 1));
    (x, classes.into_iter().map(Some).collect())
}

pub fn gauss(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), RngStream::new(seed, 2).gauss_draw(rows * cols)).expect("shape")
}
