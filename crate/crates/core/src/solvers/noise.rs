use ndarray::Array2;

use crate::numerics::{streams, RngStream};

/// Supplier of standard-normal noise batches for stochastic steps.
pub trait NoiseSource {
    /// Overwrites `out` with independent N(0, 1) draws.
    fn fill(&mut self, out: &mut Array2<f64>);
}

impl NoiseSource for RngStream {
    fn fill(&mut self, out: &mut Array2<f64>) {
        match out.as_slice_mut() {
            Some(s) => self.fill_gauss(s),
            None => {
                let v = self.gauss_draw(out.len());
                out.iter_mut().zip(v).for_each(|(o, x)| *o = x);
            }
        }
    }
}

/// One stream per row, so row `i` sees the same noise regardless of the
/// batch it is solved in.
#[derive(Debug, Clone)]
pub struct PerRowStreams {
    streams: Vec<RngStream>,
}

impl PerRowStreams {
    /// Rows `offset..offset + rows` of the trajectory family for `seed`.
    pub fn new(seed: u64, offset: usize, rows: usize) -> Self {
        Self {
            streams: (0..rows)
                .map(|i| RngStream::new(seed, streams::TRAJECTORY_BASE + (offset + i) as u64))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }
}

impl NoiseSource for PerRowStreams {
    fn fill(&mut self, out: &mut Array2<f64>) {
        assert_eq!(out.nrows(), self.streams.len(), "one stream per row");
        for (mut row, s) in out.rows_mut().into_iter().zip(&mut self.streams) {
            let v = s.gauss_draw(row.len());
            row.iter_mut().zip(v).for_each(|(o, x)| *o = x);
        }
    }
}
