//! Dense numerical kernel: seeded random streams, a small MLP with exact
//! reverse-mode gradients, Adam and EMA parameter tracking.

mod adam;
mod ema;
mod mlp;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use ema::Ema;
pub use mlp::{parameter_count, Activation, Dense, MlpParams, Tape};
pub use rng::{streams, RngStream};

/// SHA-256 over the tensor lengths and the little-endian bits of every
/// parameter, in visiting order. Equal fingerprints mean bit-equal weights.
pub fn fingerprint<P: Params + ?Sized>(params: &P) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in params.tensors() {
        h.update((t.len() as u64).to_le_bytes());
        for v in t {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// A collection of parameter tensors visited in a fixed order.
///
/// Optimizers and EMA trackers pair tensors of two collections by position,
/// so both sides must come from the same layout.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites the parameters from a flat vector in visiting order.
    fn assign_flat(&mut self, flat: &[f64]) -> crate::Result<()> {
        if flat.len() != self.param_count() {
            return Err(crate::Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }
}
