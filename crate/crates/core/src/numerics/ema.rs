use super::Params;
use crate::error::{Error, Result};

/// Exponential moving average of a parameter collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<P> {
    pub shadow: P,
    pub rate: f64,
}

impl<P: Params + Clone> Ema<P> {
    pub fn new(initial: &P, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::config(format!("EMA rate must lie in (0, 1], got {rate}")));
        }
        Ok(Self {
            shadow: initial.clone(),
            rate,
        })
    }

    /// `shadow <- rate * shadow + (1 - rate) * online`, elementwise.
    pub fn update(&mut self, online: &P) -> Result<()> {
        if self.shadow.shapes() != online.shapes() {
            return Err(Error::contract("EMA: shadow and online shapes differ"));
        }
        let mu = self.rate;
        for (s, o) in self.shadow.tensors_mut().into_iter().zip(online.tensors()) {
            for (s, o) in s.iter_mut().zip(o) {
                *s = mu * *s + (1.0 - mu) * o;
            }
        }
        Ok(())
    }
}
