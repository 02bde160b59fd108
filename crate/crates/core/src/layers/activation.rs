use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (y, mask) = relu(x);
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Input("relu backward before forward".into()))?;
        if mask.len() != grad_out.len() {
            return Err(Error::dim("relu backward", format!("gradient {:?}", grad_out.shape())));
        }
        let mut g = grad_out.clone();
        for (v, &keep) in g.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(g)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Element-wise `max(0, x)`; the mask marks strictly positive inputs.
pub fn relu(x: &Tensor) -> (Tensor, Vec<bool>) {
    let mut y = x.clone();
    let mut mask = Vec::with_capacity(x.len());
    for v in y.data_mut() {
        let keep = *v > 0.0;
        if !keep {
            *v = 0.0;
        }
        mask.push(keep);
    }
    (y, mask)
}

/// Inverted dropout: survivors are scaled by `1/keep_prob` at train time so
/// inference is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub keep_prob: f64,
    pub rng_seed: u64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(keep_prob: f64, rng_seed: u64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob must lie in (0,1], got {keep_prob}")));
        }
        Ok(Dropout {
            keep_prob,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            mask: None,
        })
    }

    /// Restarts the mask stream from `rng_seed`.
    pub fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng_seed = seed;
        self.reset();
    }

    /// Returns the output and the multiplicative mask that produced it.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> (Tensor, Vec<f64>) {
        let mask: Vec<f64> = if training && self.keep_prob < 1.0 {
            let scale = 1.0 / self.keep_prob;
            (0..x.len())
                .map(|_| {
                    if self.rng.random::<f64>() < self.keep_prob {
                        scale
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            vec![1.0; x.len()]
        };
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask.clone());
        (y, mask)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Input("dropout backward before forward".into()))?;
        if mask.len() != grad_out.len() {
            return Err(Error::dim(
                "dropout backward",
                format!("gradient {:?}", grad_out.shape()),
            ));
        }
        let mut g = grad_out.clone();
        for (v, m) in g.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
        Ok(g)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.mask = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, mask) = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(mask, vec![false, false, true]);
    }

    #[test]
    fn keep_all_is_identity() {
        let mut d = Dropout::new(1.0, 3).unwrap();
        let x = Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let (y, mask) = d.forward(&x, true);
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn inference_is_identity() {
        let mut d = Dropout::new(0.5, 3).unwrap();
        let x = Tensor::full(&[4, 8], 2.0);
        assert_eq!(d.forward(&x, false).0, x);
    }

    #[test]
    fn half_dropout_statistics() {
        let mut d = Dropout::new(0.5, 42).unwrap();
        let x = Tensor::full(&[100_000], 1.0);
        let (y, mask) = d.forward(&x, true);
        let survivors = mask.iter().filter(|&&m| m > 0.0).count() as f64 / 1e5;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        let mean = y.sum() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn reset_replays_masks() {
        let mut d = Dropout::new(0.5, 9).unwrap();
        let x = Tensor::full(&[64], 1.0);
        let (_, a) = d.forward(&x, true);
        d.reset();
        let (_, b) = d.forward(&x, true);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_keep_prob() {
        assert!(Dropout::new(0.0, 0).is_err());
        assert!(Dropout::new(1.5, 0).is_err());
    }
}
