use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization for N×C×H×W (or N×C) activations.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub moving_mean: Tensor,
    pub moving_var: Tensor,
    /// Moving-average decay `d`: moving ← d·moving + (1−d)·batch.
    pub decay: f64,
    pub epsilon: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(id: &str, channels: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!(
                "{id}: moving-average decay must lie in (0,1), got {decay}"
            )));
        }
        Ok(BatchNorm {
            gamma: Parameter::new(format!("{id}.gamma"), Tensor::full(&[channels], 1.0), false),
            beta: Parameter::new(format!("{id}.beta"), Tensor::zeros(&[channels]), false),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::full(&[channels], 1.0),
            decay,
            epsilon: BN_EPSILON,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, spatial) = match *x.shape() {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => {
                return Err(Error::dim(
                    "batchnorm",
                    format!("expected rank 2 or 4 input, got {:?}", x.shape()),
                ))
            }
        };
        if c != self.channels() {
            return Err(Error::dim(
                "batchnorm",
                format!("input {:?} has {c} channels, layer has {}", x.shape(), self.channels()),
            ));
        }
        Ok((n, c, spatial))
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (n, c, spatial) = self.layout(x)?;
        if training && n < 2 {
            return Err(Error::Config(
                "batch normalization in training mode needs a batch of at least 2".into(),
            ));
        }
        let data = x.data();
        let count = (n * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for b in 0..n {
                for ch in 0..c {
                    let s = &data[(b * c + ch) * spatial..][..spatial];
                    mean[ch] += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..n {
                for ch in 0..c {
                    let s = &data[(b * c + ch) * spatial..][..spatial];
                    var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let d = self.decay;
            for ch in 0..c {
                let mm = &mut self.moving_mean.data_mut()[ch];
                *mm = d * *mm + (1.0 - d) * mean[ch];
                let mv = &mut self.moving_var.data_mut()[ch];
                *mv = d * *mv + (1.0 - d) * var[ch];
            }
        } else {
            mean.copy_from_slice(self.moving_mean.data());
            var.copy_from_slice(self.moving_var.data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        self.cache = Some(BnCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            batch_stats: training,
        });
        Tensor::new(x.shape(), out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Input("batchnorm backward before forward".into()))?;
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::dim(
                "batchnorm backward",
                format!("gradient {:?}, expected {:?}", grad_out.shape(), cache.shape),
            ));
        }
        let n = cache.shape[0];
        let c = cache.shape[1];
        let spatial = grad_out.len() / (n * c);
        let count = (n * spatial) as f64;
        let g = grad_out.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * spatial..(b * c + ch + 1) * spatial;
                for (dy, xhat) in g[range.clone()].iter().zip(&cache.xhat[range]) {
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xhat;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat[ch];
            self.beta.grad.data_mut()[ch] += sum_dy[ch];
        }
        let gamma = self.gamma.value.data();
        let mut grad_in = vec![0.0; g.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                let scale = gamma[ch] * cache.inv_std[ch];
                for i in off..off + spatial {
                    grad_in[i] = if cache.batch_stats {
                        scale * (g[i] - sum_dy[ch] / count - cache.xhat[i] * sum_dy_xhat[ch] / count)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        Tensor::new(&cache.shape, grad_in)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_stats(t: &Tensor, ch: usize) -> (f64, f64) {
        let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| t.data()[(b * c + ch) * h * w..][..h * w].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn standardized_input_passes_through() {
        // standardized under the layer's own denominator: var + eps == 1
        let mut bn = BatchNorm::new("bn", 1, 0.99).unwrap();
        let s = (1.0 - BN_EPSILON).sqrt();
        let x = Tensor::new(&[2, 1, 1, 2], vec![s, -s, s, -s]).unwrap();
        let y = bn.forward(&x, true).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn training_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm::new("bn", 3, 0.99).unwrap();
        let x = Tensor::new(&[4, 3, 5, 5], (0..300).map(|_| rng.random_range(-10.0..20.0)).collect()).unwrap();
        let y = bn.forward(&x, true).unwrap();
        for ch in 0..3 {
            let (m, v) = channel_stats(&y, ch);
            assert!(m.abs() < 1e-8);
            // var/(var+eps); the inputs have variance ~75
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn moving_mean_recurrence() {
        let mut bn = BatchNorm::new("bn", 1, 0.9).unwrap();
        let x = Tensor::new(&[2, 1], vec![0.5, 1.5]).unwrap();
        bn.forward(&x, true).unwrap();
        bn.forward(&x, true).unwrap();
        assert!((bn.moving_mean.data()[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn inference_uses_moving_stats_and_is_pure() {
        let mut bn = BatchNorm::new("bn", 1, 0.9).unwrap();
        bn.moving_mean = Tensor::full(&[1], 2.0);
        bn.moving_var = Tensor::full(&[1], 4.0 - BN_EPSILON);
        let x = Tensor::new(&[1, 1], vec![6.0]).unwrap();
        let a = bn.forward(&x, false).unwrap();
        let b = bn.forward(&x, false).unwrap();
        assert!((a.data()[0] - 2.0).abs() < 1e-12);
        assert_eq!(a, b);
        assert_eq!(bn.moving_mean.data(), &[2.0]);
    }

    #[test]
    fn batch_of_one_in_training_is_rejected() {
        let mut bn = BatchNorm::new("bn", 2, 0.9).unwrap();
        assert!(matches!(
            bn.forward(&Tensor::zeros(&[1, 2, 3, 3]), true),
            Err(Error::Config(_))
        ));
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 3, 3]), false).is_ok());
    }
}
