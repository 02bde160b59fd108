//! Layer vocabulary with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs during `forward`;
//! `backward` accumulates parameter gradients and returns the gradient with
//! respect to the layer input.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod pool;

pub use activation::{relu, Dropout, Relu};
pub use batchnorm::{BatchNorm, BN_EPSILON};
pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_grad};
pub use pool::MaxPool2d;

use crate::error::Result;
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu(Relu),
    MaxPool(MaxPool2d),
    Linear(Linear),
    Dropout(Dropout),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Linear(_) => "fc",
            Layer::Dropout(_) => "dropout",
        }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, training),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Dropout(l) => Ok(l.forward(x, training).0),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(grad_out),
            Layer::BatchNorm(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::MaxPool(l) => l.backward(grad_out),
            Layer::Linear(l) => l.backward(grad_out),
            Layer::Dropout(l) => l.backward(grad_out),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Layer::Conv(l) => l.params(),
            Layer::BatchNorm(l) => l.params(),
            Layer::Linear(l) => l.params(),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Conv(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            Layer::Linear(l) => l.params_mut(),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }

    /// Moving statistics and other non-trainable state that a checkpoint
    /// must carry, as (suffix, tensor) pairs.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::BatchNorm(l) => vec![("moving_mean", &l.moving_mean), ("moving_var", &l.moving_var)],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::BatchNorm(l) => vec![("moving_mean", &mut l.moving_mean), ("moving_var", &mut l.moving_var)],
            _ => Vec::new(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.clear_cache(),
            Layer::Relu(l) => l.clear_cache(),
            Layer::MaxPool(l) => l.clear_cache(),
            Layer::Linear(l) => l.clear_cache(),
            Layer::Dropout(l) => l.clear_cache(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, Differentiable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Objective Σ r ⊙ layer(x), with the input itself checked as a parameter.
    struct Probe {
        layer: Layer,
        input: Parameter,
        weights: Vec<f64>,
        training: bool,
    }

    impl Differentiable for Probe {
        fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
            if let Layer::Dropout(d) = &mut self.layer {
                d.reset();
            }
            let y = self.layer.forward(&self.input.value, self.training)?;
            let loss = y.data().iter().zip(&self.weights).map(|(a, b)| a * b).sum();
            if with_grad {
                let g = Tensor::new(y.shape(), self.weights.clone())?;
                let gi = self.layer.backward(&g)?;
                self.input.grad.add_assign(&gi)?;
            }
            Ok(loss)
        }

        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            let mut ps = self.layer.params_mut();
            ps.push(&mut self.input);
            ps
        }
    }

    fn probe(layer: Layer, in_shape: &[usize], out_len: usize, training: bool, rng: &mut ChaCha8Rng) -> Probe {
        let n: usize = in_shape.iter().product();
        let x = Tensor::new(in_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        Probe {
            layer,
            input: Parameter::new("input", x, false),
            weights: (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            training,
        }
    }

    fn check(mut p: Probe) {
        let r = grad_check(&mut p, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{} {r:?}", p.layer.kind());
    }

    #[test]
    fn conv_backward() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut conv = Conv2d::new("c", 2, 3, 3, &mut rng).unwrap();
            conv.bias
                .as_mut()
                .unwrap()
                .value
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
            check(probe(Layer::Conv(conv), &[2, 2, 4, 5], 2 * 3 * 20, true, &mut rng));
        }
    }

    #[test]
    fn batchnorm_backward_both_modes() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bn = BatchNorm::new("bn", 3, 0.9).unwrap();
            bn.gamma
                .value
                .data_mut()
                .iter_mut()
                .for_each(|g| *g = rng.random_range(0.5..1.5));
            bn.moving_var
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..1.5));
            check(probe(Layer::BatchNorm(bn.clone()), &[3, 3, 2, 2], 36, true, &mut rng));
            check(probe(Layer::BatchNorm(bn), &[3, 3, 2, 2], 36, false, &mut rng));
        }
    }

    #[test]
    fn linear_relu_pool_dropout_backward() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fc = Linear::new("fc", 12, 4, &mut rng).unwrap();
            check(probe(Layer::Linear(fc), &[3, 3, 2, 2], 12, true, &mut rng));
            check(probe(Layer::Relu(Relu::default()), &[2, 7], 14, true, &mut rng));
            check(probe(
                Layer::MaxPool(MaxPool2d::new((2, 2))),
                &[2, 2, 4, 4],
                16,
                true,
                &mut rng,
            ));
            let d = Dropout::new(0.5, seed).unwrap();
            check(probe(Layer::Dropout(d), &[3, 8], 24, true, &mut rng));
        }
    }
}
