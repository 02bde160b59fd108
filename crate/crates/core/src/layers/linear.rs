use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Parameter, Tensor};

/// Fully-connected layer over the flattened non-batch extents: `x·W + b`,
/// with `W` stored as in_features × out_features.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
    cache: Option<(Vec<usize>, Tensor)>,
}

impl Linear {
    pub fn new(id: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config(format!(
                "{id}: fully-connected layer needs non-zero extents ({in_features}->{out_features})"
            )));
        }
        let normal = Normal::new(0.0, (2.0 / in_features as f64).sqrt()).unwrap();
        let w = (0..in_features * out_features).map(|_| normal.sample(rng)).collect();
        Ok(Linear {
            weight: Parameter::new(
                format!("{id}.weight"),
                Tensor::new(&[in_features, out_features], w)?,
                true,
            ),
            bias: Parameter::new(format!("{id}.bias"), Tensor::zeros(&[out_features]), false),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.cache = Some((x.shape().to_vec(), x.clone().flatten_batch()));
        Ok(out)
    }

    /// Forward without caching anything for backward.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.batch();
        let f = x.row_len();
        if f != self.in_features() {
            return Err(Error::dim(
                "fc",
                format!(
                    "input {:?} flattens to {f} features, weight is {:?}",
                    x.shape(),
                    self.weight.value.shape()
                ),
            ));
        }
        let o = self.out_features();
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            n,
            f,
            o,
            1.0,
            x.data(),
            false,
            self.weight.value.data(),
            false,
            1.0,
            &mut out,
        );
        Tensor::new(&[n, o], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (in_shape, x) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Input("fc backward before forward".into()))?;
        let n = x.batch();
        let (f, o) = (self.in_features(), self.out_features());
        if grad_out.shape() != [n, o] {
            return Err(Error::dim(
                "fc backward",
                format!("gradient {:?}, expected [{n}, {o}]", grad_out.shape()),
            ));
        }
        gemm(
            f,
            n,
            o,
            1.0,
            x.data(),
            true,
            grad_out.data(),
            false,
            1.0,
            self.weight.grad.data_mut(),
        );
        let bg = self.bias.grad.data_mut();
        for i in 0..n {
            for (b, g) in bg.iter_mut().zip(grad_out.row(i)) {
                *b += g;
            }
        }
        let mut grad_in = vec![0.0; n * f];
        gemm(
            n,
            o,
            f,
            1.0,
            grad_out.data(),
            false,
            self.weight.value.data(),
            true,
            0.0,
            &mut grad_in,
        );
        Tensor::new(in_shape, grad_in)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}
