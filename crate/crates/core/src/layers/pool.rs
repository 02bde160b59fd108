use crate::error::{Error, Result};
use crate::layers::conv::dims4;
use crate::tensor::Tensor;

/// Non-overlapping max pooling (stride equals window).
///
/// Ties route the gradient to the first maximal element in row-major order.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub window: (usize, usize),
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    in_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(window: (usize, usize)) -> Self {
        MaxPool2d { window, cache: None }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.window;
        if ph == 0 || pw == 0 || !h.is_multiple_of(ph) || !w.is_multiple_of(pw) {
            return Err(Error::dim(
                "maxpool",
                format!("extent {h}×{w} is not divisible by window {ph}×{pw}"),
            ));
        }
        Ok((h / ph, w / pw))
    }

    /// Returns the pooled map; the flat input index of each selected maximum
    /// is kept for the backward pass (see [`MaxPool2d::argmax`]).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = dims4("maxpool", x)?;
        let (oh, ow) = self.output_extent(h, w)?;
        let (ph, pw) = self.window;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base + oy * ph * w + ox * pw;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let idx = base + (oy * ph + dy) * w + ox * pw + dx;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(data[best_idx]);
                    argmax.push(best_idx);
                }
            }
        }
        self.cache = Some(PoolCache {
            in_shape: [n, c, h, w],
            argmax,
        });
        Tensor::new(&[n, c, oh, ow], out)
    }

    pub fn argmax(&self) -> Option<&[usize]> {
        self.cache.as_ref().map(|c| c.argmax.as_slice())
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Input("maxpool backward before forward".into()))?;
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::dim(
                "maxpool backward",
                format!("gradient {:?} for {} outputs", grad_out.shape(), cache.argmax.len()),
            ));
        }
        let mut grad_in = Tensor::zeros(&cache.in_shape);
        let gi = grad_in.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
            gi[idx] += g;
        }
        Ok(grad_in)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}
