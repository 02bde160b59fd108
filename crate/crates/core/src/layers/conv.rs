use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Parameter, Tensor};

/// Stride-1 cross-correlation with same padding (odd square kernels).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: Parameter,
    /// Absent when a batch-norm follows, whose shift makes it redundant.
    pub bias: Option<Parameter>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    in_shape: [usize; 4],
    /// im2col buffer per sample, (C·k·k) × (H·W), concatenated over the batch.
    cols: Vec<f64>,
}

impl Conv2d {
    pub fn new(id: &str, in_ch: usize, out_ch: usize, ksize: usize, rng: &mut impl Rng) -> Result<Self> {
        if ksize.is_multiple_of(2) || in_ch == 0 || out_ch == 0 {
            return Err(Error::Config(format!(
                "{id}: conv needs an odd kernel and non-zero channels (k={ksize}, {in_ch}->{out_ch})"
            )));
        }
        let fan_in = (in_ch * ksize * ksize) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let n = out_ch * in_ch * ksize * ksize;
        let w: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Ok(Conv2d {
            kernel: Parameter::new(
                format!("{id}.kernel"),
                Tensor::new(&[out_ch, in_ch, ksize, ksize], w)?,
                true,
            ),
            bias: Some(Parameter::new(format!("{id}.bias"), Tensor::zeros(&[out_ch]), false)),
            cache: None,
        })
    }

    /// Drops the bias. A following batch-norm subtracts any per-channel
    /// constant, so the bias would have an identically zero gradient.
    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn ksize(&self) -> usize {
        self.kernel.value.shape()[2]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = dims4("conv2d", x)?;
        if c != self.in_channels() {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input {:?} has {c} channels, kernel {:?} expects {}",
                    x.shape(),
                    self.kernel.value.shape(),
                    self.in_channels()
                ),
            ));
        }
        let k = self.ksize();
        let o = self.out_channels();
        let ckk = c * k * k;
        let hw = h * w;
        let mut cols = vec![0.0; n * ckk * hw];
        let mut out = vec![0.0; n * o * hw];
        for b in 0..n {
            let img = &x.data()[b * c * hw..(b + 1) * c * hw];
            let col = &mut cols[b * ckk * hw..(b + 1) * ckk * hw];
            im2col(img, c, h, w, k, col);
            let dst = &mut out[b * o * hw..(b + 1) * o * hw];
            if let Some(bias) = &self.bias {
                for (oc, plane) in dst.chunks_exact_mut(hw).enumerate() {
                    plane.fill(bias.value.data()[oc]);
                }
            }
            gemm(o, ckk, hw, 1.0, self.kernel.value.data(), false, col, false, 1.0, dst);
        }
        self.cache = Some(ConvCache {
            in_shape: [n, c, h, w],
            cols,
        });
        Tensor::new(&[n, o, h, w], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Input("conv2d backward before forward".into()))?;
        let [n, c, h, w] = cache.in_shape;
        let k = self.ksize();
        let o = self.out_channels();
        if grad_out.shape() != [n, o, h, w] {
            return Err(Error::dim(
                "conv2d backward",
                format!("gradient {:?}, expected {:?}", grad_out.shape(), [n, o, h, w]),
            ));
        }
        let ckk = c * k * k;
        let hw = h * w;
        let mut grad_in = vec![0.0; n * c * hw];
        let mut dcol = vec![0.0; ckk * hw];
        for b in 0..n {
            let g = &grad_out.data()[b * o * hw..(b + 1) * o * hw];
            let col = &cache.cols[b * ckk * hw..(b + 1) * ckk * hw];
            // dK += g · colᵀ
            gemm(o, hw, ckk, 1.0, g, false, col, true, 1.0, self.kernel.grad.data_mut());
            if let Some(bias) = &mut self.bias {
                for (oc, plane) in g.chunks_exact(hw).enumerate() {
                    bias.grad.data_mut()[oc] += plane.iter().sum::<f64>();
                }
            }
            // dcol = Kᵀ · g
            gemm(
                ckk,
                o,
                hw,
                1.0,
                self.kernel.value.data(),
                true,
                g,
                false,
                0.0,
                &mut dcol,
            );
            col2im(&dcol, c, h, w, k, &mut grad_in[b * c * hw..(b + 1) * c * hw]);
        }
        Tensor::new(&[n, c, h, w], grad_in)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.kernel).chain(&self.bias).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.kernel).chain(&mut self.bias).collect()
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

pub(crate) fn dims4(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(op, format!("expected N×C×H×W input, got {:?}", x.shape()))),
    }
}

fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, s) in src.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor, k: &Tensor, bias: &[f64]) -> Vec<f64> {
        let [n, c, h, w] = dims4("t", x).unwrap();
        let (o, ks) = (k.shape()[0], k.shape()[2]);
        let p = (ks / 2) as isize;
        let mut out = vec![0.0; n * o * h * w];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = bias[oc];
                        for ic in 0..c {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * c + ic) * h + sy as usize) * w + sx as usize]
                                        * k.data()[((oc * c + ic) * ks + ky) * ks + kx];
                                }
                            }
                        }
                        out[((b * o + oc) * h + y) * w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn layer(c: usize, o: usize, seed: u64) -> Conv2d {
        Conv2d::new("c", c, o, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn ones_same_padding() {
        let mut conv = layer(1, 1, 0);
        conv.kernel.value.fill(1.0);
        let y = conv.forward(&Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut conv = layer(1, 1, 0);
        conv.kernel.value.fill(0.0);
        conv.kernel.value.data_mut()[4] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(&[2, 1, 5, 4], (0..40).map(|_| rng.random::<f64>()).collect()).unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x.reshape(&[2, 1, 5, 4]).unwrap());
    }

    #[test]
    fn matches_naive_loops() {
        let mut conv = layer(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bias = conv.bias.as_mut().unwrap();
        bias.value
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-1.0..1.0));
        let x = Tensor::new(&[2, 3, 8, 8], (0..384).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = conv.forward(&x).unwrap();
        let expected = naive(&x, &conv.kernel.value, conv.bias.as_ref().unwrap().value.data());
        let diff = y
            .data()
            .iter()
            .zip(&expected)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn biasless_matches_zero_bias() {
        let mut with = layer(2, 3, 4);
        let mut without = with.clone().without_bias();
        let x = Tensor::new(&[1, 2, 3, 3], (0..18).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        assert_eq!(with.forward(&x).unwrap(), without.forward(&x).unwrap());
        assert_eq!(without.params().len(), 1);
    }

    #[test]
    fn channel_mismatch() {
        let mut conv = layer(2, 1, 0);
        assert!(matches!(
            conv.forward(&Tensor::zeros(&[1, 3, 4, 4])),
            Err(Error::Dimension { .. })
        ));
    }
}
