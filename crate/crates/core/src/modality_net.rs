//! Modality-dedicated VGG-style backbones with embedding taps.
//!
//! A backbone is a stack of conv blocks (conv → batch-norm → ReLU, repeated,
//! then a max-pool). The convs carry no bias since batch-norm's shift
//! subsumes it. Embedding taps map an intermediate feature map to a
//! vector: either max-pool + FC (+ReLU), or a global average over each
//! channel. The deep tap `FC6` reads the final pooled map; the shallow tap
//! `FC3` reads an earlier pool output through an extra max-pool.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Dropout, Layer, Linear, MaxPool2d, Relu};
use crate::tensor::{Parameter, Tensor};

pub const DEEP_TAP: &str = "FC6";
pub const SHALLOW_TAP: &str = "FC3";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub convs: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub modality: String,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockSpec>,
    /// One pooling window per block, applied after its convolutions.
    pub pool_windows: Vec<[usize; 2]>,
    pub width_scale: f64,
    pub embedding_dim: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_bn_decay")]
    pub bn_decay: f64,
}

fn default_kernel() -> usize {
    3
}

fn default_bn_decay() -> f64 {
    0.99
}

impl NetworkSpec {
    /// The five-block VGG19 trunk with a 1024-wide FC6, at full width.
    pub fn vgg19_trunk(modality: &str, input_shape: [usize; 3]) -> Self {
        NetworkSpec {
            modality: modality.to_string(),
            input_shape,
            blocks: [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)]
                .iter()
                .map(|&(convs, channels)| BlockSpec { convs, channels })
                .collect(),
            pool_windows: vec![[2, 2]; 5],
            width_scale: 1.0,
            embedding_dim: 1024,
            kernel_size: 3,
            bn_decay: 0.99,
        }
    }

    pub fn scaled_channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn pool_name(block: usize) -> String {
        format!("pool{}", block + 1)
    }

    pub fn final_pool(&self) -> String {
        Self::pool_name(self.blocks.len() - 1)
    }

    /// Shape propagation through the trunk without allocating weights.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(Error::Config(format!(
                "{}: width_scale must lie in (0,1], got {}",
                self.modality, self.width_scale
            )));
        }
        if self.blocks.is_empty() || self.blocks.len() != self.pool_windows.len() {
            return Err(Error::Config(format!(
                "{}: {} blocks but {} pool windows",
                self.modality,
                self.blocks.len(),
                self.pool_windows.len()
            )));
        }
        if self.embedding_dim == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{}: embedding_dim must be positive and kernel_size odd",
                self.modality
            )));
        }
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("{}: empty input shape", self.modality)));
        }
        let k = self.kernel_size;
        let mut plan = Vec::new();
        for (b, (block, win)) in self.blocks.iter().zip(&self.pool_windows).enumerate() {
            let out = self.scaled_channels(block.channels);
            for i in 0..block.convs {
                let tag = format!("{}_{}", b + 1, i + 1);
                plan.push(LayerPlan {
                    name: format!("conv{tag}"),
                    kind: "conv",
                    out_shape: [out, h, w],
                    params: out * c * k * k,
                });
                plan.push(LayerPlan {
                    name: format!("bn{tag}"),
                    kind: "batchnorm",
                    out_shape: [out, h, w],
                    params: 2 * out,
                });
                plan.push(LayerPlan {
                    name: format!("relu{tag}"),
                    kind: "relu",
                    out_shape: [out, h, w],
                    params: 0,
                });
                c = out;
            }
            let [ph, pw] = *win;
            if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
                return Err(Error::Config(format!(
                    "{}: block {} pool {ph}×{pw} does not divide the {h}×{w} map",
                    self.modality,
                    b + 1
                )));
            }
            h /= ph;
            w /= pw;
            plan.push(LayerPlan {
                name: Self::pool_name(b),
                kind: "maxpool",
                out_shape: [c, h, w],
                params: 0,
            });
        }
        Ok(plan)
    }

    /// Shape of a tap's pooled input and its output width.
    pub fn plan_tap(&self, tap: &TapSpec) -> Result<TapPlan> {
        let plan = self.plan()?;
        let src = plan.iter().find(|l| l.name == tap.source).ok_or_else(|| {
            Error::Config(format!(
                "{}: tap {} reads unknown layer '{}'",
                self.modality, tap.id, tap.source
            ))
        })?;
        let [c, h, w] = src.out_shape;
        match tap.reducer {
            Reducer::PoolFc { window } => {
                let [ph, pw] = window.unwrap_or([1, 1]);
                if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
                    return Err(Error::Config(format!(
                        "{}: tap {} pool {ph}×{pw} does not divide the {h}×{w} map of {}",
                        self.modality, tap.id, tap.source
                    )));
                }
                let pooled = [c, h / ph, w / pw];
                let fan_in = pooled.iter().product::<usize>();
                Ok(TapPlan {
                    pooled,
                    out_dim: self.embedding_dim,
                    params: fan_in * self.embedding_dim + self.embedding_dim,
                })
            }
            Reducer::GlobalAverage => Ok(TapPlan {
                pooled: [c, 1, 1],
                out_dim: c,
                params: 0,
            }),
        }
    }

    /// FC6: a fully-connected map of the final pooled feature map.
    pub fn deep_tap(&self) -> TapSpec {
        TapSpec {
            id: DEEP_TAP.into(),
            source: self.final_pool(),
            reducer: Reducer::PoolFc { window: None },
        }
    }

    /// FC3: `source` pool output, down-sampled by `window`, then FC.
    pub fn shallow_tap(source: &str, window: [usize; 2]) -> TapSpec {
        TapSpec {
            id: SHALLOW_TAP.into(),
            source: source.into(),
            reducer: Reducer::PoolFc { window: Some(window) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: &'static str,
    /// (channels, height, width) after the layer.
    pub out_shape: [usize; 3],
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapPlan {
    pub pooled: [usize; 3],
    pub out_dim: usize,
    pub params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reducer {
    /// Optional max-pool, then FC to the embedding width, then ReLU.
    PoolFc { window: Option<[usize; 2]> },
    /// Mean of each channel; output width equals the channel count.
    GlobalAverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub id: String,
    pub source: String,
    pub reducer: Reducer,
}

#[derive(Debug, Clone)]
struct Tap {
    spec: TapSpec,
    source_index: usize,
    pool: Option<MaxPool2d>,
    fc: Option<Linear>,
    relu: Relu,
    source_shape: Vec<usize>,
}

impl Tap {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.source_shape = x.shape().to_vec();
        match self.spec.reducer {
            Reducer::GlobalAverage => global_average(x),
            Reducer::PoolFc { .. } => {
                let pooled = match &mut self.pool {
                    Some(p) => p.forward(x)?,
                    None => x.clone(),
                };
                let fc = self.fc.as_mut().expect("PoolFc tap has an FC layer");
                let z = fc.forward(&pooled)?;
                Ok(self.relu.forward(&z))
            }
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self.spec.reducer {
            Reducer::GlobalAverage => global_average_backward(grad, &self.source_shape),
            Reducer::PoolFc { .. } => {
                let g = self.relu.backward(grad)?;
                let g = self.fc.as_mut().expect("PoolFc tap has an FC layer").backward(&g)?;
                match &mut self.pool {
                    Some(p) => p.backward(&g),
                    None => Ok(g),
                }
            }
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        self.fc.as_ref().map(|f| f.params()).unwrap_or_default()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.fc.as_mut().map(|f| f.params_mut()).unwrap_or_default()
    }
}

/// Per-channel mean: N×C×H×W → N×C.
pub fn global_average(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::dim(
            "global_average",
            format!("expected rank 4, got {:?}", x.shape()),
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.shape()[2] * x.shape()[3];
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[n, c], out)
}

fn global_average_backward(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let hw = shape[2] * shape[3];
    let mut data = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::new(shape, data)
}

/// Dropout followed by a linear classification layer, used while a backbone
/// is trained on its own.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub tap: String,
    pub dropout: Dropout,
    pub fc: Linear,
}

/// Trunk activations at every tap source, computed once per input batch.
#[derive(Debug, Clone)]
pub struct TrunkFeatures {
    /// Indexed like the network's taps.
    pub sources: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub embeddings: BTreeMap<String, Tensor>,
    pub logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ModalityNetwork {
    pub spec: NetworkSpec,
    trunk: Vec<(String, Layer)>,
    taps: Vec<Tap>,
    pub classifier: Option<Classifier>,
    seed: u64,
}

impl ModalityNetwork {
    /// Builds the trunk and the requested taps. With `num_classes > 0` a
    /// dropout + linear classifier is attached to the deep tap.
    pub fn build(spec: &NetworkSpec, taps: &[TapSpec], num_classes: usize, keep_prob: f64, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(plan.len());
        let mut in_ch = spec.input_shape[0];
        let mut pool_i = 0;
        for lp in &plan {
            let layer = match lp.kind {
                "conv" => {
                    let id = format!("{}.{}", spec.modality, lp.name);
                    let l = Conv2d::new(&id, in_ch, lp.out_shape[0], spec.kernel_size, &mut rng)?.without_bias();
                    in_ch = lp.out_shape[0];
                    Layer::Conv(l)
                }
                "batchnorm" => {
                    let id = format!("{}.{}", spec.modality, lp.name);
                    Layer::BatchNorm(BatchNorm::new(&id, lp.out_shape[0], spec.bn_decay)?)
                }
                "relu" => Layer::Relu(Relu::default()),
                "maxpool" => {
                    let [ph, pw] = spec.pool_windows[pool_i];
                    pool_i += 1;
                    Layer::MaxPool(MaxPool2d::new((ph, pw)))
                }
                other => unreachable!("planner emitted {other}"),
            };
            trunk.push((lp.name.clone(), layer));
        }
        let mut net = ModalityNetwork {
            spec: spec.clone(),
            trunk,
            taps: Vec::new(),
            classifier: None,
            seed,
        };
        for t in taps {
            net.add_tap(t)?;
        }
        if num_classes > 0 {
            net.attach_classifier(DEEP_TAP, num_classes, keep_prob)?;
        }
        Ok(net)
    }

    /// Adds an embedding tap; its FC weights are seeded from the network seed
    /// and the tap id, so the order of additions does not matter.
    pub fn add_tap(&mut self, spec: &TapSpec) -> Result<()> {
        if self.taps.iter().any(|t| t.spec.id == spec.id) {
            return Err(Error::Config(format!(
                "{}: duplicate tap {}",
                self.spec.modality, spec.id
            )));
        }
        let tp = self.spec.plan_tap(spec)?;
        let source_index = self
            .trunk
            .iter()
            .position(|(n, _)| *n == spec.source)
            .expect("plan_tap validated the source");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ hash_str(&spec.id));
        let (pool, fc) = match spec.reducer {
            Reducer::PoolFc { window } => (
                window.map(|[ph, pw]| MaxPool2d::new((ph, pw))),
                Some(Linear::new(
                    &format!("{}.{}", self.spec.modality, spec.id),
                    tp.pooled.iter().product(),
                    tp.out_dim,
                    &mut rng,
                )?),
            ),
            Reducer::GlobalAverage => (None, None),
        };
        self.taps.push(Tap {
            spec: spec.clone(),
            source_index,
            pool,
            fc,
            relu: Relu::default(),
            source_shape: Vec::new(),
        });
        Ok(())
    }

    pub fn attach_classifier(&mut self, tap: &str, num_classes: usize, keep_prob: f64) -> Result<()> {
        let t = self
            .taps
            .iter()
            .find(|t| t.spec.id == tap)
            .ok_or_else(|| Error::Config(format!("{}: classifier tap {tap} not built", self.spec.modality)))?;
        let width = self.spec.plan_tap(&t.spec)?.out_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c1a5);
        self.classifier = Some(Classifier {
            tap: tap.to_string(),
            dropout: Dropout::new(keep_prob, self.seed ^ 0xd0d0)?,
            fc: Linear::new(
                &format!("{}.classifier", self.spec.modality),
                width,
                num_classes,
                &mut rng,
            )?,
        });
        Ok(())
    }

    /// Removes the standalone classifier, as done when the backbone joins a
    /// fusion architecture.
    pub fn drop_classifier(&mut self) {
        self.classifier = None;
    }

    pub fn tap_ids(&self) -> Vec<&str> {
        self.taps.iter().map(|t| t.spec.id.as_str()).collect()
    }

    pub fn tap_width(&self, id: &str) -> Option<usize> {
        let t = self.taps.iter().find(|t| t.spec.id == id)?;
        self.spec.plan_tap(&t.spec).ok().map(|p| p.out_dim)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.trunk.iter().map(|(n, _)| n.as_str()).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.spec.input_shape {
            return Err(Error::dim(
                "modality forward",
                format!(
                    "{} expects N×{:?}, got {:?}",
                    self.spec.modality,
                    self.spec.input_shape,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    fn last_needed(&self) -> usize {
        self.taps.iter().map(|t| t.source_index).max().unwrap_or(0)
    }

    /// Runs the conv trunk up to the deepest tap source.
    pub fn forward_trunk(&mut self, x: &Tensor, training: bool) -> Result<TrunkFeatures> {
        self.check_input(x)?;
        if self.taps.is_empty() {
            return Err(Error::Config(format!("{}: no taps requested", self.spec.modality)));
        }
        let last = self.last_needed();
        let mut sources = vec![None; self.taps.len()];
        let mut h = x.clone();
        for (i, (_, layer)) in self.trunk.iter_mut().enumerate().take(last + 1) {
            h = layer.forward(&h, training)?;
            for (ti, t) in self.taps.iter().enumerate() {
                if t.source_index == i {
                    sources[ti] = Some(h.clone());
                }
            }
        }
        Ok(TrunkFeatures {
            sources: sources
                .into_iter()
                .map(|s| s.expect("every tap source visited"))
                .collect(),
        })
    }

    /// Applies the taps (and classifier, if present) to trunk features.
    pub fn forward_heads(&mut self, feats: &TrunkFeatures, training: bool) -> Result<NetOutput> {
        let mut embeddings = BTreeMap::new();
        for (t, src) in self.taps.iter_mut().zip(&feats.sources) {
            embeddings.insert(t.spec.id.clone(), t.forward(src)?);
        }
        let logits = match &mut self.classifier {
            Some(c) => {
                let e = &embeddings[&c.tap];
                let (d, _) = c.dropout.forward(e, training);
                Some(c.fc.forward(&d)?)
            }
            None => None,
        };
        Ok(NetOutput { embeddings, logits })
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<NetOutput> {
        let feats = self.forward_trunk(x, training)?;
        self.forward_heads(&feats, training)
    }

    /// Backward through classifier and taps; returns the gradient at each tap
    /// source (indexed like the taps).
    pub fn backward_heads(
        &mut self,
        grad_embeddings: &BTreeMap<String, Tensor>,
        grad_logits: Option<&Tensor>,
    ) -> Result<Vec<Tensor>> {
        let mut tap_grads: BTreeMap<String, Tensor> = grad_embeddings.clone();
        if let (Some(c), Some(g)) = (&mut self.classifier, grad_logits) {
            let g = c.fc.backward(g)?;
            let g = c.dropout.backward(&g)?;
            match tap_grads.get_mut(&c.tap) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    tap_grads.insert(c.tap.clone(), g);
                }
            }
        }
        let mut out = Vec::with_capacity(self.taps.len());
        for t in &mut self.taps {
            match tap_grads.get(&t.spec.id) {
                Some(g) => out.push(t.backward(g)?),
                None => out.push(Tensor::zeros(&t.source_shape)),
            }
        }
        Ok(out)
    }

    /// Backward through the conv trunk given gradients at the tap sources.
    pub fn backward_trunk(&mut self, source_grads: Vec<Tensor>) -> Result<()> {
        let last = self.last_needed();
        let mut grad: Option<Tensor> = None;
        for i in (0..=last).rev() {
            for (t, g) in self.taps.iter().zip(&source_grads) {
                if t.source_index == i {
                    match &mut grad {
                        Some(acc) => acc.add_assign(g)?,
                        None => grad = Some(g.clone()),
                    }
                }
            }
            if let Some(g) = grad.take() {
                if i == 0 {
                    // input gradient is not needed
                    self.trunk[0].1.backward(&g)?;
                } else {
                    grad = Some(self.trunk[i].1.backward(&g)?);
                }
            }
        }
        Ok(())
    }

    pub fn backward(&mut self, grad_embeddings: &BTreeMap<String, Tensor>, grad_logits: Option<&Tensor>) -> Result<()> {
        let g = self.backward_heads(grad_embeddings, grad_logits)?;
        self.backward_trunk(g)
    }

    pub fn trunk_params(&self) -> Vec<&Parameter> {
        self.trunk.iter().flat_map(|(_, l)| l.params()).collect()
    }

    pub fn trunk_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.trunk.iter_mut().flat_map(|(_, l)| l.params_mut()).collect()
    }

    pub fn tap_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.taps.iter_mut().flat_map(|t| t.params_mut()).collect()
    }

    pub fn classifier_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.classifier.as_mut().map(|c| c.fc.params_mut()).unwrap_or_default()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = self.trunk_params();
        ps.extend(self.taps.iter().flat_map(|t| t.params()));
        if let Some(c) = &self.classifier {
            ps.extend(c.fc.params());
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps: Vec<&mut Parameter> = self.trunk.iter_mut().flat_map(|(_, l)| l.params_mut()).collect();
        ps.extend(self.taps.iter_mut().flat_map(|t| t.params_mut()));
        if let Some(c) = &mut self.classifier {
            ps.extend(c.fc.params_mut());
        }
        ps
    }

    /// Non-trainable state (batch-norm moving statistics) keyed by name.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.trunk
            .iter()
            .flat_map(|(name, l)| {
                l.buffers()
                    .into_iter()
                    .map(move |(suffix, t)| (format!("{}.{name}.{suffix}", self.spec.modality), t))
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let modality = self.spec.modality.clone();
        self.trunk
            .iter_mut()
            .flat_map(|(name, l)| {
                let prefix = format!("{modality}.{name}");
                l.buffers_mut()
                    .into_iter()
                    .map(move |(suffix, t)| (format!("{prefix}.{suffix}"), t))
            })
            .collect()
    }

    /// Seeds every dropout mask stream from `seed`.
    pub fn reseed_dropout(&mut self, seed: u64) {
        if let Some(c) = &mut self.classifier {
            c.dropout.reseed(seed);
        }
    }

    pub fn clear_caches(&mut self) {
        for (_, l) in &mut self.trunk {
            l.clear_cache();
        }
    }

    /// Exact parameter counts per trainable layer, in build order.
    pub fn parameter_report(&self) -> ParameterReport {
        let mut rows = Vec::new();
        for (name, l) in &self.trunk {
            let n: usize = l.params().iter().map(|p| p.numel()).sum();
            if n > 0 {
                rows.push((name.clone(), n));
            }
        }
        for t in &self.taps {
            let n: usize = t.params().iter().map(|p| p.numel()).sum();
            rows.push((t.spec.id.clone(), n));
        }
        if let Some(c) = &self.classifier {
            rows.push(("classifier".into(), c.fc.params().iter().map(|p| p.numel()).sum()));
        }
        ParameterReport { rows }
    }
}

pub(crate) fn hash_str(s: &str) -> u64 {
    crate::tensor::checksum(&s.bytes().map(|b| b as f64).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterReport {
    pub rows: Vec<(String, usize)>,
}

impl ParameterReport {
    /// Counts from shapes alone, so full-width specs need no allocation.
    pub fn from_spec(spec: &NetworkSpec, taps: &[TapSpec], num_classes: usize) -> Result<Self> {
        let mut rows: Vec<(String, usize)> = spec
            .plan()?
            .into_iter()
            .filter(|l| l.params > 0)
            .map(|l| (l.name, l.params))
            .collect();
        for t in taps {
            rows.push((t.id.clone(), spec.plan_tap(t)?.params));
        }
        if num_classes > 0 {
            rows.push(("classifier".into(), fc_stack_params(spec.embedding_dim, &[num_classes])));
        }
        Ok(ParameterReport { rows })
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|(_, n)| n).sum()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }
}

/// Weights plus biases of a chain of fully-connected layers.
pub fn fc_stack_params(in_features: usize, widths: &[usize]) -> usize {
    let mut fan_in = in_features;
    let mut total = 0;
    for &w in widths {
        total += fan_in * w + w;
        fan_in = w;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> NetworkSpec {
        NetworkSpec {
            modality: "m".into(),
            input_shape: [1, 16, 16],
            blocks: vec![
                BlockSpec { convs: 1, channels: 16 },
                BlockSpec { convs: 1, channels: 32 },
            ],
            pool_windows: vec![[2, 2], [2, 2]],
            width_scale: 0.125,
            embedding_dim: 6,
            kernel_size: 3,
            bn_decay: 0.9,
        }
    }

    #[test]
    fn plan_propagates_shapes() {
        let plan = desk_spec().plan().unwrap();
        let pool2 = plan.iter().find(|l| l.name == "pool2").unwrap();
        assert_eq!(pool2.out_shape, [4, 4, 4]);
    }

    #[test]
    fn bad_pool_names_block() {
        let mut s = desk_spec();
        s.input_shape = [1, 12, 10];
        let err = s.plan().unwrap_err().to_string();
        assert!(err.contains("block 2") && err.contains("6×5"), "{err}");
    }

    #[test]
    fn unknown_tap_source() {
        let s = desk_spec();
        let t = NetworkSpec::shallow_tap("pool9", [2, 2]);
        let err = ModalityNetwork::build(&s, &[t], 0, 0.5, 0).unwrap_err().to_string();
        assert!(err.contains("FC3") && err.contains("pool9"), "{err}");
    }

    #[test]
    fn global_average_of_constant_map() {
        let x = Tensor::full(&[2, 3, 4, 4], 0.75);
        let g = global_average(&x).unwrap();
        assert_eq!(g.shape(), &[2, 3]);
        assert!(g.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn taps_and_logits_are_populated() {
        let s = desk_spec();
        let taps = [s.deep_tap(), NetworkSpec::shallow_tap("pool1", [2, 2])];
        let mut net = ModalityNetwork::build(&s, &taps, 5, 0.5, 1).unwrap();
        let out = net.forward(&Tensor::full(&[3, 1, 16, 16], 0.1), true).unwrap();
        assert_eq!(out.embeddings["FC6"].shape(), &[3, 6]);
        assert_eq!(out.embeddings["FC3"].shape(), &[3, 6]);
        assert_eq!(out.logits.unwrap().shape(), &[3, 5]);
    }

    #[test]
    fn inference_is_bit_reproducible() {
        let s = desk_spec();
        let mut a = ModalityNetwork::build(&s, &[s.deep_tap()], 4, 0.5, 9).unwrap();
        let mut b = ModalityNetwork::build(&s, &[s.deep_tap()], 4, 0.5, 9).unwrap();
        let x = Tensor::new(&[2, 1, 16, 16], (0..512).map(|i| (i as f64).cos()).collect()).unwrap();
        let ya = a.forward(&x, false).unwrap();
        let yb = b.forward(&x, false).unwrap();
        assert_eq!(ya.logits, yb.logits);
        assert_eq!(a.forward(&x, false).unwrap().logits, ya.logits);
    }

    #[test]
    fn empty_report_totals_zero() {
        assert_eq!(ParameterReport { rows: vec![] }.total(), 0);
    }

    #[test]
    fn built_report_matches_shape_report() {
        let s = desk_spec();
        let taps = [s.deep_tap(), NetworkSpec::shallow_tap("pool1", [2, 2])];
        let net = ModalityNetwork::build(&s, &taps, 5, 0.5, 1).unwrap();
        assert_eq!(
            net.parameter_report(),
            ParameterReport::from_spec(&s, &taps, 5).unwrap()
        );
    }
}
