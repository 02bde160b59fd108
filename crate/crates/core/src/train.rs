//! SGD with momentum and the three-phase training schedule.
//!
//! Phases: each modality network is pretrained on its own images, then the
//! fusion head and embedding taps are trained on frozen backbones, then the
//! whole model is fine-tuned jointly with a smaller batch.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::layers::{softmax, softmax_cross_entropy, softmax_cross_entropy_grad};
use crate::modality_net::{ModalityNetwork, TrunkFeatures};
use crate::synthdata::{ImageSet, TupleSet};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// L2 penalty multiplier.
    pub l2: f64,
    pub lr0: f64,
    /// Epochs per decay of the learning rate.
    pub epochs_per_decay: f64,
    pub decay_factor: f64,
    pub momentum: f64,
    /// Batch-norm moving-average decay.
    pub bn_decay: f64,
    pub batch_size: usize,
    pub keep_prob: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 5e-4,
            lr0: 0.01,
            epochs_per_decay: 2.0,
            decay_factor: 0.1,
            momentum: 0.9,
            bn_decay: 0.99,
            batch_size: 16,
            keep_prob: 0.5,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        // a zero learning rate is accepted so degenerate grids can be searched
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return fail(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return fail(format!("l2 must be finite and >= 0, got {}", self.l2));
        }
        if !(self.epochs_per_decay.is_finite() && self.epochs_per_decay > 0.0) {
            return fail(format!("epochs_per_decay must be > 0, got {}", self.epochs_per_decay));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor must lie in (0,1], got {}", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.bn_decay) {
            return fail(format!("bn_decay must lie in [0,1), got {}", self.bn_decay));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return fail(format!("keep_prob must lie in (0,1], got {}", self.keep_prob));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// α(t) = α0 · decay_factor^(t / n), with a real-valued exponent.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        self.lr0 * self.decay_factor.powf(epoch / self.epochs_per_decay)
    }

    /// Staircase alternative, α0 · decay_factor^⌊t / n⌋, for comparison.
    pub fn lr_at_staircase(&self, epoch: f64) -> f64 {
        self.lr0 * self.decay_factor.powf((epoch / self.epochs_per_decay).floor())
    }
}

/// Momentum buffers keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// v ← m·v + g + λ·w (λ only for decayed parameters); w ← w − α·v.
    /// Every gradient is checked before anything is updated.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64, momentum: f64, l2: f64) -> Result<()> {
        for p in params.iter() {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter {} at index {i}",
                    p.grad.data()[i],
                    p.id
                )));
            }
        }
        for p in params.iter_mut() {
            let v = self
                .velocity
                .entry(p.id.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            let lam = if p.decay { l2 } else { 0.0 };
            let Parameter { value, grad, .. } = &mut **p;
            for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *v = momentum * *v + g + lam * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    PretrainModality,
    FrozenFusion,
    Joint,
}

impl PhaseKind {
    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::PretrainModality => "pretrain_modality",
            PhaseKind::FrozenFusion => "frozen_fusion",
            PhaseKind::Joint => "joint",
        }
    }
}

pub type ParamFilter = Arc<dyn Fn(&str) -> bool + Send + Sync>;

/// A training phase: its kind, a log label and the trainable-parameter
/// predicate. Without an explicit predicate the kind decides: frozen
/// fusion trains everything except the conv trunks, the others train all.
#[derive(Clone)]
pub struct Phase {
    pub kind: PhaseKind,
    pub label: String,
    pub filter: Option<ParamFilter>,
}

impl std::fmt::Debug for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Phase")
            .field("kind", &self.kind)
            .field("label", &self.label)
            .field("filter", &self.filter.is_some())
            .finish()
    }
}

impl Phase {
    pub fn new(kind: PhaseKind) -> Self {
        Phase {
            kind,
            label: kind.name().to_string(),
            filter: None,
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_filter(mut self, f: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        self.filter = Some(Arc::new(f));
        self
    }
}

pub enum PhaseModel<'a> {
    Modality(&'a mut ModalityNetwork),
    Fusion(&'a mut FusionModel),
}

pub enum PhaseData<'a> {
    Images {
        train: &'a ImageSet,
        val: Option<&'a ImageSet>,
    },
    Tuples {
        train: &'a TupleSet,
        val: Option<&'a TupleSet>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub phase: String,
    /// Row 0 is the state before training; row e follows epoch e.
    pub rows: Vec<LogRow>,
    pub final_lr: f64,
    /// Checksums of the frozen parameters, verified unchanged.
    pub frozen_checksums: BTreeMap<String, u64>,
}

impl TrainLog {
    pub fn initial_lr(&self) -> f64 {
        self.rows[0].lr
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.loss)
    }
}

const LOG_HEADER: &str = "epoch,phase,loss,train_acc,val_acc,lr";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn log_csv(logs: &[TrainLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for log in logs {
        for r in &log.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                log.phase,
                opt(r.loss),
                opt(r.train_acc),
                opt(r.val_acc),
                r.lr
            );
        }
    }
    s
}

pub fn write_log_csv(logs: &[TrainLog], path: &Path) -> Result<()> {
    fs::write(path, log_csv(logs)).map_err(|e| Error::io(path, e))
}

/// Shuffled mini-batches for one epoch; a trailing batch of one sample is
/// merged into the previous batch so batch statistics stay defined.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Initial learning rate for the joint phase: the smallest final learning
/// rate among the modality pretraining phases.
pub fn joint_lr0(modality_final_lrs: &[f64]) -> Result<f64> {
    modality_final_lrs
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::Config("joint phase needs at least one pretrained modality".into()))
}

/// Joint-phase config: α0 from [`joint_lr0`] and half the batch size.
pub fn joint_config(base: &TrainConfig, modality_final_lrs: &[f64]) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr0: joint_lr0(modality_final_lrs)?,
        batch_size: (base.batch_size / 2).max(1),
        ..base.clone()
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count()
}

/// Splits trainable and frozen parameters for the phase.
fn partition<'m>(
    params: Vec<&'m mut Parameter>,
    frozen_ids: &BTreeSet<String>,
    phase: &Phase,
) -> (Vec<&'m mut Parameter>, Vec<&'m mut Parameter>) {
    params.into_iter().partition(|p| match &phase.filter {
        Some(f) => f(&p.id),
        None => !frozen_ids.contains(&p.id),
    })
}

/// Inference-mode trunk features for every image of each pool, computed in
/// chunks and kept per image.
fn cache_features(model: &mut FusionModel, pools: &[Vec<Tensor>], chunk: usize) -> Result<Vec<Vec<TrunkFeatures>>> {
    let mut out = Vec::with_capacity(pools.len());
    for (net, pool) in model.backbones.iter_mut().zip(pools) {
        let mut per_image = Vec::with_capacity(pool.len());
        for part in pool.chunks(chunk.max(1)) {
            let refs: Vec<&Tensor> = part.iter().collect();
            let feats = net.forward_trunk(&Tensor::concat_batch(&refs)?, false)?;
            for i in 0..part.len() {
                per_image.push(TrunkFeatures {
                    sources: feats.sources.iter().map(|s| s.gather_rows(&[i])).collect(),
                });
            }
        }
        net.clear_caches();
        out.push(per_image);
    }
    Ok(out)
}

fn gather_features(cache: &[Vec<TrunkFeatures>], tuples: &TupleSet, idx: &[usize]) -> Result<Vec<TrunkFeatures>> {
    cache
        .iter()
        .enumerate()
        .map(|(m, per_image)| {
            let n_src = per_image.first().map_or(0, |f| f.sources.len());
            let sources = (0..n_src)
                .map(|s| {
                    let parts: Vec<&Tensor> = idx
                        .iter()
                        .map(|&i| &per_image[tuples.tuples[i].indices[m]].sources[s])
                        .collect();
                    Tensor::concat_batch(&parts)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrunkFeatures { sources })
        })
        .collect()
}

/// Class probabilities of a pretrained modality network, one row per image.
pub fn predict_modality(net: &mut ModalityNetwork, images: &ImageSet, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.images.len());
    let idx: Vec<usize> = (0..images.images.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let logits = net
            .forward(&images.batch(part)?, false)?
            .logits
            .ok_or_else(|| Error::Config(format!("{} has no classifier", net.spec.modality)))?;
        let p = softmax(&logits)?;
        out.extend((0..part.len()).map(|i| p.row(i).to_vec()));
    }
    net.clear_caches();
    Ok(out)
}

/// Class probabilities of a fusion model, one row per tuple. Trunk features
/// are computed once per distinct pool image.
pub fn predict_fusion(model: &mut FusionModel, tuples: &TupleSet, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let cache = cache_features(model, &tuples.pools, chunk)?;
    let idx: Vec<usize> = (0..tuples.tuples.len()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for part in idx.chunks(chunk.max(1)) {
        let feats = gather_features(&cache, tuples, part)?;
        let p = softmax(&model.forward_from_features(&feats, false)?)?;
        out.extend((0..part.len()).map(|i| p.row(i).to_vec()));
    }
    Ok(out)
}

fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

const EVAL_CHUNK: usize = 64;

/// Runs one phase for `config.epochs` epochs and returns its log.
pub fn run_phase(phase: &Phase, model: PhaseModel<'_>, data: PhaseData<'_>, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    match (phase.kind, model, data) {
        (PhaseKind::PretrainModality, PhaseModel::Modality(net), PhaseData::Images { train, val }) => {
            run_modality(phase, net, train, val, config)
        }
        (PhaseKind::FrozenFusion | PhaseKind::Joint, PhaseModel::Fusion(model), PhaseData::Tuples { train, val }) => {
            run_fusion(phase, model, train, val, config)
        }
        (kind, _, _) => Err(Error::Config(format!(
            "phase {} got an incompatible model or dataset",
            kind.name()
        ))),
    }
}

fn initial_row(config: &TrainConfig) -> LogRow {
    LogRow {
        epoch: 0,
        loss: None,
        train_acc: None,
        val_acc: None,
        lr: config.lr0,
    }
}

fn frozen_checksums(frozen: &[&mut Parameter]) -> BTreeMap<String, u64> {
    frozen.iter().map(|p| (p.id.clone(), p.checksum())).collect()
}

fn verify_frozen(before: &BTreeMap<String, u64>, frozen: &[&mut Parameter]) -> Result<()> {
    for p in frozen {
        if before.get(&p.id) != Some(&p.checksum()) {
            return Err(Error::Numeric(format!(
                "frozen parameter {} changed during training",
                p.id
            )));
        }
    }
    Ok(())
}

fn run_modality(
    phase: &Phase,
    net: &mut ModalityNetwork,
    train: &ImageSet,
    val: Option<&ImageSet>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if train.images.is_empty() {
        return Err(Error::Data(format!("{}: empty training set", net.spec.modality)));
    }
    if net.classifier.is_none() {
        return Err(Error::Config(format!(
            "{}: pretraining needs a classifier",
            net.spec.modality
        )));
    }
    net.reseed_dropout(config.seed);
    let mut sgd = Sgd::new();
    let mut rows = vec![initial_row(config)];
    let mut frozen_sums = BTreeMap::new();
    for epoch in 0..config.epochs {
        let batches = epoch_batches(train.images.len(), config.batch_size, config.seed, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (step, idx) in batches.iter().enumerate() {
            let x = train.batch(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (mut trainable, frozen) = partition(net.params_mut(), &BTreeSet::new(), phase);
            if trainable.is_empty() {
                return Err(Error::Config(format!(
                    "phase {} has no trainable parameters",
                    phase.label
                )));
            }
            if epoch == 0 && step == 0 {
                frozen_sums = frozen_checksums(&frozen);
            }
            trainable.iter_mut().for_each(|p| p.zero_grad());
            drop(trainable);
            let out = net.forward(&x, true)?;
            let logits = out.logits.expect("classifier checked");
            let (loss, probs) = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss * idx.len() as f64;
            hits += correct(&logits, &labels);
            net.backward(&BTreeMap::new(), Some(&softmax_cross_entropy_grad(&probs, &labels)))?;
            let lr = config.lr_at(epoch as f64 + step as f64 / batches.len() as f64);
            let (mut trainable, _) = partition(net.params_mut(), &BTreeSet::new(), phase);
            sgd.step(&mut trainable, lr, config.momentum, config.l2)?;
        }
        net.clear_caches();
        let val_acc = match val {
            Some(v) => Some(accuracy(&predict_modality(net, v, EVAL_CHUNK)?, &v.labels)),
            None => None,
        };
        let n = train.images.len() as f64;
        rows.push(LogRow {
            epoch: epoch + 1,
            loss: Some(loss_sum / n),
            train_acc: Some(hits as f64 / n),
            val_acc,
            lr: config.lr_at((epoch + 1) as f64),
        });
    }
    let (trainable, frozen) = partition(net.params_mut(), &BTreeSet::new(), phase);
    if trainable.is_empty() {
        return Err(Error::Config(format!(
            "phase {} has no trainable parameters",
            phase.label
        )));
    }
    verify_frozen(&frozen_sums, &frozen)?;
    Ok(TrainLog {
        phase: phase.label.clone(),
        rows,
        final_lr: config.lr_at(config.epochs as f64),
        frozen_checksums: frozen_sums,
    })
}

fn run_fusion(
    phase: &Phase,
    model: &mut FusionModel,
    train: &TupleSet,
    val: Option<&TupleSet>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if train.tuples.is_empty() {
        return Err(Error::Data("empty tuple set".into()));
    }
    let frozen_phase = phase.kind == PhaseKind::FrozenFusion;
    let trunk_ids: BTreeSet<String> = if frozen_phase {
        model
            .backbones
            .iter()
            .flat_map(|n| n.trunk_params().into_iter().map(|p| p.id.clone()))
            .collect()
    } else {
        BTreeSet::new()
    };
    let (trainable, frozen) = partition(model.params_mut(), &trunk_ids, phase);
    if trainable.is_empty() {
        return Err(Error::Config(format!(
            "phase {} has no trainable parameters",
            phase.label
        )));
    }
    let frozen_sums = frozen_checksums(&frozen);
    drop((trainable, frozen));
    let buffer_sums: BTreeMap<String, u64> = if frozen_phase {
        model
            .backbones
            .iter()
            .flat_map(|n| {
                n.buffers()
                    .into_iter()
                    .map(|(k, t)| (k, crate::tensor::checksum(t.data())))
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    // the trunk only touches the frozen parameters when it is not trained,
    // so its features can be computed once per distinct image
    let cache = if frozen_phase {
        Some(cache_features(model, &train.pools, EVAL_CHUNK)?)
    } else {
        None
    };
    model.reseed_dropout(config.seed);
    let mut sgd = Sgd::new();
    let mut rows = vec![initial_row(config)];
    let labels_all = train.labels();
    for epoch in 0..config.epochs {
        let batches = epoch_batches(train.tuples.len(), config.batch_size, config.seed, epoch);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (step, idx) in batches.iter().enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
            {
                let (mut trainable, _) = partition(model.params_mut(), &trunk_ids, phase);
                trainable.iter_mut().for_each(|p| p.zero_grad());
            }
            let logits = match &cache {
                Some(c) => model.forward_from_features(&gather_features(c, train, idx)?, true)?,
                None => model.forward(&train.batch(idx)?, true, true)?,
            };
            let (loss, probs) = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss * idx.len() as f64;
            hits += correct(&logits, &labels);
            model.backward(&softmax_cross_entropy_grad(&probs, &labels), !frozen_phase)?;
            let lr = config.lr_at(epoch as f64 + step as f64 / batches.len() as f64);
            let (mut trainable, _) = partition(model.params_mut(), &trunk_ids, phase);
            sgd.step(&mut trainable, lr, config.momentum, config.l2)?;
        }
        for net in &mut model.backbones {
            net.clear_caches();
        }
        let val_acc = match val {
            Some(v) => Some(accuracy(&predict_fusion(model, v, EVAL_CHUNK)?, &v.labels())),
            None => None,
        };
        let n = train.tuples.len() as f64;
        rows.push(LogRow {
            epoch: epoch + 1,
            loss: Some(loss_sum / n),
            train_acc: Some(hits as f64 / n),
            val_acc,
            lr: config.lr_at((epoch + 1) as f64),
        });
    }
    let (_, frozen) = partition(model.params_mut(), &trunk_ids, phase);
    verify_frozen(&frozen_sums, &frozen)?;
    for n in &model.backbones {
        for (k, t) in n.buffers() {
            if let Some(&s) = buffer_sums.get(&k) {
                if s != crate::tensor::checksum(t.data()) {
                    return Err(Error::Numeric(format!("frozen buffer {k} changed during training")));
                }
            }
        }
    }
    Ok(TrainLog {
        phase: phase.label.clone(),
        rows,
        final_lr: config.lr_at(config.epochs as f64),
        frozen_checksums: frozen_sums,
    })
}

/// Class-stratified folds: each class's indices are shuffled and dealt
/// round-robin over the k folds.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, mut idx) in by_class {
        if idx.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} samples, fewer than k = {k}; cannot stratify",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            folds[j % k].push(i);
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KFoldResult {
    pub best_index: usize,
    pub best: TrainConfig,
    /// scores[c][f]: validation rank-one accuracy of config c on fold f.
    pub scores: Vec<Vec<f64>>,
}

impl KFoldResult {
    pub fn mean_scores(&self) -> Vec<f64> {
        self.scores
            .iter()
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
            .collect()
    }
}

/// Picks the grid entry with the highest mean validation score over k
/// stratified folds; ties go to the earlier entry. `evaluate(config,
/// train_idx, val_idx)` trains on one split and returns its score.
pub fn kfold_search(
    grid: &[TrainConfig],
    labels: &[usize],
    k: usize,
    seed: u64,
    mut evaluate: impl FnMut(&TrainConfig, &[usize], &[usize]) -> Result<f64>,
) -> Result<KFoldResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    for c in grid {
        c.validate()?;
    }
    let folds = stratified_folds(labels, k, seed)?;
    let mut scores = Vec::with_capacity(grid.len());
    for c in grid {
        let mut per_fold = Vec::with_capacity(k);
        for f in 0..k {
            let train: Vec<usize> = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].iter().copied())
                .collect();
            per_fold.push(evaluate(c, &train, &folds[f])?);
        }
        scores.push(per_fold);
    }
    let means: Vec<f64> = scores.iter().map(|s| s.iter().sum::<f64>() / k as f64).collect();
    let mut best_index = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[best_index] {
            best_index = i;
        }
    }
    Ok(KFoldResult {
        best_index,
        best: grid[best_index].clone(),
        scores,
    })
}

/// k-fold search for a modality network: each fold pretrains a fresh
/// network built by `build` and scores rank-one accuracy on the held-out
/// fold.
pub fn kfold_search_modality(
    grid: &[TrainConfig],
    images: &ImageSet,
    k: usize,
    seed: u64,
    build: impl Fn(&TrainConfig) -> Result<ModalityNetwork>,
) -> Result<KFoldResult> {
    kfold_search(grid, &images.labels, k, seed, |config, tr, va| {
        let mut net = build(config)?;
        let train = images.subset(tr);
        let val = images.subset(va);
        run_phase(
            &Phase::new(PhaseKind::PretrainModality),
            PhaseModel::Modality(&mut net),
            PhaseData::Images {
                train: &train,
                val: None,
            },
            config,
        )?;
        Ok(accuracy(&predict_modality(&mut net, &val, EVAL_CHUNK)?, &val.labels))
    })
}
