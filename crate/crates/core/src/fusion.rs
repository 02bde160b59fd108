//! Joint-representation heads over modality embeddings, and the score-level
//! baselines.
//!
//! Feature-level heads concatenate embeddings (tap-major, then modality in
//! declared order), apply dropout and a ReLU fusion layer per group, and
//! finish with a linear classification layer over the concatenated group
//! outputs. A single-group head is the weighted / multi-abstract fusion; a
//! multi-group head is the bi-level variant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Dropout, Linear, Relu};
use crate::modality_net::{hash_str, ModalityNetwork, TrunkFeatures, DEEP_TAP, SHALLOW_TAP};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Weighted,
    MultiAbstract,
    BilevelWeighted,
    BilevelMultiAbstract,
    ScoreSum,
    ScoreMajor,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::Weighted,
        FusionKind::MultiAbstract,
        FusionKind::BilevelWeighted,
        FusionKind::BilevelMultiAbstract,
        FusionKind::ScoreSum,
        FusionKind::ScoreMajor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Weighted => "weighted",
            FusionKind::MultiAbstract => "multi_abstract",
            FusionKind::BilevelWeighted => "bilevel_weighted",
            FusionKind::BilevelMultiAbstract => "bilevel_multi_abstract",
            FusionKind::ScoreSum => "score_sum",
            FusionKind::ScoreMajor => "score_major",
        }
    }

    pub fn is_score_level(self) -> bool {
        matches!(self, FusionKind::ScoreSum | FusionKind::ScoreMajor)
    }

    pub fn is_bilevel(self) -> bool {
        matches!(self, FusionKind::BilevelWeighted | FusionKind::BilevelMultiAbstract)
    }

    /// Embedding taps each modality contributes.
    pub fn taps(self) -> &'static [&'static str] {
        match self {
            FusionKind::MultiAbstract | FusionKind::BilevelMultiAbstract => &[SHALLOW_TAP, DEEP_TAP],
            _ => &[DEEP_TAP],
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind '{s}'")))
    }
}

/// Declarative description of a feature-level head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub kind: FusionKind,
    /// Modality names in concatenation order.
    pub modalities: Vec<String>,
    /// Indices into `modalities`; a single group for non-bilevel kinds.
    pub groups: Vec<Vec<usize>>,
    pub fusion_dim: usize,
    pub num_classes: usize,
}

impl HeadSpec {
    /// Single group over all modalities, in order.
    pub fn single_group(kind: FusionKind, modalities: &[&str], fusion_dim: usize, num_classes: usize) -> Self {
        HeadSpec {
            kind,
            modalities: modalities.iter().map(|s| s.to_string()).collect(),
            groups: vec![(0..modalities.len()).collect()],
            fusion_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_score_level() {
            return Err(Error::Config(format!("{} has no trainable head", self.kind)));
        }
        if self.modalities.is_empty() || self.fusion_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "fusion head needs modalities, a positive fusion_dim and at least 2 classes".into(),
            ));
        }
        let m = self.modalities.len();
        if self.kind.is_bilevel() {
            if self.groups.len() < 2 {
                return Err(Error::Config(format!("{} needs at least two groups", self.kind)));
            }
            let mut seen = vec![false; m];
            for g in &self.groups {
                if g.is_empty() {
                    return Err(Error::Config("empty modality group".into()));
                }
                for &i in g {
                    if i >= m || seen[i] {
                        return Err(Error::Config(format!(
                            "groups must partition the {m} modalities; index {i} is invalid or repeated"
                        )));
                    }
                    seen[i] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Config("groups must cover every modality".into()));
            }
        } else if self.groups.len() != 1 || self.groups[0].len() != m {
            return Err(Error::Config(format!(
                "{} uses exactly one group containing all modalities",
                self.kind
            )));
        }
        Ok(())
    }

    /// Input width of each group's fusion layer.
    pub fn group_widths(&self, tap_width: impl Fn(&str, &str) -> usize) -> Vec<usize> {
        self.groups
            .iter()
            .map(|g| {
                self.kind
                    .taps()
                    .iter()
                    .flat_map(|t| g.iter().map(move |&i| (t, i)))
                    .map(|(t, i)| tap_width(&self.modalities[i], t))
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct GroupLayer {
    dropout: Dropout,
    fc: Linear,
    relu: Relu,
    widths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    pub spec: HeadSpec,
    groups: Vec<GroupLayer>,
    pub classifier: Linear,
}

pub type EmbeddingKey = (String, String);

impl FusionHead {
    /// `tap_width(modality, tap)` gives each embedding's width.
    pub fn build(spec: &HeadSpec, tap_width: impl Fn(&str, &str) -> usize, keep_prob: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_str(spec.kind.name()));
        let mut groups = Vec::new();
        for (gi, g) in spec.groups.iter().enumerate() {
            let widths: Vec<usize> = spec
                .kind
                .taps()
                .iter()
                .flat_map(|t| g.iter().map(move |&i| (t, i)))
                .map(|(t, i)| tap_width(&spec.modalities[i], t))
                .collect();
            let fc = Linear::new(
                &format!("fusion.group{gi}"),
                widths.iter().sum(),
                spec.fusion_dim,
                &mut rng,
            )?;
            groups.push(GroupLayer {
                dropout: Dropout::new(keep_prob, seed ^ (0xf00d + gi as u64))?,
                fc,
                relu: Relu::default(),
                widths,
            });
        }
        let classifier = Linear::new(
            "fusion.classifier",
            spec.fusion_dim * spec.groups.len(),
            spec.num_classes,
            &mut rng,
        )?;
        Ok(FusionHead {
            spec: spec.clone(),
            groups,
            classifier,
        })
    }

    /// The (modality, tap) keys of each group, in concatenation order.
    pub fn group_keys(&self) -> Vec<Vec<EmbeddingKey>> {
        self.spec
            .groups
            .iter()
            .map(|g| {
                self.spec
                    .kind
                    .taps()
                    .iter()
                    .flat_map(|t| g.iter().map(move |&i| (t, i)))
                    .map(|(t, i)| (self.spec.modalities[i].clone(), t.to_string()))
                    .collect()
            })
            .collect()
    }

    pub fn forward(&mut self, embeddings: &BTreeMap<EmbeddingKey, Tensor>, training: bool) -> Result<Tensor> {
        let keys = self.group_keys();
        let mut batch = None;
        let mut outs = Vec::with_capacity(self.groups.len());
        for (group, keys) in self.groups.iter_mut().zip(&keys) {
            let mut parts = Vec::with_capacity(keys.len());
            for k in keys {
                let e = embeddings
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("fusion input missing embedding ({}, {})", k.0, k.1)))?;
                match batch {
                    None => batch = Some(e.batch()),
                    Some(b) if b != e.batch() => {
                        return Err(Error::dim(
                            "fusion",
                            format!("embedding ({}, {}) has batch {} != {b}", k.0, k.1, e.batch()),
                        ))
                    }
                    _ => {}
                }
                parts.push(e);
            }
            let x = Tensor::concat_cols(&parts)?;
            let (x, _) = group.dropout.forward(&x, training);
            let z = group.fc.forward(&x)?;
            outs.push(group.relu.forward(&z));
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        self.classifier.forward(&Tensor::concat_cols(&refs)?)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<BTreeMap<EmbeddingKey, Tensor>> {
        let keys = self.group_keys();
        let g = self.classifier.backward(grad_logits)?;
        let per_group = g.split_cols(&vec![self.spec.fusion_dim; self.groups.len()])?;
        let mut grads = BTreeMap::new();
        for ((group, keys), g) in self.groups.iter_mut().zip(&keys).zip(per_group) {
            let g = group.relu.backward(&g)?;
            let g = group.fc.backward(&g)?;
            let g = group.dropout.backward(&g)?;
            for (k, part) in keys.iter().zip(g.split_cols(&group.widths)?) {
                grads.insert(k.clone(), part);
            }
        }
        Ok(grads)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps: Vec<&Parameter> = self.groups.iter().flat_map(|g| g.fc.params()).collect();
        ps.extend(self.classifier.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps: Vec<&mut Parameter> = self.groups.iter_mut().flat_map(|g| g.fc.params_mut()).collect();
        ps.extend(self.classifier.params_mut());
        ps
    }

    pub fn group_fc_mut(&mut self, group: usize) -> &mut Linear {
        &mut self.groups[group].fc
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.dropout.reseed(seed.wrapping_add(i as u64));
        }
    }
}

/// Backbones plus a feature-level head, trained jointly.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub backbones: Vec<ModalityNetwork>,
    pub head: FusionHead,
}

impl FusionModel {
    /// Attaches `head_spec` to the given backbones (in modality order),
    /// dropping their standalone classifiers and adding any missing taps.
    pub fn assemble(
        mut backbones: Vec<ModalityNetwork>,
        head_spec: &HeadSpec,
        shallow_taps: &BTreeMap<String, crate::modality_net::TapSpec>,
        keep_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        head_spec.validate()?;
        if backbones.len() != head_spec.modalities.len() {
            return Err(Error::Config(format!(
                "{} backbones for {} modalities",
                backbones.len(),
                head_spec.modalities.len()
            )));
        }
        for (net, name) in backbones.iter_mut().zip(&head_spec.modalities) {
            if &net.spec.modality != name {
                return Err(Error::Config(format!(
                    "backbone order mismatch: {} where {name} expected",
                    net.spec.modality
                )));
            }
            net.drop_classifier();
            for tap in head_spec.kind.taps() {
                if net.tap_width(tap).is_none() {
                    let spec = if *tap == DEEP_TAP {
                        net.spec.deep_tap()
                    } else {
                        shallow_taps
                            .get(name)
                            .cloned()
                            .ok_or_else(|| Error::Config(format!("no {tap} tap configured for modality {name}")))?
                    };
                    net.add_tap(&spec)?;
                }
            }
        }
        let widths: BTreeMap<(String, String), usize> = backbones
            .iter()
            .flat_map(|n| {
                n.tap_ids()
                    .into_iter()
                    .map(|t| ((n.spec.modality.clone(), t.to_string()), n.tap_width(t).unwrap()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let head = FusionHead::build(
            head_spec,
            |m, t| widths.get(&(m.to_string(), t.to_string())).copied().unwrap_or(0),
            keep_prob,
            seed,
        )?;
        Ok(FusionModel { backbones, head })
    }

    fn collect(&self, outs: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<EmbeddingKey, Tensor> {
        let mut all = BTreeMap::new();
        for (net, embs) in self.backbones.iter().zip(outs) {
            for (tap, t) in embs {
                all.insert((net.spec.modality.clone(), tap), t);
            }
        }
        all
    }

    /// Full forward; `trunk_training` selects batch vs moving statistics in
    /// the backbones, `training` controls dropout in the head.
    pub fn forward(&mut self, inputs: &[Tensor], trunk_training: bool, training: bool) -> Result<Tensor> {
        if inputs.len() != self.backbones.len() {
            return Err(Error::Input(format!(
                "{} inputs for {} modalities",
                inputs.len(),
                self.backbones.len()
            )));
        }
        let mut outs = Vec::with_capacity(inputs.len());
        for (net, x) in self.backbones.iter_mut().zip(inputs) {
            outs.push(net.forward(x, trunk_training)?.embeddings);
        }
        let embs = self.collect(outs);
        self.head.forward(&embs, training)
    }

    /// Forward from precomputed trunk features (frozen backbones).
    pub fn forward_from_features(&mut self, feats: &[TrunkFeatures], training: bool) -> Result<Tensor> {
        let mut outs = Vec::with_capacity(feats.len());
        for (net, f) in self.backbones.iter_mut().zip(feats) {
            outs.push(net.forward_heads(f, training)?.embeddings);
        }
        let embs = self.collect(outs);
        self.head.forward(&embs, training)
    }

    /// Backward from logits. Tap gradients are always accumulated; the conv
    /// trunks only when `through_trunk` is set.
    pub fn backward(&mut self, grad_logits: &Tensor, through_trunk: bool) -> Result<()> {
        let grads = self.head.backward(grad_logits)?;
        for net in &mut self.backbones {
            let mine: BTreeMap<String, Tensor> = grads
                .iter()
                .filter(|((m, _), _)| *m == net.spec.modality)
                .map(|((_, t), g)| (t.clone(), g.clone()))
                .collect();
            let src = net.backward_heads(&mine, None)?;
            if through_trunk {
                net.backward_trunk(src)?;
            }
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps: Vec<&mut Parameter> = self.backbones.iter_mut().flat_map(|n| n.params_mut()).collect();
        ps.extend(self.head.params_mut());
        ps
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.head.reseed_dropout(seed);
    }
}

/// Per-class probabilities from one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Input("score vector needs finite non-negative entries".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("score vector sums to {s}, not 1")));
        }
        Ok(ScoreVector(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest-scoring class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_scores(scores: &[&[f64]]) -> Result<usize> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Input("no score vectors to fuse".into()))?;
    let k = first.len();
    if scores.iter().any(|s| s.len() != k) {
        return Err(Error::Input("score vectors differ in length".into()));
    }
    Ok(k)
}

fn summed(scores: &[&[f64]], k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    for s in scores {
        for (a, b) in sum.iter_mut().zip(s.iter()) {
            *a += b;
        }
    }
    sum
}

/// Element-wise sum of the modality scores.
pub fn score_sum_vector(scores: &[&[f64]]) -> Result<Vec<f64>> {
    let k = check_scores(scores)?;
    Ok(summed(scores, k))
}

/// Argmax of the summed probabilities (lowest index on ties).
pub fn score_sum(scores: &[ScoreVector]) -> Result<usize> {
    let refs: Vec<&[f64]> = scores.iter().map(|s| s.probs()).collect();
    Ok(argmax(&score_sum_vector(&refs)?))
}

/// Plurality vote of the per-modality argmaxes. Ties go to the tied class
/// with the largest summed probability, then to the lowest index.
pub fn score_major(scores: &[ScoreVector]) -> Result<usize> {
    let refs: Vec<&[f64]> = scores.iter().map(|s| s.probs()).collect();
    score_major_raw(&refs)
}

/// Ranking scores consistent with [`score_major`]: vote count plus the
/// summed probability scaled below one vote, so classes order by votes and
/// then by summed probability.
pub fn score_major_vector(scores: &[&[f64]]) -> Result<Vec<f64>> {
    let k = check_scores(scores)?;
    let mut votes = vec![0.0; k];
    for s in scores {
        votes[argmax(s)] += 1.0;
    }
    let scale = 1.0 / (scores.len() as f64 + 1.0);
    Ok(votes
        .iter()
        .zip(summed(scores, k))
        .map(|(v, s)| v + s * scale)
        .collect())
}

pub fn score_major_raw(scores: &[&[f64]]) -> Result<usize> {
    let k = check_scores(scores)?;
    let mut votes = vec![0usize; k];
    for s in scores {
        votes[argmax(s)] += 1;
    }
    let top = *votes.iter().max().unwrap();
    let sum = summed(scores, k);
    let mut best: Option<usize> = None;
    for c in (0..k).filter(|&c| votes[c] == top) {
        match best {
            Some(b) if sum[c] <= sum[b] => {}
            _ => best = Some(c),
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec()).unwrap()
    }

    fn onehot(k: usize, c: usize, p: f64) -> ScoreVector {
        let mut v = vec![(1.0 - p) / (k - 1) as f64; k];
        v[c] = p;
        sv(&v)
    }

    #[test]
    fn major_vector_agrees_with_vote() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let vs: Vec<ScoreVector> = (0..3)
                .map(|_| {
                    let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    ScoreVector::new(raw.iter().map(|v| v / z).collect()).unwrap()
                })
                .collect();
            let refs: Vec<&[f64]> = vs.iter().map(|v| v.probs()).collect();
            assert_eq!(argmax(&score_major_vector(&refs).unwrap()), score_major(&vs).unwrap());
        }
    }

    #[test]
    fn sum_hand_example() {
        assert_eq!(score_sum(&[sv(&[0.6, 0.4]), sv(&[0.3, 0.7])]).unwrap(), 1);
    }

    #[test]
    fn sum_of_identical_vectors() {
        let v = sv(&[0.2, 0.5, 0.3]);
        assert_eq!(score_sum(&[v.clone(), v.clone(), v.clone()]).unwrap(), v.argmax());
    }

    #[test]
    fn sum_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let scores: Vec<ScoreVector> = (0..5)
                .map(|_| {
                    let raw: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
                    let z: f64 = raw.iter().sum();
                    sv(&raw.iter().map(|v| v / z).collect::<Vec<_>>())
                })
                .collect();
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..10 {
                let s: f64 = scores.iter().map(|v| v.probs()[c]).sum();
                if s > best.0 {
                    best = (s, c);
                }
            }
            assert_eq!(score_sum(&scores).unwrap(), best.1);
        }
    }

    #[test]
    fn majority_vote() {
        let k = 6;
        let votes = [onehot(k, 2, 0.6), onehot(k, 2, 0.6), onehot(k, 5, 0.9)];
        assert_eq!(score_major(&votes).unwrap(), 2);
    }

    #[test]
    fn majority_tie_uses_summed_probability() {
        // votes {1, 2} with summed scores 0.9 vs 1.3; two normalized vectors
        // cannot reach a total of 2.2 on two classes, so raw scores are used
        let a = [0.0, 0.6, 0.5];
        let b = [0.0, 0.3, 0.8];
        let sum = score_sum_vector(&[&a, &b]).unwrap();
        assert!((sum[1] - 0.9).abs() < 1e-12 && (sum[2] - 1.3).abs() < 1e-12);
        assert_eq!(score_major_raw(&[&a, &b]).unwrap(), 2);
        // same rule on valid score vectors: class 1 sums 0.8, class 2 sums 1.1
        let c = sv(&[0.0, 0.6, 0.4]);
        let d = sv(&[0.1, 0.2, 0.7]);
        assert_eq!(score_major(&[c, d]).unwrap(), 2);
        // full tie on votes and sums falls to the lowest index
        assert_eq!(score_major(&[sv(&[0.6, 0.4]), sv(&[0.4, 0.6])]).unwrap(), 0);
    }

    #[test]
    fn majority_single_modality() {
        let v = sv(&[0.1, 0.2, 0.7]);
        assert_eq!(score_major(std::slice::from_ref(&v)).unwrap(), 2);
    }

    #[test]
    fn empty_lists_are_errors() {
        assert!(score_sum(&[]).is_err());
        assert!(score_major(&[]).is_err());
    }

    #[test]
    fn score_vector_validation() {
        assert!(ScoreVector::new(vec![0.5, 0.6]).is_err());
        assert!(ScoreVector::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn weighted_fusion_width_is_three_embeddings() {
        let spec = HeadSpec::single_group(FusionKind::Weighted, &["face", "iris", "fp"], 1024, 294);
        assert_eq!(spec.group_widths(|_, _| 1024), vec![3072]);
    }

    #[test]
    fn bilevel_multi_abstract_widths() {
        let spec = HeadSpec {
            kind: FusionKind::BilevelMultiAbstract,
            modalities: (1..=6).map(|i| format!("n{i}")).collect(),
            groups: vec![vec![0, 1, 2, 3], vec![4, 5]],
            fusion_dim: 1024,
            num_classes: 219,
        };
        spec.validate().unwrap();
        assert_eq!(spec.group_widths(|_, _| 1024), vec![8 * 1024, 4 * 1024]);
    }

    #[test]
    fn group_validation() {
        let mut spec = HeadSpec {
            kind: FusionKind::BilevelWeighted,
            modalities: vec!["a".into(), "b".into(), "c".into()],
            groups: vec![vec![0, 1], vec![1, 2]],
            fusion_dim: 4,
            num_classes: 3,
        };
        assert!(spec.validate().is_err());
        spec.groups = vec![vec![0, 1, 2]];
        assert!(spec.validate().is_err());
        spec.groups = vec![vec![0, 1], vec![2]];
        assert!(spec.validate().is_ok());
        spec.kind = FusionKind::Weighted;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn missing_embedding_is_named() {
        let spec = HeadSpec::single_group(FusionKind::MultiAbstract, &["a", "b"], 4, 3);
        let mut head = FusionHead::build(&spec, |_, _| 2, 0.5, 0).unwrap();
        let mut embs = BTreeMap::new();
        for m in ["a", "b"] {
            embs.insert((m.to_string(), "FC6".to_string()), Tensor::zeros(&[1, 2]));
        }
        embs.insert(("a".to_string(), "FC3".to_string()), Tensor::zeros(&[1, 2]));
        let err = head.forward(&embs, false).unwrap_err().to_string();
        assert!(err.contains("(b, FC3)"), "{err}");
    }
}
