//! Experiment configuration: a sectioned TOML file with `dataset`,
//! `network`, `fusion`, `train` and `eval` tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::{FusionKind, HeadSpec};
use crate::modality_net::{BlockSpec, NetworkSpec, Reducer, TapSpec, SHALLOW_TAP};
use crate::synthdata::{AugmentConfig, GeneratorConfig, ModalityGen, NoiseProfile};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub fusion: FusionSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Base seed of the generator; each run derives its own dataset from it.
    pub seed: u64,
    pub subjects: usize,
    pub tuples_per_subject: usize,
    /// One independent dataset, training and evaluation per run seed.
    pub runs: Vec<u64>,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub modalities: Vec<ModalitySection>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySection {
    pub name: String,
    pub shape: [usize; 3],
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise: NoiseProfile,
    #[serde(default)]
    pub dual_template: bool,
    /// Adds translated copies of every training image before pretraining.
    #[serde(default)]
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub blocks: Vec<BlockSpec>,
    /// Defaults to 2×2 after every block.
    #[serde(default)]
    pub pool_windows: Vec<[usize; 2]>,
    pub width_scale: f64,
    pub embedding_dim: usize,
    #[serde(default = "three")]
    pub kernel_size: usize,
    pub shallow_tap: ShallowTapSection,
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowTapSection {
    pub source: String,
    #[serde(default)]
    pub window: Option<[usize; 2]>,
    #[serde(default)]
    pub global_average: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    /// Settings evaluated besides the unimodal baselines.
    pub kinds: Vec<FusionKind>,
    pub fusion_dim: usize,
    pub keep_prob: f64,
    /// Modality-name groups for bi-level heads.
    #[serde(default)]
    pub groups: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub lr0: Option<f64>,
    pub epochs_per_decay: Option<f64>,
    pub decay_factor: Option<f64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: TrainConfig,
    /// Per-modality schedule overrides of `pretrain`.
    #[serde(default)]
    pub modality: BTreeMap<String, TrainOverride>,
    pub frozen: TrainConfig,
    /// `lr0` is replaced by the smallest final pretraining rate and
    /// `batch_size` is halved.
    pub joint: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub metrics_csv: String,
    pub cmc_svg: String,
    pub summary: String,
    pub checkpoints: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 5, 10],
            metrics_csv: "metrics.csv".into(),
            cmc_svg: "cmc.svg".into(),
            summary: "summary.md".into(),
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

fn issue(field: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn modality_names(&self) -> Vec<&str> {
        self.dataset.modalities.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn network_spec(&self, modality: &ModalitySection) -> NetworkSpec {
        let n = &self.network;
        NetworkSpec {
            modality: modality.name.clone(),
            input_shape: modality.shape,
            blocks: n.blocks.clone(),
            pool_windows: if n.pool_windows.is_empty() {
                vec![[2, 2]; n.blocks.len()]
            } else {
                n.pool_windows.clone()
            },
            width_scale: n.width_scale,
            embedding_dim: n.embedding_dim,
            kernel_size: n.kernel_size,
            // batch-norm layers take the moving-average decay of pretraining
            bn_decay: self.pretrain_config(&modality.name).bn_decay,
        }
    }

    pub fn shallow_tap(&self) -> TapSpec {
        let s = &self.network.shallow_tap;
        TapSpec {
            id: SHALLOW_TAP.into(),
            source: s.source.clone(),
            reducer: if s.global_average {
                Reducer::GlobalAverage
            } else {
                Reducer::PoolFc { window: s.window }
            },
        }
    }

    pub fn generator(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            seed,
            num_subjects: self.dataset.subjects,
            modalities: self
                .dataset
                .modalities
                .iter()
                .map(|m| ModalityGen {
                    name: m.name.clone(),
                    shape: m.shape,
                    noise: m.noise,
                    train_samples: m.train_samples,
                    test_samples: m.test_samples,
                    dual_template: m.dual_template,
                })
                .collect(),
        }
    }

    /// Pretraining config of one modality after overrides.
    pub fn pretrain_config(&self, modality: &str) -> TrainConfig {
        let mut c = self.train.pretrain.clone();
        if let Some(o) = self.train.modality.get(modality) {
            if let Some(v) = o.lr0 {
                c.lr0 = v;
            }
            if let Some(v) = o.epochs_per_decay {
                c.epochs_per_decay = v;
            }
            if let Some(v) = o.decay_factor {
                c.decay_factor = v;
            }
            if let Some(v) = o.epochs {
                c.epochs = v;
            }
        }
        c
    }

    pub fn head_spec(&self, kind: FusionKind) -> HeadSpec {
        let names = self.modality_names();
        let groups = if kind.is_bilevel() {
            self.fusion
                .groups
                .iter()
                .map(|g| g.iter().filter_map(|m| names.iter().position(|n| n == m)).collect())
                .collect()
        } else {
            vec![(0..names.len()).collect()]
        };
        HeadSpec {
            kind,
            modalities: names.iter().map(|s| s.to_string()).collect(),
            groups,
            fusion_dim: self.fusion.fusion_dim,
            num_classes: self.dataset.subjects,
        }
    }

    /// Every problem found, each with the path of the offending field.
    /// Includes a shape dry-run of every network and tap.
    pub fn check(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let d = &self.dataset;
        if d.subjects < 2 {
            out.push(issue(
                "dataset.subjects",
                format!("need at least 2, got {}", d.subjects),
            ));
        }
        if d.tuples_per_subject == 0 {
            out.push(issue("dataset.tuples_per_subject", "must be positive"));
        }
        if d.runs.is_empty() {
            out.push(issue("dataset.runs", "at least one run seed is required"));
        }
        if d.runs.iter().collect::<BTreeSet<_>>().len() != d.runs.len() {
            out.push(issue("dataset.runs", "run seeds must be distinct"));
        }
        if d.augment.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            out.push(issue("dataset.augment.sigmas", "sigmas must be finite and >= 0"));
        }
        if d.modalities.is_empty() {
            out.push(issue("dataset.modalities", "no modalities declared"));
        }
        let mut seen = BTreeSet::new();
        for (i, m) in d.modalities.iter().enumerate() {
            let p = format!("dataset.modalities[{i}]");
            if m.name.is_empty() || m.name.contains(['.', ',', '/', ':']) {
                out.push(issue(
                    format!("{p}.name"),
                    format!("invalid modality name '{}'", m.name),
                ));
            }
            if !seen.insert(m.name.as_str()) {
                out.push(issue(format!("{p}.name"), format!("duplicate modality {}", m.name)));
            }
            if m.train_samples == 0 {
                out.push(issue(format!("{p}.train_samples"), "must be positive"));
            }
            if m.test_samples == 0 {
                out.push(issue(format!("{p}.test_samples"), "must be positive"));
            }
            if m.shape.contains(&0) {
                out.push(issue(format!("{p}.shape"), "extents must be positive"));
            } else if let Err(e) = m.noise.validate(&m.name, m.shape) {
                out.push(issue(format!("{p}.noise"), e.to_string()));
            } else {
                let spec = self.network_spec(m);
                match spec.plan() {
                    Err(e) => out.push(issue(format!("network ({})", m.name), e.to_string())),
                    Ok(_) => {
                        if let Err(e) = spec.plan_tap(&spec.deep_tap()) {
                            out.push(issue(format!("network ({})", m.name), e.to_string()));
                        }
                        let uses_shallow = self.fusion.kinds.iter().any(|k| k.taps().contains(&SHALLOW_TAP));
                        if uses_shallow {
                            if let Err(e) = spec.plan_tap(&self.shallow_tap()) {
                                out.push(issue("network.shallow_tap", e.to_string()));
                            }
                        }
                    }
                }
            }
        }
        let f = &self.fusion;
        if f.kinds.is_empty() {
            out.push(issue("fusion.kinds", "no fusion settings requested"));
        }
        if f.kinds.iter().collect::<BTreeSet<_>>().len() != f.kinds.len() {
            out.push(issue("fusion.kinds", "duplicate fusion setting"));
        }
        if f.fusion_dim == 0 {
            out.push(issue("fusion.fusion_dim", "must be positive"));
        }
        if !(f.keep_prob > 0.0 && f.keep_prob <= 1.0) {
            out.push(issue(
                "fusion.keep_prob",
                format!("must lie in (0,1], got {}", f.keep_prob),
            ));
        }
        let names = self.modality_names();
        for (gi, g) in f.groups.iter().enumerate() {
            for (mi, m) in g.iter().enumerate() {
                if !names.contains(&m.as_str()) {
                    out.push(issue(
                        format!("fusion.groups[{gi}][{mi}]"),
                        format!("unknown modality {m}"),
                    ));
                }
            }
        }
        if out.is_empty() && d.subjects >= 2 {
            for &k in f.kinds.iter().filter(|k| !k.is_score_level()) {
                if let Err(e) = self.head_spec(k).validate() {
                    out.push(issue("fusion.groups", format!("{k}: {e}")));
                }
            }
        }
        for m in &d.modalities {
            if let Err(e) = self.pretrain_config(&m.name).validate() {
                out.push(issue(format!("train.modality.{}", m.name), e.to_string()));
            }
        }
        if let Err(e) = self.train.pretrain.validate() {
            out.push(issue("train.pretrain", e.to_string()));
        }
        if let Err(e) = self.train.frozen.validate() {
            out.push(issue("train.frozen", e.to_string()));
        }
        if let Err(e) = self.train.joint.validate() {
            out.push(issue("train.joint", e.to_string()));
        }
        for name in self.train.modality.keys() {
            if !names.contains(&name.as_str()) {
                out.push(issue(format!("train.modality.{name}"), "unknown modality"));
            }
        }
        for (i, &k) in self.eval.ks.iter().enumerate() {
            if k == 0 || k > d.subjects {
                out.push(issue(
                    format!("eval.ks[{i}]"),
                    format!("K = {k} outside 1..={}", d.subjects),
                ));
            }
        }
        for (field, v) in [
            ("eval.metrics_csv", &self.eval.metrics_csv),
            ("eval.cmc_svg", &self.eval.cmc_svg),
            ("eval.summary", &self.eval.summary),
        ] {
            let p = Path::new(v);
            if v.is_empty() || p.is_absolute() || p.components().any(|c| c.as_os_str() == "..") {
                out.push(issue(field, "must be a relative path inside the output directory"));
            }
        }
        out
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigIssue>> {
    toml::from_str(text).map_err(|e| {
        let field = e.span().map(|s| {
            let line = text[..s.start.min(text.len())].lines().count().max(1);
            format!("line {line}")
        });
        vec![issue(field.unwrap_or_default(), e.message().to_string())]
    })
}

/// Parses and checks a config file; returns every problem found.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, Vec<ConfigIssue>> {
    let text =
        fs::read_to_string(path).map_err(|e| vec![issue(path.display().to_string(), format!("cannot read: {e}"))])?;
    validate_text(&text)
}

pub fn validate_text(text: &str) -> Result<ExperimentConfig, Vec<ConfigIssue>> {
    let config = parse_config(text)?;
    let issues = config.check();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(issues)
    }
}

/// The shipped default experiment.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");
