//! Synthetic multimodal identification data.
//!
//! Every (subject, modality) pair owns a procedural template made of
//! oriented bands and blobs. Samples are corrupted copies of the template:
//! integer jitter, additive Gaussian noise and gray occlusion patches, with
//! per-modality strengths so unimodal difficulty can be ordered.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Std of additive per-pixel Gaussian noise.
    pub sigma: f64,
    /// Largest absolute integer shift in each direction.
    #[serde(default)]
    pub max_shift: usize,
    /// Probability that a sample receives an occlusion patch.
    #[serde(default)]
    pub occlusion_prob: f64,
    /// Side length of the square occlusion patch.
    #[serde(default)]
    pub occlusion_size: usize,
}

impl NoiseProfile {
    pub const NONE: NoiseProfile = NoiseProfile {
        sigma: 0.0,
        max_shift: 0,
        occlusion_prob: 0.0,
        occlusion_size: 0,
    };

    pub fn validate(&self, modality: &str, shape: [usize; 3]) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("noise profile of {modality}: {what}")));
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad("sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion_prob must lie in [0,1]");
        }
        if self.occlusion_prob > 0.0 && (self.occlusion_size == 0 || self.occlusion_size > shape[1].min(shape[2])) {
            return bad("occlusion_size must be between 1 and the image side");
        }
        if self.max_shift >= shape[1].min(shape[2]) {
            return bad("max_shift must be smaller than the image side");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityGen {
    pub name: String,
    /// (channels, height, width)
    pub shape: [usize; 3],
    pub noise: NoiseProfile,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Two sub-templates per subject, drawn alternately (left/right iris
    /// style heterogeneous classes).
    #[serde(default)]
    pub dual_template: bool,
}

/// Train/test counts for a modality with `total` samples per subject: four
/// for training and the rest for testing, except that with fewer than five
/// samples a single one is held out.
pub fn biomdata_split(total: usize) -> (usize, usize) {
    if total < 5 {
        (total.saturating_sub(1), 1.min(total))
    } else {
        (4, total - 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_subjects: usize,
    pub modalities: Vec<ModalityGen>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// All samples of one modality in one split, ordered by subject then index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySamples {
    /// Each image is 1×C×H×W.
    pub images: Vec<Tensor>,
    pub subjects: Vec<usize>,
}

impl ModalitySamples {
    pub fn indices_of(&self, subject: usize) -> Vec<usize> {
        (0..self.subjects.len())
            .filter(|&i| self.subjects[i] == subject)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: GeneratorConfig,
    /// Indexed like `config.modalities`.
    pub train: Vec<ModalitySamples>,
    pub test: Vec<ModalitySamples>,
    /// Per-modality channel means subtracted by [`normalize_channels`].
    pub channel_means: Option<Vec<Vec<f64>>>,
}

impl SyntheticDataset {
    pub fn modality_names(&self) -> Vec<&str> {
        self.config.modalities.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn split(&self, split: Split) -> &[ModalitySamples] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_subjects
    }
}

fn derive_seed(parts: &[u64]) -> u64 {
    // SplitMix64 chain
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn modality_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Procedural template for one (subject, modality, variant), values in [0,1].
pub fn template(dataset_seed: u64, subject: usize, modality: &str, variant: usize, shape: [usize; 3]) -> Tensor {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        dataset_seed,
        subject as u64,
        modality_tag(modality),
        variant as u64,
    ]));
    let mut data = vec![0.0; c * h * w];
    let (hf, wf) = (h as f64, w as f64);
    for ch in 0..c {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        let bands: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let freq = rng.random_range(1.0..4.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.0);
                (theta, freq, phase, amp)
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                let cy = rng.random_range(0.0..hf);
                let cx = rng.random_range(0.0..wf);
                let r = rng.random_range(0.06..0.16) * hf.min(wf);
                let amp = rng.random_range(-1.5..1.5);
                (cy, cx, r, amp)
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let mut v = 0.0;
                for &(theta, freq, phase, amp) in &bands {
                    let u = (xf * theta.cos() / wf + yf * theta.sin() / hf) * freq;
                    v += amp * (std::f64::consts::TAU * u + phase).sin();
                }
                for &(cy, cx, r, amp) in &blobs {
                    let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                    v += amp * (-d2 / (2.0 * r * r)).exp();
                }
                plane[y * w + x] = v;
            }
        }
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
    Tensor::new(&[1, c, h, w], data).expect("template shape")
}

/// Shifts every channel by (dy, dx) pixels, filling uncovered pixels with `fill`.
pub fn translate(image: &Tensor, dy: isize, dx: isize, fill: f64) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = image.len() / (h * w);
    let mut out = vec![fill; image.len()];
    for p in 0..planes {
        let src = &image.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx >= 0 && sx < w as isize {
                    dst[y * w + x] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

fn corrupt(tpl: &Tensor, noise: &NoiseProfile, rng: &mut ChaCha8Rng) -> Tensor {
    let s = tpl.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let mut img = if noise.max_shift > 0 {
        let m = noise.max_shift as i64;
        let dy = rng.random_range(-m..=m) as isize;
        let dx = rng.random_range(-m..=m) as isize;
        translate(tpl, dy, dx, 0.0)
    } else {
        tpl.clone()
    };
    if noise.sigma > 0.0 {
        let normal = Normal::new(0.0, noise.sigma).unwrap();
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    if noise.occlusion_prob > 0.0 && rng.random::<f64>() < noise.occlusion_prob {
        let size = noise.occlusion_size;
        let y0 = rng.random_range(0..=h - size);
        let x0 = rng.random_range(0..=w - size);
        let planes = img.len() / (h * w);
        let data = img.data_mut();
        for p in 0..planes {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    data[p * h * w + y * w + x] = 0.5;
                }
            }
        }
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

pub fn generate_dataset(config: &GeneratorConfig) -> Result<SyntheticDataset> {
    if config.num_subjects < 2 {
        return Err(Error::Config(format!(
            "need at least 2 subjects, got {}",
            config.num_subjects
        )));
    }
    if config.modalities.is_empty() {
        return Err(Error::Config("no modalities declared".into()));
    }
    for (i, m) in config.modalities.iter().enumerate() {
        if config.modalities[..i].iter().any(|o| o.name == m.name) {
            return Err(Error::Config(format!("duplicate modality {}", m.name)));
        }
        if m.shape.contains(&0) {
            return Err(Error::Config(format!("{}: empty image shape", m.name)));
        }
        if m.train_samples + m.test_samples < 2 || m.train_samples == 0 || m.test_samples == 0 {
            return Err(Error::Config(format!(
                "{}: need at least one train and one test sample per subject",
                m.name
            )));
        }
        m.noise.validate(&m.name, m.shape)?;
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for m in &config.modalities {
        let tag = modality_tag(&m.name);
        let mut tr = ModalitySamples {
            images: Vec::new(),
            subjects: Vec::new(),
        };
        let mut te = ModalitySamples {
            images: Vec::new(),
            subjects: Vec::new(),
        };
        for s in 0..config.num_subjects {
            let variants = if m.dual_template { 2 } else { 1 };
            let tpls: Vec<Tensor> = (0..variants)
                .map(|v| template(config.seed, s, &m.name, v, m.shape))
                .collect();
            // sample index k is one independent draw; train uses the first
            // train_samples draws and test the remaining ones
            for k in 0..m.train_samples + m.test_samples {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, s as u64, tag, 1 + k as u64]));
                let img = corrupt(&tpls[k % variants], &m.noise, &mut rng);
                let dst = if k < m.train_samples { &mut tr } else { &mut te };
                dst.images.push(img);
                dst.subjects.push(s);
            }
        }
        train.push(tr);
        test.push(te);
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        train,
        test,
        channel_means: None,
    })
}

/// One multimodal sample: an index into each modality's split, plus label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleTuple {
    pub subject: usize,
    /// Indexed like the dataset's modalities.
    pub indices: Vec<usize>,
}

/// Draws `tuples_per_subject` tuples per subject from `split`, pairing the
/// subject's samples of each modality uniformly at random with replacement.
pub fn sample_tuples(
    dataset: &SyntheticDataset,
    split: Split,
    tuples_per_subject: usize,
    seed: u64,
) -> Result<Vec<SampleTuple>> {
    let samples = dataset.split(split);
    let per_subject: Vec<Vec<Vec<usize>>> = samples
        .iter()
        .map(|m| (0..dataset.num_classes()).map(|s| m.indices_of(s)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, split as u64]));
    let mut out = Vec::with_capacity(dataset.num_classes() * tuples_per_subject);
    for s in 0..dataset.num_classes() {
        for (mi, m) in per_subject.iter().enumerate() {
            if m[s].is_empty() {
                return Err(Error::Data(format!(
                    "subject {s} has no {} sample of modality {}",
                    split.name(),
                    dataset.config.modalities[mi].name
                )));
            }
        }
        for _ in 0..tuples_per_subject {
            let indices = per_subject
                .iter()
                .map(|m| m[s][rng.random_range(0..m[s].len())])
                .collect();
            out.push(SampleTuple { subject: s, indices });
        }
    }
    Ok(out)
}

/// Number of tuples the sampling protocol yields per split.
pub fn tuple_count(subjects: usize, tuples_per_subject: usize) -> usize {
    subjects * tuples_per_subject
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Translation std per group, in pixels.
    pub sigmas: Vec<f64>,
    /// Draws per sigma.
    pub draws_per_sigma: usize,
    pub mean: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigmas: vec![2.5, 5.0],
            draws_per_sigma: 10,
            mean: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn count(&self) -> usize {
        self.sigmas.len() * self.draws_per_sigma
    }
}

/// Raw (unrounded, unclamped) Gaussian shift draw.
pub fn sample_shift(rng: &mut impl Rng, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mean;
    }
    Normal::new(mean, sigma).unwrap().sample(rng)
}

/// Whole-image Gaussian translations: `draws_per_sigma` images per sigma,
/// each shifted by independent rounded (dy, dx) clamped to 3σ, zero filled.
pub fn augment_translate(image: &Tensor, config: &AugmentConfig, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(config.count());
    for &sigma in &config.sigmas {
        let limit = 3.0 * sigma;
        for _ in 0..config.draws_per_sigma {
            let mut draw = || {
                let d = sample_shift(&mut rng, config.mean, sigma);
                d.clamp(config.mean - limit, config.mean + limit).round() as isize
            };
            let dy = draw();
            let dx = draw();
            out.push(translate(image, dy, dx, 0.0));
        }
    }
    out
}

/// Subtracts per-modality, per-channel means computed on the train split
/// from both splits and records them.
pub fn normalize_channels(dataset: &mut SyntheticDataset) -> Result<Vec<Vec<f64>>> {
    let mut all = Vec::new();
    for (mi, m) in dataset.config.modalities.iter().enumerate() {
        let train = &dataset.train[mi];
        if train.images.is_empty() {
            return Err(Error::Data(format!("{}: empty train split", m.name)));
        }
        let [c, h, w] = m.shape;
        let mut means = vec![0.0; c];
        for img in &train.images {
            for (ch, mean) in means.iter_mut().enumerate() {
                *mean += img.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>();
            }
        }
        let count = (train.images.len() * h * w) as f64;
        means.iter_mut().for_each(|v| *v /= count);
        for split in [&mut dataset.train[mi], &mut dataset.test[mi]] {
            for img in &mut split.images {
                for (ch, mean) in means.iter().enumerate() {
                    img.data_mut()[ch * h * w..(ch + 1) * h * w]
                        .iter_mut()
                        .for_each(|v| *v -= mean);
                }
            }
        }
        all.push(means);
    }
    dataset.channel_means = Some(all.clone());
    Ok(all)
}

/// Images of one modality as a labeled set.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn from_samples(samples: &ModalitySamples) -> Self {
        ImageSet {
            images: samples.images.clone(),
            labels: samples.subjects.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        ImageSet {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Appends `config.count()` translated copies of every image.
    pub fn augmented(&self, config: &AugmentConfig, seed: u64) -> Self {
        let mut out = self.clone();
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            for a in augment_translate(img, config, derive_seed(&[seed, i as u64])) {
                out.images.push(a);
                out.labels.push(label);
            }
        }
        out
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = idx.iter().map(|&i| &self.images[i]).collect();
        Tensor::concat_batch(&parts)
    }
}

/// Tuples over per-modality image pools.
#[derive(Debug, Clone)]
pub struct TupleSet {
    /// One pool per modality, shared by all tuples.
    pub pools: Vec<Vec<Tensor>>,
    pub tuples: Vec<SampleTuple>,
}

impl TupleSet {
    pub fn new(dataset: &SyntheticDataset, split: Split, tuples: Vec<SampleTuple>) -> Self {
        TupleSet {
            pools: dataset.split(split).iter().map(|m| m.images.clone()).collect(),
            tuples,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        TupleSet {
            pools: self.pools.clone(),
            tuples: idx.iter().map(|&i| self.tuples[i].clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.tuples.iter().map(|t| t.subject).collect()
    }

    /// One stacked batch per modality.
    pub fn batch(&self, idx: &[usize]) -> Result<Vec<Tensor>> {
        (0..self.pools.len())
            .map(|m| {
                let parts: Vec<&Tensor> = idx.iter().map(|&i| &self.pools[m][self.tuples[i].indices[m]]).collect();
                Tensor::concat_batch(&parts)
            })
            .collect()
    }
}

const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    generator: GeneratorConfig,
    normalized: bool,
    summary: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    modality: String,
    shape: [usize; 3],
    train: usize,
    test: usize,
}

/// Writes the text manifest from which the dataset can be regenerated.
pub fn write_manifest(dataset: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        generator: dataset.config.clone(),
        normalized: dataset.channel_means.is_some(),
        summary: dataset
            .config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| ManifestEntry {
                modality: m.name.clone(),
                shape: m.shape,
                train: dataset.train[i].images.len(),
                test: dataset.test[i].images.len(),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut header = String::new();
    let _ = writeln!(
        header,
        "# synthetic dataset snapshot; regenerate with the [generator] table"
    );
    let path = dir.join(MANIFEST);
    fs::write(&path, header + &text).map_err(|e| Error::io(&path, e))
}

/// Writes the manifest plus one tensor file per (modality, split).
pub fn write_snapshot(dataset: &SyntheticDataset, dir: &Path) -> Result<()> {
    write_manifest(dataset, dir)?;
    for (i, m) in dataset.config.modalities.iter().enumerate() {
        for split in [Split::Train, Split::Test] {
            let samples = &dataset.split(split)[i];
            let ids: Vec<String> = samples
                .subjects
                .iter()
                .enumerate()
                .map(|(k, s)| format!("s{s}.k{k}"))
                .collect();
            let path = dir.join(format!("{}.{}.bin", m.name, split.name()));
            checkpoint::save(&path, ids.iter().map(String::as_str).zip(samples.images.iter()))?;
        }
    }
    Ok(())
}

/// Rebuilds a dataset from a snapshot manifest alone.
pub fn regenerate_from_manifest(dir: &Path) -> Result<SyntheticDataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut ds = generate_dataset(&manifest.generator)?;
    if manifest.normalized {
        normalize_channels(&mut ds)?;
    }
    Ok(ds)
}

/// Loads the stored sample tensors of a snapshot.
pub fn load_snapshot_images(dir: &Path, modality: &str, split: Split) -> Result<Vec<Tensor>> {
    let path = dir.join(format!("{modality}.{}.bin", split.name()));
    Ok(checkpoint::load(&path)?.into_iter().map(|(_, t)| t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(sigma: f64) -> GeneratorConfig {
        GeneratorConfig {
            seed: 3,
            num_subjects: 4,
            modalities: vec![
                ModalityGen {
                    name: "a".into(),
                    shape: [1, 8, 8],
                    noise: NoiseProfile {
                        sigma,
                        ..NoiseProfile::NONE
                    },
                    train_samples: 3,
                    test_samples: 2,
                    dual_template: false,
                },
                ModalityGen {
                    name: "b".into(),
                    shape: [1, 8, 8],
                    noise: NoiseProfile {
                        sigma,
                        max_shift: 1,
                        occlusion_prob: 0.5,
                        occlusion_size: 3,
                    },
                    train_samples: 2,
                    test_samples: 2,
                    dual_template: false,
                },
            ],
        }
    }

    #[test]
    fn noiseless_samples_equal_templates() {
        let mut c = config(0.0);
        c.modalities[1].noise = NoiseProfile::NONE;
        let ds = generate_dataset(&c).unwrap();
        for (mi, m) in c.modalities.iter().enumerate() {
            for (img, &s) in ds.train[mi].images.iter().zip(&ds.train[mi].subjects) {
                assert_eq!(img, &template(3, s, &m.name, 0, m.shape));
            }
        }
        // 1-NN against templates is then exact
        let tpl: Vec<Tensor> = (0..4).map(|s| template(3, s, "a", 0, [1, 8, 8])).collect();
        for (img, &s) in ds.test[0].images.iter().zip(&ds.test[0].subjects) {
            let nn = (0..4)
                .min_by(|&i, &j| {
                    let d = |t: &Tensor| {
                        t.data()
                            .iter()
                            .zip(img.data())
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                    };
                    d(&tpl[i]).partial_cmp(&d(&tpl[j])).unwrap()
                })
                .unwrap();
            assert_eq!(nn, s);
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_dataset(&config(0.3)).unwrap();
        let b = generate_dataset(&config(0.3)).unwrap();
        assert_eq!(a, b);
        for m in a.train.iter().chain(&a.test) {
            for img in &m.images {
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn train_and_test_are_distinct_draws() {
        let ds = generate_dataset(&config(0.3)).unwrap();
        for img in &ds.test[0].images {
            assert!(!ds.train[0].images.contains(img));
        }
    }

    #[test]
    fn invalid_profiles() {
        let mut c = config(-1.0);
        assert!(matches!(generate_dataset(&c), Err(Error::Config(_))));
        c = config(0.1);
        c.modalities[1].noise.occlusion_size = 0;
        assert!(generate_dataset(&c).is_err());
        c = config(0.1);
        c.num_subjects = 1;
        assert!(generate_dataset(&c).is_err());
    }

    #[test]
    fn tuples_are_balanced() {
        let ds = generate_dataset(&config(0.1)).unwrap();
        let tuples = sample_tuples(&ds, Split::Train, 7, 1).unwrap();
        assert_eq!(tuples.len(), tuple_count(4, 7));
        for s in 0..4 {
            assert_eq!(tuples.iter().filter(|t| t.subject == s).count(), 7);
        }
        for t in &tuples {
            for (m, &i) in t.indices.iter().enumerate() {
                assert_eq!(ds.train[m].subjects[i], t.subject);
            }
        }
        let test = sample_tuples(&ds, Split::Test, 7, 1).unwrap();
        assert_eq!(test.len(), tuples.len());
    }

    #[test]
    fn desk_and_full_scale_tuple_counts() {
        assert_eq!(tuple_count(20, 50), 1000);
        assert_eq!(tuple_count(294, 250), 73_500);
    }

    #[test]
    fn single_sample_gives_identical_tuples() {
        let mut c = config(0.1);
        c.modalities.iter_mut().for_each(|m| {
            m.train_samples = 1;
            m.test_samples = 1;
        });
        let ds = generate_dataset(&c).unwrap();
        let tuples = sample_tuples(&ds, Split::Train, 5, 0).unwrap();
        for s in 0..4 {
            let mine: Vec<_> = tuples.iter().filter(|t| t.subject == s).collect();
            assert!(mine.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn missing_modality_sample_is_data_error() {
        let mut ds = generate_dataset(&config(0.1)).unwrap();
        let keep: Vec<usize> = (0..ds.train[1].subjects.len())
            .filter(|&i| ds.train[1].subjects[i] != 2)
            .collect();
        ds.train[1].images = keep.iter().map(|&i| ds.train[1].images[i].clone()).collect();
        ds.train[1].subjects = keep.iter().map(|&i| ds.train[1].subjects[i]).collect();
        assert!(matches!(sample_tuples(&ds, Split::Train, 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn augment_counts_and_zero_sigma() {
        let img = template(1, 0, "x", 0, [1, 16, 16]);
        let out = augment_translate(&img, &AugmentConfig::default(), 4);
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|t| t.shape() == img.shape()));
        let still = AugmentConfig {
            sigmas: vec![0.0, 0.0],
            ..AugmentConfig::default()
        };
        let copies = augment_translate(&img, &still, 4);
        assert_eq!(copies.len(), 20);
        assert!(copies.iter().all(|t| t == &img));
    }

    #[test]
    fn shift_draws_have_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_shift(&mut rng, 0.0, 2.5)).collect();
        let mean = draws.iter().sum::<f64>() / 1e4;
        let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 1e4).sqrt();
        assert!((std - 2.5).abs() < 0.05 * 2.5, "{std}");
    }

    #[test]
    fn translate_zero_fills() {
        let img = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(translate(&img, 1, 0, 0.0).data(), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(translate(&img, 0, -1, 0.0).data(), &[2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn normalization_of_constant_images() {
        let mut ds = generate_dataset(&config(0.0)).unwrap();
        for m in ds.train.iter_mut().chain(ds.test.iter_mut()) {
            for img in &mut m.images {
                img.fill(0.5);
            }
        }
        let means = normalize_channels(&mut ds).unwrap();
        assert_eq!(means, vec![vec![0.5], vec![0.5]]);
        assert!(ds
            .train
            .iter()
            .chain(&ds.test)
            .all(|m| m.images.iter().all(|i| i.max_abs() == 0.0)));
    }

    #[test]
    fn normalization_uses_train_split_only() {
        let mut a = generate_dataset(&config(0.2)).unwrap();
        let mut b = a.clone();
        for img in &mut b.test[0].images {
            img.fill(0.9);
        }
        let ma = normalize_channels(&mut a).unwrap();
        let mb = normalize_channels(&mut b).unwrap();
        assert_eq!(ma, mb);
        for m in &a.train {
            let total: f64 = m.images.iter().map(|i| i.sum()).sum();
            let n: usize = m.images.iter().map(|i| i.len()).sum();
            assert!((total / n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn biomdata_rule() {
        assert_eq!(biomdata_split(4), (3, 1));
        assert_eq!(biomdata_split(7), (4, 3));
        assert_eq!(biomdata_split(5), (4, 1));
    }

    #[test]
    fn dual_templates_alternate() {
        let mut c = config(0.0);
        c.modalities[0].dual_template = true;
        let ds = generate_dataset(&c).unwrap();
        assert_eq!(ds.train[0].images[0], template(3, 0, "a", 0, [1, 8, 8]));
        assert_eq!(ds.train[0].images[1], template(3, 0, "a", 1, [1, 8, 8]));
    }

    #[test]
    fn snapshot_regenerates_bit_identically() {
        let mut ds = generate_dataset(&config(0.2)).unwrap();
        normalize_channels(&mut ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_snapshot(&ds, dir.path()).unwrap();
        let again = regenerate_from_manifest(dir.path()).unwrap();
        assert_eq!(again, ds);
        let stored = load_snapshot_images(dir.path(), "b", Split::Test).unwrap();
        let bits = |v: &[Tensor]| {
            v.iter()
                .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&stored), bits(&ds.test[1].images));
    }
}
