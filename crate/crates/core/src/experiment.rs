//! End-to-end experiment runner.
//!
//! For every run seed: generate a dataset, pretrain one network per
//! modality, train each requested fusion head (frozen backbones, then
//! jointly), and evaluate every setting on the shared test tuples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::{score_major_vector, score_sum_vector, FusionKind, FusionModel};
use crate::metrics::{
    self, aggregate_runs, cmc, curve_rows, mean_std, rank_one_accuracy, AggregateCmc, CmcResult, Query,
};
use crate::modality_net::{ModalityNetwork, TapSpec};
use crate::synthdata::{
    generate_dataset, normalize_channels, sample_tuples, write_manifest, ImageSet, Split, SyntheticDataset, TupleSet,
};
use crate::tensor::{Parameter, Tensor};
use crate::train::{
    joint_config, predict_fusion, predict_modality, run_phase, write_log_csv, Phase, PhaseData, PhaseKind, PhaseModel,
    TrainLog,
};

pub const FAILURE_MARKER: &str = "FAILED";
const EVAL_CHUNK: usize = 64;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn unimodal_curve(modality: &str) -> String {
    format!("unimodal:{modality}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveResult {
    pub name: String,
    pub cmc: CmcResult,
    pub rank_one: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub curves: Vec<CurveResult>,
    pub logs: Vec<TrainLog>,
}

#[derive(Debug, Clone)]
pub struct CurveSummary {
    pub name: String,
    pub cmc: AggregateCmc,
    pub rank_one_mean: f64,
    pub rank_one_std: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub runs: Vec<RunResult>,
    pub curves: Vec<CurveSummary>,
}

impl ExperimentSummary {
    pub fn curve(&self, name: &str) -> Option<&CurveSummary> {
        self.curves.iter().find(|c| c.name == name)
    }

    pub fn rank_one(&self, name: &str) -> Option<f64> {
        self.curve(name).map(|c| c.rank_one_mean)
    }
}

/// Trained models of one run.
#[derive(Debug, Clone)]
pub struct RunModels {
    pub modalities: Vec<ModalityNetwork>,
    pub fusion: Vec<(FusionKind, FusionModel)>,
}

/// Dataset and test tuples of one run, regenerated from the config alone.
pub struct RunData {
    pub dataset: SyntheticDataset,
    pub train: TupleSet,
    pub test: TupleSet,
}

pub fn run_data(config: &ExperimentConfig, seed: u64) -> Result<RunData> {
    let mut dataset = generate_dataset(&config.generator(mix(config.dataset.seed, seed)))?;
    if config.dataset.normalize {
        normalize_channels(&mut dataset)?;
    }
    let tps = config.dataset.tuples_per_subject;
    let train = TupleSet::new(
        &dataset,
        Split::Train,
        sample_tuples(&dataset, Split::Train, tps, mix(seed, 1))?,
    );
    let test = TupleSet::new(
        &dataset,
        Split::Test,
        sample_tuples(&dataset, Split::Test, tps, mix(seed, 2))?,
    );
    Ok(RunData { dataset, train, test })
}

fn build_modality(config: &ExperimentConfig, index: usize, seed: u64) -> Result<ModalityNetwork> {
    let m = &config.dataset.modalities[index];
    let spec = config.network_spec(m);
    let tc = config.pretrain_config(&m.name);
    ModalityNetwork::build(
        &spec,
        &[spec.deep_tap()],
        config.dataset.subjects,
        tc.keep_prob,
        mix(seed, tag(&m.name)),
    )
}

fn assemble(
    config: &ExperimentConfig,
    kind: FusionKind,
    backbones: Vec<ModalityNetwork>,
    seed: u64,
) -> Result<FusionModel> {
    let shallow: BTreeMap<String, TapSpec> = config
        .modality_names()
        .into_iter()
        .map(|n| (n.to_string(), config.shallow_tap()))
        .collect();
    FusionModel::assemble(
        backbones,
        &config.head_spec(kind),
        &shallow,
        config.fusion.keep_prob,
        mix(seed, tag(kind.name())),
    )
}

/// Trains every model of one run.
pub fn train_run(
    config: &ExperimentConfig,
    seed: u64,
    data: &RunData,
    progress: &mut dyn FnMut(&str),
) -> Result<(RunModels, Vec<TrainLog>)> {
    let mut logs = Vec::new();
    let mut nets = Vec::new();
    let mut final_lrs = Vec::new();
    for (i, m) in config.dataset.modalities.iter().enumerate() {
        let mut net = build_modality(config, i, seed)?;
        let mut images = ImageSet::from_samples(&data.dataset.train[i]);
        if m.augment {
            images = images.augmented(&config.dataset.augment, mix(seed, tag(&m.name) ^ 0xa5));
        }
        let mut tc = config.pretrain_config(&m.name);
        tc.seed = mix(seed, tag(&m.name) ^ 0x71);
        progress(&format!("run {seed}: pretraining {}", m.name));
        let log = run_phase(
            &Phase::new(PhaseKind::PretrainModality).labeled(format!("pretrain_modality:{}", m.name)),
            PhaseModel::Modality(&mut net),
            PhaseData::Images {
                train: &images,
                val: None,
            },
            &tc,
        )?;
        final_lrs.push(log.final_lr);
        logs.push(log);
        nets.push(net);
    }
    let mut fusion = Vec::new();
    for &kind in config.fusion.kinds.iter().filter(|k| !k.is_score_level()) {
        let mut model = assemble(config, kind, nets.clone(), seed)?;
        let mut frozen = config.train.frozen.clone();
        frozen.seed = mix(seed, tag(kind.name()) ^ 0xf0);
        progress(&format!("run {seed}: {kind} with frozen backbones"));
        logs.push(run_phase(
            &Phase::new(PhaseKind::FrozenFusion).labeled(format!("frozen_fusion:{kind}")),
            PhaseModel::Fusion(&mut model),
            PhaseData::Tuples {
                train: &data.train,
                val: None,
            },
            &frozen,
        )?);
        let mut joint = joint_config(&config.train.joint, &final_lrs)?;
        joint.seed = mix(seed, tag(kind.name()) ^ 0x10);
        progress(&format!("run {seed}: {kind} joint fine-tuning"));
        logs.push(run_phase(
            &Phase::new(PhaseKind::Joint).labeled(format!("joint:{kind}")),
            PhaseModel::Fusion(&mut model),
            PhaseData::Tuples {
                train: &data.train,
                val: None,
            },
            &joint,
        )?);
        fusion.push((kind, model));
    }
    Ok((
        RunModels {
            modalities: nets,
            fusion,
        },
        logs,
    ))
}

fn curve(name: String, queries: &[Query], seed: u64) -> Result<CurveResult> {
    Ok(CurveResult {
        name,
        cmc: cmc(queries, seed)?,
        rank_one: rank_one_accuracy(queries)?,
    })
}

/// Evaluates unimodal baselines and every configured fusion setting on
/// the run's test tuples.
pub fn evaluate_run(
    config: &ExperimentConfig,
    seed: u64,
    data: &RunData,
    models: &mut RunModels,
) -> Result<Vec<CurveResult>> {
    let tuples = &data.test.tuples;
    let mut per_image = Vec::new();
    for (i, net) in models.modalities.iter_mut().enumerate() {
        per_image.push(predict_modality(
            net,
            &ImageSet::from_samples(&data.dataset.test[i]),
            EVAL_CHUNK,
        )?);
    }
    // per_tuple[t][m]: modality m's probabilities for test tuple t
    let per_tuple: Vec<Vec<&[f64]>> = tuples
        .iter()
        .map(|t| {
            t.indices
                .iter()
                .enumerate()
                .map(|(m, &i)| per_image[m][i].as_slice())
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for (m, name) in config.modality_names().into_iter().enumerate() {
        let q: Vec<Query> = tuples
            .iter()
            .zip(&per_tuple)
            .map(|(t, p)| (p[m].to_vec(), t.subject))
            .collect();
        out.push(curve(unimodal_curve(name), &q, seed)?);
    }
    for &kind in &config.fusion.kinds {
        let scores: Vec<Vec<f64>> = match kind {
            FusionKind::ScoreSum => per_tuple.iter().map(|p| score_sum_vector(p)).collect::<Result<_>>()?,
            FusionKind::ScoreMajor => per_tuple.iter().map(|p| score_major_vector(p)).collect::<Result<_>>()?,
            _ => {
                let (_, model) = models
                    .fusion
                    .iter_mut()
                    .find(|(k, _)| *k == kind)
                    .ok_or_else(|| Error::Config(format!("no trained model for {kind}")))?;
                predict_fusion(model, &data.test, EVAL_CHUNK)?
            }
        };
        let q: Vec<Query> = scores.into_iter().zip(tuples).map(|(s, t)| (s, t.subject)).collect();
        out.push(curve(kind.name().to_string(), &q, seed)?);
    }
    Ok(out)
}

fn state_of<'a>(params: Vec<&'a Parameter>, buffers: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    let mut out: Vec<(String, &Tensor)> = params.into_iter().map(|p| (p.id.clone(), &p.value)).collect();
    out.extend(buffers);
    out
}

fn save_state(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    checkpoint::save(path, entries.iter().map(|(k, t)| (k.as_str(), *t)))
}

type Stored = BTreeMap<String, Tensor>;

fn load_state(path: &Path) -> Result<Stored> {
    Ok(checkpoint::load(path)?.into_iter().collect())
}

fn take(stored: &mut Stored, path: &Path, name: &str, dst: &mut Tensor) -> Result<()> {
    let t = stored.remove(name).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("missing tensor {name}"),
    })?;
    if t.shape() != dst.shape() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{name} has shape {:?}, model expects {:?}", t.shape(), dst.shape()),
        });
    }
    *dst = t;
    Ok(())
}

fn restore_net(stored: &mut Stored, path: &Path, net: &mut ModalityNetwork) -> Result<()> {
    for p in net.params_mut() {
        let id = p.id.clone();
        take(stored, path, &id, &mut p.value)?;
    }
    for (name, b) in net.buffers_mut() {
        take(stored, path, &name, b)?;
    }
    Ok(())
}

fn fusion_buffers(model: &FusionModel) -> Vec<(String, &Tensor)> {
    model.backbones.iter().flat_map(|n| n.buffers()).collect()
}

fn fusion_params(model: &FusionModel) -> Vec<&Parameter> {
    let mut ps: Vec<&Parameter> = model.backbones.iter().flat_map(|n| n.params()).collect();
    ps.extend(model.head.params());
    ps
}

fn checkpoint_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("run{seed}"))
}

fn save_models(dir: &Path, config: &ExperimentConfig, models: &RunModels) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (net, name) in models.modalities.iter().zip(config.modality_names()) {
        save_state(&dir.join(format!("{name}.bin")), &state_of(net.params(), net.buffers()))?;
    }
    for (kind, model) in &models.fusion {
        save_state(
            &dir.join(format!("{}.bin", kind.name())),
            &state_of(fusion_params(model), fusion_buffers(model)),
        )?;
    }
    Ok(())
}

fn load_models(dir: &Path, config: &ExperimentConfig, seed: u64) -> Result<RunModels> {
    let mut nets = Vec::new();
    for (i, name) in config.modality_names().into_iter().enumerate() {
        let mut net = build_modality(config, i, seed)?;
        let path = dir.join(format!("{name}.bin"));
        restore_net(&mut load_state(&path)?, &path, &mut net)?;
        nets.push(net);
    }
    let mut fusion = Vec::new();
    for &kind in config.fusion.kinds.iter().filter(|k| !k.is_score_level()) {
        let mut model = assemble(config, kind, nets.clone(), seed)?;
        let path = dir.join(format!("{}.bin", kind.name()));
        let mut stored = load_state(&path)?;
        for net in &mut model.backbones {
            restore_net(&mut stored, &path, net)?;
        }
        for p in model.head.params_mut() {
            let id = p.id.clone();
            take(&mut stored, &path, &id, &mut p.value)?;
        }
        fusion.push((kind, model));
    }
    Ok(RunModels {
        modalities: nets,
        fusion,
    })
}

fn summarize(runs: Vec<RunResult>) -> Result<ExperimentSummary> {
    let mut curves = Vec::new();
    if let Some(first) = runs.first() {
        for (ci, c) in first.curves.iter().enumerate() {
            let per_run: Vec<CmcResult> = runs.iter().map(|r| r.curves[ci].cmc.clone()).collect();
            let ranks: Vec<f64> = runs.iter().map(|r| r.curves[ci].rank_one).collect();
            let (m, s) = mean_std(&ranks);
            curves.push(CurveSummary {
                name: c.name.clone(),
                cmc: aggregate_runs(&per_run)?,
                rank_one_mean: m,
                rank_one_std: s,
            });
        }
    }
    Ok(ExperimentSummary { runs, curves })
}

fn metric_rows(summary: &ExperimentSummary) -> Vec<metrics::MetricRow> {
    let mut rows = Vec::new();
    for r in &summary.runs {
        for c in &r.curves {
            rows.extend(curve_rows(&format!("run{}", r.seed), &c.name, &c.cmc.recall_at_k, &[]));
        }
    }
    for c in &summary.curves {
        rows.extend(curve_rows("mean", &c.name, &c.cmc.mean, &c.cmc.std));
    }
    rows
}

pub fn summary_table(config: &ExperimentConfig, summary: &ExperimentSummary) -> String {
    let mut s = String::from("# Experiment summary\n\n");
    let runs: Vec<String> = summary.runs.iter().map(|r| r.seed.to_string()).collect();
    let _ = writeln!(
        s,
        "Runs: {}. Values are means over runs; ± is the population standard deviation.\n",
        runs.join(", ")
    );
    s.push_str("| setting | rank-one accuracy (%) |");
    for k in &config.eval.ks {
        let _ = write!(s, " Recall@{k} (%) |");
    }
    s.push_str("\n|---|---|");
    for _ in &config.eval.ks {
        s.push_str("---|");
    }
    s.push('\n');
    for c in &summary.curves {
        let _ = write!(
            s,
            "| {} | {:.2} ± {:.2} |",
            c.name,
            100.0 * c.rank_one_mean,
            100.0 * c.rank_one_std
        );
        for &k in &config.eval.ks {
            let _ = write!(
                s,
                " {:.2} ± {:.2} |",
                100.0 * c.cmc.mean[k - 1],
                100.0 * c.cmc.std[k - 1]
            );
        }
        s.push('\n');
    }
    s
}

fn write_reports(config: &ExperimentConfig, summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    metrics::write_metrics_csv(&metric_rows(summary), &dir.join(&config.eval.metrics_csv))?;
    let curves: Vec<(String, Vec<f64>)> = summary
        .curves
        .iter()
        .map(|c| (c.name.clone(), c.cmc.mean.clone()))
        .collect();
    metrics::emit_cmc_plot(&curves, &dir.join(&config.eval.cmc_svg))?;
    let path = dir.join(&config.eval.summary);
    fs::write(&path, summary_table(config, summary)).map_err(|e| Error::io(&path, e))
}

fn write_failure(out: &Path, err: &Error) {
    let _ = fs::create_dir_all(out);
    let _ = fs::write(out.join(FAILURE_MARKER), format!("{err}\n"));
}

/// Runs the full experiment and writes its artifacts under `out`. On a
/// mid-run error the artifacts written so far are kept and a failure
/// marker holding the error is added.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentSummary> {
    let result = run_inner(config, out, progress);
    if let Err(e) = &result {
        write_failure(out, e);
    }
    result
}

fn run_inner(config: &ExperimentConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<ExperimentSummary> {
    if let Some(issue) = config.check().into_iter().next() {
        return Err(Error::Config(issue.to_string()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let path = out.join("config.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let mut runs = Vec::new();
    for &seed in &config.dataset.runs {
        let data = run_data(config, seed)?;
        write_manifest(&data.dataset, &out.join("data").join(format!("run{seed}")))?;
        let logs_dir = out.join("logs");
        fs::create_dir_all(&logs_dir).map_err(|e| Error::io(&logs_dir, e))?;
        let (mut models, logs) = train_run(config, seed, &data, progress)?;
        write_log_csv(&logs, &logs_dir.join(format!("run{seed}.csv")))?;
        if config.eval.checkpoints {
            save_models(&checkpoint_dir(out, seed), config, &models)?;
        }
        progress(&format!("run {seed}: evaluating"));
        let curves = evaluate_run(config, seed, &data, &mut models)?;
        runs.push(RunResult { seed, curves, logs });
    }
    let summary = summarize(runs)?;
    write_reports(config, &summary, out)?;
    Ok(summary)
}

/// Re-evaluates a finished run directory from its checkpoints and writes
/// the reports under `out/eval`.
pub fn evaluate_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    let mut runs = Vec::new();
    for &seed in &config.dataset.runs {
        let data = run_data(config, seed)?;
        let mut models = load_models(&checkpoint_dir(out, seed), config, seed)?;
        let curves = evaluate_run(config, seed, &data, &mut models)?;
        runs.push(RunResult {
            seed,
            curves,
            logs: Vec::new(),
        });
    }
    let summary = summarize(runs)?;
    write_reports(config, &summary, &out.join("eval"))?;
    Ok(summary)
}

/// Re-emits the CMC plot from the aggregate rows of a metrics CSV.
pub fn replot(metrics_csv: &Path, svg: &Path) -> Result<usize> {
    let text = fs::read_to_string(metrics_csv).map_err(|e| Error::io(metrics_csv, e))?;
    let rows = metrics::parse_metrics_csv(&text, metrics_csv)?;
    let mut curves: Vec<(String, Vec<f64>)> = Vec::new();
    for r in rows.iter().filter(|r| r.run_id == "mean") {
        match curves.iter_mut().find(|(n, _)| *n == r.curve_name) {
            Some((_, v)) => v.push(r.recall),
            None => curves.push((r.curve_name.clone(), vec![r.recall])),
        }
    }
    metrics::emit_cmc_plot(&curves, svg)?;
    Ok(curves.len())
}
