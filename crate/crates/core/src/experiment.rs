//! Held-out evaluation of trained checkpoints and the end-to-end comparative experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::audio::load_wav;
use crate::channel::{apply_channel, CodecKind};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluator::{self, compute_eer, rank, topk_accuracy, SpeakerPool, TrialSet};
use crate::manifest::{EnrollList, Manifest};
use crate::model::{Embedder, Materialization};
use crate::netgrad::ParameterStore;
use crate::toyvc;
use crate::trainer;

pub const METRICS_FILE: &str = "metrics.txt";

/// Scores of one model on one probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub eer: f64,
    pub threshold: f64,
    /// `(k, accuracy)` for every requested k.
    pub topk: Vec<(usize, f64)>,
    pub pool_size: usize,
    pub probes: usize,
    pub trials: TrialSet,
}

/// Loads a checkpoint and rebuilds its model from the stored configuration. `mat` overrides the
/// stored materialization (an M2 checkpoint serves as M3 by switching the inference mode).
pub fn load_embedder(path: impl AsRef<Path>, mat: Option<Materialization>) -> Result<(Embedder, ExperimentConfig)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let (store, text) = ParameterStore::load(path)?;
    let cfg = ExperimentConfig::parse(&text)?;
    let mat = mat.unwrap_or(cfg.materialization);
    Ok((Embedder::new(cfg.model.clone(), store, mat)?, cfg))
}

/// Enrollment recordings grouped by speaker.
pub fn enroll_from_list(list: &EnrollList, model: &Embedder) -> Result<SpeakerPool> {
    let mut audios: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for (id, path) in &list.entries {
        audios.entry(id.clone()).or_default().push(load_wav(path)?);
    }
    evaluator::enroll(&audios, model)
}

/// Scores every VC probe of `probes` against every pool speaker. The channel degrades probes
/// (and their evidence) only; enrollment stays clean.
pub fn evaluate_probes(
    model: &Embedder,
    probes: &Manifest,
    pool: &SpeakerPool,
    channel: CodecKind,
    topk: &[usize],
) -> Result<EvalResult> {
    if probes.is_empty() {
        return Err(Error::Manifest("no probes to evaluate".into()));
    }
    let mut trials = Vec::with_capacity(probes.len() * pool.len());
    let mut ranked = Vec::with_capacity(probes.len());
    for row in &probes.rows {
        let x = apply_channel(&load_wav(&row.vc_path)?, channel)?;
        let evidence = match &row.evidence_path {
            Some(p) if model.mat.uses_evidence_at_inference() => Some(apply_channel(&load_wav(p)?, channel)?),
            _ => None,
        };
        let vp = model.voiceprint(&x, evidence.as_ref())?;
        let scores = rank(&vp, pool)?;
        trials.extend(scores.iter().map(|(id, s)| (*s, *id == row.source_id)));
        ranked.push((scores, row.source_id.clone()));
    }
    let trials = TrialSet { trials };
    let (eer, threshold) = compute_eer(&trials)?;
    Ok(EvalResult {
        eer,
        threshold,
        topk: topk.iter().map(|&k| (k, topk_accuracy(&ranked, k))).collect(),
        pool_size: pool.len(),
        probes: probes.len(),
        trials,
    })
}

fn fmt_rate(x: f64) -> String {
    format!("{:.6}", x)
}

/// `name.key = value` lines for one result.
pub fn format_result(name: &str, r: &EvalResult) -> String {
    let mut s = String::new();
    writeln!(s, "{name}.eer = {}", fmt_rate(r.eer)).unwrap();
    writeln!(s, "{name}.eer_threshold = {}", fmt_rate(r.threshold)).unwrap();
    for (k, acc) in &r.topk {
        writeln!(s, "{name}.top{k} = {} (pool {})", fmt_rate(*acc), r.pool_size).unwrap();
    }
    s
}

/// Writes `metrics.txt`, `det.csv`, `cdf_same.csv` and `cdf_diff.csv` for one evaluation.
pub fn write_report(name: &str, r: &EvalResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    evaluator::export_det(&r.trials, dir)?;
    let text = format!("probes = {}\npool_size = {}\n{}", r.probes, r.pool_size, format_result(name, r));
    std::fs::write(dir.join(METRICS_FILE), text)?;
    Ok(())
}

/// Everything the comparative experiment measured.
#[derive(Debug, Clone)]
pub struct E2eReport {
    pub metrics_path: PathBuf,
    pub results: BTreeMap<String, EvalResult>,
    /// M2 evaluated through each degraded channel.
    pub channels: Vec<(CodecKind, EvalResult)>,
    pub epoch_losses: BTreeMap<String, Vec<f64>>,
}

impl E2eReport {
    pub fn eer(&self, name: &str) -> f64 {
        self.results[name].eer
    }

    pub fn top(&self, name: &str, k: usize) -> Option<f64> {
        self.results[name].topk.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

pub const CHANNELS: [CodecKind; 4] = [CodecKind::MuLaw, CodecKind::ALaw, CodecKind::Subsample8k, CodecKind::Subsample4k];

/// Builds the toy corpus, trains the baseline B1 (M1 on raw audio only), M1 and M2, evaluates
/// them (and M2 in the M3 inference mode) on held-out converted audio, reruns M2 through every
/// degraded channel, and writes `metrics.txt` plus per-model DET data under `out`.
pub fn run_e2e(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<E2eReport> {
    cfg.validate()?;
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    let corpus = toyvc::build_corpus(&cfg.corpus_config(), out.join("data"))?;
    let models_dir = out.join("models");

    let plans = [
        ("b1", Materialization::M1, true),
        ("m1", Materialization::M1, false),
        ("m2", Materialization::M2, false),
    ];
    let mut checkpoints = BTreeMap::new();
    let mut epoch_losses = BTreeMap::new();
    for (name, mat, raw_only) in plans {
        let train_cfg = trainer::TrainConfig { raw_only, ..cfg.train_config(name) };
        let report = trainer::train(
            &corpus.train,
            mat,
            &cfg.model,
            &train_cfg,
            &models_dir,
            name,
            &cfg.checkpoint_text(mat),
        )?;
        checkpoints.insert(name, report.checkpoint);
        epoch_losses.insert(name.to_string(), report.epoch_losses);
    }

    let evals = [
        ("b1", "b1", Materialization::M1),
        ("m1", "m1", Materialization::M1),
        ("m2", "m2", Materialization::M2),
        ("m3", "m2", Materialization::M3),
    ];
    let mut results = BTreeMap::new();
    let mut channels = Vec::new();
    for (name, ckpt, mat) in evals {
        let (model, _) = load_embedder(&checkpoints[ckpt], Some(mat))?;
        let pool = enroll_from_list(&corpus.enroll, &model)?;
        let r = evaluate_probes(&model, &corpus.test, &pool, CodecKind::Identity, &cfg.topk)?;
        evaluator::export_det(&r.trials, out.join("reports").join(name))?;
        results.insert(name.to_string(), r);
        if name == "m2" {
            for kind in CHANNELS {
                channels.push((kind, evaluate_probes(&model, &corpus.test, &pool, kind, &cfg.topk)?));
            }
        }
    }

    let mut text = String::new();
    let any = &results["m2"];
    writeln!(text, "# held-out converted probes scored against enrolled raw recordings").unwrap();
    writeln!(text, "seed = {}", cfg.seed).unwrap();
    writeln!(text, "probes = {}", any.probes).unwrap();
    writeln!(text, "pool_size = {}", any.pool_size).unwrap();
    writeln!(text, "chance_top1 = {}", fmt_rate(1.0 / any.pool_size as f64)).unwrap();
    for (name, r) in &results {
        text.push_str(&format_result(name, r));
    }
    writeln!(text, "m2_minus_m1.eer = {}", fmt_rate(results["m2"].eer - results["m1"].eer)).unwrap();
    for (kind, r) in &channels {
        writeln!(text, "m2.{kind}.eer = {}", fmt_rate(r.eer)).unwrap();
        writeln!(text, "m2.{kind}.eer_delta = {}", fmt_rate(r.eer - results["m2"].eer)).unwrap();
        for (k, acc) in &r.topk {
            writeln!(text, "m2.{kind}.top{k} = {} (pool {})", fmt_rate(*acc), r.pool_size).unwrap();
        }
    }
    for (name, losses) in &epoch_losses {
        let joined = losses.iter().map(|l| fmt_rate(*l)).collect::<Vec<_>>().join(",");
        writeln!(text, "{name}.epoch_losses = {joined}").unwrap();
    }
    let metrics_path = out.join(METRICS_FILE);
    std::fs::write(&metrics_path, text)?;
    Ok(E2eReport { metrics_path, results, channels, epoch_losses })
}
