//! Mini-batch training of the voiceprint model with augmentation, Adam and per-epoch checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{change_speed, load_wav, nil_audio, power, trim_or_pad, AudioBuffer, TrimMode};
use crate::embedder;
use crate::error::{Error, Result};
use crate::extractor;
use crate::features::Fbank;
use crate::manifest::{Manifest, ManifestRow};
use crate::model::{self, Materialization, ModelConfig};
use crate::netgrad::{Graph, Mode, ParameterStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Frame length zeroed by frame dropping.
pub const DROP_FRAME_SECONDS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Probability with which each augmentation is applied.
    pub prob: f64,
    pub speed_factors: Vec<f64>,
    pub snr_db: (f64, f64),
    pub frame_drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { prob: 0.5, speed_factors: vec![0.9, 1.0, 1.1], snr_db: (10.0, 30.0), frame_drop_prob: 0.05 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) || !(0.0..=1.0).contains(&self.frame_drop_prob) {
            return Err(Error::Config("augmentation probabilities must be in [0, 1]".into()));
        }
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("speed factors must be a non-empty list of positive numbers".into()));
        }
        if !(self.snr_db.0 <= self.snr_db.1) {
            return Err(Error::Config(format!("empty SNR range {:?}", self.snr_db)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub trim_seconds: f64,
    pub seed: u64,
    pub aug: AugmentConfig,
    /// Train on the raw recordings only (the plain-extractor baseline).
    pub raw_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 2e-6,
            batch_size: 24,
            epochs: 10,
            trim_seconds: 2.0,
            seed: 0,
            aug: AugmentConfig::default(),
            raw_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2 for batchnorm, got {}", self.batch_size)));
        }
        if self.epochs == 0 || !(self.trim_seconds > 0.0) {
            return Err(Error::Config("epochs and trim_seconds must be positive".into()));
        }
        self.aug.validate()
    }
}

/// White Gaussian noise scaled so that signal power over noise power is `snr_db`.
pub fn add_noise<R: Rng + ?Sized>(buf: &AudioBuffer, snr_db: f64, rng: &mut R) -> AudioBuffer {
    let sigma = (power(buf.samples()) / 10f64.powf(snr_db / 10.0)).sqrt();
    let noisy = buf.samples().iter().map(|s| s + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    AudioBuffer::from_clipped(noisy, buf.sample_rate_hz()).expect("rate already validated")
}

/// Zeroes each 10 ms frame independently with probability `prob`.
pub fn drop_frames<R: Rng + ?Sized>(buf: &AudioBuffer, prob: f64, rng: &mut R) -> AudioBuffer {
    let frame = ((DROP_FRAME_SECONDS * buf.sample_rate_hz() as f64).round() as usize).max(1);
    let mut samples = buf.samples().to_vec();
    for chunk in samples.chunks_mut(frame) {
        if rng.gen_bool(prob) {
            chunk.fill(0.0);
        }
    }
    AudioBuffer::from_clipped(samples, buf.sample_rate_hz()).expect("rate already validated")
}

/// Speed change, additive noise and frame dropping, each applied independently with `cfg.prob`.
pub fn augment<R: Rng + ?Sized>(buf: &AudioBuffer, rng: &mut R, cfg: &AugmentConfig) -> AudioBuffer {
    let mut out = buf.clone();
    if rng.gen_bool(cfg.prob) {
        let factor = *cfg.speed_factors.choose(rng).expect("validated non-empty");
        out = change_speed(&out, factor);
    }
    if rng.gen_bool(cfg.prob) {
        let snr = rng.gen_range(cfg.snr_db.0..=cfg.snr_db.1);
        out = add_noise(&out, snr, rng);
    }
    if rng.gen_bool(cfg.prob) {
        out = drop_frames(&out, cfg.frame_drop_prob, rng);
    }
    out
}

/// Which recording of a manifest row a training example uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    /// The converted audio, paired with the target's evidence.
    Vc,
    /// The source speaker's own recording, paired with nil evidence.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub audio: AudioBuffer,
    /// `None` for models without a rectification block.
    pub evidence: Option<AudioBuffer>,
    pub label: usize,
}

/// Decoded recordings keyed by path, so each file is read once per run.
#[derive(Debug, Default)]
pub struct AudioCache {
    map: HashMap<PathBuf, AudioBuffer>,
}

impl AudioCache {
    pub fn get(&mut self, path: &Path) -> Result<&AudioBuffer> {
        if !self.map.contains_key(path) {
            let buf = load_wav(path)?;
            self.map.insert(path.to_path_buf(), buf);
        }
        Ok(&self.map[path])
    }
}

/// Class index of every source speaker, in sorted id order.
pub fn class_map(manifest: &Manifest) -> BTreeMap<String, usize> {
    manifest.source_ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Loads, augments and trims one training example. The label is always the source speaker.
pub fn make_example<R: Rng + ?Sized>(
    row: &ManifestRow,
    source: Source,
    mat: Materialization,
    classes: &BTreeMap<String, usize>,
    cfg: &TrainConfig,
    rng: &mut R,
    cache: &mut AudioCache,
) -> Result<Example> {
    let label = *classes.get(&row.source_id).ok_or_else(|| Error::UnknownSpeaker(row.source_id.clone()))?;
    let path = match source {
        Source::Vc => &row.vc_path,
        Source::Raw => &row.raw_path,
    };
    let audio = augment(cache.get(path)?, rng, &cfg.aug);
    let audio = trim_or_pad(&audio, cfg.trim_seconds, rng, TrimMode::RandomTrim);
    let evidence = if mat.has_rectifier() {
        let ev = match (source, &row.evidence_path) {
            (Source::Vc, Some(p)) => trim_or_pad(cache.get(p)?, cfg.trim_seconds, rng, TrimMode::RandomTrim),
            _ => nil_audio(audio.sample_rate_hz(), cfg.trim_seconds)?,
        };
        Some(ev)
    } else {
        None
    };
    Ok(Example { audio, evidence, label })
}

/// Adam moments and step count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update of every trainable parameter, with `weight_decay * param` added to the gradient.
/// Fails if a trainable parameter received no gradient since the last `zero_grads`.
pub fn adam_step(store: &mut ParameterStore, opt: &mut Adam) -> Result<()> {
    if let Some(name) = store.untouched().into_iter().next() {
        return Err(Error::NoGradient(name));
    }
    opt.t += 1;
    let t = opt.t as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for (name, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let m = opt.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = opt.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g + opt.weight_decay * *w;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *w -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Forward and backward pass on one batch. Gradients are left in the store and running
/// batchnorm statistics are updated. Returns the mean loss.
pub fn train_step(
    store: &mut ParameterStore,
    cfg: &ModelConfig,
    fbank: &Fbank,
    batch: &[Example],
    num_classes: usize,
) -> Result<f64> {
    let feats: Vec<_> = batch.iter().map(|e| fbank.compute(&e.audio)).collect::<Result<_>>()?;
    let evidence: Option<Vec<_>> = batch
        .iter()
        .map(|e| e.evidence.as_ref().map(|ev| fbank.compute(ev)))
        .collect::<Option<Result<Vec<_>>>>()
        .transpose()?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut g = Graph::new(Mode::Train);
    let x = g.input(extractor::stack(&feats.iter().collect::<Vec<_>>())?);
    let e = match &evidence {
        Some(ev) => Some(g.input(extractor::stack(&ev.iter().collect::<Vec<_>>())?)),
        None => None,
    };
    let emb = model::embed(&mut g, store, cfg, x, e)?;
    let loss = embedder::head_loss(&mut g, store, emb, &labels, &cfg.aam(num_classes))?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    store.zero_grads();
    grads.deposit(store)?;
    g.commit_running_stats(store)?;
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub epoch_losses: Vec<f64>,
    /// Share of training examples drawn from converted audio.
    pub vc_fraction: f64,
    pub classes: Vec<String>,
}

/// The training examples of one epoch: every row contributes its raw recording, and unless
/// `raw_only` also its converted audio.
pub fn epoch_items(manifest: &Manifest, raw_only: bool) -> Vec<(usize, Source)> {
    let mut items = Vec::new();
    for i in 0..manifest.len() {
        if !raw_only {
            items.push((i, Source::Vc));
        }
        items.push((i, Source::Raw));
    }
    items
}

pub fn checkpoint_path(out_dir: &Path, name: &str, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => out_dir.join(format!("{name}.epoch{e:02}.vpck")),
        None => out_dir.join(format!("{name}.vpck")),
    }
}

/// Trains a model from scratch and writes `<name>.epochNN.vpck` after every epoch, `<name>.vpck`
/// at the end and the loss trace `<name>.loss.csv` (`epoch,step,loss`). `config_text` is stored
/// in every checkpoint.
pub fn train(
    manifest: &Manifest,
    mat: Materialization,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    name: &str,
    config_text: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    model_cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::Manifest("training manifest has no rows".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let classes = class_map(manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = model::init_params(model_cfg, mat, classes.len(), &mut rng)?;
    let fbank = Fbank::new(model_cfg.fbank.clone())?;
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut cache = AudioCache::default();
    let loss_trace = out_dir.join(format!("{name}.loss.csv"));
    let mut trace = std::io::BufWriter::new(std::fs::File::create(&loss_trace)?);
    writeln!(trace, "epoch,step,loss")?;

    let mut items = epoch_items(manifest, cfg.raw_only);
    let vc_fraction = items.iter().filter(|(_, s)| *s == Source::Vc).count() as f64 / items.len() as f64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut last_good = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        items.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in items.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = chunk
                .iter()
                .map(|&(i, source)| make_example(&manifest.rows[i], source, mat, &classes, cfg, &mut rng, &mut cache))
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut store, model_cfg, &fbank, &batch, classes.len())?;
            if !loss.is_finite() {
                trace.flush()?;
                return Err(Error::Diverged { epoch, last_good });
            }
            adam_step(&mut store, &mut opt)?;
            step += 1;
            writeln!(trace, "{epoch},{step},{loss}")?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
        let path = checkpoint_path(out_dir, name, Some(epoch));
        store.save(config_text, &path)?;
        last_good = Some(path);
    }
    trace.flush()?;
    let checkpoint = checkpoint_path(out_dir, name, None);
    store.save(config_text, &checkpoint)?;
    Ok(TrainReport { checkpoint, loss_trace, epoch_losses, vc_fraction, classes: classes.into_keys().collect() })
}
