//! Flat experiment configuration: one `key = value` per line with sectioned keys such as
//! `fbank.n_mels = 80`. Blank lines and `#` comments are ignored; missing keys keep their defaults.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::channel::CodecKind;
use crate::error::{Error, Result};
use crate::model::{Materialization, ModelConfig};
use crate::toyvc::CorpusConfig;
use crate::trainer::TrainConfig;

/// Every key, in dump order.
pub const KEYS: &[&str] = &[
    "seed",
    "fbank.n_mels",
    "fbank.win_length",
    "fbank.hop_length",
    "fbank.fft_size",
    "fbank.sample_rate_hz",
    "fbank.log_floor",
    "model.materialization",
    "model.c",
    "model.tdnn_kernel",
    "model.block_kernel",
    "model.dilations",
    "model.res2_scale",
    "model.se_reduction",
    "model.rectifier_epsilon",
    "model.attention",
    "model.embed_dim",
    "model.aam_margin",
    "model.aam_scale",
    "train.lr",
    "train.weight_decay",
    "train.batch_size",
    "train.epochs",
    "train.trim_seconds",
    "train.raw_only",
    "train.aug_prob",
    "train.speed_factors",
    "train.snr_db",
    "train.frame_drop_prob",
    "corpus.train_speakers",
    "corpus.test_speakers",
    "corpus.utts_per_speaker",
    "corpus.evidence_per_speaker",
    "corpus.enroll_per_speaker",
    "corpus.leakage",
    "corpus.seconds",
    "corpus.sample_rate_hz",
    "eval.channel",
    "eval.topk",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Every random stream of a run is derived from this seed.
    pub seed: u64,
    pub materialization: Materialization,
    pub model: ModelConfig,
    /// `seed` here is ignored; see [`ExperimentConfig::train_config`].
    pub train: TrainConfig,
    /// `seed` here is ignored; see [`ExperimentConfig::corpus_config`].
    pub corpus: CorpusConfig,
    pub channel: CodecKind,
    pub topk: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            materialization: Materialization::M2,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            channel: CodecKind::Identity,
            topk: vec![1, 5, 10],
        }
    }
}

/// SplitMix64 finalizer over the seed and an FNV-1a hash of the stream name.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let h = stream.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let t = &self.train;
        let c = &self.corpus;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "fbank.n_mels" => m.fbank.n_mels.to_string(),
            "fbank.win_length" => m.fbank.win_length.to_string(),
            "fbank.hop_length" => m.fbank.hop_length.to_string(),
            "fbank.fft_size" => m.fbank.fft_size.to_string(),
            "fbank.sample_rate_hz" => m.fbank.sample_rate_hz.to_string(),
            "fbank.log_floor" => m.fbank.log_floor.to_string(),
            "model.materialization" => self.materialization.to_string(),
            "model.c" => m.extractor.c.to_string(),
            "model.tdnn_kernel" => m.extractor.tdnn_kernel.to_string(),
            "model.block_kernel" => m.extractor.block_kernel.to_string(),
            "model.dilations" => join(&m.extractor.dilations),
            "model.res2_scale" => m.extractor.res2_scale.to_string(),
            "model.se_reduction" => m.extractor.se_reduction.to_string(),
            "model.rectifier_epsilon" => m.rectifier_epsilon.to_string(),
            "model.attention" => m.attention.to_string(),
            "model.embed_dim" => m.embed_dim.to_string(),
            "model.aam_margin" => m.aam_margin.to_string(),
            "model.aam_scale" => m.aam_scale.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.trim_seconds" => t.trim_seconds.to_string(),
            "train.raw_only" => t.raw_only.to_string(),
            "train.aug_prob" => t.aug.prob.to_string(),
            "train.speed_factors" => join(&t.aug.speed_factors),
            "train.snr_db" => join(&[t.aug.snr_db.0, t.aug.snr_db.1]),
            "train.frame_drop_prob" => t.aug.frame_drop_prob.to_string(),
            "corpus.train_speakers" => c.train_speakers.to_string(),
            "corpus.test_speakers" => c.test_speakers.to_string(),
            "corpus.utts_per_speaker" => c.utts_per_speaker.to_string(),
            "corpus.evidence_per_speaker" => c.evidence_per_speaker.to_string(),
            "corpus.enroll_per_speaker" => c.enroll_per_speaker.to_string(),
            "corpus.leakage" => c.leakage.to_string(),
            "corpus.seconds" => c.seconds.to_string(),
            "corpus.sample_rate_hz" => c.sample_rate_hz.to_string(),
            "eval.channel" => self.channel.to_string(),
            "eval.topk" => join(&self.topk),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let c = &mut self.corpus;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "fbank.n_mels" => {
                m.fbank.n_mels = parse(key, value)?;
                m.extractor.n_mels = m.fbank.n_mels;
            }
            "fbank.win_length" => m.fbank.win_length = parse(key, value)?,
            "fbank.hop_length" => m.fbank.hop_length = parse(key, value)?,
            "fbank.fft_size" => m.fbank.fft_size = parse(key, value)?,
            "fbank.sample_rate_hz" => m.fbank.sample_rate_hz = parse(key, value)?,
            "fbank.log_floor" => m.fbank.log_floor = parse(key, value)?,
            "model.materialization" => self.materialization = value.parse()?,
            "model.c" => m.extractor.c = parse(key, value)?,
            "model.tdnn_kernel" => m.extractor.tdnn_kernel = parse(key, value)?,
            "model.block_kernel" => m.extractor.block_kernel = parse(key, value)?,
            "model.dilations" => {
                let d: Vec<usize> = parse_list(key, value)?;
                m.extractor.dilations =
                    d.try_into().map_err(|_| Error::Config(format!("{key}: expected 3 dilations")))?;
            }
            "model.res2_scale" => m.extractor.res2_scale = parse(key, value)?,
            "model.se_reduction" => m.extractor.se_reduction = parse(key, value)?,
            "model.rectifier_epsilon" => m.rectifier_epsilon = parse(key, value)?,
            "model.attention" => m.attention = parse(key, value)?,
            "model.embed_dim" => m.embed_dim = parse(key, value)?,
            "model.aam_margin" => m.aam_margin = parse(key, value)?,
            "model.aam_scale" => m.aam_scale = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.trim_seconds" => t.trim_seconds = parse(key, value)?,
            "train.raw_only" => t.raw_only = parse(key, value)?,
            "train.aug_prob" => t.aug.prob = parse(key, value)?,
            "train.speed_factors" => t.aug.speed_factors = parse_list(key, value)?,
            "train.snr_db" => {
                let r: Vec<f64> = parse_list(key, value)?;
                let [lo, hi] = r[..] else {
                    return Err(Error::Config(format!("{key}: expected low,high")));
                };
                t.aug.snr_db = (lo, hi);
            }
            "train.frame_drop_prob" => t.aug.frame_drop_prob = parse(key, value)?,
            "corpus.train_speakers" => c.train_speakers = parse(key, value)?,
            "corpus.test_speakers" => c.test_speakers = parse(key, value)?,
            "corpus.utts_per_speaker" => c.utts_per_speaker = parse(key, value)?,
            "corpus.evidence_per_speaker" => c.evidence_per_speaker = parse(key, value)?,
            "corpus.enroll_per_speaker" => c.enroll_per_speaker = parse(key, value)?,
            "corpus.leakage" => c.leakage = parse(key, value)?,
            "corpus.seconds" => c.seconds = parse(key, value)?,
            "corpus.sample_rate_hz" => c.sample_rate_hz = parse(key, value)?,
            "eval.channel" => self.channel = value.parse()?,
            "eval.topk" => self.topk = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, found {line:?}", i + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key in [`KEYS`] order.
    pub fn dump(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config("validate").validate()?;
        self.corpus_config().validate()?;
        if self.corpus.sample_rate_hz != self.model.fbank.sample_rate_hz {
            return Err(Error::Config("corpus and fbank sample rates differ".into()));
        }
        if self.topk.is_empty() || self.topk.contains(&0) {
            return Err(Error::Config("eval.topk must list values >= 1".into()));
        }
        Ok(())
    }

    /// Training settings with a seed derived from the global seed and `stream`.
    pub fn train_config(&self, stream: &str) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, &format!("train.{stream}")), ..self.train.clone() }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig { seed: derive_seed(self.seed, "corpus"), ..self.corpus.clone() }
    }

    /// The dump with the materialization replaced, as stored in checkpoints.
    pub fn checkpoint_text(&self, mat: Materialization) -> String {
        Self { materialization: mat, ..self.clone() }.dump()
    }
}
