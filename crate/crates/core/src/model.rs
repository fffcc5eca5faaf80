//! Full voiceprint model: extractor, optional rectification block, pooling and head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::audio::{nil_audio, AudioBuffer};
use crate::embedder::{self, AamConfig, PoolingConfig, Voiceprint};
use crate::error::{Error, Result};
use crate::extractor::{self, ExtractorConfig};
use crate::features::{Fbank, FbankConfig, FeatureMap};
use crate::netgrad::{Graph, Mode, ParameterStore, Var};
use crate::rectifier::{self, RectifierConfig};

/// How evidence audio is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Materialization {
    /// No evidence and no rectification block.
    M1,
    /// Evidence during training only; nil audio at inference.
    M2,
    /// Evidence during training and inference.
    M3,
}

impl Materialization {
    pub fn has_rectifier(self) -> bool {
        self != Materialization::M1
    }

    pub fn uses_evidence_at_inference(self) -> bool {
        self == Materialization::M3
    }

    pub fn name(self) -> &'static str {
        match self {
            Materialization::M1 => "m1",
            Materialization::M2 => "m2",
            Materialization::M3 => "m3",
        }
    }
}

impl fmt::Display for Materialization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Materialization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Materialization::M1),
            "m2" => Ok(Materialization::M2),
            "m3" => Ok(Materialization::M3),
            _ => Err(Error::Config(format!("unknown materialization {s:?} (expected m1, m2 or m3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub fbank: FbankConfig,
    pub extractor: ExtractorConfig,
    pub rectifier_epsilon: f64,
    pub attention: usize,
    pub embed_dim: usize,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fbank: FbankConfig::default(),
            extractor: ExtractorConfig::default(),
            rectifier_epsilon: rectifier::DEFAULT_EPSILON,
            attention: 16,
            embed_dim: 192,
            aam_margin: 0.2,
            aam_scale: 30.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fbank.validate()?;
        self.extractor.validate()?;
        if self.extractor.n_mels != self.fbank.n_mels {
            return Err(Error::Config(format!(
                "extractor expects {} mels but fbank produces {}",
                self.extractor.n_mels, self.fbank.n_mels
            )));
        }
        if self.attention == 0 || self.embed_dim == 0 {
            return Err(Error::Config("attention and embed_dim must be >= 1".into()));
        }
        self.rectifier().validate()?;
        self.aam(2).validate()
    }

    pub fn rectifier(&self) -> RectifierConfig {
        RectifierConfig { epsilon: self.rectifier_epsilon, ..RectifierConfig::new(self.extractor.out_channels()) }
    }

    pub fn pooling(&self) -> PoolingConfig {
        PoolingConfig { channels: self.extractor.out_channels(), attention: self.attention, embed_dim: self.embed_dim }
    }

    pub fn aam(&self, num_classes: usize) -> AamConfig {
        AamConfig { margin: self.aam_margin, scale: self.aam_scale, num_classes }
    }
}

/// Fresh randomly initialised weights for the given materialization and class count.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    mat: Materialization,
    num_classes: usize,
    rng: &mut R,
) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    extractor::register(&mut store, &cfg.extractor, rng)?;
    if mat.has_rectifier() {
        rectifier::register(&mut store, &cfg.rectifier())?;
    }
    embedder::register(&mut store, &cfg.pooling(), rng)?;
    embedder::register_head(&mut store, cfg.embed_dim, num_classes, rng);
    Ok(store)
}

/// Builds the embedding graph on batched FBank features. `evidence` is required when the store
/// holds rectifier weights and ignored otherwise.
pub fn embed(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &ModelConfig,
    feats: Var,
    evidence: Option<Var>,
) -> Result<Var> {
    let m = extractor::forward(g, store, &cfg.extractor, feats)?;
    let f = if store.contains(&format!("{}.weight", rectifier::PREFIX)) {
        let e = evidence.ok_or_else(|| Error::Config("a rectifying model needs evidence features (nil allowed)".into()))?;
        let n = extractor::forward(g, store, &cfg.extractor, e)?;
        rectifier::forward(g, store, cfg.rectifier_epsilon, m, n)?
    } else {
        m
    };
    embedder::forward(g, store, f)
}

/// Inference-time voiceprint extraction with a frozen store.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub mat: Materialization,
    fbank: Fbank,
    nil_feats: FeatureMap,
}

impl Embedder {
    pub fn new(cfg: ModelConfig, store: ParameterStore, mat: Materialization) -> Result<Self> {
        let fbank = Fbank::new(cfg.fbank.clone())?;
        let nil_seconds = (cfg.fbank.win_length as f64 / cfg.fbank.sample_rate_hz as f64).max(1.0);
        let nil_feats = fbank.compute(&nil_audio(cfg.fbank.sample_rate_hz, nil_seconds)?)?;
        let has_rob = store.contains(&format!("{}.weight", rectifier::PREFIX));
        if has_rob != mat.has_rectifier() {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} a rectification block but materialization {mat} {}",
                if has_rob { "has" } else { "lacks" },
                if mat.has_rectifier() { "needs one" } else { "has none" }
            )));
        }
        Ok(Self { cfg, store, mat, fbank, nil_feats })
    }

    pub fn fbank(&self) -> &Fbank {
        &self.fbank
    }

    pub fn features(&self, buf: &AudioBuffer) -> Result<FeatureMap> {
        self.fbank.compute(buf)
    }

    /// Voiceprint of `x`. M1 ignores evidence, M2 always substitutes nil audio, M3 uses the
    /// given evidence (nil when absent).
    pub fn voiceprint(&self, x: &AudioBuffer, evidence: Option<&AudioBuffer>) -> Result<Voiceprint> {
        let feats = self.features(x)?;
        let ev = match (self.mat, evidence) {
            (Materialization::M3, Some(e)) => Some(self.features(e)?),
            _ => None,
        };
        self.voiceprint_from_features(&feats, ev.as_ref())
    }

    pub fn voiceprint_from_features(&self, feats: &FeatureMap, evidence: Option<&FeatureMap>) -> Result<Voiceprint> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(extractor::stack(&[feats])?);
        let e = if self.mat.has_rectifier() {
            let ev = evidence.unwrap_or(&self.nil_feats);
            Some(g.input(extractor::stack(&[ev])?))
        } else {
            None
        };
        let emb = embed(&mut g, &self.store, &self.cfg, x, e)?;
        Voiceprint::new(g.value(emb).data().to_vec())
    }
}
