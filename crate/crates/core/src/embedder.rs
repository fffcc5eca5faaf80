//! Attentive statistics pooling into a fixed-length voiceprint, cosine scoring and the
//! angular-margin classification head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::netgrad::layers::{self, LayerSpec};
use crate::netgrad::{margin_logit, Graph, ParameterStore, Tensor, Var};

pub use crate::netgrad::softmax_cross_entropy;

const PREFIX: &str = "pool";
pub const HEAD_WEIGHT: &str = "head.weight";

/// Fixed-length speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Voiceprint(pub Vec<f64>);

impl Voiceprint {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("voiceprint contains non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }
}

pub fn cosine_similarity(a: &Voiceprint, b: &Voiceprint) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("voiceprints of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
    pub num_classes: usize,
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) || !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "aam margin must be in [0, pi/2) and scale positive, got m = {}, s = {}",
                self.margin, self.scale
            )));
        }
        Ok(())
    }
}

/// Scaled cosine logits against every class row; the labelled class gets the angular margin.
pub fn aam_logits(vp: &Voiceprint, class_weights: &Tensor, label: Option<usize>, cfg: &AamConfig) -> Result<Vec<f64>> {
    let v = vp.len();
    if class_weights.rank() != 2 || class_weights.dim(1) != v {
        return Err(Error::ShapeMismatch(format!(
            "class weights {:?} for voiceprints of length {v}",
            class_weights.shape()
        )));
    }
    class_weights
        .data()
        .chunks(v)
        .enumerate()
        .map(|(k, row)| {
            let cos = cosine_similarity(vp, &Voiceprint(row.to_vec()))?;
            Ok(if Some(k) == label { cfg.scale * margin_logit(cos, cfg.margin).0 } else { cfg.scale * cos })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingConfig {
    /// Channels of the pooled feature map (3c).
    pub channels: usize,
    pub attention: usize,
    pub embed_dim: usize,
}

pub fn register<R: Rng + ?Sized>(store: &mut ParameterStore, cfg: &PoolingConfig, rng: &mut R) -> Result<()> {
    let c = cfg.channels;
    layers::register_tdnn(store, &format!("{PREFIX}.att"), LayerSpec::conv(3 * c, cfg.attention, 1, 1), rng)?;
    // no biases here: the frame softmax and the batchnorm would cancel them
    store.init_he(&format!("{PREFIX}.score.weight"), &[c, cfg.attention, 1], rng);
    store.init_he(&format!("{PREFIX}.fc.weight"), &[cfg.embed_dim, 2 * c], rng);
    layers::register_batchnorm(store, &format!("{PREFIX}.bn"), cfg.embed_dim);
    Ok(())
}

pub fn register_head<R: Rng + ?Sized>(store: &mut ParameterStore, embed_dim: usize, num_classes: usize, rng: &mut R) {
    store.init_he(HEAD_WEIGHT, &[num_classes, embed_dim], rng);
}

/// Attention weights over frames for `f [B, C, T]`, conditioned on global context.
pub fn attention(g: &mut Graph, store: &ParameterStore, f: Var) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    let (bs, c, t) = (shape[0], shape[1], shape[2]);
    let uniform = g.input(Tensor::full(&[bs, c, t], 1.0 / t as f64));
    let global = g.weighted_stats(f, uniform)?;
    let mean = g.slice_channels(global, 0, c)?;
    let std = g.slice_channels(global, c, c)?;
    let mean = g.broadcast_time(mean, t)?;
    let std = g.broadcast_time(std, t)?;
    let context = g.concat(&[f, mean, std])?;
    let h = layers::tdnn(g, store, &format!("{PREFIX}.att"), context, 1)?;
    let h = g.tanh(h);
    let e = layers::conv(g, store, &format!("{PREFIX}.score"), h, 1)?;
    g.softmax_time(e)
}

/// `[B, C, T] -> [B, embed_dim]`: attentive mean and std, linear projection, batchnorm.
pub fn forward(g: &mut Graph, store: &ParameterStore, f: Var) -> Result<Var> {
    if g.shape(f).len() != 3 || g.shape(f)[2] == 0 {
        return Err(Error::EmptyFeatureMap);
    }
    let alpha = attention(g, store, f)?;
    let pooled = g.weighted_stats(f, alpha)?;
    let emb = layers::linear(g, store, &format!("{PREFIX}.fc"), pooled)?;
    g.batchnorm(store, &format!("{PREFIX}.bn"), emb)
}

/// Mean angular-margin loss of embeddings `[B, V]` against the head's class weights.
pub fn head_loss(g: &mut Graph, store: &ParameterStore, emb: Var, labels: &[usize], cfg: &AamConfig) -> Result<Var> {
    let w = g.param(store, HEAD_WEIGHT)?;
    g.aam_loss(emb, w, labels, cfg.margin, cfg.scale)
}
