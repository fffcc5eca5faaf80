//! Orthogonal rectification block: strips the evidence direction from the extracted features
//! and adds a learned residual correction.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::netgrad::layers::{self, LayerSpec};
use crate::netgrad::{Graph, Mode, ParameterStore, Tensor, Var};

pub const PREFIX: &str = "rob.tdnn";
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RectifierConfig {
    pub channels: usize,
    pub kernel: usize,
    pub epsilon: f64,
}

impl RectifierConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, kernel: 3, epsilon: DEFAULT_EPSILON }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("rectifier epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Registers the residual TDNN with zero weights so the block starts as the identity.
pub fn register(store: &mut ParameterStore, cfg: &RectifierConfig) -> Result<()> {
    cfg.validate()?;
    layers::register_zero_conv(store, PREFIX, LayerSpec::conv(cfg.channels, cfg.channels, cfg.kernel, 1))
}

/// Per-channel mean over frames.
pub fn mean_direction(n: &FeatureMap) -> Vec<f64> {
    (0..n.channels()).map(|c| n.row(c).iter().sum::<f64>() / n.frames() as f64).collect()
}

/// `v / (|v| + eps)`; the zero vector maps to zero.
pub fn unit_direction(v: &[f64], eps: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (norm + eps)).collect()
}

/// Splits every frame of `m` into its component along `n` and the remainder.
pub fn decompose(m: &FeatureMap, n: &[f64]) -> Result<(FeatureMap, FeatureMap)> {
    if n.len() != m.channels() {
        return Err(Error::ShapeMismatch(format!("direction of length {} for {} channels", n.len(), m.channels())));
    }
    let (c, t) = (m.channels(), m.frames());
    let mut par = vec![0.0; c * t];
    for frame in 0..t {
        let dot: f64 = (0..c).map(|ch| n[ch] * m.get(ch, frame)).sum();
        for ch in 0..c {
            par[ch * t + frame] = n[ch] * dot;
        }
    }
    let perp = m.values().iter().zip(&par).map(|(a, b)| a - b).collect();
    Ok((FeatureMap::new(c, t, par)?, FeatureMap::new(c, t, perp)?))
}

/// Graph form of the block on `m [B, 3c, T_M]` and `n [B, 3c, T_N]`.
pub fn forward(g: &mut Graph, store: &ParameterStore, eps: f64, m: Var, n: Var) -> Result<Var> {
    let n_mean = g.mean_time(n)?;
    let n_dir = g.unit_direction(n_mean, eps)?;
    let m_perp = g.reject(m, n_dir)?;
    let residual = layers::conv(g, store, PREFIX, m_perp, 1)?;
    g.add(residual, m)
}

/// `TDNN(M_perp) + M` for single feature maps, in inference mode.
pub fn rob_forward(m: &FeatureMap, n: &FeatureMap, store: &ParameterStore, cfg: &RectifierConfig) -> Result<FeatureMap> {
    if m.channels() != n.channels() {
        return Err(Error::ShapeMismatch(format!("M has {} channels, N has {}", m.channels(), n.channels())));
    }
    let mut g = Graph::new(Mode::Eval);
    let mv = g.input(Tensor::new(vec![1, m.channels(), m.frames()], m.values().to_vec())?);
    let nv = g.input(Tensor::new(vec![1, n.channels(), n.frames()], n.values().to_vec())?);
    let y = forward(&mut g, store, cfg.epsilon, mv, nv)?;
    FeatureMap::new(m.channels(), m.frames(), g.value(y).data().to_vec())
}
