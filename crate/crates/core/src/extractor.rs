//! Frame-level feature extractor: FBank -> TDNN block -> three SE-Res2Blocks -> concatenation.

use rand::Rng;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::{Fbank, FeatureMap};
use crate::netgrad::layers::{self, LayerSpec};
use crate::netgrad::{Graph, Mode, ParameterStore, Tensor, Var};

const PREFIX: &str = "extractor";

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    /// Channel width; the output has `3c` channels.
    pub c: usize,
    pub n_mels: usize,
    pub tdnn_kernel: usize,
    pub block_kernel: usize,
    pub dilations: [usize; 3],
    pub res2_scale: usize,
    pub se_reduction: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { c: 32, n_mels: 80, tdnn_kernel: 5, block_kernel: 3, dilations: [2, 3, 4], res2_scale: 4, se_reduction: 4 }
    }
}

impl ExtractorConfig {
    pub fn out_channels(&self) -> usize {
        3 * self.c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("extractor: {msg}")));
        if self.c == 0 || self.n_mels == 0 {
            return bad("c and n_mels must be >= 1".into());
        }
        if self.res2_scale == 0 || !self.c.is_multiple_of(self.res2_scale) {
            return bad(format!("c = {} is not divisible by res2_scale = {}", self.c, self.res2_scale));
        }
        if self.se_reduction == 0 || !self.c.is_multiple_of(self.se_reduction) {
            return bad(format!("c = {} is not divisible by se_reduction = {}", self.c, self.se_reduction));
        }
        if self.tdnn_kernel.is_multiple_of(2) || self.block_kernel.is_multiple_of(2) || self.dilations.contains(&0) {
            return bad("kernels must be odd and dilations >= 1".into());
        }
        Ok(())
    }
}

fn block_name(i: usize) -> String {
    format!("{PREFIX}.block{}", i + 1)
}

pub fn register<R: Rng + ?Sized>(store: &mut ParameterStore, cfg: &ExtractorConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let c = cfg.c;
    layers::register_tdnn(store, &format!("{PREFIX}.tdnn"), LayerSpec::conv(cfg.n_mels, c, cfg.tdnn_kernel, 1), rng)?;
    for i in 0..3 {
        let name = block_name(i);
        layers::register_tdnn(store, &format!("{name}.in"), LayerSpec::conv(c, c, 1, 1), rng)?;
        layers::register_res2(store, &format!("{name}.res2"), c, cfg.res2_scale, cfg.block_kernel, rng)?;
        layers::register_tdnn(store, &format!("{name}.out"), LayerSpec::conv(c, c, 1, 1), rng)?;
        layers::register_se(store, &format!("{name}.se"), c, cfg.se_reduction, rng)?;
    }
    Ok(())
}

/// SE-Res2Block: 1x1 TDNN, Res2 dilated layer, 1x1 TDNN, squeeze-excitation, plus the input.
fn se_res2_block(g: &mut Graph, store: &ParameterStore, cfg: &ExtractorConfig, i: usize, x: Var) -> Result<Var> {
    let name = block_name(i);
    let h = layers::tdnn(g, store, &format!("{name}.in"), x, 1)?;
    let h = layers::res2_dilated(g, store, &format!("{name}.res2"), h, cfg.res2_scale, cfg.dilations[i])?;
    let h = layers::tdnn(g, store, &format!("{name}.out"), h, 1)?;
    let h = layers::se_block(g, store, &format!("{name}.se"), h)?;
    g.add(h, x)
}

/// Builds the extractor on `fbank [B, n_mels, T]` and returns `[B, 3c, T]`.
pub fn forward(g: &mut Graph, store: &ParameterStore, cfg: &ExtractorConfig, fbank: Var) -> Result<Var> {
    if g.shape(fbank).len() != 3 || g.shape(fbank)[1] != cfg.n_mels {
        return Err(Error::ShapeMismatch(format!(
            "extractor expects [B, {}, T] features, got {:?}",
            cfg.n_mels,
            g.shape(fbank)
        )));
    }
    let mut x = layers::tdnn(g, store, &format!("{PREFIX}.tdnn"), fbank, 1)?;
    let mut outputs = Vec::with_capacity(3);
    for i in 0..3 {
        x = se_res2_block(g, store, cfg, i, x)?;
        outputs.push(x);
    }
    g.concat(&outputs)
}

/// Stacks equally long feature maps into a `[B, C, T]` tensor.
pub fn stack(maps: &[&FeatureMap]) -> Result<Tensor> {
    let first = maps.first().ok_or(Error::EmptyFeatureMap)?;
    let (c, t) = (first.channels(), first.frames());
    let mut data = Vec::with_capacity(maps.len() * c * t);
    for m in maps {
        if (m.channels(), m.frames()) != (c, t) {
            return Err(Error::ShapeMismatch(format!(
                "cannot stack {}x{} with {c}x{t}",
                m.channels(),
                m.frames()
            )));
        }
        data.extend_from_slice(m.values());
    }
    Tensor::new(vec![maps.len(), c, t], data)
}

/// Splits `[B, C, T]` back into feature maps.
pub fn unstack(t: &Tensor) -> Result<Vec<FeatureMap>> {
    let (bs, c, frames) = t.bct();
    (0..bs)
        .map(|b| FeatureMap::new(c, frames, t.data()[b * c * frames..(b + 1) * c * frames].to_vec()))
        .collect()
}

/// Inference-mode extraction of one buffer into a `3c x T` map.
pub fn extract(buf: &AudioBuffer, store: &ParameterStore, cfg: &ExtractorConfig, fbank: &Fbank) -> Result<FeatureMap> {
    let feats = fbank.compute(buf)?;
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(stack(&[&feats])?);
    let y = forward(&mut g, store, cfg, x)?;
    Ok(unstack(g.value(y))?.remove(0))
}

/// Extracts the VC audio and the evidence with the same weights. Frame counts may differ.
pub fn extract_pair(
    x_vc: &AudioBuffer,
    x_e: &AudioBuffer,
    store: &ParameterStore,
    cfg: &ExtractorConfig,
    fbank: &Fbank,
) -> Result<(FeatureMap, FeatureMap)> {
    Ok((extract(x_vc, store, cfg, fbank)?, extract(x_e, store, cfg, fbank)?))
}
