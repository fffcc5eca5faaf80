//! Parameter registration and graph builders for the standard layers.

use rand::Rng;

use super::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d,
    Relu,
    BatchNorm,
    Linear,
    SeBlock,
    Res2Block,
    Concat,
}

/// Shape description of one layer. Convolutions are always length-preserving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self { kind: LayerKind::Conv1d, in_channels, out_channels, kernel, dilation }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.dilation == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "layer needs odd kernel, dilation >= 1 and channels >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn register_conv<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, spec: LayerSpec, rng: &mut R) -> Result<()> {
    spec.validate()?;
    store.init_he(&format!("{name}.weight"), &[spec.out_channels, spec.in_channels, spec.kernel], rng);
    store.insert(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
    Ok(())
}

/// Zero weights and bias, so the layer starts as a constant-zero map.
pub fn register_zero_conv(store: &mut ParameterStore, name: &str, spec: LayerSpec) -> Result<()> {
    spec.validate()?;
    store.insert(format!("{name}.weight"), Tensor::zeros(&[spec.out_channels, spec.in_channels, spec.kernel]));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
    Ok(())
}

pub fn register_linear<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) {
    store.init_he(&format!("{name}.weight"), &[n_out, n_in], rng);
    store.insert(format!("{name}.bias"), Tensor::zeros(&[n_out]));
}

pub fn register_batchnorm(store: &mut ParameterStore, name: &str, channels: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
    store.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
    store.insert(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
}

fn optional_bias(g: &mut Graph, store: &ParameterStore, name: &str) -> Result<Option<Var>> {
    let bias = format!("{name}.bias");
    store.contains(&bias).then(|| g.param(store, &bias)).transpose()
}

/// Convolution `name.weight` with `name.bias` when the store has one.
pub fn conv(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = optional_bias(g, store, name)?;
    g.conv1d(x, w, b, dilation)
}

pub fn linear(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = optional_bias(g, store, name)?;
    g.linear(x, w, b)
}

/// Parameters of a TDNN block: conv, ReLU, batchnorm.
pub fn register_tdnn<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, spec: LayerSpec, rng: &mut R) -> Result<()> {
    register_conv(store, &format!("{name}.conv"), spec, rng)?;
    register_batchnorm(store, &format!("{name}.bn"), spec.out_channels);
    Ok(())
}

pub fn tdnn(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, dilation: usize) -> Result<Var> {
    let y = conv(g, store, &format!("{name}.conv"), x, dilation)?;
    let y = g.relu(y);
    g.batchnorm(store, &format!("{name}.bn"), y)
}

pub fn register_se<R: Rng + ?Sized>(store: &mut ParameterStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Result<()> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::ShapeMismatch(format!("{channels} channels not divisible by SE reduction {reduction}")));
    }
    register_linear(store, &format!("{name}.fc1"), channels, channels / reduction, rng);
    register_linear(store, &format!("{name}.fc2"), channels / reduction, channels, rng);
    Ok(())
}

/// Squeeze-excitation: `s = sigmoid(W2 relu(W1 mean_t(x)))`, `y[c, t] = s[c] x[c, t]`.
pub fn se_block(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let m = g.mean_time(x)?;
    let h = linear(g, store, &format!("{name}.fc1"), m)?;
    let h = g.relu(h);
    let s = linear(g, store, &format!("{name}.fc2"), h)?;
    let s = g.sigmoid(s);
    g.scale_channels(x, s)
}

pub fn register_res2<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: &str,
    channels: usize,
    scale: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<()> {
    if scale == 0 || !channels.is_multiple_of(scale) {
        return Err(Error::ShapeMismatch(format!("{channels} channels not divisible by Res2 scale {scale}")));
    }
    let width = channels / scale;
    for i in 1..scale {
        register_tdnn(store, &format!("{name}.group{i}"), LayerSpec::conv(width, width, kernel, 1), rng)?;
    }
    Ok(())
}

/// Res2 dilated layer: the first channel group passes through, group `i >= 2` is
/// `tdnn(x_i + y_{i-1})`, and the groups are concatenated back.
pub fn res2_dilated(g: &mut Graph, store: &ParameterStore, name: &str, x: Var, scale: usize, dilation: usize) -> Result<Var> {
    let channels = g.shape(x)[1];
    if scale == 0 || !channels.is_multiple_of(scale) {
        return Err(Error::ShapeMismatch(format!("{channels} channels not divisible by Res2 scale {scale}")));
    }
    if scale == 1 {
        return tdnn(g, store, &format!("{name}.group1"), x, dilation);
    }
    let width = channels / scale;
    let mut outputs = Vec::with_capacity(scale);
    let mut prev = g.slice_channels(x, 0, width)?;
    outputs.push(prev);
    for i in 1..scale {
        let part = g.slice_channels(x, i * width, width)?;
        let input = g.add(part, prev)?;
        prev = tdnn(g, store, &format!("{name}.group{i}"), input, dilation)?;
        outputs.push(prev);
    }
    g.concat(&outputs)
}

/// `y[o, t] = b[o] + sum_{i, j} w[o, i, j] x_pad[i, t + j d]` on a single feature map.
pub fn conv1d_forward(x: &FeatureMap, w: &Tensor, b: &Tensor, dilation: usize) -> Result<FeatureMap> {
    let mut g = Graph::new(super::Mode::Eval);
    let xv = g.input(Tensor::new(vec![1, x.channels(), x.frames()], x.values().to_vec())?);
    let wv = g.input(w.clone());
    let bv = g.input(b.clone());
    let y = g.conv1d(xv, wv, Some(bv), dilation)?;
    let (_, c, t) = g.value(y).bct();
    FeatureMap::new(c, t, g.value(y).data().to_vec())
}
