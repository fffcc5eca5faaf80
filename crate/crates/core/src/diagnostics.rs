//! Finite-difference gradient suites for every layer and for the assembled model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{nil_audio, AudioBuffer};
use crate::error::Result;
use crate::extractor::{self, ExtractorConfig};
use crate::features::Fbank;
use crate::model::{self, Materialization, ModelConfig};
use crate::netgrad::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::netgrad::layers::{self, LayerSpec};
use crate::netgrad::{Graph, Mode, ParameterStore, Tensor, Var};
use crate::{embedder, rectifier};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Random projection of `y` to a scalar, so no gradient is trivially uniform.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = random_tensor(&mut rng, g.shape(y), 1.0);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&ParameterStore, &mut Graph) -> Result<Var>>;

/// Gradient checks of each layer type on random small shapes (C = 4, T = 7, batch 3).
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, t) = (3, 4, 7);
    let opts = GradCheckOptions { seed, coords_per_param: 64, ..GradCheckOptions::default() };
    let mut cases: Vec<(&'static str, ParameterStore, Builder, Mode)> = Vec::new();

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, &[b, c, t], 1.0));
    layers::register_conv(&mut s, "conv", LayerSpec::conv(c, 5, 3, 2), &mut rng)?;
    cases.push(("conv1d", s, Box::new(move |s, g| {
        let x = g.param(s, "x")?;
        let y = layers::conv(g, s, "conv", x, 2)?;
        project(g, y, seed)
    }), Mode::Train));

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, &[b, c, t], 1.0));
    layers::register_tdnn(&mut s, "tdnn", LayerSpec::conv(c, c, 5, 1), &mut rng)?;
    s.value_mut("tdnn.bn.gamma")?.data_mut().copy_from_slice(&random_tensor(&mut rng, &[c], 1.0).into_data());
    s.value_mut("tdnn.bn.beta")?.data_mut().copy_from_slice(&random_tensor(&mut rng, &[c], 1.0).into_data());
    for mode in [Mode::Train, Mode::Eval] {
        let name = if mode == Mode::Train { "tdnn+relu+batchnorm(train)" } else { "tdnn+relu+batchnorm(eval)" };
        cases.push((name, s.clone(), Box::new(move |s, g| {
            let x = g.param(s, "x")?;
            let y = layers::tdnn(g, s, "tdnn", x, 1)?;
            project(g, y, seed)
        }), mode));
    }

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, &[b, c, t], 1.0));
    layers::register_se(&mut s, "se", c, 2, &mut rng)?;
    cases.push(("se_block", s, Box::new(move |s, g| {
        let x = g.param(s, "x")?;
        let y = layers::se_block(g, s, "se", x)?;
        project(g, y, seed)
    }), Mode::Train));

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, &[b, c, t], 1.0));
    layers::register_res2(&mut s, "res2", c, 2, 3, &mut rng)?;
    cases.push(("res2_dilated", s, Box::new(move |s, g| {
        let x = g.param(s, "x")?;
        let y = layers::res2_dilated(g, s, "res2", x, 2, 2)?;
        project(g, y, seed)
    }), Mode::Train));

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, &[b, 2 * c], 1.0));
    layers::register_linear(&mut s, "fc", 2 * c, 3, &mut rng);
    cases.push(("linear+tanh+sigmoid", s, Box::new(move |s, g| {
        let x = g.param(s, "x")?;
        let y = layers::linear(g, s, "fc", x)?;
        let y = g.tanh(y);
        let y = g.sigmoid(y);
        project(g, y, seed)
    }), Mode::Train));

    let mut s = ParameterStore::new();
    s.insert("m", random_tensor(&mut rng, &[b, c, t], 1.0));
    s.insert("n", random_tensor(&mut rng, &[b, c, t + 2], 1.0));
    rectifier::register(&mut s, &rectifier::RectifierConfig::new(c))?;
    let w = random_tensor(&mut rng, &[c, c, 3], 0.5);
    s.value_mut(&format!("{}.weight", rectifier::PREFIX))?.data_mut().copy_from_slice(w.data());
    cases.push(("rectifier", s, Box::new(move |s, g| {
        let m = g.param(s, "m")?;
        let n = g.param(s, "n")?;
        let y = rectifier::forward(g, s, rectifier::DEFAULT_EPSILON, m, n)?;
        project(g, y, seed)
    }), Mode::Train));

    let mut s = ParameterStore::new();
    s.insert("f", random_tensor(&mut rng, &[b, c, t], 1.0));
    embedder::register(&mut s, &embedder::PoolingConfig { channels: c, attention: 3, embed_dim: 5 }, &mut rng)?;
    cases.push(("attentive_stats_pool", s, Box::new(move |s, g| {
        let f = g.param(s, "f")?;
        let y = embedder::forward(g, s, f)?;
        project(g, y, seed)
    }), Mode::Train));

    let mut s = ParameterStore::new();
    s.insert("e", random_tensor(&mut rng, &[b, 6], 1.0));
    embedder::register_head(&mut s, 6, 4, &mut rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..4)).collect();
    cases.push(("aam_loss", s, Box::new(move |s, g| {
        let e = g.param(s, "e")?;
        let cfg = embedder::AamConfig { margin: 0.2, scale: 4.0, num_classes: 4 };
        embedder::head_loss(g, s, e, &labels, &cfg)
    }), Mode::Train));

    let mut reports = Vec::new();
    for (name, mut store, build, mode) in cases {
        let opts = GradCheckOptions { mode, ..opts.clone() };
        reports.push((name, grad_check(&mut store, build, &opts)?));
    }
    Ok(reports)
}

/// Audio with a few random partials and a noise floor, for gradient checks.
pub fn probe_audio(rng: &mut ChaCha8Rng, seconds: f64) -> Result<AudioBuffer> {
    let n = (seconds * 16000.0).round() as usize;
    let partials: Vec<(f64, f64)> = (0..4).map(|_| (rng.gen_range(100.0..4000.0), rng.gen_range(0.02..0.15))).collect();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / 16000.0;
            let tone: f64 = partials.iter().map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin()).sum();
            tone * (1.0 + 0.5 * (7.0 * t).sin()) + rng.gen_range(-0.01..0.01)
        })
        .collect();
    AudioBuffer::new(samples, 16000)
}

/// Gradient check of the whole model graph (extractor, optional rectifier, pooling, margin loss)
/// at c = 8 on two one-second clips; the second clip's evidence is nil audio.
pub fn model_grad_check(seed: u64, mat: Materialization, coords_per_param: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        extractor: ExtractorConfig { c: 8, ..ExtractorConfig::default() },
        attention: 4,
        ..ModelConfig::default()
    };
    let mut store = model::init_params(&cfg, mat, 3, &mut rng)?;
    if mat.has_rectifier() {
        // a zero residual TDNN would hide the projection path from the check
        let w = random_tensor(&mut rng, &[24, 24, 3], 0.05);
        store.value_mut(&format!("{}.weight", rectifier::PREFIX))?.data_mut().copy_from_slice(w.data());
    }
    let fbank = Fbank::new(cfg.fbank.clone())?;
    let clips = [probe_audio(&mut rng, 1.0)?, probe_audio(&mut rng, 1.0)?];
    let evidence = [probe_audio(&mut rng, 1.0)?, nil_audio(16000, 1.0)?];
    let feats: Vec<_> = clips.iter().map(|c| fbank.compute(c)).collect::<Result<_>>()?;
    let ev: Vec<_> = evidence.iter().map(|c| fbank.compute(c)).collect::<Result<_>>()?;
    let x = extractor::stack(&feats.iter().collect::<Vec<_>>())?;
    let e = extractor::stack(&ev.iter().collect::<Vec<_>>())?;
    let labels = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
    let aam = cfg.aam(3);
    let opts = GradCheckOptions { seed, coords_per_param, ..GradCheckOptions::default() };
    grad_check(
        &mut store,
        move |s, g| {
            let xv = g.input(x.clone());
            let ev = mat.has_rectifier().then(|| g.input(e.clone()));
            let emb = model::embed(g, s, &cfg, xv, ev)?;
            embedder::head_loss(g, s, emb, &labels, &aam)
        },
        &opts,
    )
}
