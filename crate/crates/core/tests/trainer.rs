use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vprestore::audio::{change_speed, nil_audio, power, AudioBuffer};
use vprestore::embedder;
use vprestore::extractor::{self, ExtractorConfig};
use vprestore::features::Fbank;
use vprestore::manifest::{Manifest, ManifestRow};
use vprestore::model::{self, Materialization, ModelConfig};
use vprestore::netgrad::{Graph, Mode, ParameterStore, Tensor};
use vprestore::toyvc::{self, CorpusConfig};
use vprestore::trainer::{
    adam_step, add_noise, augment, class_map, epoch_items, make_example, train, train_step, Adam, AudioCache,
    AugmentConfig, Example, Source, TrainConfig,
};
use vprestore::Error;

fn tone(seconds: f64, freq: f64, amp: f64) -> AudioBuffer {
    let n = (seconds * 16000.0) as usize;
    let samples = (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()).collect();
    AudioBuffer::new(samples, 16000).unwrap()
}

fn small_model(c: usize) -> ModelConfig {
    ModelConfig { extractor: ExtractorConfig { c, ..ExtractorConfig::default() }, attention: 8, ..ModelConfig::default() }
}

#[test]
fn disabled_augmentation_is_identity() {
    let x = tone(1.0, 440.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        assert_eq!(augment(&x, &mut rng, &AugmentConfig::disabled()), x);
    }
}

#[test]
fn speed_change_length_arithmetic() {
    for len in [16000usize, 16001, 12345, 400] {
        let x = AudioBuffer::new(vec![0.1; len], 16000).unwrap();
        assert_eq!(change_speed(&x, 1.1).len(), (len as f64 / 1.1).round() as usize);
        assert_eq!(change_speed(&x, 0.9).len(), (len as f64 / 0.9).round() as usize);
        assert_eq!(change_speed(&x, 1.0).len(), len);
    }
}

#[test]
fn noise_is_added_at_the_requested_snr() {
    let x = tone(4.0, 300.0, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for snr in [10.0, 20.0, 30.0] {
        let y = add_noise(&x, snr, &mut rng);
        let noise: Vec<f64> = y.samples().iter().zip(x.samples()).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (power(x.samples()) / power(&noise)).log10();
        assert!((measured - snr).abs() <= 0.5, "asked {snr} dB, measured {measured:.3} dB");
    }
}

#[test]
fn augmented_audio_stays_in_range() {
    let x = tone(1.0, 200.0, 0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = AugmentConfig { prob: 1.0, ..AugmentConfig::default() };
    for _ in 0..10 {
        let y = augment(&x, &mut rng, &cfg);
        assert!(y.samples().iter().all(|s| s.abs() <= 1.0));
    }
}

fn scalar_store(value: f64) -> ParameterStore {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::new(vec![1], vec![value]).unwrap());
    store
}

fn set_grad(store: &mut ParameterStore, g: f64) {
    store.zero_grads();
    store.accumulate("w", &Tensor::new(vec![1], vec![g]).unwrap()).unwrap();
}

#[test]
fn adam_zero_gradient_leaves_weights() {
    let mut store = scalar_store(0.7);
    let mut opt = Adam::new(1e-3, 0.0);
    for _ in 0..50 {
        set_grad(&mut store, 0.0);
        adam_step(&mut store, &mut opt).unwrap();
    }
    assert_eq!(store.value("w").unwrap().data()[0], 0.7);
    assert_eq!(opt.steps(), 50);
}

#[test]
fn adam_matches_scalar_simulation() {
    // textbook Adam on one coordinate, weight decay folded into the gradient
    let (lr, wd, b1, b2, eps) = (1e-3, 0.01, 0.9, 0.999, 1e-8);
    let grads: Vec<f64> = (0..300).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
    let (mut w, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
    let mut store = scalar_store(0.4);
    let mut opt = Adam::new(lr, wd);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        let g_eff = g + wd * w;
        m = b1 * m + (1.0 - b1) * g_eff;
        v = b2 * v + (1.0 - b2) * g_eff * g_eff;
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        set_grad(&mut store, g);
        adam_step(&mut store, &mut opt).unwrap();
        assert!((store.value("w").unwrap().data()[0] - w).abs() < 1e-12);
    }
}

#[test]
fn adam_constant_gradient_steps_by_lr() {
    let lr = 1e-3;
    let mut store = scalar_store(0.0);
    let mut opt = Adam::new(lr, 0.0);
    let mut prev = 0.0;
    let mut last_step = 0.0;
    for _ in 0..1000 {
        set_grad(&mut store, 0.37);
        adam_step(&mut store, &mut opt).unwrap();
        let w = store.value("w").unwrap().data()[0];
        last_step = (w - prev).abs();
        prev = w;
    }
    assert!((last_step - lr).abs() <= 0.01 * lr, "step {last_step}");
}

#[test]
fn adam_rejects_missing_gradient() {
    let mut store = scalar_store(1.0);
    store.insert("v", Tensor::zeros(&[2]));
    set_grad(&mut store, 1.0);
    let err = adam_step(&mut store, &mut Adam::new(1e-3, 0.0)).unwrap_err();
    assert!(matches!(err, Error::NoGradient(ref n) if n == "v"), "{err}");
}

fn toy_corpus(dir: &Path, train_speakers: usize, utts: usize, seed: u64) -> toyvc::Corpus {
    let cfg = CorpusConfig {
        train_speakers,
        test_speakers: 2,
        utts_per_speaker: utts,
        evidence_per_speaker: 1,
        enroll_per_speaker: 1,
        seconds: 1.5,
        seed,
        ..CorpusConfig::default()
    };
    toyvc::build_corpus(&cfg, dir).unwrap()
}

fn plain_cfg(seed: u64) -> TrainConfig {
    TrainConfig { trim_seconds: 1.0, batch_size: 8, seed, aug: AugmentConfig::disabled(), ..TrainConfig::default() }
}

#[test]
fn example_pairing_follows_materialization() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(dir.path(), 3, 1, 5);
    let classes = class_map(&corpus.train);
    let cfg = plain_cfg(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cache = AudioCache::default();
    let row = &corpus.train.rows[0];
    let nil = nil_audio(16000, 1.0).unwrap();

    let raw = make_example(row, Source::Raw, Materialization::M2, &classes, &cfg, &mut rng, &mut cache).unwrap();
    assert_eq!(raw.evidence.as_ref(), Some(&nil));
    assert_eq!(raw.audio.len(), 16000);
    let x0 = vprestore::audio::load_wav(&row.raw_path).unwrap();
    assert!(x0.samples().windows(16000).any(|w| w == raw.audio.samples()));

    let vc = make_example(row, Source::Vc, Materialization::M3, &classes, &cfg, &mut rng, &mut cache).unwrap();
    let ev = vc.evidence.unwrap();
    assert_eq!(ev.len(), 16000);
    assert!(!ev.is_silent());

    let single = make_example(row, Source::Vc, Materialization::M1, &classes, &cfg, &mut rng, &mut cache).unwrap();
    assert!(single.evidence.is_none());
    assert_eq!(single.label, classes[&row.source_id]);
    assert_ne!(single.label, *classes.get(&row.target_id).unwrap_or(&usize::MAX));

    let stranger = ManifestRow { source_id: "nobody".into(), ..row.clone() };
    let err = make_example(&stranger, Source::Vc, Materialization::M2, &classes, &cfg, &mut rng, &mut cache);
    assert!(matches!(err, Err(Error::UnknownSpeaker(_))));
    let missing = ManifestRow { vc_path: dir.path().join("absent.wav"), ..row.clone() };
    let err = make_example(&missing, Source::Vc, Materialization::M2, &classes, &cfg, &mut rng, &mut cache);
    assert!(matches!(err, Err(Error::MissingFile(_))), "{err:?}");
}

#[test]
fn epoch_items_interleave_vc_and_raw() {
    let manifest = Manifest {
        rows: (0..3)
            .map(|i| ManifestRow {
                vc_path: format!("v{i}").into(),
                evidence_path: None,
                raw_path: format!("r{i}").into(),
                source_id: format!("s{i}"),
                target_id: "t".into(),
            })
            .collect(),
    };
    let both = epoch_items(&manifest, false);
    assert_eq!(both.len(), 6);
    assert_eq!(both.iter().filter(|(_, s)| *s == Source::Vc).count(), 3);
    assert!(epoch_items(&manifest, true).iter().all(|(_, s)| *s == Source::Raw));
}

fn examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example {
            audio: vprestore::diagnostics::probe_audio(&mut rng, 1.0).unwrap(),
            evidence: Some(if i % 2 == 0 {
                vprestore::diagnostics::probe_audio(&mut rng, 1.0).unwrap()
            } else {
                nil_audio(16000, 1.0).unwrap()
            }),
            label: i % 3,
        })
        .collect()
}

#[test]
fn one_batch_reaches_every_parameter() {
    let cfg = small_model(8);
    let fbank = Fbank::new(cfg.fbank.clone()).unwrap();
    for mat in [Materialization::M1, Materialization::M2] {
        let mut store = model::init_params(&cfg, mat, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut batch = examples(4, 9);
        if !mat.has_rectifier() {
            batch.iter_mut().for_each(|e| e.evidence = None);
        }
        let loss = train_step(&mut store, &cfg, &fbank, &batch, 3).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(store.untouched(), Vec::<String>::new(), "{mat}");
        let nonzero = store.iter().filter(|(_, p)| p.trainable && p.grad.norm() > 0.0).count();
        assert_eq!(nonzero, store.trainable_names().len(), "{mat}: some gradients are identically zero");
    }
}

fn eval_loss(store: &ParameterStore, cfg: &ModelConfig, fbank: &Fbank, batch: &[Example]) -> f64 {
    let feats: Vec<_> = batch.iter().map(|e| fbank.compute(&e.audio).unwrap()).collect();
    let ev: Vec<_> = batch.iter().map(|e| fbank.compute(e.evidence.as_ref().unwrap()).unwrap()).collect();
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(extractor::stack(&feats.iter().collect::<Vec<_>>()).unwrap());
    let e = g.input(extractor::stack(&ev.iter().collect::<Vec<_>>()).unwrap());
    let emb = model::embed(&mut g, store, cfg, x, Some(e)).unwrap();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let loss = embedder::head_loss(&mut g, store, emb, &labels, &cfg.aam(3)).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn identical_examples_give_the_single_example_loss() {
    let cfg = small_model(8);
    let fbank = Fbank::new(cfg.fbank.clone()).unwrap();
    let store = model::init_params(&cfg, Materialization::M2, 3, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let one = examples(1, 11);
    let single = eval_loss(&store, &cfg, &fbank, &one);
    let five = vec![one[0].clone(); 5];
    let batched = eval_loss(&store, &cfg, &fbank, &five);
    assert!((single - batched).abs() <= 1e-12 * single.abs().max(1.0), "{single} vs {batched}");
}

#[test]
fn training_checkpoints_and_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(&dir.path().join("data"), 3, 2, 7);
    let out = dir.path().join("out");
    let cfg = TrainConfig { epochs: 2, ..plain_cfg(3) };
    let m1 = train(&corpus.train, Materialization::M1, &small_model(8), &cfg, &out, "m1", "x = 1\n").unwrap();
    let (store, text) = ParameterStore::load(&m1.checkpoint).unwrap();
    assert_eq!(text, "x = 1\n");
    assert!(store.names().all(|n| !n.starts_with("rob")));
    assert!(out.join("m1.epoch01.vpck").exists() && out.join("m1.epoch02.vpck").exists());
    assert_eq!(m1.epoch_losses.len(), 2);
    assert_eq!(m1.vc_fraction, 0.5);
    let trace = std::fs::read_to_string(&m1.loss_trace).unwrap();
    assert!(trace.starts_with("epoch,step,loss\n"));
    // 12 items per epoch in batches of 8
    assert_eq!(trace.lines().count(), 1 + 2 * 2);

    let m2 = train(&corpus.train, Materialization::M2, &small_model(8), &cfg, &out, "m2", "").unwrap();
    let (store2, _) = ParameterStore::load(&m2.checkpoint).unwrap();
    assert!(store2.names().any(|n| n.starts_with("rob")));
    let b1 = train(&corpus.train, Materialization::M1, &small_model(8), &TrainConfig { raw_only: true, ..cfg }, &out, "b1", "")
        .unwrap();
    assert_eq!(b1.vc_fraction, 0.0);
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(&dir.path().join("data"), 2, 2, 8);
    let cfg = TrainConfig { epochs: 1, aug: AugmentConfig::default(), ..plain_cfg(12) };
    let a = train(&corpus.train, Materialization::M2, &small_model(8), &cfg, dir.path().join("a"), "m", "").unwrap();
    let b = train(&corpus.train, Materialization::M2, &small_model(8), &cfg, dir.path().join("b"), "m", "").unwrap();
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
    assert_eq!(std::fs::read(&a.loss_trace).unwrap(), std::fs::read(&b.loss_trace).unwrap());
}

#[test]
fn toy_training_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(&dir.path().join("data"), 8, 5, 9);
    assert_eq!(corpus.train.len(), 40);
    let cfg = TrainConfig { epochs: 3, ..plain_cfg(1) };
    let report = train(&corpus.train, Materialization::M2, &small_model(16), &cfg, dir.path().join("out"), "m2", "")
        .unwrap();
    println!("epoch losses {:?}", report.epoch_losses);
    assert!(report.epoch_losses[2] < report.epoch_losses[0], "{:?}", report.epoch_losses);
}

#[test]
fn invalid_train_configs_are_rejected() {
    let manifest = Manifest::default();
    let model_cfg = small_model(8);
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { trim_seconds: 0.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(
            train(&manifest, Materialization::M1, &model_cfg, &cfg, dir.path(), "x", ""),
            Err(Error::Config(_))
        ));
    }
    assert!(matches!(
        train(&manifest, Materialization::M1, &model_cfg, &TrainConfig::default(), dir.path(), "x", ""),
        Err(Error::Manifest(_))
    ));
}
