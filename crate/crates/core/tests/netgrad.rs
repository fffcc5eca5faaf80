use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vprestore::features::FeatureMap;
use vprestore::netgrad::layers::{self, LayerSpec};
use vprestore::netgrad::{conv1d_values, Graph, Mode, ParameterStore, Tensor};
use vprestore::Error;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn conv_by_hand() {
    let x = FeatureMap::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let w = Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
    let y = layers::conv1d_forward(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
    assert_eq!(y.values(), &[1.0, 3.0, 6.0, 5.0]);
}

#[test]
fn identity_and_bias_only_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = FeatureMap::new(3, 9, randn(&mut rng, &[27]).into_data()).unwrap();
    let mut eye = Tensor::zeros(&[3, 3, 1]);
    for c in 0..3 {
        eye.data_mut()[c * 3 + c] = 1.0;
    }
    assert_eq!(layers::conv1d_forward(&x, &eye, &Tensor::zeros(&[3]), 1).unwrap(), x);
    let b = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
    let y = layers::conv1d_forward(&x, &Tensor::zeros(&[2, 3, 5]), &b, 3).unwrap();
    for t in 0..9 {
        assert_eq!((y.get(0, t), y.get(1, t)), (0.25, -4.0));
    }
}

/// Direct summation over the zero-padded input.
fn conv_oracle(x: &[f64], c_in: usize, t: usize, w: &[f64], c_out: usize, k: usize, d: usize) -> Vec<f64> {
    let pad = (d * (k - 1) / 2) as isize;
    let mut y = vec![0.0; c_out * t];
    for o in 0..c_out {
        for tt in 0..t {
            for i in 0..c_in {
                for j in 0..k {
                    let src = tt as isize + (j * d) as isize - pad;
                    if src >= 0 && (src as usize) < t {
                        y[o * t + tt] += w[(o * c_in + i) * k + j] * x[i * t + src as usize];
                    }
                }
            }
        }
    }
    y
}

proptest! {
    #[test]
    fn conv_matches_direct_sum(seed in 0u64..1000, k in prop::sample::select(vec![1usize, 3, 5]), d in 1usize..4, t in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[1, 2, t]);
        let w = randn(&mut rng, &[3, 2, k]);
        let y = conv1d_values(&x, &w, None, d);
        prop_assert_eq!(y.shape(), &[1, 3, t]);
        let oracle = conv_oracle(x.data(), 2, t, w.data(), 3, k, d);
        for (a, b) in y.data().iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn se_gates_stay_in_unit_interval(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        layers::register_se(&mut store, "se", 8, 4, &mut rng).unwrap();
        let x = Tensor::full(&[1, 8, 5], 1.0);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.input(x);
        let y = layers::se_block(&mut g, &store, "se", xv).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&s| s > 0.0 && s < 1.0));
    }
}

#[test]
fn linear_weight_gradient_is_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    store.insert("w", randn(&mut rng, &[3, 4]));
    let x = randn(&mut rng, &[1, 4]);
    let up = randn(&mut rng, &[1, 3]);
    let mut g = Graph::new(Mode::Train);
    let w = g.param(&store, "w").unwrap();
    let xv = g.input(x.clone());
    let y = g.linear(xv, w, None).unwrap();
    let grads = g.backward_with(y, up.clone()).unwrap();
    let dw = grads.param("w").unwrap();
    for o in 0..3 {
        for i in 0..4 {
            assert!((dw.data()[o * 4 + i] - up.data()[o] * x.data()[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn relu_blocks_negative_inputs() {
    let mut store = ParameterStore::new();
    store.insert("x", Tensor::new(vec![1, 4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap());
    let mut g = Graph::new(Mode::Train);
    let x = g.param(&store, "x").unwrap();
    let y = g.relu(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param("x").unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn backward_without_trace_fails() {
    let mut g = Graph::new(Mode::Train);
    let x = g.input(Tensor::scalar(1.0));
    let other = Graph::new(Mode::Train);
    assert!(matches!(other.backward(x), Err(Error::NoTrace)));
}

fn bn_store(c: usize) -> ParameterStore {
    let mut store = ParameterStore::new();
    layers::register_batchnorm(&mut store, "bn", c);
    store
}

#[test]
fn train_batchnorm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = bn_store(3);
    let x = Tensor::new(vec![4, 3, 6], (0..72).map(|_| rng.gen_range(-5.0..9.0)).collect()).unwrap();
    let mut g = Graph::new(Mode::Train);
    let xv = g.input(x);
    let y = g.batchnorm(&store, "bn", xv).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + c) * 6..(b * 3 + c + 1) * 6].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
}

#[test]
fn batchnorm_of_constant_is_zero() {
    let store = bn_store(2);
    let mut g = Graph::new(Mode::Train);
    let xv = g.input(Tensor::full(&[3, 2, 4], 7.5));
    let y = g.batchnorm(&store, "bn", xv).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batchnorm_needs_two_examples_in_train_mode() {
    let store = bn_store(2);
    let mut g = Graph::new(Mode::Train);
    let xv = g.input(Tensor::full(&[1, 2, 4], 1.0));
    assert!(matches!(g.batchnorm(&store, "bn", xv), Err(Error::BatchTooSmall(1))));
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(Tensor::full(&[1, 2, 4], 1.0));
    assert!(g.batchnorm(&store, "bn", xv).is_ok());
}

#[test]
fn eval_batchnorm_converges_to_train_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = bn_store(3);
    let x = Tensor::new(vec![4, 3, 5], (0..60).map(|_| rng.gen_range(-2.0..6.0)).collect()).unwrap();
    let mut train_out = Vec::new();
    for _ in 0..100 {
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x.clone());
        let y = g.batchnorm(&store, "bn", xv).unwrap();
        train_out = g.value(y).data().to_vec();
        g.commit_running_stats(&mut store).unwrap();
    }
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x);
    let y = g.batchnorm(&store, "bn", xv).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&train_out) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn zero_weight_se_halves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    layers::register_se(&mut store, "se", 4, 2, &mut rng).unwrap();
    for name in ["se.fc1.weight", "se.fc2.weight"] {
        store.value_mut(name).unwrap().data_mut().fill(0.0);
    }
    let x = randn(&mut rng, &[2, 4, 6]);
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let y = layers::se_block(&mut g, &store, "se", xv).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, b / 2.0);
    }
}

#[test]
fn zero_weight_res2_passes_first_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    layers::register_res2(&mut store, "r", 8, 4, 3, &mut rng).unwrap();
    for i in 1..4 {
        store.value_mut(&format!("r.group{i}.conv.weight")).unwrap().data_mut().fill(0.0);
    }
    let x = randn(&mut rng, &[1, 8, 10]);
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let y = layers::res2_dilated(&mut g, &store, "r", xv, 4, 3).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), x.shape());
    assert_eq!(&y.data()[..20], &x.data()[..20]);
    assert!(y.data()[20..].iter().all(|&v| v == 0.0));
}

#[test]
fn layer_spec_padding_and_validation() {
    assert_eq!(LayerSpec::conv(4, 4, 5, 3).padding(), 6);
    assert!(LayerSpec::conv(4, 4, 4, 1).validate().is_err());
    assert!(LayerSpec::conv(4, 4, 3, 0).validate().is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    assert!(layers::register_se(&mut store, "se", 6, 4, &mut rng).is_err());
    assert!(layers::register_res2(&mut store, "r", 6, 4, 3, &mut rng).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    layers::register_tdnn(&mut store, "tdnn", LayerSpec::conv(3, 5, 3, 1), &mut rng).unwrap();
    store.insert("head.weight", randn(&mut rng, &[4, 5]));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vpck");
    store.save("extractor.c = 8\n", &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"VPCK1");
    let (loaded, text) = ParameterStore::load(&path).unwrap();
    assert_eq!(text, "extractor.c = 8\n");
    assert_eq!(loaded.names().collect::<Vec<_>>(), store.names().collect::<Vec<_>>());
    let rounded = store.rounded_to_f32();
    for name in store.names() {
        assert_eq!(loaded.value(name).unwrap(), rounded.value(name).unwrap());
    }
    assert!(!loaded.get("tdnn.bn.running_var").unwrap().trainable);
    std::fs::write(&path, b"VPCK2garbage").unwrap();
    assert!(ParameterStore::load(&path).is_err());
}

#[test]
fn forward_is_deterministic_and_length_preserving() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParameterStore::new();
    layers::register_tdnn(&mut store, "t", LayerSpec::conv(4, 4, 5, 3), &mut rng).unwrap();
    let x = randn(&mut rng, &[2, 4, 13]);
    let run = || {
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x.clone());
        let y = layers::tdnn(&mut g, &store, "t", xv, 3).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[2, 4, 13]);
}
