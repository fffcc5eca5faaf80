use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vprestore::diagnostics::probe_audio;
use vprestore::embedder::{cosine_similarity, Voiceprint};
use vprestore::evaluator::{
    compute_eer, decide, enroll, export_det, identify, rank, topk_accuracy, verify, SpeakerPool, TrialSet,
};
use vprestore::extractor::ExtractorConfig;
use vprestore::model::{self, Embedder, Materialization, ModelConfig};
use vprestore::Error;

/// Direct O(n^2) sweep: rates counted from scratch at every candidate threshold, then the first
/// sign change of FPR - FNR is interpolated in floating point.
fn brute_force_eer(trials: &[(f64, bool)]) -> f64 {
    let pos = trials.iter().filter(|t| t.1).count() as f64;
    let neg = trials.len() as f64 - pos;
    let mut thresholds: Vec<f64> = trials.iter().map(|t| t.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fp = trials.iter().filter(|s| !s.1 && s.0 >= t).count() as f64;
            let fneg = trials.iter().filter(|s| s.1 && s.0 < t).count() as f64;
            (fp / neg, fneg / pos)
        })
        .collect();
    for i in 0..rates.len() {
        let d = rates[i].0 - rates[i].1;
        if d == 0.0 {
            return rates[i].0;
        }
        if d < 0.0 {
            let (a, b) = (rates[i - 1], rates[i]);
            let da = a.0 - a.1;
            let alpha = da / (da - d);
            return a.0 + alpha * (b.0 - a.0);
        }
    }
    unreachable!()
}

fn random_trials(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = rng.gen_range(2..=200);
    let coarse = rng.gen_bool(0.5);
    let mut trials: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let same = rng.gen_bool(0.3);
            let score = if coarse {
                (rng.gen_range(0..12) + if same { 3 } else { 0 }) as f64 / 10.0
            } else {
                rng.gen_range(-1.0..1.0) + if same { 0.4 } else { 0.0 }
            };
            (score, same)
        })
        .collect();
    trials[0].1 = true;
    trials[1].1 = false;
    trials
}

#[test]
fn eer_matches_brute_force_on_random_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let trials = random_trials(&mut rng);
        let (eer, _) = compute_eer(&TrialSet { trials: trials.clone() }).unwrap();
        let oracle = brute_force_eer(&trials);
        assert!((eer - oracle).abs() <= 1e-9, "{eer} vs {oracle} on {trials:?}");
    }
}

fn set(pos: &[f64], neg: &[f64]) -> TrialSet {
    TrialSet { trials: pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect() }
}

#[test]
fn eer_reference_values() {
    assert_eq!(compute_eer(&set(&[0.9; 5], &[0.1; 7])).unwrap().0, 0.0);
    assert_eq!(compute_eer(&set(&[0.3], &[0.3])).unwrap().0, 0.5);
    assert_eq!(compute_eer(&set(&[0.1, 0.5, 0.5, 0.9], &[0.5, 0.9, 0.1, 0.5])).unwrap().0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.gen_range(1..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(compute_eer(&set(&scores, &scores)).unwrap().0, 0.5, "{scores:?}");
    }
    let (eer, t) = compute_eer(&set(&[0.8, 0.6, 0.4], &[0.7, 0.3, 0.2])).unwrap();
    assert!((eer - 1.0 / 3.0).abs() < 1e-15);
    assert!((0.6..=0.7).contains(&t), "threshold {t}");
}

#[test]
fn eer_rejects_degenerate_trials() {
    assert!(matches!(compute_eer(&set(&[0.1, 0.2], &[])), Err(Error::DegenerateTrials)));
    assert!(matches!(compute_eer(&set(&[], &[0.3])), Err(Error::DegenerateTrials)));
    assert!(matches!(compute_eer(&set(&[f64::NAN], &[0.3])), Err(Error::DegenerateTrials)));
}

proptest! {
    #[test]
    fn eer_is_invariant_under_monotone_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trials = random_trials(&mut rng);
        let (eer, _) = compute_eer(&TrialSet { trials: trials.clone() }).unwrap();
        let maps: [fn(f64) -> f64; 3] = [|x| 3.0 * x - 7.0, |x| x * x * x + x, |x| (2.0 * x).tanh()];
        for f in maps {
            let mapped: Vec<(f64, bool)> = trials.iter().map(|&(s, l)| (f(s), l)).collect();
            let (e2, _) = compute_eer(&TrialSet { trials: mapped }).unwrap();
            prop_assert!((eer - e2).abs() <= 1e-12);
        }
    }

    #[test]
    fn eer_threshold_lies_within_the_scores(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trials = random_trials(&mut rng);
        let (eer, t) = compute_eer(&TrialSet { trials: trials.clone() }).unwrap();
        let lo = trials.iter().map(|t| t.0).fold(f64::INFINITY, f64::min);
        let hi = trials.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((0.0..=1.0).contains(&eer));
        prop_assert!(t >= lo && t <= hi);
    }
}

#[test]
fn topk_counts_ranks() {
    let ranked = |first: usize| -> Vec<(String, f64)> {
        (0..6).map(|i| (format!("s{}", (i + first) % 6), 1.0 - i as f64 / 10.0)).collect()
    };
    // true id "s0" sits at ranks 1, 2 and 5
    let results = vec![(ranked(0), "s0".to_string()), (ranked(5), "s0".to_string()), (ranked(2), "s0".to_string())];
    assert!((topk_accuracy(&results, 2) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(topk_accuracy(&results, 1), 1.0 / 3.0);
    assert_eq!(topk_accuracy(&results, 6), 1.0);
}

#[test]
fn det_export_layout() {
    let dir = tempfile::tempdir().unwrap();
    let trials = set(&[0.8, 0.6, 0.4, 0.6], &[0.7, 0.3, 0.2, 0.3]);
    export_det(&trials, dir.path()).unwrap();
    let det = std::fs::read_to_string(dir.path().join("det.csv")).unwrap();
    let mut lines = det.lines();
    assert_eq!(lines.next(), Some("threshold,fpr,fnr"));
    let rows: Vec<(f64, f64, f64)> = lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[0], f[1], f[2])
        })
        .collect();
    assert_eq!(rows.len(), 6 + 2);
    assert!(rows.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 >= w[1].1 && w[0].2 <= w[1].2));
    assert_eq!((rows[0].1, rows[0].2), (1.0, 0.0));
    assert_eq!((rows[7].1, rows[7].2), (0.0, 1.0));
    let same = std::fs::read_to_string(dir.path().join("cdf_same.csv")).unwrap();
    assert_eq!(same.lines().count(), 1 + 4);
    assert!(same.trim_end().ends_with("0.8,1"));
    let diff = std::fs::read_to_string(dir.path().join("cdf_diff.csv")).unwrap();
    assert!(diff.lines().nth(1).unwrap().starts_with("0.2,0.25"));
}

fn small_embedder(mat: Materialization, seed: u64) -> Embedder {
    let cfg = ModelConfig {
        extractor: ExtractorConfig { c: 8, ..ExtractorConfig::default() },
        attention: 4,
        embed_dim: 16,
        ..ModelConfig::default()
    };
    let store = model::init_params(&cfg, mat, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Embedder::new(cfg, store, mat).unwrap()
}

#[test]
fn enrollment_averages_and_normalizes() {
    let model = small_embedder(Materialization::M2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clips: Vec<_> = (0..4).map(|_| probe_audio(&mut rng, 1.0).unwrap()).collect();
    let mut audios = BTreeMap::new();
    audios.insert("a".to_string(), vec![clips[0].clone()]);
    audios.insert("b".to_string(), vec![clips[1].clone(), clips[2].clone()]);
    let pool = enroll(&audios, &model).unwrap();
    let single = model.voiceprint(&clips[0], None).unwrap().normalized().unwrap();
    assert!(pool.entries["a"].values().iter().zip(single.values()).all(|(x, y)| (x - y).abs() < 1e-12));
    assert!(pool.entries.values().all(|v| (v.norm() - 1.0).abs() < 1e-6));

    audios.insert("a".to_string(), vec![clips[0].clone(), clips[0].clone()]);
    let dup = enroll(&audios, &model).unwrap();
    assert!(dup.entries["a"].values().iter().zip(pool.entries["a"].values()).all(|(x, y)| (x - y).abs() < 1e-12));

    audios.insert("c".to_string(), vec![]);
    assert!(matches!(enroll(&audios, &model), Err(Error::EmptyEnrollment(ref s)) if s == "c"));
    assert!(matches!(enroll(&BTreeMap::new(), &model), Err(Error::EmptyEnrollment(_))));
}

#[test]
fn verification_threshold_rule() {
    let model = small_embedder(Materialization::M2, 3);
    let x = probe_audio(&mut ChaCha8Rng::seed_from_u64(4), 1.0).unwrap();
    let own = model.voiceprint(&x, None).unwrap();
    let v = verify(&x, None, &own, 1.0 - 1e-9, &model).unwrap();
    assert!(v.matched && (v.score - 1.0).abs() < 1e-12);
    assert!(!verify(&x, None, &own, 1.0 + 1e-9, &model).unwrap().matched);
    assert!(decide(0.25, 0.25).matched);
    assert!(!decide(0.25 - 1e-12, 0.25).matched);
    let zero = Voiceprint(vec![0.0; own.len()]);
    assert!(matches!(verify(&x, None, &zero, 0.5, &model), Err(Error::ZeroVector)));
}

#[test]
fn identification_agrees_with_verification() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mat in [Materialization::M1, Materialization::M3] {
        let model = small_embedder(mat, 6);
        let mut audios = BTreeMap::new();
        for id in ["d", "a", "c", "b", "e"] {
            audios.insert(id.to_string(), vec![probe_audio(&mut rng, 1.0).unwrap()]);
        }
        let pool = enroll(&audios, &model).unwrap();
        for _ in 0..4 {
            let x = probe_audio(&mut rng, 1.0).unwrap();
            let ev = probe_audio(&mut rng, 1.0).unwrap();
            let ranked = identify(&x, Some(&ev), &pool, &model).unwrap();
            let mut ids: Vec<&str> = ranked.iter().map(|r| r.0.as_str()).collect();
            assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
            ids.sort_unstable();
            assert_eq!(ids, ["a", "b", "c", "d", "e"]);
            let best = pool
                .entries
                .iter()
                .map(|(id, e)| (id, verify(&x, Some(&ev), e, 0.0, &model).unwrap().score))
                .fold((None, f64::NEG_INFINITY), |acc, (id, s)| if s > acc.1 { (Some(id), s) } else { acc });
            assert_eq!(Some(&ranked[0].0), best.0);
            assert!((ranked[0].1 - best.1).abs() < 1e-12);
        }
    }
}

#[test]
fn ranking_ties_and_singletons() {
    let v = Voiceprint(vec![1.0, 0.0]);
    let mut entries = BTreeMap::new();
    for id in ["zed", "amy", "kim"] {
        entries.insert(id.to_string(), Voiceprint(vec![0.0, 1.0]));
    }
    entries.insert("own".to_string(), v.clone());
    let pool = SpeakerPool { entries };
    let ranked = rank(&v, &pool).unwrap();
    let ids: Vec<&str> = ranked.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(ids, ["own", "amy", "kim", "zed"]);
    assert_eq!(ranked[0].1, 1.0);

    let mut one = BTreeMap::new();
    one.insert("solo".to_string(), vec![Voiceprint(vec![-3.0, 4.0])]);
    let pool = SpeakerPool::from_voiceprints(&one).unwrap();
    assert_eq!(rank(&v, &pool).unwrap()[0].0, "solo");
    assert!((cosine_similarity(&pool.entries["solo"], &Voiceprint(vec![-0.6, 0.8])).unwrap() - 1.0).abs() < 1e-15);
}
