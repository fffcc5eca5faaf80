use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
corpus.train_speakers = 4
corpus.test_speakers = 3
corpus.utts_per_speaker = 2
corpus.evidence_per_speaker = 1
corpus.enroll_per_speaker = 1
corpus.seconds = 1.5
model.c = 8
model.materialization = m2
train.epochs = 1
train.batch_size = 4
train.trim_seconds = 1
";

fn vprestore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vprestore")).args(args).output().expect("spawn vprestore")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(vprestore(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(vprestore(&[]).status.code(), Some(1));
    assert_eq!(vprestore(&["train"]).status.code(), Some(1));
    assert_eq!(vprestore(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wav");
    let out = vprestore(&["extract-features", "--input", p(&missing), "--output", p(&dir.path().join("f.bin"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert_eq!(vprestore(&["--set", "model.colour=3", "--dump-config"]).status.code(), Some(2));
    assert_eq!(vprestore(&["--config", p(&missing), "--dump-config"]).status.code(), Some(2));
}

#[test]
fn dump_config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let first = vprestore(&["--seed", "9", "--set", "model.c=16", "--dump-config"]);
    assert!(first.status.success());
    let text = stdout(&first);
    assert!(text.contains("seed = 9\n") && text.contains("model.c = 16\n"));
    let path = dir.path().join("cfg.txt");
    std::fs::write(&path, &text).unwrap();
    let second = vprestore(&["--config", p(&path), "--dump-config"]);
    assert_eq!(stdout(&second), text);
}

#[test]
fn grad_check_passes() {
    let out = vprestore(&["grad-check", "--seed", "7", "--coords", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let last = stdout(&out).lines().last().unwrap().to_string();
    let worst: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst <= 1e-4, "{last}");
}

#[test]
fn toy_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("toy.cfg");
    std::fs::write(&cfg, TOY).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", p(&cfg)];
        all.extend_from_slice(args);
        let out = vprestore(&all);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };

    let data = root.join("data");
    run(&["gen-data", "--out", p(&data)]);
    for f in ["train.csv", "test.csv", "enroll.csv", "speakers.csv"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let models = root.join("models");
    let log = run(&["train", "--manifest", p(&data.join("train.csv")), "--out", p(&models), "--name", "toy"]);
    assert!(log.contains("epoch 1 mean loss"));
    let ckpt = models.join("toy.vpck");
    assert!(ckpt.exists());

    let pool = root.join("pool.csv");
    let log = run(&["enroll", "--list", p(&data.join("enroll.csv")), "--checkpoint", p(&ckpt), "--out", p(&pool)]);
    assert!(log.contains("enrolled 3 speakers"));

    let test = std::fs::read_to_string(data.join("test.csv")).unwrap();
    let row: Vec<&str> = test.lines().nth(1).unwrap().split(',').collect();
    let (vc, evidence, source) = (data.join(row[0]), data.join(row[1]), row[3]);

    let log = run(&[
        "verify", "--audio", p(&vc), "--evidence", p(&evidence), "--checkpoint", p(&ckpt), "--mode", "m3",
        "--pool", p(&pool), "--speaker", source, "--threshold", "-1",
    ]);
    assert!(log.starts_with("matched score "), "{log}");
    let log = run(&[
        "verify", "--audio", p(&vc), "--checkpoint", p(&ckpt), "--pool", p(&pool), "--speaker", source,
        "--threshold", "1.5",
    ]);
    assert!(log.starts_with("not_matched score "), "{log}");

    let log = run(&["identify", "--audio", p(&vc), "--checkpoint", p(&ckpt), "--pool", p(&pool), "--top", "2"]);
    let ranks: Vec<&str> = log.lines().collect();
    assert_eq!(ranks.len(), 2);
    assert!(ranks[0].starts_with("1 ") && ranks[1].starts_with("2 "));

    let report = root.join("report");
    let log = run(&[
        "evaluate", "--manifest", p(&data.join("test.csv")), "--checkpoint", p(&ckpt), "--channel", "mulaw",
        "--report", p(&report),
    ]);
    assert!(log.contains("m2.eer = "));
    for f in ["metrics.txt", "det.csv", "cdf_same.csv", "cdf_diff.csv"] {
        assert!(report.join(f).exists(), "{f}");
    }

    let wav = root.join("sub4k.wav");
    run(&["channel-sim", "--input", p(&vc), "--kind", "sub4k", "--output", p(&wav)]);
    assert!(wav.exists());
    let log = run(&["extract-features", "--input", p(&wav), "--output", p(&root.join("f.bin"))]);
    assert!(log.starts_with("80 channels x "), "{log}");
}
