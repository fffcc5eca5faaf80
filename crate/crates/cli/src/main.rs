use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vprestore::audio::{load_wav, save_wav};
use vprestore::channel::{apply_channel, CodecKind};
use vprestore::config::ExperimentConfig;
use vprestore::diagnostics::{layer_suite, model_grad_check};
use vprestore::evaluator::{decide, SpeakerPool};
use vprestore::experiment::{self, enroll_from_list, evaluate_probes, load_embedder, write_report};
use vprestore::features::{fbank, save_fmap};
use vprestore::manifest::{EnrollList, Manifest};
use vprestore::model::Materialization;
use vprestore::{toyvc, trainer, Error};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vprestore", version, about = "Restore source-speaker voiceprints from voice-converted audio")]
struct Cli {
    /// Config file of `key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed; every random stream derives from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective configuration and exit
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inference mode; defaults to the materialization stored in the checkpoint
    #[arg(long)]
    mode: Option<Materialization>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the toy corpus and its manifests
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a manifest
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: Option<Materialization>,
        /// Train on raw recordings only (the plain-extractor baseline)
        #[arg(long)]
        raw_only: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Enroll speakers from an enrollment list into a pool file
    Enroll {
        #[arg(long)]
        list: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one recording against one enrolled speaker
    Verify {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        speaker: String,
        #[arg(long, allow_negative_numbers = true)]
        threshold: f64,
    },
    /// Rank all enrolled speakers for one recording
    Identify {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// EER, Top-k and DET data for the converted probes of a manifest
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Enrollment list; defaults to enroll.csv next to the manifest
        #[arg(long)]
        enroll: Option<PathBuf>,
        /// Channel applied to probes; defaults to eval.channel
        #[arg(long)]
        channel: Option<CodecKind>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Pass a WAV file through a telephony channel
    ChannelSim {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kind: CodecKind,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the log-Mel features of a WAV file
    ExtractFeatures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of every layer and the full model
    GradCheck {
        /// Coordinates checked per parameter tensor of the full model
        #[arg(long, default_value_t = 6)]
        coords: usize,
    },
    /// Build the corpus, train B1/M1/M2 and write the comparative metrics
    ReproE2e {
        #[arg(long, default_value = "repro")]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(Error::MissingFile(path.clone()));
        }
        cfg.apply(&std::fs::read_to_string(path)?)?;
    }
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_enroll(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join("enroll.csv")
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let Some(command) = cli.command else {
        unreachable!("checked in main");
    };
    match command {
        Command::GenData { out } => {
            let corpus = toyvc::build_corpus(&cfg.corpus_config(), &out)?;
            println!("train manifest {} ({} rows)", corpus.train_manifest.display(), corpus.train.len());
            println!("test manifest {} ({} rows)", corpus.test_manifest.display(), corpus.test.len());
            println!("enroll list {}", corpus.enroll_list.display());
        }
        Command::Train { manifest, mode, raw_only, out, name } => {
            let mat = mode.unwrap_or(cfg.materialization);
            let manifest = Manifest::load(&manifest)?;
            let train_cfg = trainer::TrainConfig { raw_only: raw_only || cfg.train.raw_only, ..cfg.train_config(&name) };
            let report = trainer::train(&manifest, mat, &cfg.model, &train_cfg, &out, &name, &cfg.checkpoint_text(mat))?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {} mean loss {l:.6}", i + 1);
            }
            println!("vc fraction {:.3}", report.vc_fraction);
            println!("checkpoint {}", report.checkpoint.display());
        }
        Command::Enroll { list, model, out } => {
            let (embedder, _) = load_embedder(&model.checkpoint, model.mode)?;
            let pool = enroll_from_list(&EnrollList::load(&list)?, &embedder)?;
            pool.save(&out)?;
            println!("enrolled {} speakers into {}", pool.len(), out.display());
        }
        Command::Verify { audio, evidence, model, pool, speaker, threshold } => {
            let (embedder, _) = load_embedder(&model.checkpoint, model.mode)?;
            let pool = SpeakerPool::load(&pool)?;
            let enrolled = pool.entries.get(&speaker).ok_or_else(|| Error::UnknownSpeaker(speaker.clone()))?;
            let ev = evidence.map(load_wav).transpose()?;
            let vp = embedder.voiceprint(&load_wav(&audio)?, ev.as_ref())?;
            let v = decide(vprestore::embedder::cosine_similarity(&vp, enrolled)?, threshold);
            println!("{} score {:.6}", if v.matched { "matched" } else { "not_matched" }, v.score);
        }
        Command::Identify { audio, evidence, model, pool, top } => {
            let (embedder, _) = load_embedder(&model.checkpoint, model.mode)?;
            let pool = SpeakerPool::load(&pool)?;
            let ev = evidence.map(load_wav).transpose()?;
            let ranked = vprestore::evaluator::identify(&load_wav(&audio)?, ev.as_ref(), &pool, &embedder)?;
            for (i, (id, score)) in ranked.iter().take(top).enumerate() {
                println!("{} {id} {score:.6}", i + 1);
            }
        }
        Command::Evaluate { manifest, model, enroll, channel, report } => {
            let (embedder, _) = load_embedder(&model.checkpoint, model.mode)?;
            let enroll = enroll.unwrap_or_else(|| default_enroll(&manifest));
            let pool = enroll_from_list(&EnrollList::load(&enroll)?, &embedder)?;
            let probes = Manifest::load(&manifest)?;
            let r = evaluate_probes(&embedder, &probes, &pool, channel.unwrap_or(cfg.channel), &cfg.topk)?;
            write_report(embedder.mat.name(), &r, &report)?;
            print!("{}", experiment::format_result(embedder.mat.name(), &r));
        }
        Command::ChannelSim { input, kind, output } => {
            save_wav(&apply_channel(&load_wav(&input)?, kind)?, &output)?;
        }
        Command::ExtractFeatures { input, output } => {
            let map = fbank(&load_wav(&input)?, &cfg.model.fbank)?;
            save_fmap(&map, &output)?;
            println!("{} channels x {} frames", map.channels(), map.frames());
        }
        Command::GradCheck { coords } => {
            let mut worst = 0.0f64;
            for (name, r) in layer_suite(cfg.seed)? {
                println!("{name}: max relative error {:.3e} over {} coordinates", r.max_rel_err, r.checked);
                worst = worst.max(r.max_rel_err);
            }
            for mat in [Materialization::M1, Materialization::M2] {
                let r = model_grad_check(cfg.seed, mat, coords)?;
                println!("model {mat}: max relative error {:.3e} over {} coordinates", r.max_rel_err, r.checked);
                worst = worst.max(r.max_rel_err);
            }
            println!("max relative error {worst:.3e}");
            if worst > GRAD_TOLERANCE {
                return Err(Error::Config(format!("gradient check failed: {worst:.3e} > {GRAD_TOLERANCE:e}")));
            }
        }
        Command::ReproE2e { out } => {
            let report = experiment::run_e2e(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(&report.metrics_path)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.command.is_none() && !cli.dump_config {
        eprintln!("error: a subcommand is required\n\nRun `vprestore --help` for usage.");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
