//! Toy speakers, a formant synthesizer and a voice-conversion operator whose output keeps a
//! controllable share `lambda` of the source speaker.
//!
//! A speaker is a glottal pitch, three formant resonators with bandwidths, and a spectral tilt.
//! Utterances are rendered from a [`Script`] of phones that depends only on a content seed, so the
//! same content can be spoken by any speaker. Conversion re-renders the script with a blended
//! speaker.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{save_wav, samples_for, AudioBuffer};
use crate::error::{Error, Result};
use crate::manifest::{EnrollList, Manifest, ManifestRow};

pub const F0_RANGE: (f64, f64) = (80.0, 300.0);
pub const FORMANT_BANDS: [(f64, f64); 3] = [(300.0, 900.0), (900.0, 2200.0), (2200.0, 3400.0)];
pub const BANDWIDTH_RANGES: [(f64, f64); 3] = [(40.0, 140.0), (60.0, 200.0), (80.0, 280.0)];
pub const TILT_RANGE: (f64, f64) = (-12.0, -3.0);
/// Tilt is measured in dB per octave above this frequency.
pub const TILT_REFERENCE_HZ: f64 = 500.0;
/// Phones last between these many seconds.
pub const PHONE_SECONDS: (f64, f64) = (0.15, 0.30);
/// Peak amplitude after normalization.
pub const PEAK: f64 = 0.9;
/// Amplitude of the white noise floor, about -60 dB below full scale.
pub const NOISE_FLOOR: f64 = 1e-3;
/// Envelope value at phone boundaries, relative to the phone's amplitude.
const ENVELOPE_FLOOR: f64 = 0.15;
const NOISE_SALT: u64 = 0x6e6f_6973_6566_6c72;
/// Rosenberg pulse: opening and closing phases as fractions of the period.
const GLOTTAL_OPEN: f64 = 0.4;
const GLOTTAL_CLOSE: f64 = 0.16;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeaker {
    pub id: String,
    pub f0: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// Spectral slope in dB per octave.
    pub tilt: f64,
}

impl ToySpeaker {
    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let ordered = self.formants.windows(2).all(|w| w[0] < w[1]);
        if !(60.0..=400.0).contains(&self.f0) || !ordered || self.formants[2] >= nyquist || self.formants[0] <= 0.0 {
            return Err(Error::Config(format!("invalid toy speaker {self:?} at {sample_rate_hz} Hz")));
        }
        if self.bandwidths.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config(format!("toy speaker {} has non-positive bandwidths", self.id)));
        }
        Ok(())
    }
}

pub fn sample_speaker<R: Rng + ?Sized>(id: impl Into<String>, rng: &mut R) -> ToySpeaker {
    let mut draw = |(lo, hi): (f64, f64)| rng.gen_range(lo..hi);
    let f0 = draw(F0_RANGE);
    let formants = FORMANT_BANDS.map(&mut draw);
    let bandwidths = BANDWIDTH_RANGES.map(&mut draw);
    let tilt = draw(TILT_RANGE);
    ToySpeaker { id: id.into(), f0, formants, bandwidths, tilt }
}

/// One phone: its formants are the speaker's scaled by `formant_scale`, its pitch glides from
/// `pitch.0 * f0` to `pitch.1 * f0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Phone {
    pub seconds: f64,
    pub formant_scale: [f64; 3],
    pub pitch: (f64, f64),
    pub amplitude: f64,
}

/// Speaker-independent content: a phone sequence plus the seed of the noise floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub seed: u64,
    pub phones: Vec<Phone>,
}

impl Script {
    /// Random phones covering exactly `seconds`, determined by `content_seed` alone.
    pub fn generate(content_seed: u64, seconds: f64) -> Result<Self> {
        if !(seconds >= 1.0) {
            return Err(Error::Config(format!("utterances must last at least 1 s, got {seconds}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
        let mut phones = Vec::new();
        let mut total = 0.0;
        while total < seconds {
            let len = rng.gen_range(PHONE_SECONDS.0..PHONE_SECONDS.1).min(seconds - total);
            let formant_scale = [rng.gen_range(0.7..1.3), rng.gen_range(0.75..1.25), rng.gen_range(0.9..1.1)];
            let pitch = (rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1));
            phones.push(Phone { seconds: len, formant_scale, pitch, amplitude: rng.gen_range(0.5..1.0) });
            total += len;
        }
        Ok(Self { seed: content_seed, phones })
    }

    /// A single steady phone with the speaker's own formants and a flat pitch.
    pub fn sustained(seed: u64, seconds: f64) -> Self {
        Self { seed, phones: vec![Phone { seconds, formant_scale: [1.0; 3], pitch: (1.0, 1.0), amplitude: 1.0 }] }
    }

    pub fn seconds(&self) -> f64 {
        self.phones.iter().map(|p| p.seconds).sum()
    }

    /// Times at which one phone ends and the next begins.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::new();
        for p in &self.phones[..self.phones.len().saturating_sub(1)] {
            t += p.seconds;
            out.push(t);
        }
        out
    }
}

fn rosenberg(phase: f64) -> f64 {
    if phase < GLOTTAL_OPEN {
        0.5 * (1.0 - (PI * phase / GLOTTAL_OPEN).cos())
    } else if phase < GLOTTAL_OPEN + GLOTTAL_CLOSE {
        (0.5 * PI * (phase - GLOTTAL_OPEN) / GLOTTAL_CLOSE).cos()
    } else {
        0.0
    }
}

/// Formant scale at every sample: piecewise linear between phone midpoints.
fn formant_track(script: &Script, n: usize, rate: f64) -> Vec<[f64; 3]> {
    let mut mids = Vec::with_capacity(script.phones.len());
    let mut start = 0.0;
    for p in &script.phones {
        mids.push((start + p.seconds / 2.0, p.formant_scale));
        start += p.seconds;
    }
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let t = i as f64 / rate;
        while k + 1 < mids.len() && mids[k + 1].0 <= t {
            k += 1;
        }
        let (t0, a) = mids[k];
        let scale = match mids.get(k + 1) {
            Some(&(t1, b)) if t > t0 => {
                let u = (t - t0) / (t1 - t0);
                [0, 1, 2].map(|j| a[j] + u * (b[j] - a[j]))
            }
            _ => a,
        };
        out.push(scale);
    }
    out
}

/// Excitation: differentiated Rosenberg pulses under each phone's raised-cosine envelope.
fn excitation(spk: &ToySpeaker, script: &Script, n: usize, rate: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    let mut prev = 0.0;
    let mut start = 0usize;
    let mut elapsed = 0.0;
    for (idx, p) in script.phones.iter().enumerate() {
        elapsed += p.seconds;
        let end = if idx + 1 == script.phones.len() { n } else { ((elapsed * rate).round() as usize).min(n) };
        let len = (end - start).max(1) as f64;
        for i in start..end {
            let u = (i - start) as f64 / len;
            let f0 = spk.f0 * (p.pitch.0 + u * (p.pitch.1 - p.pitch.0));
            let g = rosenberg(phase);
            let env = p.amplitude * (ENVELOPE_FLOOR + (1.0 - ENVELOPE_FLOOR) * (PI * u).sin().powi(2));
            out.push(env * (g - prev));
            prev = g;
            phase = (phase + f0 / rate).fract();
        }
        start = end;
    }
    out
}

/// Cascade of three time-varying second-order resonators with unit gain at DC.
fn resonate(spk: &ToySpeaker, x: &mut [f64], track: &[[f64; 3]], rate: f64) {
    let limit = 0.45 * rate;
    for k in 0..3 {
        let r = (-PI * spk.bandwidths[k] / rate).exp();
        let (mut y1, mut y2) = (0.0, 0.0);
        for (v, scale) in x.iter_mut().zip(track) {
            let f = (spk.formants[k] * scale[k]).min(limit);
            let c1 = 2.0 * r * (2.0 * PI * f / rate).cos();
            let c2 = -r * r;
            let y = (1.0 - c1 - c2) * *v + c1 * y1 + c2 * y2;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

/// Zero-phase spectral tilt of `tilt_db` per octave above [`TILT_REFERENCE_HZ`].
fn apply_tilt(x: &mut [f64], tilt_db: f64, rate: f64) {
    let n = (2 * x.len()).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let exponent = tilt_db / (20.0 * 2f64.log10());
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        *v *= (f.max(TILT_REFERENCE_HZ) / TILT_REFERENCE_HZ).powf(exponent);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, c) in x.iter_mut().zip(&buf) {
        *v = c.re / n as f64;
    }
}

/// Renders `script` in the voice of `spk`: normalized to [`PEAK`] plus a noise floor seeded by
/// the script.
pub fn render(spk: &ToySpeaker, script: &Script, sample_rate_hz: u32) -> Result<AudioBuffer> {
    spk.validate(sample_rate_hz)?;
    let rate = sample_rate_hz as f64;
    let n = samples_for(script.seconds(), sample_rate_hz);
    let mut x = excitation(spk, script, n, rate);
    resonate(spk, &mut x, &formant_track(script, n, rate), rate);
    apply_tilt(&mut x, spk.tilt, rate);
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut noise = ChaCha8Rng::seed_from_u64(script.seed ^ NOISE_SALT);
    for v in &mut x {
        let clean = if peak > 0.0 { *v * PEAK / peak } else { 0.0 };
        *v = clean + NOISE_FLOOR * noise.gen_range(-1.0..1.0);
    }
    AudioBuffer::from_clipped(x, sample_rate_hz)
}

pub fn synth_utterance(spk: &ToySpeaker, content_seed: u64, seconds: f64, sample_rate_hz: u32) -> Result<AudioBuffer> {
    render(spk, &Script::generate(content_seed, seconds)?, sample_rate_hz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionSpec {
    pub target: ToySpeaker,
    /// Share of the source speaker surviving conversion, in [0, 1].
    pub leakage: f64,
}

/// The speaker a conversion actually produces. Pitch, formants and tilt blend linearly with
/// weight `lambda` on the source; bandwidths leak faster, with weight `sqrt(lambda)`.
pub fn effective_speaker(source: &ToySpeaker, spec: &ConversionSpec) -> Result<ToySpeaker> {
    let lambda = spec.leakage;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("leakage must be in [0, 1], got {lambda}")));
    }
    let t = &spec.target;
    let mix = |w: f64, a: f64, b: f64| (1.0 - w) * a + w * b;
    let kappa = lambda.sqrt();
    Ok(ToySpeaker {
        id: t.id.clone(),
        f0: mix(lambda, t.f0, source.f0),
        formants: [0, 1, 2].map(|k| mix(lambda, t.formants[k], source.formants[k])),
        bandwidths: [0, 1, 2].map(|k| mix(kappa, t.bandwidths[k], source.bandwidths[k])),
        tilt: mix(lambda, t.tilt, source.tilt),
    })
}

/// Re-renders the content of a source utterance with the converted voice.
pub fn convert(script: &Script, spec: &ConversionSpec, source: &ToySpeaker, sample_rate_hz: u32) -> Result<AudioBuffer> {
    render(&effective_speaker(source, spec)?, script, sample_rate_hz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub train_speakers: usize,
    pub test_speakers: usize,
    /// VC utterances per source speaker.
    pub utts_per_speaker: usize,
    /// Raw recordings per speaker used as evidence when the speaker is a target.
    pub evidence_per_speaker: usize,
    /// Raw recordings per held-out speaker for enrollment.
    pub enroll_per_speaker: usize,
    pub leakage: f64,
    pub seconds: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_speakers: 16,
            test_speakers: 8,
            utts_per_speaker: 16,
            evidence_per_speaker: 2,
            enroll_per_speaker: 2,
            leakage: 0.3,
            seconds: 3.0,
            sample_rate_hz: 16000,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_speakers < 2 || self.test_speakers < 2 || self.train_speakers + self.test_speakers < 4 {
            return Err(Error::Config("the corpus needs at least 4 speakers, 2 on each side of the split".into()));
        }
        if self.utts_per_speaker == 0 || self.evidence_per_speaker == 0 || self.enroll_per_speaker == 0 {
            return Err(Error::Config("utterance counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return Err(Error::Config(format!("leakage must be in [0, 1], got {}", self.leakage)));
        }
        if !(self.seconds >= 1.0) {
            return Err(Error::Config(format!("utterances must last at least 1 s, got {}", self.seconds)));
        }
        Ok(())
    }
}

/// A generated corpus on disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub speakers: Vec<ToySpeaker>,
    pub train: Manifest,
    pub test: Manifest,
    /// Raw enrollment recordings of the held-out speakers.
    pub enroll: EnrollList,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub enroll_list: PathBuf,
}

pub const SPEAKERS_FILE: &str = "speakers.csv";
pub const TRAIN_MANIFEST: &str = "train.csv";
pub const TEST_MANIFEST: &str = "test.csv";
pub const ENROLL_LIST: &str = "enroll.csv";

fn write_speakers(speakers: &[ToySpeaker], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["speaker_id", "split", "f0", "f1", "f2", "f3", "b1", "b2", "b3", "tilt"])?;
    for s in speakers {
        let split = if s.id.starts_with("train") { "train" } else { "test" };
        let mut rec = vec![s.id.clone(), split.to_string(), format!("{:.3}", s.f0)];
        rec.extend(s.formants.iter().chain(&s.bandwidths).map(|v| format!("{v:.3}")));
        rec.push(format!("{:.3}", s.tilt));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Generates speakers and audio into `out_dir` and writes the train and test manifests and the
/// enrollment list. Train and test speakers are disjoint; each VC row converts a source speaker
/// into a different speaker of the same split, with one of the target's recordings as evidence.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<Corpus> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    let rate = cfg.sample_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut speakers = Vec::new();
    for i in 0..cfg.train_speakers {
        speakers.push(sample_speaker(format!("train{i:02}"), &mut rng));
    }
    for i in 0..cfg.test_speakers {
        speakers.push(sample_speaker(format!("test{i:02}"), &mut rng));
    }
    std::fs::create_dir_all(out)?;
    write_speakers(&speakers, &out.join(SPEAKERS_FILE))?;

    let mut evidence: Vec<Vec<PathBuf>> = Vec::new();
    let mut enroll = EnrollList::default();
    for spk in &speakers {
        let dir = out.join("wav").join(&spk.id);
        std::fs::create_dir_all(&dir)?;
        let mut paths = Vec::new();
        for j in 0..cfg.evidence_per_speaker {
            let path = dir.join(format!("evidence{j:02}.wav"));
            save_wav(&synth_utterance(spk, rng.gen(), cfg.seconds, rate)?, &path)?;
            paths.push(path);
        }
        evidence.push(paths);
        if spk.id.starts_with("test") {
            for j in 0..cfg.enroll_per_speaker {
                let path = dir.join(format!("enroll{j:02}.wav"));
                save_wav(&synth_utterance(spk, rng.gen(), cfg.seconds, rate)?, &path)?;
                enroll.entries.push((spk.id.clone(), path));
            }
        }
    }

    let splits = [(0, cfg.train_speakers), (cfg.train_speakers, cfg.train_speakers + cfg.test_speakers)];
    let mut manifests = [Manifest::default(), Manifest::default()];
    for (manifest, &(lo, hi)) in manifests.iter_mut().zip(&splits) {
        for s in lo..hi {
            let source = &speakers[s];
            let dir = out.join("wav").join(&source.id);
            let others: Vec<usize> = (lo..hi).filter(|&t| t != s).collect();
            for u in 0..cfg.utts_per_speaker {
                let t = *others.choose(&mut rng).expect("at least two speakers per split");
                let target = &speakers[t];
                let script = Script::generate(rng.gen(), cfg.seconds)?;
                let raw_path = dir.join(format!("raw{u:02}.wav"));
                let vc_path = dir.join(format!("vc{u:02}_to_{}.wav", target.id));
                save_wav(&render(source, &script, rate)?, &raw_path)?;
                let spec = ConversionSpec { target: target.clone(), leakage: cfg.leakage };
                save_wav(&convert(&script, &spec, source, rate)?, &vc_path)?;
                let evidence_path = evidence[t].choose(&mut rng).cloned();
                manifest.rows.push(ManifestRow {
                    vc_path,
                    evidence_path,
                    raw_path,
                    source_id: source.id.clone(),
                    target_id: target.id.clone(),
                });
            }
        }
    }
    let [train, test] = manifests;
    let (train_manifest, test_manifest, enroll_list) =
        (out.join(TRAIN_MANIFEST), out.join(TEST_MANIFEST), out.join(ENROLL_LIST));
    train.save(&train_manifest)?;
    test.save(&test_manifest)?;
    enroll.save(&enroll_list)?;
    Ok(Corpus { speakers, train, test, enroll, train_manifest, test_manifest, enroll_list })
}
