//! Mono waveforms, PCM16 WAV I/O, band-limited resampling and fixed-length cropping.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Sample rates the pipeline accepts.
pub const SUPPORTED_RATES: [u32; 3] = [4000, 8000, 16000];

/// Number of taps in the anti-alias / interpolation kernel.
pub const RESAMPLE_TAPS: usize = 64;

/// Kernel cutoff as a fraction of the lower of the two sample rates.
const RESAMPLE_CUTOFF: f64 = 0.45;

/// A mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    pub label: Option<String>,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting unsupported rates and non-finite or out-of-range samples.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        check_rate(sample_rate_hz)?;
        if let Some(pos) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidAudio(format!(
                "sample {pos} = {} is outside [-1, 1]",
                samples[pos]
            )));
        }
        Ok(Self { samples, sample_rate_hz, label: None })
    }

    /// Builds a buffer after clamping every sample into [-1, 1]. Non-finite samples become 0.
    pub fn from_clipped(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|&s| s == 0.0)
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

fn check_rate(rate: u32) -> Result<()> {
    if SUPPORTED_RATES.contains(&rate) {
        Ok(())
    } else {
        Err(Error::UnsupportedRate(rate))
    }
}

/// Number of samples covering `seconds` at `rate`.
pub fn samples_for(seconds: f64, rate: u32) -> usize {
    (seconds * rate as f64).round() as usize
}

/// Reads a mono PCM16 WAV file. Samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = match hound::WavReader::open(path) {
        Ok(r) => r,
        Err(hound::Error::IoError(e)) => return Err(Error::Io(e)),
        Err(hound::Error::Unsupported) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: "unsupported WAVE format tag".into(),
            })
        }
        Err(_) => return Err(Error::NotWav(path.to_path_buf())),
    };
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{:?} with {} bits per sample", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.channels > 1 {
        return Err(Error::MultiChannel { path: path.to_path_buf(), channels: spec.channels });
    }
    let words = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::NotWav(path.to_path_buf()))?;
    if words.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    let samples = words.iter().map(|&w| pcm_to_sample(w)).collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes the buffer as mono PCM16.
pub fn save_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(to_io)?;
    for &s in &buf.samples {
        writer.write_sample(sample_to_pcm(s)).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

pub fn pcm_to_sample(word: i16) -> f64 {
    word as f64 / 32768.0
}

/// round(sample * 32768) clamped to the i16 range.
pub fn sample_to_pcm(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Changes the sample rate by an integer factor (up or down) with a windowed-sinc kernel.
pub fn resample(buf: &AudioBuffer, target_hz: u32) -> Result<AudioBuffer> {
    check_rate(target_hz)?;
    let source_hz = buf.sample_rate_hz;
    if source_hz == target_hz {
        return Ok(buf.clone());
    }
    let (hi, lo) = (source_hz.max(target_hz), source_hz.min(target_hz));
    if hi % lo != 0 {
        return Err(Error::UnsupportedRatio { from: source_hz, to: target_hz });
    }
    let step = source_hz as f64 / target_hz as f64;
    let out_len = (buf.len() as f64 / step).round() as usize;
    let out = resample_by_step(&buf.samples, step, out_len);
    let mut resampled = AudioBuffer::from_clipped(out, target_hz)?;
    resampled.label = buf.label.clone();
    Ok(resampled)
}

/// Plays the buffer `factor` times faster at the same sample rate; length becomes round(len / factor).
pub fn change_speed(buf: &AudioBuffer, factor: f64) -> AudioBuffer {
    if factor == 1.0 {
        return buf.clone();
    }
    let out_len = ((buf.len() as f64 / factor).round() as usize).max(1);
    let out = resample_by_step(&buf.samples, factor, out_len);
    let mut sped = AudioBuffer::from_clipped(out, buf.sample_rate_hz).expect("rate already validated");
    sped.label = buf.label.clone();
    sped
}

/// Evaluates the band-limited signal at positions `m * step` (in input samples).
///
/// The kernel is a Hann-windowed sinc spanning [`RESAMPLE_TAPS`] input samples, with cutoff
/// `0.45 * min(1, 1/step)` cycles per input sample. Weights are normalized to unit DC gain.
fn resample_by_step(input: &[f64], step: f64, out_len: usize) -> Vec<f64> {
    const OVERSAMPLE: usize = 256;
    let half = (RESAMPLE_TAPS / 2) as f64;
    let fc = RESAMPLE_CUTOFF * (1.0f64).min(1.0 / step);
    let table_len = (half + 1.0) as usize * OVERSAMPLE * 2 + 1;
    let center = table_len / 2;
    let table: Vec<f64> = (0..table_len)
        .map(|i| {
            let delta = (i as f64 - center as f64) / OVERSAMPLE as f64;
            windowed_sinc(delta, fc, half + 0.5)
        })
        .collect();
    let kernel = |delta: f64| {
        let pos = delta * OVERSAMPLE as f64 + center as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 >= table.len() {
            return 0.0;
        }
        table[i] * (1.0 - frac) + table[i + 1] * frac
    };

    let n = input.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    let taps = RESAMPLE_TAPS as isize;
    for m in 0..out_len {
        let c = m as f64 * step;
        let first = c.floor() as isize - (taps / 2 - 1);
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for k in 0..taps {
            let idx = first + k;
            let w = kernel(c - idx as f64);
            norm += w;
            if idx >= 0 && idx < n {
                acc += w * input[idx as usize];
            }
        }
        out.push(if norm != 0.0 { acc / norm } else { 0.0 });
    }
    out
}

fn windowed_sinc(delta: f64, fc: f64, half_width: f64) -> f64 {
    if delta.abs() >= half_width {
        return 0.0;
    }
    let x = 2.0 * fc * delta;
    let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
    let window = 0.5 * (1.0 + (PI * delta / half_width).cos());
    2.0 * fc * sinc * window
}

/// How [`trim_or_pad`] chooses the crop offset for long inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimMode {
    RandomTrim,
    HeadTrim,
}

/// Crops or zero-pads (at the tail) to exactly round(seconds * rate) samples.
pub fn trim_or_pad<R: Rng + ?Sized>(
    buf: &AudioBuffer,
    seconds: f64,
    rng: &mut R,
    mode: TrimMode,
) -> AudioBuffer {
    assert!(seconds > 0.0, "trim length must be positive");
    let want = samples_for(seconds, buf.sample_rate_hz);
    let samples = if buf.len() > want {
        let offset = match mode {
            TrimMode::HeadTrim => 0,
            TrimMode::RandomTrim => rng.gen_range(0..=buf.len() - want),
        };
        buf.samples[offset..offset + want].to_vec()
    } else {
        let mut s = buf.samples.clone();
        s.resize(want, 0.0);
        s
    };
    AudioBuffer { samples, sample_rate_hz: buf.sample_rate_hz, label: buf.label.clone() }
}

/// The all-zero placeholder standing in for a missing evidence recording.
pub fn nil_audio(rate: u32, seconds: f64) -> Result<AudioBuffer> {
    check_rate(rate)?;
    Ok(AudioBuffer { samples: vec![0.0; samples_for(seconds, rate)], sample_rate_hz: rate, label: None })
}

/// Mean power of a slice.
pub fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|&s| s * s).sum::<f64>() / samples.len() as f64
}

/// The central `fraction` of a slice (used to ignore filter edge effects).
pub fn central(samples: &[f64], fraction: f64) -> &[f64] {
    let skip = ((1.0 - fraction) / 2.0 * samples.len() as f64).round() as usize;
    &samples[skip..samples.len() - skip]
}
