//! Log-Mel filterbank ("FBank") front end.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub sample_rate_hz: u32,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win_length: 400,
            hop_length: 160,
            fft_size: 512,
            sample_rate_hz: 16000,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("fbank: {msg}")));
        if self.n_mels < 1 {
            return bad("n_mels must be >= 1");
        }
        if self.win_length == 0 || self.fft_size < self.win_length {
            return bad("fft_size must be >= win_length > 0");
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return bad("hop_length must be in 1..=win_length");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for `len` samples: 1 + floor((len - win) / hop).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.win_length).then(|| 1 + (len - self.win_length) / self.hop_length)
    }
}

/// A channels x frames grid stored row-major (channel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    frames: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || frames == 0 {
            return Err(Error::EmptyFeatureMap);
        }
        if values.len() != channels * frames {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{frames} map",
                values.len()
            )));
        }
        Ok(Self { channels, frames, values })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        Self { channels, frames, values: vec![0.0; channels * frames] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, channel: usize, frame: usize) -> f64 {
        self.values[channel * self.frames + frame]
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.values[channel * self.frames..(channel + 1) * self.frames]
    }

    /// Column `frame` as a vector over channels.
    pub fn frame(&self, frame: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, frame)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos()).collect()
}

/// Squared-magnitude STFT, one channel per DFT bin (0..=fft_size/2).
pub fn stft_power(buf: &AudioBuffer, cfg: &FbankConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let samples = buf.samples();
    let frames = cfg
        .frame_count(samples.len())
        .ok_or(Error::AudioTooShort { len: samples.len(), min: cfg.win_length })?;
    let bins = cfg.n_bins();
    let window = hann(cfg.win_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut frame_buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut values = vec![0.0; bins * frames];
    for t in 0..frames {
        let start = t * cfg.hop_length;
        for (i, slot) in frame_buf.iter_mut().enumerate() {
            *slot = if i < cfg.win_length {
                Complex::new(samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut frame_buf, &mut scratch);
        for k in 0..bins {
            values[k * frames + t] = frame_buf[k].norm_sqr();
        }
    }
    FeatureMap::new(bins, frames, values)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters, equally spaced on the mel scale.
pub fn mel_centers(cfg: &FbankConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &FbankConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate_hz as f64 / 2.0);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular mel filters as an `n_mels x n_bins` map; every triangle has apex 1 at its center.
pub fn mel_matrix(cfg: &FbankConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let edges = mel_edges(cfg);
    let bins = cfg.n_bins();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let mut values = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            values[m * bins + k] = w;
        }
    }
    FeatureMap::new(cfg.n_mels, bins, values)
}

/// Precomputed filterbank with the nonzero span of every filter.
#[derive(Debug, Clone)]
pub struct Fbank {
    cfg: FbankConfig,
    weights: FeatureMap,
    spans: Vec<(usize, usize)>,
}

impl Fbank {
    pub fn new(cfg: FbankConfig) -> Result<Self> {
        let weights = mel_matrix(&cfg)?;
        let spans = (0..cfg.n_mels)
            .map(|m| {
                let row = weights.row(m);
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).map_or(0, |p| p + 1);
                (first, last.max(first))
            })
            .collect();
        Ok(Self { cfg, weights, spans })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    /// ln(max(mel . power, floor)), then the per-channel mean over time is subtracted.
    pub fn compute(&self, buf: &AudioBuffer) -> Result<FeatureMap> {
        let power = stft_power(buf, &self.cfg)?;
        let frames = power.frames();
        let mut values = vec![0.0; self.cfg.n_mels * frames];
        for (m, &(first, last)) in self.spans.iter().enumerate() {
            let row = &mut values[m * frames..(m + 1) * frames];
            for k in first..last {
                let w = self.weights.get(m, k);
                for (out, &p) in row.iter_mut().zip(power.row(k)) {
                    *out += w * p;
                }
            }
            for v in row.iter_mut() {
                *v = v.max(self.cfg.log_floor).ln();
            }
            // offset by the first value so a constant row subtracts to exact zeros
            let first = row[0];
            let mean = first + row.iter().map(|v| v - first).sum::<f64>() / frames as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
        FeatureMap::new(self.cfg.n_mels, frames, values)
    }
}

/// One-shot FBank computation.
pub fn fbank(buf: &AudioBuffer, cfg: &FbankConfig) -> Result<FeatureMap> {
    Fbank::new(cfg.clone())?.compute(buf)
}

const FMAP_MAGIC: &[u8; 4] = b"FMAP";

/// Writes "FMAP", u32 channels, u32 frames, then channels*frames f32 (little-endian, row-major).
pub fn write_fmap(map: &FeatureMap, mut out: impl Write) -> Result<()> {
    out.write_all(FMAP_MAGIC)?;
    out.write_all(&(map.channels as u32).to_le_bytes())?;
    out.write_all(&(map.frames as u32).to_le_bytes())?;
    for &v in &map.values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_fmap(mut input: impl Read) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FMAP_MAGIC {
        return Err(Error::ShapeMismatch("missing FMAP magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let channels = u32::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let frames = u32::from_le_bytes(word) as usize;
    let mut values = Vec::with_capacity(channels * frames);
    for _ in 0..channels * frames {
        input.read_exact(&mut word)?;
        values.push(f32::from_le_bytes(word) as f64);
    }
    FeatureMap::new(channels, frames, values)
}

pub fn save_fmap(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_fmap(map, &mut w)?;
    w.flush()?;
    Ok(())
}
