//! Telephony channel simulation: G.711 companding and rate subsampling.

use std::fmt;
use std::str::FromStr;

use crate::audio::{pcm_to_sample, resample, sample_to_pcm, AudioBuffer};
use crate::error::{Error, Result};

/// G.711 μ-law encoder (ITU-T G.191 reference arithmetic).
///
/// The input is reduced to the 14-bit range, biased by 33 and split into a 3-bit segment and a
/// 4-bit mantissa. Negative inputs use the ones' complement magnitude. The code is inverted.
pub fn mulaw_encode(pcm: i16) -> u8 {
    let (magnitude, mask) = if pcm < 0 {
        (((!pcm) >> 2) as i32, 0x7F)
    } else {
        ((pcm >> 2) as i32, 0xFF)
    };
    let biased = (magnitude + 33).min(0x1FFF);
    // Segment s covers biased magnitudes [32 << s, 64 << s).
    let mut segment = 0;
    while biased >= (64 << segment) {
        segment += 1;
    }
    let mantissa = (biased >> (segment + 1)) & 0x0F;
    (((segment << 4) | mantissa) ^ mask) as u8
}

/// G.711 μ-law decoder. Both zero codes (0x7F and 0xFF) map to 0.
pub fn mulaw_decode(code: u8) -> i16 {
    let inverted = !code;
    let negative = inverted & 0x80 != 0;
    let segment = ((inverted >> 4) & 0x07) as i32;
    let mantissa = (inverted & 0x0F) as i32;
    let step = 4 << (segment + 1);
    let magnitude = (0x80 << segment) + step * mantissa + step / 2 - 4 * 33;
    (if negative { -magnitude } else { magnitude }) as i16
}

/// G.711 A-law encoder (ITU-T G.191 reference arithmetic).
///
/// Works on the 12-bit ones' complement magnitude: segment 0 keeps 4 mantissa bits directly,
/// higher segments drop the leading one. The sign bit is set for non-negative input and the
/// code is XORed with 0x55.
pub fn alaw_encode(pcm: i16) -> u8 {
    let mut magnitude = if pcm < 0 { (!pcm) >> 4 } else { pcm >> 4 } as i32;
    if magnitude > 15 {
        let mut exponent = 1;
        while magnitude > 16 + 15 {
            magnitude >>= 1;
            exponent += 1;
        }
        magnitude = (magnitude - 16) + (exponent << 4);
    }
    if pcm >= 0 {
        magnitude |= 0x80;
    }
    (magnitude ^ 0x55) as u8
}

/// G.711 A-law decoder.
pub fn alaw_decode(code: u8) -> i16 {
    let unmasked = ((code ^ 0x55) & 0x7F) as i32;
    let exponent = unmasked >> 4;
    let mut mantissa = unmasked & 0x0F;
    if exponent > 0 {
        mantissa += 16;
    }
    mantissa = (mantissa << 4) + 0x08;
    if exponent > 1 {
        mantissa <<= exponent - 1;
    }
    (if code > 127 { mantissa } else { -mantissa }) as i16
}

/// Channel degradations used by the robustness protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecKind {
    MuLaw,
    ALaw,
    Subsample8k,
    Subsample4k,
    Identity,
}

impl CodecKind {
    pub const ALL: [CodecKind; 5] =
        [CodecKind::Identity, CodecKind::MuLaw, CodecKind::ALaw, CodecKind::Subsample8k, CodecKind::Subsample4k];

    pub fn name(self) -> &'static str {
        match self {
            CodecKind::MuLaw => "mulaw",
            CodecKind::ALaw => "alaw",
            CodecKind::Subsample8k => "sub8k",
            CodecKind::Subsample4k => "sub4k",
            CodecKind::Identity => "identity",
        }
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CodecKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown channel kind {s:?}")))
    }
}

/// Passes a 16 kHz buffer through the channel and returns it at 16 kHz.
///
/// Codecs run at 8 kHz: the buffer is downsampled, each sample is quantized to PCM16 and
/// companded, then the result is upsampled back.
pub fn apply_channel(buf: &AudioBuffer, kind: CodecKind) -> Result<AudioBuffer> {
    let rate = buf.sample_rate_hz();
    let through_codec = |codec: fn(i16) -> i16| -> Result<AudioBuffer> {
        let narrow = resample(buf, 8000)?;
        let coded: Vec<f64> =
            narrow.samples().iter().map(|&s| pcm_to_sample(codec(sample_to_pcm(s)))).collect();
        let coded = AudioBuffer::from_clipped(coded, 8000)?;
        let mut out = resample(&coded, rate)?;
        out.label = buf.label.clone();
        Ok(out)
    };
    let round_trip = |via: u32| -> Result<AudioBuffer> { resample(&resample(buf, via)?, rate) };
    match kind {
        CodecKind::Identity => Ok(buf.clone()),
        CodecKind::MuLaw => through_codec(|x| mulaw_decode(mulaw_encode(x))),
        CodecKind::ALaw => through_codec(|x| alaw_decode(alaw_encode(x))),
        CodecKind::Subsample8k => round_trip(8000),
        CodecKind::Subsample4k => round_trip(4000),
    }
}

/// Encoder output for every PCM16 input, indexed by `pcm + 32768`.
pub fn encode_table(encode: fn(i16) -> u8) -> Vec<u8> {
    (i16::MIN..=i16::MAX).map(encode).collect()
}
