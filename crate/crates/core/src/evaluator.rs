//! Verification, identification, equal error rate, top-k accuracy and DET export.

use std::collections::BTreeMap;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::embedder::{cosine_similarity, Voiceprint};
use crate::error::{Error, Result};
use crate::model::Embedder;

/// Enrolled speakers: the length-normalized mean voiceprint of each speaker's recordings.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPool {
    pub entries: BTreeMap<String, Voiceprint>,
}

impl SpeakerPool {
    /// Averages each speaker's voiceprints, then normalizes to unit length.
    pub fn from_voiceprints(voiceprints: &BTreeMap<String, Vec<Voiceprint>>) -> Result<Self> {
        if voiceprints.is_empty() {
            return Err(Error::EmptyEnrollment("<pool>".into()));
        }
        let mut entries = BTreeMap::new();
        for (id, vps) in voiceprints {
            let first = vps.first().ok_or_else(|| Error::EmptyEnrollment(id.clone()))?;
            let mut mean = vec![0.0; first.len()];
            for vp in vps {
                if vp.len() != mean.len() {
                    return Err(Error::ShapeMismatch(format!("voiceprints of speaker {id} differ in length")));
                }
                mean.iter_mut().zip(vp.values()).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= vps.len() as f64);
            entries.insert(id.clone(), Voiceprint(mean).normalized()?);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with one `speaker_id,v0,v1,...` row per speaker; values round-trip exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let dim = self.entries.values().next().map_or(0, Voiceprint::len);
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = std::iter::once("speaker_id".to_string()).chain((0..dim).map(|i| format!("v{i}"))).collect();
        w.write_record(&header)?;
        for (id, vp) in &self.entries {
            w.write_record(std::iter::once(id.clone()).chain(vp.values().iter().map(|v| v.to_string())))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut reader = csv::Reader::from_path(path)?;
        let dim = reader.headers()?.len().saturating_sub(1);
        let mut entries = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let values = record
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Manifest(format!("{}: bad value {v:?}", path.display()))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim || dim == 0 {
                return Err(Error::Manifest(format!("{}: expected {dim} values per speaker", path.display())));
            }
            entries.insert(record[0].to_string(), Voiceprint(values));
        }
        if entries.is_empty() {
            return Err(Error::EmptyEnrollment("<pool>".into()));
        }
        Ok(Self { entries })
    }
}

/// Enrolls every speaker from raw recordings through the plain path (nil evidence).
pub fn enroll(audios: &BTreeMap<String, Vec<AudioBuffer>>, model: &Embedder) -> Result<SpeakerPool> {
    let mut vps = BTreeMap::new();
    for (id, bufs) in audios {
        if bufs.is_empty() {
            return Err(Error::EmptyEnrollment(id.clone()));
        }
        let prints = bufs.iter().map(|b| model.voiceprint(b, None)).collect::<Result<Vec<_>>>()?;
        vps.insert(id.clone(), prints);
    }
    SpeakerPool::from_voiceprints(&vps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub matched: bool,
    pub score: f64,
}

/// The threshold rule: matched iff the score reaches `threshold`.
pub fn decide(score: f64, threshold: f64) -> Verification {
    Verification { matched: score >= threshold, score }
}

pub fn verify(
    x: &AudioBuffer,
    evidence: Option<&AudioBuffer>,
    enrolled: &Voiceprint,
    threshold: f64,
    model: &Embedder,
) -> Result<Verification> {
    let vp = model.voiceprint(x, evidence)?;
    Ok(decide(cosine_similarity(&vp, enrolled)?, threshold))
}

/// Pool scores in descending order; equal scores are ordered by speaker id.
pub fn rank(vp: &Voiceprint, pool: &SpeakerPool) -> Result<Vec<(String, f64)>> {
    let mut scores = pool
        .entries
        .iter()
        .map(|(id, e)| Ok((id.clone(), cosine_similarity(vp, e)?)))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scores)
}

pub fn identify(
    x: &AudioBuffer,
    evidence: Option<&AudioBuffer>,
    pool: &SpeakerPool,
    model: &Embedder,
) -> Result<Vec<(String, f64)>> {
    rank(&model.voiceprint(x, evidence)?, pool)
}

/// Scored verification trials: `(score, same_speaker)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<(f64, bool)>,
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl TrialSet {
    pub fn counts(&self) -> (usize, usize) {
        let pos = self.trials.iter().filter(|t| t.1).count();
        (pos, self.trials.len() - pos)
    }

    /// Thresholds at -inf, every distinct score in increasing order, and +inf, with the number of
    /// negatives scoring at or above and positives scoring below each.
    pub fn sweep(&self) -> Vec<SweepPoint> {
        let (pos, neg) = self.counts();
        let mut sorted: Vec<(f64, bool)> = self.trials.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut points = vec![SweepPoint { threshold: f64::NEG_INFINITY, false_positives: neg, false_negatives: 0 }];
        let (mut fp, mut fneg) = (neg, 0);
        let mut i = 0;
        while i < sorted.len() {
            let t = sorted[i].0;
            points.push(SweepPoint { threshold: t, false_positives: fp, false_negatives: fneg });
            while i < sorted.len() && sorted[i].0 == t {
                if sorted[i].1 {
                    fneg += 1;
                } else {
                    fp -= 1;
                }
                i += 1;
            }
        }
        points.push(SweepPoint { threshold: f64::INFINITY, false_positives: 0, false_negatives: pos });
        points
    }
}

/// Equal error rate and its threshold.
///
/// FPR(t) is the share of negatives scoring >= t and FNR(t) the share of positives below t. Over
/// the sweep, FPR - FNR falls from 1 to -1; where it hits 0 the common value is the EER, otherwise
/// both rates are interpolated linearly between the two sweep points around the sign change.
pub fn compute_eer(trials: &TrialSet) -> Result<(f64, f64)> {
    let (pos, neg) = trials.counts();
    if pos == 0 || neg == 0 || trials.trials.iter().any(|t| !t.0.is_finite()) {
        return Err(Error::DegenerateTrials);
    }
    let points = trials.sweep();
    let (p, n) = (pos as i128, neg as i128);
    // FPR - FNR scaled by pos * neg, exact in integers
    let diff = |s: &SweepPoint| s.false_positives as i128 * p - s.false_negatives as i128 * n;
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (da, db) = (diff(a), diff(b));
        if da == 0 {
            return Ok((a.false_positives as f64 / neg as f64, a.threshold));
        }
        if da > 0 && db <= 0 {
            if db == 0 {
                return Ok((b.false_positives as f64 / neg as f64, b.threshold));
            }
            // crossing of two straight lines, with rates a_fp / neg and a_fn / pos
            let drop_fp = (a.false_positives - b.false_positives) as i128;
            let rise_fn = (b.false_negatives - a.false_negatives) as i128;
            let num = a.false_positives as i128 * rise_fn + drop_fp * a.false_negatives as i128;
            let den = rise_fn * n + drop_fp * p;
            let eer = num as f64 / den as f64;
            let alpha = da as f64 / (da - db) as f64;
            let threshold = match (a.threshold.is_finite(), b.threshold.is_finite()) {
                (true, true) => a.threshold + alpha * (b.threshold - a.threshold),
                (true, false) => a.threshold,
                (false, _) => b.threshold,
            };
            return Ok((eer, threshold));
        }
    }
    unreachable!("FPR - FNR goes from positive to negative over the sweep")
}

/// Share of probes whose true speaker is among the first `k` ranked ids.
pub fn topk_accuracy(results: &[(Vec<(String, f64)>, String)], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results.iter().filter(|(ranked, truth)| ranked.iter().take(k).any(|(id, _)| id == truth)).count();
    hits as f64 / results.len() as f64
}

fn fmt_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{t}")
    }
}

fn write_cdf(scores: &mut [f64], path: &Path) -> Result<()> {
    scores.sort_by(f64::total_cmp);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["score", "cdf"])?;
    let n = scores.len() as f64;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([format!("{s}"), format!("{}", (i + 1) as f64 / n)])?;
    }
    w.flush()?;
    Ok(())
}

pub const DET_FILE: &str = "det.csv";
pub const CDF_SAME_FILE: &str = "cdf_same.csv";
pub const CDF_DIFF_FILE: &str = "cdf_diff.csv";

/// Writes `det.csv` (`threshold,fpr,fnr` over the sweep) and the empirical score CDFs of same- and
/// different-speaker trials into `dir`.
pub fn export_det(trials: &TrialSet, dir: impl AsRef<Path>) -> Result<()> {
    let (pos, neg) = trials.counts();
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateTrials);
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(DET_FILE))?;
    w.write_record(["threshold", "fpr", "fnr"])?;
    for p in trials.sweep() {
        w.write_record([
            fmt_threshold(p.threshold),
            format!("{}", p.false_positives as f64 / neg as f64),
            format!("{}", p.false_negatives as f64 / pos as f64),
        ])?;
    }
    w.flush()?;
    let mut same: Vec<f64> = trials.trials.iter().filter(|t| t.1).map(|t| t.0).collect();
    let mut diff: Vec<f64> = trials.trials.iter().filter(|t| !t.1).map(|t| t.0).collect();
    write_cdf(&mut same, &dir.join(CDF_SAME_FILE))?;
    write_cdf(&mut diff, &dir.join(CDF_DIFF_FILE))
}
