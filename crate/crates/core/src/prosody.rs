//! Word prominence and boundary scores from a wavelet analysis of pitch,
//! energy and duration.
//!
//! The three frame-level signals are put on comparable scales (log F0 with
//! unvoiced gaps bridged, log energy, per-word duration), z-scored and summed
//! with weights. The composite is analysed with a Mexican-hat continuous
//! wavelet transform. Prominence comes from positive responses at word-sized
//! scales inside each word; boundary strength from negative responses at
//! phrase-sized scales around each word's end, including any pause that
//! follows it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::dumpio::{AlignmentTier, ProsodyTrack};
use crate::error::{Error, Result};
use crate::pooling::segment_to_frames;
use crate::table::WordTargets;

/// Kernel half-width in units of the wavelet's sigma.
const SUPPORT_SIGMAS: f64 = 5.0;
/// Energy floor relative to the utterance peak (60 dB) before taking logs.
const ENERGY_FLOOR: f64 = 1e-6;
const MIN_CWT_FRAMES: usize = 8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProsodyConfig {
    /// Weights of (f0, energy, duration); normalized to sum 1 when used.
    pub weights: [f64; 3],
    /// Wavelet scales in seconds, as the Fourier period each row responds to
    /// most strongly (sigma = period * sqrt(2.5) / 2pi).
    pub scales_s: Vec<f64>,
    /// Inclusive scale band (seconds) used for prominence.
    pub prominence_band: [f64; 2],
    /// Inclusive scale band (seconds) used for boundaries.
    pub boundary_band: [f64; 2],
}

impl Default for ProsodyConfig {
    fn default() -> Self {
        Self {
            weights: [1.0 / 3.0; 3],
            scales_s: vec![0.1, 0.2, 0.4, 0.8, 1.6, 3.2],
            prominence_band: [0.2, 0.8],
            boundary_band: [0.8, 3.2],
        }
    }
}

impl ProsodyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(
                "prosody weights must be non-negative with a positive sum",
            ));
        }
        if self.scales_s.len() < 3 || self.scales_s.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("need at least 3 positive wavelet scales"));
        }
        for (name, band) in [
            ("prominence", self.prominence_band),
            ("boundary", self.boundary_band),
        ] {
            if !self.scales_s.iter().any(|s| in_band(*s, band)) {
                return Err(Error::invalid(format!(
                    "{name} band {band:?} contains no scale"
                )));
            }
        }
        Ok(())
    }
}

fn in_band(s: f64, band: [f64; 2]) -> bool {
    s >= band[0] * (1.0 - 1e-9) && s <= band[1] * (1.0 + 1e-9)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSignal {
    pub values: Vec<f64>,
    pub f0_norm: Vec<f64>,
    pub energy_norm: Vec<f64>,
    pub duration_norm: Vec<f64>,
    /// Effective weights after normalization and unvoiced reassignment.
    pub weights: [f64; 3],
}

impl CompositeSignal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Log F0 with unvoiced frames linearly interpolated between voiced
/// neighbours and held at the edges. `None` if no frame is voiced.
pub fn interpolate_log_f0(f0_hz: &[f32]) -> Option<Vec<f64>> {
    let voiced: Vec<usize> = (0..f0_hz.len()).filter(|&i| f0_hz[i] > 0.0).collect();
    let (&first, &last) = (voiced.first()?, voiced.last()?);
    let lf = |i: usize| (f0_hz[i] as f64).ln();
    let mut out = vec![0.0; f0_hz.len()];
    out[..=first].fill(lf(first));
    out[last..].fill(lf(last));
    for w in voiced.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (la, lb) = (lf(a), lf(b));
        for (i, o) in out.iter_mut().enumerate().take(b + 1).skip(a) {
            *o = la + (lb - la) * (i - a) as f64 / (b - a) as f64;
        }
    }
    Some(out)
}

/// Builds the weighted composite of z-scored log F0, log energy and word
/// duration. Frames outside every word take the mean word duration.
pub fn normalize_components(
    track: &ProsodyTrack,
    word_tier: &AlignmentTier,
    hop: f64,
    weights: [f64; 3],
) -> Result<CompositeSignal> {
    let n = track.num_frames();
    if n == 0 {
        return Err(Error::invalid("empty prosody track"));
    }
    let mut w = weights;
    let f0_norm = match interpolate_log_f0(&track.f0_hz) {
        Some(lf0) => zscore(&lf0),
        None => {
            log::warn!("fully unvoiced utterance; F0 weight reassigned to energy and duration");
            w[0] = 0.0;
            vec![0.0; n]
        }
    };
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::invalid("prosody weights sum to zero"));
    }
    w.iter_mut().for_each(|x| *x /= sum);

    let peak = track.energy.iter().fold(0.0f64, |a, &e| a.max(e as f64));
    let floor = (peak * ENERGY_FLOOR).max(f64::MIN_POSITIVE);
    let log_energy: Vec<f64> = track
        .energy
        .iter()
        .map(|&e| (e as f64).max(floor).ln())
        .collect();
    let energy_norm = zscore(&log_energy);

    let mean_dur = if word_tier.is_empty() {
        0.0
    } else {
        word_tier.segments.iter().map(|s| s.duration()).sum::<f64>() / word_tier.len() as f64
    };
    let mut duration = vec![mean_dur; n];
    for s in &word_tier.segments {
        if let Some(r) = segment_to_frames(s.start_s, s.end_s, hop, n) {
            duration[r.first..=r.last].fill(s.duration());
        }
    }
    let duration_norm = zscore(&duration);

    let values = (0..n)
        .map(|i| w[0] * f0_norm[i] + w[1] * energy_norm[i] + w[2] * duration_norm[i])
        .collect();
    Ok(CompositeSignal {
        values,
        f0_norm,
        energy_norm,
        duration_norm,
        weights: w,
    })
}

/// Mexican-hat mother wavelet, unit L2 norm.
pub fn mexican_hat(t: f64) -> f64 {
    let norm = 2.0 / (3.0f64.sqrt() * std::f64::consts::PI.powf(0.25));
    norm * (1.0 - t * t) * (-0.5 * t * t).exp()
}

/// Sampled wavelet at `sigma` frames, scaled by `1/sqrt(sigma)` and shifted
/// to exact zero sum. Index `K` is the center.
pub fn wavelet_kernel(sigma: f64) -> Vec<f64> {
    let half = (SUPPORT_SIGMAS * sigma).ceil().max(1.0) as isize;
    let scale = 1.0 / sigma.sqrt();
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| scale * mexican_hat(i as f64 / sigma))
        .collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    k
}

/// Whole-sample symmetric reflection of an arbitrary index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwtPlane {
    /// Scales in frames (sigma of the wavelet).
    pub sigmas: Vec<f64>,
    /// `coefficients[s][t]`.
    pub coefficients: Vec<Vec<f64>>,
}

impl CwtPlane {
    pub fn num_frames(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }
}

/// Continuous wavelet transform at the given sigmas (in frames), computed by
/// direct convolution with reflected boundaries.
pub fn cwt(signal: &[f64], sigmas: &[f64]) -> Result<CwtPlane> {
    let n = signal.len();
    if n < MIN_CWT_FRAMES {
        return Err(Error::invalid(format!(
            "wavelet analysis needs at least {MIN_CWT_FRAMES} frames, got {n}"
        )));
    }
    if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::invalid("wavelet scales must be positive"));
    }
    let coefficients = sigmas
        .iter()
        .map(|&sigma| {
            let kernel = wavelet_kernel(sigma);
            let half = (kernel.len() / 2) as isize;
            (0..n as isize)
                .map(|t| {
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(j, k)| k * signal[reflect(t + j as isize - half, n)])
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(CwtPlane {
        sigmas: sigmas.to_vec(),
        coefficients,
    })
}

/// Converts configured scales (Fourier periods in seconds) to sigmas in frames.
pub fn scales_to_sigmas(scales_s: &[f64], hop: f64) -> Vec<f64> {
    let k = 2.5f64.sqrt() / std::f64::consts::TAU;
    scales_s.iter().map(|s| s * k / hop).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordProsody {
    pub utt_id: String,
    pub word_index: usize,
    pub word: String,
    pub prominence: f64,
    pub boundary: f64,
}

/// Scores every word of the tier from a wavelet plane computed with
/// `config.scales_s` at frame hop `hop`.
pub fn score_words(
    plane: &CwtPlane,
    word_tier: &AlignmentTier,
    hop: f64,
    config: &ProsodyConfig,
    utt_id: &str,
) -> Result<Vec<WordProsody>> {
    if word_tier.is_empty() {
        return Err(Error::invalid(format!("{utt_id}: word tier is empty")));
    }
    if plane.sigmas.len() != config.scales_s.len() {
        return Err(Error::invalid(
            "plane scales do not match the configuration",
        ));
    }
    let n = plane.num_frames();
    let rows = |band: [f64; 2]| -> Vec<&Vec<f64>> {
        config
            .scales_s
            .iter()
            .zip(&plane.coefficients)
            .filter(|(s, _)| in_band(**s, band))
            .map(|(_, r)| r)
            .collect()
    };
    let prom_rows = rows(config.prominence_band);
    let bound_rows = rows(config.boundary_band);
    let mean_dur =
        word_tier.segments.iter().map(|s| s.duration()).sum::<f64>() / word_tier.len() as f64;
    let half_window = 0.5 * mean_dur;

    let mut out = Vec::with_capacity(word_tier.len());
    for (i, w) in word_tier.segments.iter().enumerate() {
        let prominence = match segment_to_frames(w.start_s, w.end_s, hop, n) {
            Some(r) => prom_rows
                .iter()
                .flat_map(|row| &row[r.first..=r.last])
                .fold(0.0f64, |a, &c| a.max(c)),
            None => {
                log::warn!(
                    "{utt_id}: word {i} ({}) spans no frame, prominence 0",
                    w.label
                );
                0.0
            }
        };
        let lo = (w.end_s - half_window).max(0.0);
        // A pause after the word belongs to its boundary.
        let next_start = word_tier.segments.get(i + 1).map_or(w.end_s, |s| s.start_s);
        let hi = (w.end_s + half_window).max(next_start);
        let boundary = match segment_to_frames(lo, hi, hop, n) {
            Some(r) => bound_rows
                .iter()
                .flat_map(|row| &row[r.first..=r.last])
                .fold(0.0f64, |a, &c| a.max(-c)),
            None => 0.0,
        };
        out.push(WordProsody {
            utt_id: utt_id.to_string(),
            word_index: i,
            word: w.label.clone(),
            prominence,
            boundary,
        });
    }
    Ok(out)
}

/// Full labeling of one utterance: composite, wavelet plane, word scores.
pub fn label_utterance(
    track: &ProsodyTrack,
    word_tier: &AlignmentTier,
    hop: f64,
    config: &ProsodyConfig,
    utt_id: &str,
) -> Result<Vec<WordProsody>> {
    let composite = normalize_components(track, word_tier, hop, config.weights)?;
    let plane = cwt(&composite.values, &scales_to_sigmas(&config.scales_s, hop))?;
    score_words(&plane, word_tier, hop, config, utt_id)
}

pub const LABEL_HEADER: &str = "utt_id\tword_index\tword\tprominence\tboundary";

pub fn format_labels(labels: &[WordProsody]) -> String {
    let mut out = String::from(LABEL_HEADER);
    out.push('\n');
    for l in labels {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            l.utt_id, l.word_index, l.word, l.prominence, l.boundary
        ));
    }
    out
}

/// Parses a label TSV without checking it against any alignment.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<WordProsody>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || line.starts_with("utt_id\t") {
            continue;
        }
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(&format!(
                "expected 5 tab-separated fields, got {}",
                f.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(&format!("bad {what}")))
        };
        out.push(WordProsody {
            utt_id: f[0].to_string(),
            word_index: f[1].trim().parse().map_err(|_| bad("bad word_index"))?,
            word: f[2].to_string(),
            prominence: num(f[3], "prominence")?,
            boundary: num(f[4], "boundary")?,
        });
    }
    Ok(out)
}

/// Reads externally produced labels and checks them against the dataset's
/// word tiers: every utterance must exist, the word count must match, and
/// each word string must equal the aligned word (case-insensitive).
pub fn import_labels(
    path: &Path,
    word_tiers: &BTreeMap<String, AlignmentTier>,
) -> Result<Vec<WordProsody>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels = parse_labels(&text, path)?;
    validate_labels(&labels, word_tiers)?;
    Ok(labels)
}

pub fn validate_labels(
    labels: &[WordProsody],
    word_tiers: &BTreeMap<String, AlignmentTier>,
) -> Result<()> {
    let mut by_utt: BTreeMap<&str, Vec<&WordProsody>> = BTreeMap::new();
    for l in labels {
        by_utt.entry(l.utt_id.as_str()).or_default().push(l);
    }
    for (utt, rows) in &by_utt {
        let tier = word_tiers
            .get(*utt)
            .ok_or_else(|| Error::invalid(format!("labels name unknown utterance {utt}")))?;
        if rows.len() != tier.len() {
            return Err(Error::invalid(format!(
                "{utt}: {} label rows for {} aligned words",
                rows.len(),
                tier.len()
            )));
        }
        let mut seen = vec![false; tier.len()];
        for r in rows {
            let Some(w) = tier.segments.get(r.word_index) else {
                return Err(Error::invalid(format!(
                    "{utt}: word_index {} out of range ({} words)",
                    r.word_index,
                    tier.len()
                )));
            };
            if std::mem::replace(&mut seen[r.word_index], true) {
                return Err(Error::invalid(format!(
                    "{utt}: word_index {} repeated",
                    r.word_index
                )));
            }
            if w.label.to_lowercase() != r.word.to_lowercase() {
                return Err(Error::invalid(format!(
                    "{utt} word {}: label file says {:?}, alignment says {:?}",
                    r.word_index, r.word, w.label
                )));
            }
        }
    }
    Ok(())
}

pub fn to_targets(labels: &[WordProsody]) -> WordTargets {
    labels
        .iter()
        .map(|l| ((l.utt_id.clone(), l.word_index), (l.prominence, l.boundary)))
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Prominence agreement between two label sets over the words they share.
pub fn prominence_agreement(ours: &[WordProsody], theirs: &[WordProsody]) -> Option<(f64, usize)> {
    let index: HashMap<(&str, usize), f64> = theirs
        .iter()
        .map(|l| ((l.utt_id.as_str(), l.word_index), l.prominence))
        .collect();
    let (a, b): (Vec<f64>, Vec<f64>) = ours
        .iter()
        .filter_map(|l| {
            index
                .get(&(l.utt_id.as_str(), l.word_index))
                .map(|t| (l.prominence, *t))
        })
        .unzip();
    spearman(&a, &b).map(|r| (r, a.len()))
}
