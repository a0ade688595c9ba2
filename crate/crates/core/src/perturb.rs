//! Speaker-voice perturbation of waveforms.
//!
//! Three transforms run in sequence when a draw is applied: formant scaling
//! by `beta1`, F0 scaling by `beta2`, and a random equalizer. All three work
//! on a short-time Fourier analysis (Hann window, weighted overlap-add) and
//! split each frame's magnitude into a cepstrally smoothed envelope and an
//! excitation. Formant scaling warps the envelope and keeps the excitation;
//! F0 scaling shifts the excitation with a phase vocoder and keeps the
//! envelope.

use std::f64::consts::{PI, TAU};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const MIN_SAMPLES: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    fn check_processable(&self) -> Result<()> {
        if self.samples.len() < MIN_SAMPLES {
            return Err(Error::invalid(format!(
                "waveform has {} samples; at least {MIN_SAMPLES} are needed",
                self.samples.len()
            )));
        }
        Ok(())
    }
}

/// Short-time analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub window_s: f64,
    pub hop_s: f64,
    /// FFT size at 16 kHz; scaled to the nearest power of two for other rates.
    pub nfft: usize,
    /// Number of cepstral coefficients kept for the envelope.
    pub lifter: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window_s: 0.025,
            hop_s: 0.005,
            nfft: 1024,
            lifter: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Analysis {
    pub window: usize,
    pub hop: usize,
    pub nfft: usize,
    pub lifter: usize,
}

impl Analysis {
    pub fn new(config: &AnalysisConfig, sample_rate: u32) -> Result<Self> {
        let sr = sample_rate as f64;
        let window = (config.window_s * sr).round() as usize;
        let hop = (config.hop_s * sr).round() as usize;
        let nfft = if sample_rate == 16_000 {
            config.nfft
        } else {
            ((config.nfft as f64 * sr / 16_000.0).round() as usize).next_power_of_two()
        };
        let lifter = ((config.lifter as f64 * sr / 16_000.0).round() as usize).max(1);
        if window < 16 || hop == 0 || hop > window / 2 {
            return Err(Error::invalid(format!(
                "analysis window {window} and hop {hop} samples are unusable (need window >= 16, hop <= window/2)"
            )));
        }
        if nfft < window || !nfft.is_power_of_two() {
            return Err(Error::invalid(format!(
                "FFT size {nfft} must be a power of two >= window {window}"
            )));
        }
        if lifter >= nfft / 2 {
            return Err(Error::invalid("cepstral lifter must be below nfft/2"));
        }
        Ok(Self {
            window,
            hop,
            nfft,
            lifter,
        })
    }

    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub beta_low: f64,
    pub beta_high: f64,
    pub flip_prob: f64,
    pub apply_threshold: f64,
    pub eq_bands: usize,
    /// Bump gains are drawn from `±eq_gain_db`; the summed curve is clipped to the same range.
    pub eq_gain_db: f64,
    pub eq_min_hz: f64,
    pub eq_max_hz: f64,
    /// Bump width as a standard deviation in octaves.
    pub eq_width_oct: f64,
    pub sample_rate: u32,
    pub analysis: AnalysisConfig,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            beta_low: 1.0,
            beta_high: 1.4,
            flip_prob: 0.5,
            apply_threshold: 0.25,
            eq_bands: 8,
            eq_gain_db: 6.0,
            eq_min_hz: 100.0,
            eq_max_hz: 7000.0,
            eq_width_oct: 0.5,
            sample_rate: 16_000,
            analysis: AnalysisConfig::default(),
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_low >= 1.0 && self.beta_low < self.beta_high && self.beta_high <= 2.0) {
            return Err(Error::invalid(format!(
                "need 1 <= beta_low < beta_high <= 2, got [{}, {}]",
                self.beta_low, self.beta_high
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("apply_threshold", self.apply_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if !(self.eq_gain_db >= 0.0 && self.eq_gain_db.is_finite()) {
            return Err(Error::invalid(
                "eq_gain_db must be a non-negative finite value",
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.eq_min_hz > 0.0 && self.eq_min_hz < self.eq_max_hz && self.eq_max_hz <= nyquist) {
            return Err(Error::invalid(format!(
                "need 0 < eq_min_hz < eq_max_hz <= {nyquist}, got [{}, {}]",
                self.eq_min_hz, self.eq_max_hz
            )));
        }
        if !(self.eq_width_oct > 0.0) {
            return Err(Error::invalid("eq_width_oct must be positive"));
        }
        Analysis::new(&self.analysis, self.sample_rate).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqBump {
    pub center_hz: f64,
    pub gain_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbDraw {
    pub alpha: f64,
    pub applied: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eq_bumps: Vec<EqBump>,
    /// Gain in dB for each analysis bin `0..=nfft/2`.
    pub eq_curve: Vec<f64>,
}

/// Equalizer curve in dB for a set of bumps, clipped to `±range_db`.
pub fn eq_curve(
    bumps: &[EqBump],
    width_oct: f64,
    range_db: f64,
    sample_rate: u32,
    nfft: usize,
) -> Vec<f64> {
    let bin_hz = sample_rate as f64 / nfft as f64;
    (0..=nfft / 2)
        .map(|k| {
            let f = (k as f64 * bin_hz).max(bin_hz);
            let g: f64 = bumps
                .iter()
                .map(|b| {
                    let d = (f / b.center_hz).log2() / width_oct;
                    b.gain_db * (-0.5 * d * d).exp()
                })
                .sum();
            g.clamp(-range_db, range_db)
        })
        .collect()
}

/// Draws one perturbation. The stream is consumed identically whether or
/// not the draw is applied: alpha, beta1 (value, flip), beta2 (value, flip),
/// then a center and gain per equalizer band.
pub fn draw(config: &PerturbConfig, rng: &mut Stream) -> PerturbDraw {
    let alpha = rng.uniform();
    let mut beta = || {
        let b = rng.uniform_in(config.beta_low, config.beta_high);
        if rng.uniform() < config.flip_prob {
            1.0 / b
        } else {
            b
        }
    };
    let beta1 = beta();
    let beta2 = beta();
    let (lo, hi) = (config.eq_min_hz.ln(), config.eq_max_hz.ln());
    let eq_bumps: Vec<EqBump> = (0..config.eq_bands)
        .map(|_| EqBump {
            center_hz: rng.uniform_in(lo, hi).exp(),
            gain_db: rng.uniform_in(-config.eq_gain_db, config.eq_gain_db),
        })
        .collect();
    let nfft = Analysis::new(&config.analysis, config.sample_rate)
        .map(|a| a.nfft)
        .unwrap_or(config.analysis.nfft);
    let curve = eq_curve(
        &eq_bumps,
        config.eq_width_oct,
        config.eq_gain_db,
        config.sample_rate,
        nfft,
    );
    PerturbDraw {
        alpha,
        applied: alpha > config.apply_threshold,
        beta1,
        beta2,
        eq_bumps,
        eq_curve: curve,
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos())
        .collect()
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(nfft: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(nfft),
            inverse: planner.plan_fft_inverse(nfft),
        }
    }
}

/// Short-time analysis, per-frame spectral edit, weighted overlap-add.
/// `edit` sees bins `0..=nfft/2` of each frame. The output has exactly the
/// input's length.
fn stft_process(
    x: &[f64],
    a: Analysis,
    plans: &Plans,
    mut edit: impl FnMut(&mut [Complex64]),
) -> Vec<f64> {
    let n = x.len();
    let pad = a.window;
    let total = n + 2 * pad;
    let mut padded = vec![0.0; total + a.hop];
    padded[pad..pad + n].copy_from_slice(x);
    let win = hann(a.window);
    let frames = (total - a.window) / a.hop + 1;
    let half = a.bins();
    let scale = 1.0 / a.nfft as f64;
    let mut out = vec![0.0; padded.len()];
    let mut norm = vec![0.0; padded.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); a.nfft];
    for m in 0..frames {
        let start = m * a.hop;
        buf.fill(Complex64::new(0.0, 0.0));
        for i in 0..a.window {
            buf[i].re = padded[start + i] * win[i];
        }
        plans.forward.process(&mut buf);
        edit(&mut buf[..half]);
        buf[0].im = 0.0;
        buf[half - 1].im = 0.0;
        for k in 1..half - 1 {
            buf[a.nfft - k] = buf[k].conj();
        }
        plans.inverse.process(&mut buf);
        for i in 0..a.window {
            out[start + i] += buf[i].re * scale * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    (pad..pad + n)
        .map(|i| {
            if norm[i] > 1e-9 {
                out[i] / norm[i]
            } else {
                0.0
            }
        })
        .collect()
}

/// Cepstrally smoothed natural-log magnitude envelope of bins `0..=nfft/2`.
fn log_envelope(
    spec: &[Complex64],
    a: Analysis,
    plans: &Plans,
    scratch: &mut Vec<Complex64>,
) -> Vec<f64> {
    let half = a.bins();
    let peak = spec.iter().fold(0.0f64, |m, c| m.max(c.norm()));
    let floor = (peak * 1e-6).max(1e-300);
    scratch.clear();
    scratch.resize(a.nfft, Complex64::new(0.0, 0.0));
    for k in 0..half {
        let v = spec[k].norm().max(floor).ln();
        scratch[k].re = v;
        if k > 0 && k < half - 1 {
            scratch[a.nfft - k].re = v;
        }
    }
    plans.inverse.process(scratch);
    for (q, c) in scratch.iter_mut().enumerate() {
        let keep = q <= a.lifter || q >= a.nfft - a.lifter;
        *c = if keep {
            Complex64::new(c.re / a.nfft as f64, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    plans.forward.process(scratch);
    scratch[..half].iter().map(|c| c.re).collect()
}

fn interp(v: &[f64], x: f64) -> f64 {
    let last = v.len() - 1;
    if x <= 0.0 {
        return v[0];
    }
    if x >= last as f64 {
        return v[last];
    }
    let i = x.floor() as usize;
    let t = x - i as f64;
    v[i] * (1.0 - t) + v[i + 1] * t
}

fn check_factor(name: &str, beta: f64) -> Result<()> {
    if !(0.5..=2.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "{name} must lie in [0.5, 2], got {beta}"
        )));
    }
    Ok(())
}

/// Warps the spectral envelope along frequency by `beta1`, keeping the
/// harmonic structure and phases.
pub fn scale_formants(wave: &Waveform, beta1: f64, config: &AnalysisConfig) -> Result<Waveform> {
    wave.check_processable()?;
    check_factor("beta1", beta1)?;
    let a = Analysis::new(config, wave.sample_rate)?;
    let plans = Plans::new(a.nfft);
    let mut scratch = Vec::new();
    let samples = stft_process(&wave.samples, a, &plans, |spec| {
        let env = log_envelope(spec, a, &plans, &mut scratch);
        for (k, c) in spec.iter_mut().enumerate() {
            *c *= (interp(&env, k as f64 / beta1) - env[k]).exp();
        }
    });
    Ok(Waveform {
        samples,
        sample_rate: wave.sample_rate,
    })
}

/// True when some 40 ms frame shows a clear periodicity between 60 and 400 Hz.
pub fn has_voicing(wave: &Waveform) -> bool {
    let sr = wave.sample_rate as f64;
    let frame = (0.04 * sr) as usize;
    let (min_lag, max_lag) = ((sr / 400.0) as usize, (sr / 60.0) as usize);
    if frame <= max_lag || wave.len() < frame {
        return false;
    }
    let x = &wave.samples;
    (0..=(x.len() - frame)).step_by(frame / 2).any(|start| {
        let f = &x[start..start + frame];
        let r0: f64 = f.iter().map(|v| v * v).sum();
        if r0 < 1e-10 * frame as f64 {
            return false;
        }
        (min_lag..=max_lag).any(|lag| {
            let r: f64 = f[..frame - lag]
                .iter()
                .zip(&f[lag..])
                .map(|(a, b)| a * b)
                .sum();
            let e: f64 = f[lag..].iter().map(|v| v * v).sum::<f64>().sqrt()
                * f[..frame - lag].iter().map(|v| v * v).sum::<f64>().sqrt();
            e > 0.0 && r / e > 0.6
        })
    })
}

/// Shifts the excitation by `beta2` with a phase vocoder and re-imposes
/// each frame's original envelope. Input without any voiced frame is
/// returned unchanged.
pub fn scale_f0(wave: &Waveform, beta2: f64, config: &AnalysisConfig) -> Result<Waveform> {
    wave.check_processable()?;
    check_factor("beta2", beta2)?;
    let a = Analysis::new(config, wave.sample_rate)?;
    if !has_voicing(wave) {
        log::warn!("no voiced frames found; F0 scaling skipped");
        return Ok(wave.clone());
    }
    let plans = Plans::new(a.nfft);
    let half = a.bins();
    let expected = TAU * a.hop as f64 / a.nfft as f64;
    let mut last_phase = vec![0.0; half];
    let mut sum_phase = vec![0.0; half];
    let mut mag = vec![0.0; half];
    let mut true_bin = vec![0.0; half];
    let mut new_mag = vec![0.0; half];
    let mut new_bin = vec![0.0; half];
    let mut scratch = Vec::new();
    let samples = stft_process(&wave.samples, a, &plans, |spec| {
        let env = log_envelope(spec, a, &plans, &mut scratch);
        for k in 0..half {
            let (m, phase) = spec[k].to_polar();
            let delta = phase - last_phase[k] - k as f64 * expected;
            last_phase[k] = phase;
            let wrapped = delta - TAU * ((delta + PI) / TAU).floor();
            mag[k] = m;
            true_bin[k] = k as f64 + wrapped / expected;
        }
        new_mag.fill(0.0);
        new_bin.fill(0.0);
        for k in 0..half {
            let j = (k as f64 * beta2).round() as usize;
            if j < half {
                new_mag[j] += mag[k] * (env[j] - env[k]).exp();
                new_bin[j] = true_bin[k] * beta2;
            }
        }
        for j in 0..half {
            sum_phase[j] += new_bin[j] * expected;
            spec[j] = Complex64::from_polar(new_mag[j], sum_phase[j]);
        }
    });
    Ok(Waveform {
        samples,
        sample_rate: wave.sample_rate,
    })
}

/// Multiplies each frame's magnitude spectrum by the dB curve.
pub fn apply_eq(wave: &Waveform, curve_db: &[f64], config: &AnalysisConfig) -> Result<Waveform> {
    wave.check_processable()?;
    let a = Analysis::new(config, wave.sample_rate)?;
    if curve_db.len() != a.bins() {
        return Err(Error::invalid(format!(
            "EQ curve has {} bins, analysis has {}",
            curve_db.len(),
            a.bins()
        )));
    }
    let gains: Vec<f64> = curve_db.iter().map(|db| 10f64.powf(db / 20.0)).collect();
    let plans = Plans::new(a.nfft);
    let samples = stft_process(&wave.samples, a, &plans, |spec| {
        for (c, g) in spec.iter_mut().zip(&gains) {
            *c *= *g;
        }
    });
    Ok(Waveform {
        samples,
        sample_rate: wave.sample_rate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub wave: Waveform,
    pub draw: PerturbDraw,
    /// Samples clamped to [-1, 1].
    pub clipped: usize,
}

/// Draws a perturbation and applies it: formants, then F0, then EQ. When the
/// draw is not applied the input is returned untouched.
pub fn perturb_waveform(
    wave: &Waveform,
    config: &PerturbConfig,
    rng: &mut Stream,
) -> Result<Perturbed> {
    config.validate()?;
    if wave.sample_rate != config.sample_rate {
        return Err(Error::invalid(format!(
            "waveform rate {} Hz differs from configured {} Hz",
            wave.sample_rate, config.sample_rate
        )));
    }
    let d = draw(config, rng);
    if !d.applied {
        return Ok(Perturbed {
            wave: wave.clone(),
            draw: d,
            clipped: 0,
        });
    }
    let w = scale_formants(wave, d.beta1, &config.analysis)?;
    let w = scale_f0(&w, d.beta2, &config.analysis)?;
    let mut w = apply_eq(&w, &d.eq_curve, &config.analysis)?;
    let mut clipped = 0;
    for s in &mut w.samples {
        if s.abs() > 1.0 {
            clipped += 1;
            *s = s.clamp(-1.0, 1.0);
        }
    }
    if clipped > 0 {
        log::warn!("{clipped} samples clipped after perturbation");
    }
    Ok(Perturbed {
        wave: w,
        draw: d,
        clipped,
    })
}

/// Reads a mono WAV file (16-bit PCM or 32-bit float).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("{} channels; only mono is supported", spec.channels),
        ));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (f, b) => {
            return Err(Error::format(
                path,
                format!("unsupported sample format {f:?} {b}-bit"),
            ))
        }
    }
    .map_err(|e| wav_err(path, e))?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes 16-bit PCM mono.
pub fn write_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub const SIDECAR_HEADER: &str = "file\talpha\tapplied\tbeta1\tbeta2\tclipped\teq_bumps";

/// One sidecar line; bumps are `center_hz:gain_db` joined by `;`.
pub fn sidecar_line(file: &str, p: &Perturbed) -> String {
    let bumps: Vec<String> = p
        .draw
        .eq_bumps
        .iter()
        .map(|b| format!("{:.3}:{:.4}", b.center_hz, b.gain_db))
        .collect();
    format!(
        "{file}\t{}\t{}\t{}\t{}\t{}\t{}",
        p.draw.alpha,
        p.draw.applied,
        p.draw.beta1,
        p.draw.beta2,
        p.clipped,
        bumps.join(";")
    )
}

pub fn write_sidecar(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(SIDECAR_HEADER);
    text.push('\n');
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
