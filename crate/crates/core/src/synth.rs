//! Synthetic dataset roots with planted structure.
//!
//! Every utterance gets a frame-aligned phone and word tier, an F0/energy
//! track with per-word emphasis, and a feature dump of Gaussian noise. One
//! layer additionally carries a class vector for the phone under each frame,
//! and another carries a linear function of each word's prosody labels, so
//! the layer-wise analyses have a known right answer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dumpio::{
    format_alignment, write_features, write_manifest, write_track, Alignment, AlignmentTier,
    DumpShape, FeatureDump, Interval, Manifest, ProsodyTrack, Tier, UtteranceMeta, FORMAT_VERSION,
    MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::prosody::{format_labels, label_utterance, ProsodyConfig, WordProsody};
use crate::rng::Stream;

pub const PHONEMES: [&str; 12] = [
    "AA", "AE", "AH", "B", "D", "EH", "IY", "K", "M", "N", "S", "T",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub accents: Vec<String>,
    pub speakers_per_accent: usize,
    pub utterances_per_speaker: usize,
    pub words_per_utterance: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub frame_hop_s: f64,
    /// Layer whose frames carry the phone class vector.
    pub phoneme_layer: Option<usize>,
    /// Layer whose frames carry the word's prominence and boundary labels.
    pub prosody_layer: Option<usize>,
    pub phoneme_signal: f64,
    pub prosody_signal: f64,
    /// Probability that a phone lasts a single frame.
    pub short_phone_rate: f64,
    pub model_tag: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            accents: (1..=7).map(|i| format!("A{i}")).collect(),
            speakers_per_accent: 4,
            utterances_per_speaker: 4,
            words_per_utterance: 10,
            num_layers: 12,
            dim: 24,
            frame_hop_s: 0.02,
            phoneme_layer: Some(7),
            prosody_layer: Some(3),
            phoneme_signal: 1.0,
            prosody_signal: 1.0,
            short_phone_rate: 0.05,
            model_tag: "synthetic".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accents.is_empty()
            || self.speakers_per_accent == 0
            || self.utterances_per_speaker == 0
        {
            return Err(Error::invalid(
                "synthetic dataset needs accents, speakers and utterances",
            ));
        }
        if self.words_per_utterance < 3 || self.num_layers == 0 || self.dim < 2 {
            return Err(Error::invalid(
                "need at least 3 words, 1 layer and 2 dimensions",
            ));
        }
        if !(self.frame_hop_s > 0.0) || !(0.0..1.0).contains(&self.short_phone_rate) {
            return Err(Error::invalid(
                "frame_hop_s must be positive and short_phone_rate in [0, 1)",
            ));
        }
        for layer in [self.phoneme_layer, self.prosody_layer]
            .into_iter()
            .flatten()
        {
            if layer >= self.num_layers {
                return Err(Error::invalid(format!(
                    "planted layer {layer} out of range"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub utterances: usize,
    pub phones: usize,
    /// Phones one frame long; pooling with `min_frames = 2` drops exactly these.
    pub short_phones: usize,
    pub words: usize,
}

/// One generated utterance, before it is written.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub meta: UtteranceMeta,
    pub alignment: Alignment,
    pub track: ProsodyTrack,
    pub labels: Vec<WordProsody>,
    pub dump: FeatureDump,
}

fn unit_vector(rng: &mut Stream, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// Speaker ids in manifest order: `{accent}_s{k}`.
pub fn speakers(config: &SynthConfig) -> Vec<(String, String)> {
    config
        .accents
        .iter()
        .flat_map(|a| {
            (0..config.speakers_per_accent).map(move |k| (format!("{a}_s{k}"), a.clone()))
        })
        .collect()
}

/// Generates one utterance. Everything random comes from streams derived
/// from the seed and the utterance id.
pub fn utterance(
    config: &SynthConfig,
    speaker: &str,
    accent: &str,
    index: usize,
) -> Result<SynthUtterance> {
    let utt_id = format!("{speaker}_u{index}");
    let hop = config.frame_hop_s;
    let mut r = Stream::derived(config.seed, &format!("synth/align/{utt_id}"));

    // Tiers on the frame grid, in frames.
    let mut t = 5usize;
    let mut phones = Vec::new();
    let mut words = Vec::new();
    let mut emphasis = Vec::new();
    for w in 0..config.words_per_utterance {
        if w > 0 && r.uniform() < 0.3 {
            t += 5 + r.below(11);
        }
        let start = t;
        let mut label = String::new();
        for _ in 0..2 + r.below(3) {
            let p = PHONEMES[r.below(PHONEMES.len())];
            let len = if r.uniform() < config.short_phone_rate {
                1
            } else {
                3 + r.below(4)
            };
            phones.push(Interval::new(p, t as f64 * hop, (t + len) as f64 * hop));
            label.push_str(&p.to_lowercase());
            t += len;
        }
        words.push(Interval::new(label, start as f64 * hop, t as f64 * hop));
        emphasis.push(r.uniform().powi(2));
    }
    let frames = t + 5;
    let alignment = Alignment {
        phone: AlignmentTier::new(Tier::Phone, phones)?,
        word: AlignmentTier::new(Tier::Word, words)?,
    };

    let track = {
        let mut r = Stream::derived(config.seed, &format!("synth/track/{utt_id}"));
        let base = 100.0
            + 100.0 * Stream::derived(config.seed, &format!("synth/speaker/{speaker}")).uniform();
        let mut f0 = vec![0.0f32; frames];
        let mut energy: Vec<f32> = (0..frames)
            .map(|_| (0.002 * (1.0 + r.uniform())) as f32)
            .collect();
        for (w, seg) in alignment.word.segments.iter().enumerate() {
            let (a, b) = (
                (seg.start_s / hop).round() as usize,
                (seg.end_s / hop).round() as usize,
            );
            for k in a..b {
                let drift = 1.0 - 0.1 * k as f64 / frames as f64;
                f0[k] =
                    (base * drift * (1.0 + 0.3 * emphasis[w]) * (1.0 + 0.02 * r.normal())) as f32;
                energy[k] = ((0.5 + 1.5 * emphasis[w]) * (1.0 + 0.1 * r.normal()).abs()) as f32;
            }
        }
        ProsodyTrack::new(f0, energy)?
    };
    let labels = label_utterance(
        &track,
        &alignment.word,
        hop,
        &ProsodyConfig::default(),
        &utt_id,
    )?;

    let shape = DumpShape {
        layers: config.num_layers,
        frames,
        dim: config.dim,
    };
    let mut dirs = Stream::derived(config.seed, "synth/directions");
    let class_vectors: Vec<Vec<f64>> = PHONEMES
        .iter()
        .map(|_| unit_vector(&mut dirs, config.dim))
        .collect();
    let (u, v) = (
        unit_vector(&mut dirs, config.dim),
        unit_vector(&mut dirs, config.dim),
    );
    let mut phone_at = vec![None; frames];
    for seg in &alignment.phone.segments {
        let class = PHONEMES
            .iter()
            .position(|p| *p == seg.label)
            .expect("generated label");
        let (a, b) = (
            (seg.start_s / hop).round() as usize,
            (seg.end_s / hop).round() as usize,
        );
        phone_at[a..b].iter_mut().for_each(|c| *c = Some(class));
    }
    let mut word_at = vec![None; frames];
    for (w, seg) in alignment.word.segments.iter().enumerate() {
        let (a, b) = (
            (seg.start_s / hop).round() as usize,
            (seg.end_s / hop).round() as usize,
        );
        word_at[a..b].iter_mut().for_each(|c| *c = Some(w));
    }
    let mut noise = Stream::derived(config.seed, &format!("synth/features/{utt_id}"));
    let dump = FeatureDump::from_fn(shape, |layer, frame, d| {
        let mut x = noise.normal();
        if Some(layer) == config.phoneme_layer {
            if let Some(c) = phone_at[frame] {
                x += config.phoneme_signal * class_vectors[c][d] * (config.dim as f64).sqrt();
            }
        }
        if Some(layer) == config.prosody_layer {
            if let Some(w) = word_at[frame] {
                let l = &labels[w];
                x += config.prosody_signal
                    * (l.prominence * u[d] + l.boundary * v[d])
                    * (config.dim as f64).sqrt();
            }
        }
        x as f32
    })?;

    let meta = UtteranceMeta {
        utt_id: utt_id.clone(),
        speaker: speaker.to_string(),
        accent: accent.to_string(),
        num_frames: frames,
        feature_path: PathBuf::from(format!("feats/{utt_id}.lpd")),
        alignment_path: PathBuf::from(format!("align/{utt_id}.tsv")),
        track_path: Some(PathBuf::from(format!("tracks/{utt_id}.lpt"))),
    };
    Ok(SynthUtterance {
        meta,
        alignment,
        track,
        labels,
        dump,
    })
}

/// Writes a complete dataset root: manifest, feats/, align/, tracks/, and the
/// generating labels as `labels/prosody.tsv`.
pub fn write_dataset(root: &Path, config: &SynthConfig) -> Result<SynthSummary> {
    config.validate()?;
    for sub in ["feats", "align", "tracks", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut summary = SynthSummary::default();
    let mut metas = Vec::new();
    let mut labels = Vec::new();
    for (speaker, accent) in speakers(config) {
        for k in 0..config.utterances_per_speaker {
            let u = utterance(config, &speaker, &accent, k)?;
            write_features(&u.dump, &root.join(&u.meta.feature_path))?;
            let align_path = root.join(&u.meta.alignment_path);
            fs::write(&align_path, format_alignment(&u.alignment))
                .map_err(|e| Error::io(&align_path, e))?;
            write_track(
                &u.track,
                &root.join(u.meta.track_path.as_ref().expect("set above")),
            )?;
            summary.utterances += 1;
            summary.phones += u.alignment.phone.len();
            summary.short_phones += u
                .alignment
                .phone
                .segments
                .iter()
                .filter(|s| (s.duration() / config.frame_hop_s).round() < 2.0)
                .count();
            summary.words += u.alignment.word.len();
            labels.extend(u.labels);
            metas.push(u.meta);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        frame_hop_s: config.frame_hop_s,
        num_layers: config.num_layers,
        dim: config.dim,
        accents: config.accents.clone(),
        model_tag: Some(config.model_tag.clone()),
        checkpoint_hash: None,
        utterances: metas,
    };
    write_manifest(&manifest, &root.join(MANIFEST_FILE))?;
    let path = root.join("labels/prosody.tsv");
    fs::write(&path, format_labels(&labels)).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
