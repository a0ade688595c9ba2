//! On-disk formats: dataset manifest, hidden-state dumps, alignments and
//! prosody tracks.
//!
//! Binary layouts (all little-endian):
//!
//! ```text
//! feature file:  "LPD1" | u32 L | u32 T | u32 D | L*T*D f32, order [layer][frame][dim]
//! track file:    "LPT1" | u32 T | T f32 f0_hz | T f32 energy
//! ```
//!
//! Alignments are UTF-8 TSV with columns `tier label start_s end_s`, and the
//! manifest is a JSON object stored as `manifest.json` at the dataset root.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const FEATURE_MAGIC: &[u8; 4] = b"LPD1";
const TRACK_MAGIC: &[u8; 4] = b"LPT1";
const FEATURE_HEADER_LEN: usize = 16;
/// Overlap between neighbouring intervals that is put down to rounding in
/// text formats rather than treated as an error.
const OVERLAP_TOL_S: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub utt_id: String,
    pub speaker: String,
    pub accent: String,
    pub num_frames: usize,
    pub feature_path: PathBuf,
    pub alignment_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub frame_hop_s: f64,
    pub num_layers: usize,
    pub dim: usize,
    pub accents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    pub utterances: Vec<UtteranceMeta>,
}

impl Manifest {
    /// Checks every invariant that does not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "manifest format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.frame_hop_s.is_finite() && self.frame_hop_s > 0.0) {
            return Err(Error::invalid(format!(
                "frame_hop_s must be positive, got {}",
                self.frame_hop_s
            )));
        }
        if self.num_layers == 0 || self.dim == 0 {
            return Err(Error::invalid("num_layers and dim must be at least 1"));
        }
        if self.accents.is_empty() {
            return Err(Error::invalid("manifest declares no accents"));
        }
        let mut seen = HashSet::new();
        for utt in &self.utterances {
            if !seen.insert(utt.utt_id.as_str()) {
                return Err(Error::invalid(format!("duplicate utt_id {}", utt.utt_id)));
            }
            if utt.num_frames == 0 {
                return Err(Error::invalid(format!(
                    "{}: num_frames must be >= 1",
                    utt.utt_id
                )));
            }
            if !self.accents.iter().any(|a| a == &utt.accent) {
                return Err(Error::invalid(format!(
                    "{}: accent {} is not in the declared accent list",
                    utt.utt_id, utt.accent
                )));
            }
        }
        Ok(())
    }

    pub fn shape_of(&self, utt: &UtteranceMeta) -> DumpShape {
        DumpShape {
            layers: self.num_layers,
            frames: utt.num_frames,
            dim: self.dim,
        }
    }

    pub fn utterance(&self, utt_id: &str) -> Option<&UtteranceMeta> {
        self.utterances.iter().find(|u| u.utt_id == utt_id)
    }
}

/// Reads and fully validates a manifest. Relative paths are resolved against
/// the manifest's directory; every referenced file must exist and every
/// feature header must agree with the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    manifest.validate()?;
    let root = path.parent().unwrap_or(Path::new("."));
    for utt in &manifest.utterances {
        let feat = root.join(&utt.feature_path);
        let header = read_feature_header(&feat).map_err(|e| match e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Error::invalid(format!(
                    "{}: missing feature file {}",
                    utt.utt_id,
                    feat.display()
                ))
            }
            other => other,
        })?;
        let expected = manifest.shape_of(utt);
        if header != expected {
            return Err(Error::invalid(format!(
                "{}: feature header {:?} disagrees with manifest {:?}",
                utt.utt_id, header, expected
            )));
        }
        let align = root.join(&utt.alignment_path);
        if !align.is_file() {
            return Err(Error::invalid(format!(
                "{}: missing alignment file {}",
                utt.utt_id,
                align.display()
            )));
        }
        if let Some(track) = &utt.track_path {
            let track = root.join(track);
            if !track.is_file() {
                return Err(Error::invalid(format!(
                    "{}: missing track file {}",
                    utt.utt_id,
                    track.display()
                )));
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut text =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpShape {
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
}

impl DumpShape {
    pub fn len(&self) -> usize {
        self.layers * self.frames * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Hidden states of one utterance, `[layer][frame][dim]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    shape: DumpShape,
    data: Vec<f32>,
}

impl FeatureDump {
    pub fn new(shape: DumpShape, data: Vec<f32>) -> Result<Self> {
        if shape.layers == 0 || shape.frames == 0 || shape.dim == 0 {
            return Err(Error::invalid(format!(
                "dump shape {shape:?} has an empty axis"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "dump payload has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a dump by evaluating `f(layer, frame, dim)`.
    pub fn from_fn(
        shape: DumpShape,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for l in 0..shape.layers {
            for t in 0..shape.frames {
                for d in 0..shape.dim {
                    data.push(f(l, t, d));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> DumpShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, layer: usize, frame: usize) -> &[f32] {
        let d = self.shape.dim;
        let start = (layer * self.shape.frames + frame) * d;
        &self.data[start..start + d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [self.shape.layers, self.shape.frames, self.shape.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected: DumpShape, path: &Path) -> Result<Self> {
        let header = parse_feature_header(bytes, path)?;
        if header != expected {
            return Err(Error::format(
                path,
                format!("header {header:?} does not match expected {expected:?}"),
            ));
        }
        let payload = &bytes[FEATURE_HEADER_LEN..];
        let need = 4 * header.len();
        if payload.len() < need {
            return Err(Error::format(
                path,
                format!(
                    "truncated payload: {} bytes, expected {need}",
                    payload.len()
                ),
            ));
        }
        if payload.len() > need {
            return Err(Error::format(
                path,
                format!("{} trailing bytes after payload", payload.len() - need),
            ));
        }
        let data = read_f32s(payload);
        Self::new(header, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_u32(bytes: &[u8]) -> u32 {
    u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
}

fn parse_feature_header(bytes: &[u8], path: &Path) -> Result<DumpShape> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(path, "file shorter than the 16-byte header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic (expected LPD1)"));
    }
    Ok(DumpShape {
        layers: read_u32(&bytes[4..]) as usize,
        frames: read_u32(&bytes[8..]) as usize,
        dim: read_u32(&bytes[12..]) as usize,
    })
}

/// Reads only the 16-byte header of a feature file.
pub fn read_feature_header(path: &Path) -> Result<DumpShape> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; FEATURE_HEADER_LEN];
    let mut got = 0;
    while got < buf.len() {
        let n = file.read(&mut buf[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    parse_feature_header(&buf[..got], path)
}

pub fn read_features(path: &Path, expected: DumpShape) -> Result<FeatureDump> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureDump::from_bytes(&bytes, expected, path)
}

pub fn write_features(dump: &FeatureDump, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&dump.to_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Phone,
    Word,
}

impl Tier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Phone => "phone",
            Tier::Word => "word",
        }
    }
}

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phone" => Ok(Tier::Phone),
            "word" => Ok(Tier::Word),
            other => Err(Error::invalid(format!("unknown tier {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub fn new(label: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            label: label.into(),
            start_s,
            end_s,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Labeled, sorted, non-overlapping intervals of one tier.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTier {
    pub tier: Tier,
    pub segments: Vec<Interval>,
}

impl AlignmentTier {
    pub fn empty(tier: Tier) -> Self {
        Self {
            tier,
            segments: Vec::new(),
        }
    }

    /// Sorts by start time and checks the interval invariants.
    pub fn new(tier: Tier, mut segments: Vec<Interval>) -> Result<Self> {
        for s in &segments {
            if !(s.start_s.is_finite() && s.end_s.is_finite()) || s.start_s < 0.0 {
                return Err(Error::invalid(format!(
                    "{} {:?}: bad interval [{}, {})",
                    tier.as_str(),
                    s.label,
                    s.start_s,
                    s.end_s
                )));
            }
            if s.start_s >= s.end_s {
                return Err(Error::invalid(format!(
                    "{} {:?}: inverted interval [{}, {})",
                    tier.as_str(),
                    s.label,
                    s.start_s,
                    s.end_s
                )));
            }
        }
        segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for w in segments.windows(2) {
            if w[1].start_s < w[0].end_s - OVERLAP_TOL_S {
                return Err(Error::invalid(format!(
                    "{} {:?} [{}, {}) overlaps {:?} [{}, {})",
                    tier.as_str(),
                    w[0].label,
                    w[0].start_s,
                    w[0].end_s,
                    w[1].label,
                    w[1].start_s,
                    w[1].end_s
                )));
            }
        }
        Ok(Self { tier, segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub phone: AlignmentTier,
    pub word: AlignmentTier,
}

pub fn parse_alignment(text: &str, path: &Path) -> Result<Alignment> {
    let mut phones = Vec::new();
    let mut words = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", lineno + 1));
        if fields.len() != 4 {
            return Err(bad(&format!(
                "expected 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let tier: Tier = fields[0].parse().map_err(|_| bad("unknown tier"))?;
        let start: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad("bad start time"))?;
        let end: f64 = fields[3].trim().parse().map_err(|_| bad("bad end time"))?;
        let seg = Interval::new(fields[1], start, end);
        match tier {
            Tier::Phone => phones.push(seg),
            Tier::Word => words.push(seg),
        }
    }
    let wrap = |e: Error| Error::format(path, e.to_string());
    Ok(Alignment {
        phone: AlignmentTier::new(Tier::Phone, phones).map_err(wrap)?,
        word: AlignmentTier::new(Tier::Word, words).map_err(wrap)?,
    })
}

pub fn read_alignment(path: &Path) -> Result<Alignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text, path)
}

pub fn format_alignment(alignment: &Alignment) -> String {
    let mut out = String::from("# tier\tlabel\tstart_s\tend_s\n");
    for tier in [&alignment.phone, &alignment.word] {
        for s in &tier.segments {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                tier.tier.as_str(),
                s.label,
                s.start_s,
                s.end_s
            ));
        }
    }
    out
}

pub fn write_alignment(alignment: &Alignment, path: &Path) -> Result<()> {
    fs::write(path, format_alignment(alignment)).map_err(|e| Error::io(path, e))
}

/// Frame-level pitch and energy. Unvoiced frames carry `f0_hz == 0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTrack {
    pub f0_hz: Vec<f32>,
    pub energy: Vec<f32>,
}

impl ProsodyTrack {
    pub fn new(f0_hz: Vec<f32>, energy: Vec<f32>) -> Result<Self> {
        if f0_hz.len() != energy.len() {
            return Err(Error::invalid(format!(
                "f0 has {} frames but energy has {}",
                f0_hz.len(),
                energy.len()
            )));
        }
        if let Some(i) = f0_hz.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("f0 at frame {i} is {}", f0_hz[i])));
        }
        if let Some(i) = energy.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!(
                "energy at frame {i} is {}",
                energy[i]
            )));
        }
        Ok(Self { f0_hz, energy })
    }

    pub fn num_frames(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.num_frames());
        out.extend_from_slice(TRACK_MAGIC);
        out.extend_from_slice(&(self.num_frames() as u32).to_le_bytes());
        for v in self.f0_hz.iter().chain(&self.energy) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_frames: usize, path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != TRACK_MAGIC {
            return Err(Error::format(path, "bad magic (expected LPT1)"));
        }
        let frames = read_u32(&bytes[4..]) as usize;
        if frames != expected_frames {
            return Err(Error::format(
                path,
                format!("track has {frames} frames, expected {expected_frames}"),
            ));
        }
        let payload = &bytes[8..];
        if payload.len() != 8 * frames {
            return Err(Error::format(
                path,
                format!(
                    "payload is {} bytes, expected {}",
                    payload.len(),
                    8 * frames
                ),
            ));
        }
        let values = read_f32s(payload);
        let (f0, energy) = values.split_at(frames);
        Self::new(f0.to_vec(), energy.to_vec()).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn read_track(path: &Path, expected_frames: usize) -> Result<ProsodyTrack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ProsodyTrack::from_bytes(&bytes, expected_frames, path)
}

pub fn write_track(track: &ProsodyTrack, path: &Path) -> Result<()> {
    fs::write(path, track.to_bytes()).map_err(|e| Error::io(path, e))
}
