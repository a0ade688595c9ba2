//! Segment pooling: maps aligned intervals onto feature frames and averages
//! the frames of each segment into one vector.
//!
//! A frame `i` covers `[i*hop, (i+1)*hop)` and belongs to a segment when its
//! center `i*hop + hop/2` lies in `[start_s, end_s)`. Phone segments are
//! averaged over their central third, word segments over all their frames.

use std::collections::BTreeMap;

use crate::dumpio::{AlignmentTier, FeatureDump, Tier, UtteranceMeta};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Tolerance, in frames, when comparing a frame center against an interval edge.
const EDGE_EPS: f64 = 1e-9;

/// Inclusive range of frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRange {
    pub first: usize,
    pub last: usize,
}

impl FrameRange {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, other: &FrameRange) -> bool {
        self.first <= other.first && other.last <= self.last
    }
}

/// Frames whose centers fall in `[start_s, end_s)`, clamped to the dump.
/// `None` when no frame center lies in the interval.
pub fn segment_to_frames(
    start_s: f64,
    end_s: f64,
    hop: f64,
    num_frames: usize,
) -> Option<FrameRange> {
    if num_frames == 0 || !(end_s > start_s) || !(hop > 0.0) {
        return None;
    }
    // smallest i with (i + 0.5) * hop >= start_s
    let first = (start_s / hop - 0.5 - EDGE_EPS).ceil().max(0.0);
    // largest i with (i + 0.5) * hop < end_s
    let last = (end_s / hop - 0.5 - EDGE_EPS).ceil() - 1.0;
    if last < first || last < 0.0 {
        return None;
    }
    let first = first as usize;
    let last = (last as usize).min(num_frames - 1);
    (first <= last).then_some(FrameRange { first, last })
}

/// Middle third of a range: offsets `floor(n/3) ..= ceil(2n/3) - 1`.
pub fn central_third(range: FrameRange) -> Result<FrameRange> {
    let n = range.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "central third needs at least 2 frames, got {n}"
        )));
    }
    Ok(FrameRange {
        first: range.first + n / 3,
        last: range.first + (2 * n).div_ceil(3) - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub per_phoneme_per_speaker: usize,
    pub min_frames: usize,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            per_phoneme_per_speaker: 100,
            min_frames: 2,
            seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.per_phoneme_per_speaker == 0 || self.min_frames == 0 {
            return Err(Error::invalid(
                "sampling quota and min_frames must both be at least 1",
            ));
        }
        Ok(())
    }
}

/// One aligned segment resolved to frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    pub utt_id: String,
    pub tier: Tier,
    /// Position of the interval within its tier.
    pub index: usize,
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
    pub frame_range: FrameRange,
    pub pooled_range: FrameRange,
}

/// A segment together with the speaker metadata sampling and tables need.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub spec: SegmentSpec,
    pub speaker: String,
    pub accent: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecOutcome {
    pub specs: Vec<SegmentSpec>,
    /// Intervals dropped: too few frames, or no frame at all.
    pub discarded: usize,
}

/// Resolves the phone tier of one utterance, dropping segments with fewer
/// than `policy.min_frames` frames.
pub fn phone_segment_specs(
    tier: &AlignmentTier,
    hop: f64,
    num_frames: usize,
    policy: &SamplingPolicy,
    utt_id: &str,
) -> SpecOutcome {
    let mut out = SpecOutcome::default();
    for (index, seg) in tier.segments.iter().enumerate() {
        let Some(range) = segment_to_frames(seg.start_s, seg.end_s, hop, num_frames) else {
            out.discarded += 1;
            continue;
        };
        if range.len() < policy.min_frames {
            out.discarded += 1;
            continue;
        }
        let pooled = if range.len() >= 2 {
            central_third(range).expect("length checked")
        } else {
            range
        };
        out.specs.push(SegmentSpec {
            utt_id: utt_id.to_string(),
            tier: Tier::Phone,
            index,
            label: seg.label.clone(),
            start_s: seg.start_s,
            end_s: seg.end_s,
            frame_range: range,
            pooled_range: pooled,
        });
    }
    out
}

/// Resolves the word tier; words that cover no frame center are dropped.
pub fn word_segment_specs(
    tier: &AlignmentTier,
    hop: f64,
    num_frames: usize,
    utt_id: &str,
) -> SpecOutcome {
    let mut out = SpecOutcome::default();
    for (index, seg) in tier.segments.iter().enumerate() {
        match segment_to_frames(seg.start_s, seg.end_s, hop, num_frames) {
            Some(range) => out.specs.push(SegmentSpec {
                utt_id: utt_id.to_string(),
                tier: Tier::Word,
                index,
                label: seg.label.clone(),
                start_s: seg.start_s,
                end_s: seg.end_s,
                frame_range: range,
                pooled_range: range,
            }),
            None => out.discarded += 1,
        }
    }
    if out.discarded > 0 {
        log::warn!(
            "{utt_id}: {} word(s) cover no frame and were skipped",
            out.discarded
        );
    }
    out
}

/// Mean of one layer's frames over an inclusive range, accumulated in f64.
pub fn pool_range(dump: &FeatureDump, layer: usize, range: FrameRange) -> Result<Vec<f64>> {
    let shape = dump.shape();
    if layer >= shape.layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range (dump has {})",
            shape.layers
        )));
    }
    if range.last >= shape.frames {
        return Err(Error::invalid(format!(
            "frame {} out of range (dump has {})",
            range.last, shape.frames
        )));
    }
    let mut acc = vec![0.0f64; shape.dim];
    for t in range.first..=range.last {
        for (a, &v) in acc.iter_mut().zip(dump.frame(layer, t)) {
            *a += v as f64;
        }
    }
    let n = range.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[derive(Debug, Clone, Default)]
pub struct Pooled {
    pub segments: Vec<(SegmentSpec, Vec<f64>)>,
    pub discarded: usize,
}

fn pool_specs(dump: &FeatureDump, layer: usize, outcome: SpecOutcome) -> Result<Pooled> {
    let segments = outcome
        .specs
        .into_iter()
        .map(|spec| {
            let v = pool_range(dump, layer, spec.pooled_range)?;
            Ok((spec, v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pooled {
        segments,
        discarded: outcome.discarded,
    })
}

fn check_layer(dump: &FeatureDump, layer: usize) -> Result<()> {
    if layer >= dump.shape().layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range (dump has {})",
            dump.shape().layers
        )));
    }
    Ok(())
}

/// Central-third mean pooling of every phone segment with enough frames.
pub fn pool_phoneme_segments(
    dump: &FeatureDump,
    phone_tier: &AlignmentTier,
    policy: &SamplingPolicy,
    layer: usize,
    meta: &UtteranceMeta,
    hop: f64,
) -> Result<Pooled> {
    check_layer(dump, layer)?;
    let outcome = phone_segment_specs(phone_tier, hop, dump.shape().frames, policy, &meta.utt_id);
    pool_specs(dump, layer, outcome)
}

/// Whole-interval mean pooling of every word.
pub fn pool_word_segments(
    dump: &FeatureDump,
    word_tier: &AlignmentTier,
    layer: usize,
    meta: &UtteranceMeta,
    hop: f64,
) -> Result<Pooled> {
    check_layer(dump, layer)?;
    let outcome = word_segment_specs(word_tier, hop, dump.shape().frames, &meta.utt_id);
    pool_specs(dump, layer, outcome)
}

fn record_order(a: &SegmentRecord, b: &SegmentRecord) -> std::cmp::Ordering {
    a.speaker
        .cmp(&b.speaker)
        .then_with(|| a.spec.label.cmp(&b.spec.label))
        .then_with(|| a.spec.utt_id.cmp(&b.spec.utt_id))
        .then_with(|| a.spec.start_s.total_cmp(&b.spec.start_s))
}

/// Keeps at most `per_phoneme_per_speaker` segments of every
/// (phoneme, speaker) group, chosen uniformly without replacement.
///
/// Groups are visited in (speaker, phoneme) order and their members are put
/// in (utt_id, start_s) order before a partial Fisher-Yates pass consumes the
/// seeded stream, so the result depends only on the set of inputs and the
/// seed. Output is sorted by (speaker, phoneme, utt_id, start_s).
pub fn sample_segments(records: Vec<SegmentRecord>, policy: &SamplingPolicy) -> Vec<SegmentRecord> {
    let mut groups: BTreeMap<(String, String), Vec<SegmentRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.speaker.clone(), r.spec.label.clone()))
            .or_default()
            .push(r);
    }
    let mut rng = Stream::new(policy.seed);
    let mut out = Vec::new();
    for (_, mut members) in groups {
        members.sort_by(record_order);
        if members.len() <= policy.per_phoneme_per_speaker {
            out.extend(members);
            continue;
        }
        let picked = rng.choose_indices(members.len(), policy.per_phoneme_per_speaker);
        let mut keep = vec![false; members.len()];
        for i in picked {
            keep[i] = true;
        }
        out.extend(
            members
                .into_iter()
                .zip(keep)
                .filter_map(|(m, k)| k.then_some(m)),
        );
    }
    out.sort_by(record_order);
    out
}
