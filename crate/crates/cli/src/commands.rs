//! Subcommands over a dataset root. Each one writes its outputs, echoes the
//! effective configuration into a `.meta.json` sidecar next to every report,
//! and returns a JSON run summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use layerprobe::cca::{cca_protocol, CcaResult};
use layerprobe::dumpio::{
    read_alignment, read_features, read_manifest, read_track, Alignment, AlignmentTier, Manifest,
    UtteranceMeta, MANIFEST_FILE,
};
use layerprobe::embed::{embed_phoneme, export_points};
use layerprobe::perturb::{perturb_waveform, read_wav, sidecar_line, write_sidecar, write_wav};
use layerprobe::pooling::{
    phone_segment_specs, pool_range, sample_segments, word_segment_specs, SegmentRecord,
};
use layerprobe::probes::{grouped_cv, FoldAssignment, ProbeResult};
use layerprobe::prosody::{
    format_labels, import_labels, label_utterance, parse_labels, prominence_agreement, to_targets,
    validate_labels, WordProsody,
};
use layerprobe::rng::Stream;
use layerprobe::synth::write_dataset;
use layerprobe::table::{build_segment_table, SegmentTable, Target, WordTargets};
use layerprobe::{Error, Result};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Label file consumed by `pool` as word targets.
pub const LABELS_FILE: &str = "labels/prosody.tsv";
/// Soft agreement threshold between built-in and imported prominence.
pub const SPEARMAN_TARGET: f64 = 0.7;

pub struct Ctx {
    pub config: RunConfig,
    pub no_overwrite: bool,
}

impl Ctx {
    pub fn new(config: RunConfig, no_overwrite: bool) -> Self {
        Self {
            config,
            no_overwrite,
        }
    }

    fn root(&self) -> &Path {
        self.config.root()
    }

    fn check_target(&self, path: &Path) -> Result<()> {
        if self.no_overwrite && path.exists() {
            return Err(Error::invalid(format!(
                "{} exists and --no-overwrite is set",
                path.display()
            )));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }

    fn write(&self, path: &Path, contents: &[u8]) -> Result<()> {
        self.check_target(path)?;
        fs::write(path, contents).map_err(|e| Error::io(path, e))
    }

    /// `reports/cca.csv` gets `reports/cca.meta.json`.
    fn write_meta(&self, report: &Path, command: &str, extra: Value) -> Result<()> {
        let meta = json!({
            "command": command,
            "version": VERSION,
            "seed": self.config.seed,
            "config": self.config.echo(),
            "details": extra,
        });
        let path = report.with_extension("meta.json");
        let mut text = serde_json::to_string_pretty(&meta).expect("json");
        text.push('\n');
        self.write(&path, text.as_bytes())
    }

    fn summary(&self, command: &str, counts: Value) -> Value {
        json!({
            "command": command,
            "version": VERSION,
            "seed": self.config.seed,
            "dataset_root": self.root(),
            "counts": counts,
        })
    }
}

pub fn table_path(root: &Path, tier: &str, layer: usize) -> PathBuf {
    root.join(format!("tables/{tier}_L{layer:02}.csv"))
}

fn manifest(root: &Path) -> Result<Manifest> {
    read_manifest(&root.join(MANIFEST_FILE))
}

fn model_tag(root: &Path, m: &Manifest) -> String {
    m.model_tag.clone().unwrap_or_else(|| {
        root.canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "untagged".into())
    })
}

fn read_table(root: &Path, tier: &str, layer: usize) -> Result<SegmentTable> {
    let path = table_path(root, tier, layer);
    if !path.is_file() {
        return Err(Error::invalid(format!(
            "{} is missing; run `layerprobe pool` first",
            path.display()
        )));
    }
    SegmentTable::read(&path, layer)
}

fn alignments(root: &Path, m: &Manifest) -> Result<Vec<Alignment>> {
    m.utterances
        .par_iter()
        .map(|u| read_alignment(&root.join(&u.alignment_path)))
        .collect()
}

fn word_tiers(m: &Manifest, aligned: &[Alignment]) -> BTreeMap<String, AlignmentTier> {
    m.utterances
        .iter()
        .zip(aligned)
        .map(|(u, a)| (u.utt_id.clone(), a.word.clone()))
        .collect()
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| Error::invalid(e.to_string()))?;
    for r in rows {
        w.write_record(r)
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

fn record(utt: &UtteranceMeta, spec: layerprobe::pooling::SegmentSpec) -> SegmentRecord {
    SegmentRecord {
        spec,
        speaker: utt.speaker.clone(),
        accent: utt.accent.clone(),
    }
}

pub fn synth(ctx: &Ctx) -> Result<Value> {
    let root = ctx.root();
    ctx.check_target(&root.join(MANIFEST_FILE))?;
    let s = write_dataset(root, &ctx.config.synth)?;
    Ok(ctx.summary("synth", serde_json::to_value(s).expect("json")))
}

pub fn pool(ctx: &Ctx) -> Result<Value> {
    let root = ctx.root();
    let m = manifest(root)?;
    let hop = m.frame_hop_s;
    let policy = ctx.config.sampling;
    let skip: BTreeSet<&str> = ctx
        .config
        .pool
        .skip_labels
        .iter()
        .map(String::as_str)
        .collect();
    let speech = |label: &str| !skip.contains(label.to_lowercase().as_str());
    let aligned = alignments(root, &m)?;

    let targets: Option<WordTargets> = {
        let path = root.join(LABELS_FILE);
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let labels = parse_labels(&text, &path)?;
            validate_labels(&labels, &word_tiers(&m, &aligned))?;
            Some(to_targets(&labels))
        } else {
            log::info!("no {LABELS_FILE}; word tables carry no targets");
            None
        }
    };

    let (mut phone_records, mut word_records) = (Vec::new(), Vec::new());
    let (mut phones_total, mut phones_discarded, mut words_skipped) = (0usize, 0usize, 0usize);
    for (u, a) in m.utterances.iter().zip(&aligned) {
        let phones = phone_segment_specs(&a.phone, hop, u.num_frames, &policy, &u.utt_id);
        let kept: Vec<_> = phones
            .specs
            .into_iter()
            .filter(|s| speech(&s.label))
            .collect();
        let total = a.phone.segments.iter().filter(|s| speech(&s.label)).count();
        phones_total += total;
        phones_discarded += total - kept.len();
        phone_records.extend(kept.into_iter().map(|s| record(u, s)));

        let words = word_segment_specs(&a.word, hop, u.num_frames, &u.utt_id);
        let kept: Vec<_> = words
            .specs
            .into_iter()
            .filter(|s| speech(&s.label))
            .collect();
        words_skipped += a.word.segments.iter().filter(|s| speech(&s.label)).count() - kept.len();
        word_records.extend(kept.into_iter().map(|s| record(u, s)));
    }
    let phone_records = sample_segments(phone_records, &policy);

    // Segments of each utterance, as positions into the record lists.
    let index: BTreeMap<&str, usize> = m
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.utt_id.as_str(), i))
        .collect();
    let mut phones_of = vec![Vec::new(); m.utterances.len()];
    let mut words_of = vec![Vec::new(); m.utterances.len()];
    for (k, r) in phone_records.iter().enumerate() {
        phones_of[index[r.spec.utt_id.as_str()]].push(k);
    }
    for (k, r) in word_records.iter().enumerate() {
        words_of[index[r.spec.utt_id.as_str()]].push(k);
    }

    // TODO: stream per-layer rows to disk for corpora whose pooled tables do not fit in memory.
    type LayerVecs = Vec<Vec<(usize, Vec<f64>)>>;
    let pooled: Vec<(LayerVecs, LayerVecs)> = m
        .utterances
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let dump = read_features(&root.join(&u.feature_path), m.shape_of(u))?;
            let pool_all = |positions: &[usize], records: &[SegmentRecord]| -> Result<LayerVecs> {
                (0..m.num_layers)
                    .map(|layer| {
                        positions
                            .iter()
                            .map(|&k| {
                                Ok((k, pool_range(&dump, layer, records[k].spec.pooled_range)?))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let p = pool_all(&phones_of[i], &phone_records)?;
            let w = pool_all(&words_of[i], &word_records)?;
            Ok((p, w))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut phone_vecs: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::new(); phone_records.len()]; m.num_layers];
    let mut word_vecs: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::new(); word_records.len()]; m.num_layers];
    for (p, w) in pooled {
        for layer in 0..m.num_layers {
            for (k, v) in &p[layer] {
                phone_vecs[layer][*k] = v.clone();
            }
            for (k, v) in &w[layer] {
                word_vecs[layer][*k] = v.clone();
            }
        }
    }
    for layer in 0..m.num_layers {
        let phones = phone_records
            .iter()
            .cloned()
            .zip(std::mem::take(&mut phone_vecs[layer]))
            .collect();
        let t = build_segment_table(layer, m.dim, phones, None)?;
        ctx.write(&table_path(root, "phone", layer), t.to_csv()?.as_bytes())?;
        let words = word_records
            .iter()
            .cloned()
            .zip(std::mem::take(&mut word_vecs[layer]))
            .collect();
        let t = build_segment_table(layer, m.dim, words, targets.as_ref())?;
        ctx.write(&table_path(root, "word", layer), t.to_csv()?.as_bytes())?;
    }

    let counts = json!({
        "utterances": m.utterances.len(),
        "layers": m.num_layers,
        "phone_segments": phones_total,
        "phones_discarded": phones_discarded,
        "phones_sampled": phone_records.len(),
        "words": word_records.len(),
        "words_without_frames": words_skipped,
        "word_targets": targets.is_some(),
    });
    log::info!(
        "pooled {} phones ({} discarded), {} words",
        phone_records.len(),
        phones_discarded,
        word_records.len()
    );
    ctx.write_meta(&root.join("tables/pool.csv"), "pool", counts.clone())?;
    Ok(ctx.summary("pool", counts))
}

fn accents(ctx: &Ctx, m: &Manifest) -> Vec<String> {
    if ctx.config.accents.is_empty() {
        m.accents.clone()
    } else {
        ctx.config.accents.clone()
    }
}

fn accent_name(a: &Option<String>) -> &str {
    a.as_deref().unwrap_or("all")
}

pub fn cca(ctx: &Ctx) -> Result<Value> {
    let root = ctx.root();
    let m = manifest(root)?;
    let tag = model_tag(root, &m);
    let protocol = ctx.config.cca_protocol();
    let tables = (0..m.num_layers)
        .map(|l| read_table(root, "phone", l))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs: Vec<(usize, Option<String>)> = Vec::new();
    for layer in 0..m.num_layers {
        jobs.extend(accents(ctx, &m).into_iter().map(|a| (layer, Some(a))));
        jobs.push((layer, None));
    }
    let results: Vec<CcaResult> = jobs
        .par_iter()
        .map(|(l, a)| cca_protocol(&tables[*l], a.as_deref(), &protocol))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut plot = Vec::new();
    for r in &results {
        for (f, s) in r.fold_scores.iter().enumerate() {
            rows.push(vec![
                r.layer.to_string(),
                accent_name(&r.accent).into(),
                f.to_string(),
                s.to_string(),
            ]);
        }
        plot.push(vec![
            tag.clone(),
            accent_name(&r.accent).into(),
            r.layer.to_string(),
            r.score.to_string(),
        ]);
    }
    let reports = root.join("reports");
    let path = reports.join("cca.csv");
    ctx.write(
        &path,
        &csv_bytes(&["layer", "accent", "fold", "score"], &rows)?,
    )?;
    ctx.write_meta(
        &path,
        "cca",
        json!({ "model_tag": tag, "protocol": protocol }),
    )?;
    let plot_path = reports.join("cca_plot.csv");
    ctx.write(
        &plot_path,
        &csv_bytes(&["model_tag", "accent", "layer", "score"], &plot)?,
    )?;
    ctx.write_meta(&plot_path, "cca", json!({ "model_tag": tag }))?;

    let best = results
        .iter()
        .filter(|r| r.accent.is_none())
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .map(|r| r.layer);
    Ok(ctx.summary(
        "cca",
        json!({ "layers": m.num_layers, "scores": results.len(), "best_layer_all_accents": best }),
    ))
}

fn fold_assignment(ctx: &Ctx, m: &Manifest) -> Result<FoldAssignment> {
    let folds = ctx.config.probe.folds;
    if ctx.config.speaker_folds.is_empty() {
        FoldAssignment::auto(
            m.utterances
                .iter()
                .map(|u| (u.speaker.as_str(), u.accent.as_str())),
            folds,
        )
    } else {
        FoldAssignment::new(folds, ctx.config.speaker_folds.clone())
    }
}

pub fn probe(ctx: &Ctx) -> Result<Value> {
    let root = ctx.root();
    let m = manifest(root)?;
    let tag = model_tag(root, &m);
    let lambda = ctx.config.probe.lambda_policy()?;
    let assignment = fold_assignment(ctx, &m)?;
    let balanced = assignment.is_accent_balanced(
        m.utterances
            .iter()
            .map(|u| (u.speaker.as_str(), u.accent.as_str())),
    );
    if !balanced {
        log::warn!("probe folds do not hold one speaker of every accent each");
    }
    let tables = (0..m.num_layers)
        .map(|l| read_table(root, "word", l))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Target)> = (0..m.num_layers)
        .flat_map(|l| Target::ALL.into_iter().map(move |t| (l, t)))
        .collect();
    let results: Vec<ProbeResult> = jobs
        .par_iter()
        .map(|(l, t)| grouped_cv(&tables[*l], *t, &assignment, lambda))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut plot = Vec::new();
    for r in &results {
        let (layer, target) = (r.layer.to_string(), r.target.as_str().to_string());
        for (f, mse, _) in &r.per_fold_mse {
            rows.push(vec![
                layer.clone(),
                target.clone(),
                "all".into(),
                f.to_string(),
                mse.to_string(),
            ]);
        }
        for (a, mse) in &r.per_accent_mse {
            rows.push(vec![
                layer.clone(),
                target.clone(),
                a.clone(),
                "all".into(),
                mse.to_string(),
            ]);
            plot.push(vec![
                tag.clone(),
                target.clone(),
                a.clone(),
                layer.clone(),
                mse.to_string(),
            ]);
        }
        rows.push(vec![
            layer.clone(),
            target.clone(),
            "all".into(),
            "all".into(),
            r.overall_mse.to_string(),
        ]);
        plot.push(vec![
            tag.clone(),
            target.clone(),
            "all".into(),
            layer,
            r.overall_mse.to_string(),
        ]);
    }
    let reports = root.join("reports");
    let path = reports.join("probe.csv");
    ctx.write(
        &path,
        &csv_bytes(&["layer", "target", "accent", "fold", "mse"], &rows)?,
    )?;
    let details = json!({
        "model_tag": tag,
        "folds": assignment.folds,
        "speaker_folds": assignment.speaker_to_fold,
        "accent_balanced": balanced,
    });
    ctx.write_meta(&path, "probe", details)?;
    let plot_path = reports.join("probe_plot.csv");
    ctx.write(
        &plot_path,
        &csv_bytes(&["model_tag", "target", "accent", "layer", "mse"], &plot)?,
    )?;
    ctx.write_meta(&plot_path, "probe", json!({ "model_tag": tag }))?;

    let best: BTreeMap<&str, usize> = Target::ALL
        .iter()
        .filter_map(|t| {
            results
                .iter()
                .filter(|r| r.target == *t)
                .min_by(|a, b| a.overall_mse.total_cmp(&b.overall_mse))
                .map(|r| (t.as_str(), r.layer))
        })
        .collect();
    Ok(ctx.summary(
        "probe",
        json!({ "layers": m.num_layers, "results": results.len(), "best_layer": best }),
    ))
}

pub fn prosody_label(ctx: &Ctx, import: Option<&Path>) -> Result<Value> {
    let root = ctx.root();
    let m = manifest(root)?;
    let aligned = alignments(root, &m)?;
    let tiers = word_tiers(&m, &aligned);
    let config = &ctx.config.prosody;
    let with_tracks = m.utterances.iter().all(|u| u.track_path.is_some());

    let builtin: Option<Vec<WordProsody>> = if with_tracks {
        let per_utt = m
            .utterances
            .par_iter()
            .zip(&aligned)
            .map(|(u, a)| {
                let path = root.join(u.track_path.as_ref().expect("checked"));
                let track = read_track(&path, u.num_frames)?;
                label_utterance(&track, &a.word, m.frame_hop_s, config, &u.utt_id)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(per_utt.into_iter().flatten().collect())
    } else {
        None
    };

    let mut counts = json!({ "utterances": m.utterances.len() });
    let labels = match import {
        Some(path) => {
            let imported = import_labels(path, &tiers)?;
            let agreement = builtin
                .as_ref()
                .and_then(|b| prominence_agreement(b, &imported));
            counts["imported"] = json!(imported.len());
            if let Some((rho, n)) = agreement {
                counts["spearman_prominence"] = json!(rho);
                counts["spearman_words"] = json!(n);
                counts["spearman_meets_target"] = json!(rho >= SPEARMAN_TARGET);
            }
            imported
        }
        None => builtin.ok_or_else(|| {
            Error::invalid(
                "some utterances have no prosody track; label them externally and use --import",
            )
        })?,
    };
    counts["words"] = json!(labels.len());
    let path = root.join(LABELS_FILE);
    ctx.write(&path, format_labels(&labels).as_bytes())?;
    ctx.write_meta(&path, "prosody-label", counts.clone())?;
    Ok(ctx.summary("prosody-label", counts))
}

fn wav_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no .wav files in {}",
            input.display()
        )));
    }
    Ok(files)
}

pub fn perturb(ctx: &Ctx, input: &Path, output: &Path) -> Result<Value> {
    let config = &ctx.config.perturb;
    config.validate()?;
    let files = wav_inputs(input)?;
    let lines = files
        .par_iter()
        .map(|path| {
            let name = path
                .file_name()
                .expect("file path")
                .to_string_lossy()
                .into_owned();
            let wave = read_wav(path)?;
            let mut rng = Stream::new(ctx.config.perturb_seed(&name));
            let p = perturb_waveform(&wave, config, &mut rng)?;
            let out = output.join(&name);
            ctx.check_target(&out)?;
            write_wav(&p.wave, &out)?;
            Ok((sidecar_line(&name, &p), p.draw.applied, p.clipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let sidecar = output.join("perturb.tsv");
    ctx.check_target(&sidecar)?;
    write_sidecar(
        &sidecar,
        &lines.iter().map(|l| l.0.clone()).collect::<Vec<_>>(),
    )?;
    let counts = json!({
        "files": lines.len(),
        "applied": lines.iter().filter(|l| l.1).count(),
        "clipped_samples": lines.iter().map(|l| l.2).sum::<usize>(),
    });
    ctx.write_meta(&sidecar, "perturb", counts.clone())?;
    Ok(ctx.summary("perturb", counts))
}

pub fn embed(ctx: &Ctx, phoneme: &str, layer: usize, want_tag: Option<&str>) -> Result<Value> {
    let root = ctx.root();
    let m = manifest(root)?;
    let tag = model_tag(root, &m);
    if let Some(want) = want_tag {
        if want != tag {
            return Err(Error::invalid(format!(
                "dataset model tag is {tag}, not {want}"
            )));
        }
    }
    if layer >= m.num_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range ({} layers)",
            m.num_layers
        )));
    }
    let table = read_table(root, "phone", layer)?;
    let result = embed_phoneme(&table, phoneme, &ctx.config.embed)?;
    let purity = result.accent_purity(10).ok();
    let path = root.join(format!("reports/embed_{phoneme}_L{layer:02}.csv"));
    ctx.check_target(&path)?;
    export_points(&result, &path)?;
    let counts = json!({
        "model_tag": tag,
        "phoneme": phoneme,
        "layer": layer,
        "points": result.points.len(),
        "final_kl": result.final_kl,
        "accent_purity_k10": purity,
    });
    ctx.write_meta(&path, "embed", counts.clone())?;
    Ok(ctx.summary("embed", counts))
}

/// Data rows of a plot CSV (header dropped), or nothing when absent.
fn plot_rows(path: &Path) -> Result<Option<(String, Vec<String>)>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    Ok(Some((header, lines.map(str::to_string).collect())))
}

pub fn report(ctx: &Ctx, roots: &[PathBuf], out: &Path) -> Result<Value> {
    let roots: Vec<PathBuf> = if roots.is_empty() {
        vec![ctx.root().to_path_buf()]
    } else {
        roots.to_vec()
    };
    let mut tags = BTreeMap::new();
    let mut merged: BTreeMap<&str, (String, Vec<String>)> = BTreeMap::new();
    for root in &roots {
        let m = manifest(root)?;
        let tag = model_tag(root, &m);
        if let Some(prev) = tags.insert(tag.clone(), root.clone()) {
            return Err(Error::invalid(format!(
                "model tag {tag} appears in both {} and {}",
                prev.display(),
                root.display()
            )));
        }
        for name in ["cca_plot.csv", "probe_plot.csv"] {
            if let Some((header, rows)) = plot_rows(&root.join("reports").join(name))? {
                let entry = merged
                    .entry(name)
                    .or_insert_with(|| (header.clone(), Vec::new()));
                if entry.0 != header {
                    return Err(Error::invalid(format!(
                        "{}: header differs from other roots",
                        root.join(name).display()
                    )));
                }
                entry.1.extend(rows);
            }
        }
    }
    if merged.is_empty() {
        return Err(Error::invalid(
            "no plot data found; run `layerprobe cca` or `layerprobe probe` first",
        ));
    }
    let mut written = Vec::new();
    for (name, (header, rows)) in &merged {
        let mut text = header.clone();
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        let path = out.join(name);
        ctx.write(&path, text.as_bytes())?;
        written.push(*name);
    }
    let counts = json!({
        "roots": roots,
        "model_tags": tags.keys().collect::<Vec<_>>(),
        "files": written,
    });
    ctx.write_meta(&out.join("report.csv"), "report", counts.clone())?;
    Ok(ctx.summary("report", counts))
}
