//! Pooled segment tables and their CSV interchange form.
//!
//! Columns: `utt_id,speaker,accent,label,index,start_s,end_s,prominence,boundary,v0..v{D-1}`.
//! Missing targets are empty cells. Reals are written in shortest
//! round-trip notation, so reading a table back is exact.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::pooling::SegmentRecord;

const META_COLUMNS: [&str; 9] = [
    "utt_id",
    "speaker",
    "accent",
    "label",
    "index",
    "start_s",
    "end_s",
    "prominence",
    "boundary",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub vector: Vec<f64>,
    pub label: String,
    pub speaker: String,
    pub accent: String,
    pub utt_id: String,
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub prominence: Option<f64>,
    pub boundary: Option<f64>,
}

/// Pooled vectors of one layer plus their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTable {
    pub layer: usize,
    pub dim: usize,
    pub rows: Vec<SegmentRow>,
}

/// Word targets keyed by (utt_id, word index): (prominence, boundary).
pub type WordTargets = HashMap<(String, usize), (f64, f64)>;

/// Prosody target column selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Prominence,
    Boundary,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Prominence, Target::Boundary];

    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Prominence => "prominence",
            Target::Boundary => "boundary",
        }
    }
}

impl SegmentTable {
    pub fn empty(layer: usize, dim: usize) -> Self {
        Self {
            layer,
            dim,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Design matrix, one row per segment.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.dim, |i, j| self.rows[i].vector[j])
    }

    /// Rows whose accent equals `accent`.
    pub fn filter_accent(&self, accent: &str) -> SegmentTable {
        self.filter(|r| r.accent == accent)
    }

    pub fn filter(&self, keep: impl Fn(&SegmentRow) -> bool) -> SegmentTable {
        SegmentTable {
            layer: self.layer,
            dim: self.dim,
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Target column; fails naming the first row without a value.
    pub fn targets(&self, target: Target) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let v = match target {
                    Target::Prominence => r.prominence,
                    Target::Boundary => r.boundary,
                };
                v.ok_or_else(|| {
                    Error::invalid(format!(
                        "row {} word {} ({}) has no {} target",
                        r.utt_id,
                        r.index,
                        r.label,
                        target.as_str()
                    ))
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((0..self.dim).map(|j| format!("v{j}")));
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.utt_id.clone(),
                r.speaker.clone(),
                r.accent.clone(),
                r.label.clone(),
                r.index.to_string(),
                r.start_s.to_string(),
                r.end_s.to_string(),
                opt(r.prominence),
                opt(r.boundary),
            ];
            rec.extend(r.vector.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str, layer: usize, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .clone();
        if header.len() < META_COLUMNS.len()
            || header
                .iter()
                .take(META_COLUMNS.len())
                .ne(META_COLUMNS.iter().copied())
        {
            return Err(Error::format(path, "unexpected segment table header"));
        }
        let dim = header.len() - META_COLUMNS.len();
        let bad = |line: usize, msg: &str| Error::format(path, format!("row {line}: {msg}"));
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|_| bad(i + 1, &format!("bad number in column {}", &header[k])))
            };
            let opt = |k: usize| -> Result<Option<f64>> {
                if rec[k].is_empty() {
                    Ok(None)
                } else {
                    num(k).map(Some)
                }
            };
            let vector = (META_COLUMNS.len()..header.len())
                .map(num)
                .collect::<Result<Vec<_>>>()?;
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(bad(i + 1, "non-finite vector value"));
            }
            rows.push(SegmentRow {
                utt_id: rec[0].to_string(),
                speaker: rec[1].to_string(),
                accent: rec[2].to_string(),
                label: rec[3].to_string(),
                index: rec[4].parse().map_err(|_| bad(i + 1, "bad index"))?,
                start_s: num(5)?,
                end_s: num(6)?,
                prominence: opt(7)?,
                boundary: opt(8)?,
                vector,
            });
        }
        Ok(Self { layer, dim, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, layer: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, layer, path)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(e.to_string())
}

/// Assembles a table from pooled records. When `targets` is given every row
/// must find its (utt_id, index) entry.
pub fn build_segment_table(
    layer: usize,
    dim: usize,
    pooled: Vec<(SegmentRecord, Vec<f64>)>,
    targets: Option<&WordTargets>,
) -> Result<SegmentTable> {
    let mut rows = Vec::with_capacity(pooled.len());
    for (rec, vector) in pooled {
        if vector.len() != dim {
            return Err(Error::invalid(format!(
                "{} segment {}: vector has dimension {}, table expects {dim}",
                rec.spec.utt_id,
                rec.spec.index,
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "{} segment {}: non-finite pooled value",
                rec.spec.utt_id, rec.spec.index
            )));
        }
        let (prominence, boundary) = match targets {
            None => (None, None),
            Some(map) => {
                let key = (rec.spec.utt_id.clone(), rec.spec.index);
                let (p, b) = map.get(&key).ok_or_else(|| {
                    Error::invalid(format!(
                        "no prosody target for {} word {} ({:?})",
                        rec.spec.utt_id, rec.spec.index, rec.spec.label
                    ))
                })?;
                (Some(*p), Some(*b))
            }
        };
        rows.push(SegmentRow {
            vector,
            label: rec.spec.label,
            speaker: rec.speaker,
            accent: rec.accent,
            utt_id: rec.spec.utt_id,
            index: rec.spec.index,
            start_s: rec.spec.start_s,
            end_s: rec.spec.end_s,
            prominence,
            boundary,
        });
    }
    Ok(SegmentTable { layer, dim, rows })
}
