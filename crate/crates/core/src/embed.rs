//! Exact t-SNE for pooled phoneme vectors and plot-ready point export.
//!
//! Rows are processed in a canonical order (sorted by their bit patterns)
//! and every point's initial position is seeded from a hash of its own
//! values, so permuting the input permutes the output exactly.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, mix64, Stream};
use crate::table::SegmentTable;

pub const MIN_POINTS: usize = 50;
const ENTROPY_TOL: f64 = 1e-4;
const MAX_BISECTION: usize = 64;
const INIT_SD: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    /// Iterations with exaggerated P and the lower momentum.
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < MIN_POINTS {
            return Err(Error::invalid(format!(
                "t-SNE needs at least {MIN_POINTS} points, got {n}"
            )));
        }
        let max_perp = (n - 1) as f64 / 3.0;
        if !(self.perplexity >= 5.0 && self.perplexity <= max_perp) {
            return Err(Error::invalid(format!(
                "perplexity {} infeasible for {n} points (allowed 5..={max_perp:.2})",
                self.perplexity
            )));
        }
        if self.iterations < 250 {
            return Err(Error::invalid("t-SNE needs at least 250 iterations"));
        }
        if self.exaggeration_iters > self.iterations {
            return Err(Error::invalid("exaggeration phase longer than the run"));
        }
        if !(self.learning_rate > 0.0 && self.early_exaggeration >= 1.0) {
            return Err(Error::invalid(
                "learning rate must be positive and exaggeration >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    /// KL(P||Q) of the positions entering each iteration, with unexaggerated P.
    pub kl_history: Vec<f64>,
    pub final_kl: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row_hash(row: &[f64]) -> u64 {
    row.iter().fold(0x5eed_u64, |h, v| mix64(h ^ v.to_bits()))
}

/// Bandwidth search for one row of squared distances (self excluded by the
/// caller passing `i`). Returns the conditional distribution.
pub fn conditional_row(dist: &[f64], i: usize, perplexity: f64) -> Result<Vec<f64>> {
    let n = dist.len();
    let target = perplexity.ln();
    let dmin = (0..n)
        .filter(|&j| j != i)
        .map(|j| dist[j])
        .fold(f64::INFINITY, f64::min);
    let mean = (0..n)
        .filter(|&j| j != i)
        .map(|j| dist[j] - dmin)
        .sum::<f64>()
        / (n - 1) as f64;
    let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut p = vec![0.0; n];
    for _ in 0..MAX_BISECTION {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            if j == i {
                p[j] = 0.0;
                continue;
            }
            let d = dist[j] - dmin;
            p[j] = (-beta * d).exp();
            sum += p[j];
            weighted += p[j] * d;
        }
        let h = sum.ln() + beta * weighted / sum;
        if (h - target).abs() < ENTROPY_TOL {
            p.iter_mut().for_each(|v| *v /= sum);
            return Ok(p);
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() {
                0.5 * (beta + hi)
            } else {
                beta * 2.0
            };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    Err(Error::numerical(format!(
        "perplexity {perplexity} infeasible at point {i}: bandwidth search did not converge"
    )))
}

/// Symmetrized joint probabilities, row-major `n × n`, summing to 1.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist: Vec<f64> = x.iter().map(|r| sq_dist(&x[i], r)).collect();
            conditional_row(&dist, i, perplexity)
        })
        .collect::<Result<_>>()?;
    let mut p = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (rows[i][j] + rows[j][i]) * scale;
        }
    }
    Ok(p)
}

/// Exact t-SNE of the rows of `x`.
pub fn tsne(x: &[Vec<f64>], config: &EmbedConfig) -> Result<Embedding> {
    let n = x.len();
    config.validate(n)?;
    let dim = x[0].len();
    if let Some(i) = x
        .iter()
        .position(|r| r.len() != dim || r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::invalid(format!(
            "row {i} has the wrong length or non-finite values"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .map(|v| v.to_bits())
            .cmp(x[b].iter().map(|v| v.to_bits()))
            .then(a.cmp(&b))
    });
    let xs: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let p = joint_probabilities(&xs, config.perplexity)?;

    let mut y: Vec<[f64; 2]> = xs
        .iter()
        .map(|r| {
            let mut s = Stream::new(derive_seed(
                config.seed,
                &format!("tsne-init-{:016x}", row_hash(r)),
            ));
            [INIT_SD * s.normal(), INIT_SD * s.normal()]
        })
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_history = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let early = it < config.exaggeration_iters;
        let exag = if early {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if early {
            config.initial_momentum
        } else {
            config.final_momentum
        };

        let yr = &y;
        let row_z: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        1.0 / (1.0 + (yr[i][0] - yr[j][0]).powi(2) + (yr[i][1] - yr[j][1]).powi(2))
                    })
                    .sum()
            })
            .collect();
        let z: f64 = row_z.iter().sum();
        let (grad, kl_parts): (Vec<[f64; 2]>, Vec<f64>) = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                let mut kl = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let d0 = yr[i][0] - yr[j][0];
                    let d1 = yr[i][1] - yr[j][1];
                    let num = 1.0 / (1.0 + d0 * d0 + d1 * d1);
                    let q = num / z;
                    let pij = p[i * n + j];
                    let m = (exag * pij - q) * num;
                    g[0] += 4.0 * m * d0;
                    g[1] += 4.0 * m * d1;
                    if pij > 0.0 {
                        kl += pij * (pij / q.max(f64::MIN_POSITIVE)).ln();
                    }
                }
                (g, kl)
            })
            .unzip();
        if let Some(i) = grad
            .iter()
            .position(|g| !(g[0].is_finite() && g[1].is_finite()))
        {
            return Err(Error::numerical(format!(
                "non-finite t-SNE gradient at iteration {it}, point {i}"
            )));
        }
        let kl: f64 = kl_parts.iter().sum();
        kl_history.push(kl.max(0.0));

        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign {
                    gains[i][d] * 0.8
                } else {
                    gains[i][d] + 0.2
                };
                gains[i][d] = gains[i][d].max(MIN_GAIN);
                update[i][d] =
                    momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        recenter(&mut y);
    }

    let mut points = vec![[0.0; 2]; n];
    for (k, &i) in order.iter().enumerate() {
        points[i] = y[k];
    }
    let final_kl = *kl_history.last().expect("at least one iteration");
    Ok(Embedding {
        points,
        kl_history,
        final_kl,
    })
}

fn recenter(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let m0 = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let m1 = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= m0;
        p[1] -= m1;
    }
}

/// Mean fraction of each point's `k` nearest neighbours (2-D, self
/// excluded, ties by index) that share its label.
pub fn knn_purity(points: &[[f64; 2]], labels: &[String], k: usize) -> Result<f64> {
    let n = points.len();
    if labels.len() != n || k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k-NN purity needs k in 1..{n} and one label per point"
        )));
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    (
                        (points[i][0] - points[j][0]).powi(2)
                            + (points[i][1] - points[j][1]).powi(2),
                        j,
                    )
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k]
                .iter()
                .filter(|(_, j)| labels[*j] == labels[i])
                .count() as f64
                / k as f64
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMeta {
    pub accent: String,
    pub speaker: String,
    pub phoneme: String,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedResult {
    pub points: Vec<[f64; 2]>,
    pub meta: Vec<PointMeta>,
    pub final_kl: f64,
    pub kl_history: Vec<f64>,
}

impl EmbedResult {
    pub fn accent_purity(&self, k: usize) -> Result<f64> {
        let labels: Vec<String> = self.meta.iter().map(|m| m.accent.clone()).collect();
        knn_purity(&self.points, &labels, k)
    }
}

/// Embeds the rows of `table` whose label is `phoneme`.
pub fn embed_phoneme(
    table: &SegmentTable,
    phoneme: &str,
    config: &EmbedConfig,
) -> Result<EmbedResult> {
    let sel = table.filter(|r| r.label == phoneme);
    let x: Vec<Vec<f64>> = sel.rows.iter().map(|r| r.vector.clone()).collect();
    let e = tsne(&x, config).map_err(|e| match e {
        Error::Validation(m) => {
            Error::Validation(format!("phoneme {phoneme}, layer {}: {m}", table.layer))
        }
        other => other,
    })?;
    Ok(EmbedResult {
        points: e.points,
        meta: sel
            .rows
            .iter()
            .map(|r| PointMeta {
                accent: r.accent.clone(),
                speaker: r.speaker.clone(),
                phoneme: r.label.clone(),
                layer: table.layer,
            })
            .collect(),
        final_kl: e.final_kl,
        kl_history: e.kl_history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub x: f64,
    pub y: f64,
    pub meta: PointMeta,
}

pub const POINTS_HEADER: [&str; 6] = ["x", "y", "accent", "speaker", "phoneme", "layer"];

/// Writes the plot-data CSV; coordinates carry 9 significant digits.
pub fn export_points(result: &EmbedResult, path: &Path) -> Result<()> {
    if result.points.is_empty() {
        log::warn!("empty selection; writing header only to {}", path.display());
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(POINTS_HEADER).map_err(|e| csv_io(path, e))?;
    for (p, m) in result.points.iter().zip(&result.meta) {
        w.write_record([
            format!("{:.8e}", p[0]),
            format!("{:.8e}", p[1]),
            m.accent.clone(),
            m.speaker.clone(),
            m.phoneme.clone(),
            m.layer.to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points(path: &Path) -> Result<Vec<PointRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.iter().ne(POINTS_HEADER) {
        return Err(Error::format(path, "unexpected point file header"));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| csv_io(path, e))?;
            let bad = || Error::format(path, format!("row {}: malformed values", i + 1));
            Ok(PointRow {
                x: rec[0].parse().map_err(|_| bad())?,
                y: rec[1].parse().map_err(|_| bad())?,
                meta: PointMeta {
                    accent: rec[2].to_string(),
                    speaker: rec[3].to_string(),
                    phoneme: rec[4].to_string(),
                    layer: rec[5].parse().map_err(|_| bad())?,
                },
            })
        })
        .collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        }
    } else {
        Error::format(path, e.to_string())
    }
}
