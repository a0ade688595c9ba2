//! Linear regression probes with speaker-grouped cross-validation.
//!
//! The probe is a single affine map from a pooled word vector to one scalar
//! target, fit in closed form. Features are z-scored with training
//! statistics and the objective is
//!
//! ```text
//! J(w, b) = 1/(2n) * sum_i (y_i - z_i.w - b)^2 + lambda/2 * |w|^2
//! ```
//!
//! with the bias unpenalized, so `b = mean(y)` and
//! `(Z'Z/n + lambda I) w = Z'(y - mean(y))/n`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::table::{SegmentTable, Target};

/// Dimensions whose training standard deviation falls below this are frozen.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    /// Zero-variance dimensions carry std 1 and weight 0.
    pub feature_stds: Vec<f64>,
}

fn standardize(x: &DMatrix<f64>, means: &[f64], stds: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        (x[(i, j)] - means[j]) / stds[j]
    })
}

/// Closed-form ridge fit. `lambda = 0` gives ordinary least squares (minimum
/// norm when the system is rank deficient).
pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::invalid(format!(
            "ridge fit needs at least 2 rows, got {n}"
        )));
    }
    if y.len() != n {
        return Err(Error::invalid(format!("{n} rows but {} targets", y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite probe input"));
    }
    let nf = n as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / nf).collect();
    let mut stds = Vec::with_capacity(d);
    let mut active = Vec::new();
    for (j, c) in x.column_iter().enumerate() {
        let var = c.iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / nf;
        let sd = var.sqrt();
        if sd > MIN_STD * (1.0 + means[j].abs()) {
            stds.push(sd);
            active.push(j);
        } else {
            stds.push(1.0);
        }
    }
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut weights = vec![0.0; d];
    if !active.is_empty() {
        let z = standardize(
            &x.select_columns(&active),
            &select(&means, &active),
            &select(&stds, &active),
        );
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
        let mut a = z.tr_mul(&z) / nf;
        for i in 0..active.len() {
            a[(i, i)] += lambda;
        }
        let rhs = z.tr_mul(&yc) / nf;
        let sol = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => a
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::numerical(format!("ridge system is singular: {e}")))?,
        };
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("ridge solution is not finite"));
        }
        for (k, &j) in active.iter().enumerate() {
            weights[j] = sol[k];
        }
    }
    Ok(RidgeModel {
        weights,
        bias: y_mean,
        lambda,
        feature_means: means,
        feature_stds: stds,
    })
}

fn select(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

impl RidgeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::invalid(format!(
                "probe expects dimension {}, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(x.row_iter()
            .map(|row| {
                self.bias
                    + row
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            (v - self.feature_means[j]) / self.feature_stds[j] * self.weights[j]
                        })
                        .sum::<f64>()
            })
            .collect())
    }

    /// Gradient of the training objective in standardized coordinates:
    /// `(dJ/dw, dJ/db)`.
    pub fn objective_gradient(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let pred = self.predict(x)?;
        let n = y.len() as f64;
        let z = standardize(x, &self.feature_means, &self.feature_stds);
        let resid: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
        let gw = (0..self.dim())
            .map(|j| {
                z.column(j)
                    .iter()
                    .zip(&resid)
                    .map(|(a, r)| a * r)
                    .sum::<f64>()
                    / n
                    + self.lambda * self.weights[j]
            })
            .collect();
        Ok((gw, resid.iter().sum::<f64>() / n))
    }
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / truth.len() as f64
}

/// Ridge strength policy. `Auto` uses `1e-4 * trace(standardized cov) / D`,
/// i.e. `1e-4` times the fraction of non-constant dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LambdaPolicy {
    #[default]
    Auto,
    Fixed(f64),
}

impl LambdaPolicy {
    pub fn resolve(&self, x: &DMatrix<f64>) -> f64 {
        match *self {
            LambdaPolicy::Fixed(l) => l,
            LambdaPolicy::Auto => {
                let n = x.nrows() as f64;
                let active = x
                    .column_iter()
                    .filter(|c| {
                        let m = c.sum() / n;
                        let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                        sd > MIN_STD * (1.0 + m.abs())
                    })
                    .count();
                1e-4 * active as f64 / x.ncols().max(1) as f64
            }
        }
    }
}

/// Speaker to fold mapping for grouped cross-validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: usize,
    pub speaker_to_fold: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn new(folds: usize, speaker_to_fold: BTreeMap<String, usize>) -> Result<Self> {
        if folds < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 folds, got {folds}"
            )));
        }
        if let Some((s, f)) = speaker_to_fold.iter().find(|(_, &f)| f >= folds) {
            return Err(Error::invalid(format!(
                "speaker {s} assigned to fold {f} of {folds}"
            )));
        }
        Ok(Self {
            folds,
            speaker_to_fold,
        })
    }

    /// Deals the speakers of each accent round-robin over the folds, speakers
    /// sorted by name. With exactly `folds` speakers per accent every fold
    /// holds one speaker of every accent.
    pub fn auto<'a>(
        speakers: impl IntoIterator<Item = (&'a str, &'a str)>,
        folds: usize,
    ) -> Result<Self> {
        let mut by_accent: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (speaker, accent) in speakers {
            by_accent.entry(accent).or_default().insert(speaker);
        }
        let mut map = BTreeMap::new();
        for spk in by_accent.values() {
            for (i, s) in spk.iter().enumerate() {
                if let Some(prev) = map.insert(s.to_string(), i % folds) {
                    if prev != i % folds {
                        return Err(Error::invalid(format!(
                            "speaker {s} appears under two accents"
                        )));
                    }
                }
            }
        }
        Self::new(folds, map)
    }

    pub fn fold_of(&self, speaker: &str) -> Result<usize> {
        self.speaker_to_fold
            .get(speaker)
            .copied()
            .ok_or_else(|| Error::invalid(format!("speaker {speaker} has no fold assignment")))
    }

    /// True when every fold holds exactly one speaker of every accent.
    pub fn is_accent_balanced<'a>(
        &self,
        speakers: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> bool {
        let mut cells: BTreeMap<(&str, usize), usize> = BTreeMap::new();
        let mut accents = BTreeSet::new();
        for (s, a) in speakers.into_iter().collect::<BTreeSet<_>>() {
            accents.insert(a);
            if let Some(&f) = self.speaker_to_fold.get(s) {
                *cells.entry((a, f)).or_default() += 1;
            }
        }
        accents
            .iter()
            .all(|a| (0..self.folds).all(|f| cells.get(&(a, f)) == Some(&1)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub layer: usize,
    pub target: Target,
    pub per_accent_mse: BTreeMap<String, f64>,
    /// Sample-weighted mean of the fold MSEs.
    pub overall_mse: f64,
    /// `(fold, mse, test rows)` for every fold with test rows.
    pub per_fold_mse: Vec<(usize, f64, usize)>,
}

/// Trains on all folds but one and scores the held-out fold, for every fold.
pub fn grouped_cv(
    table: &SegmentTable,
    target: Target,
    assignment: &FoldAssignment,
    lambda: LambdaPolicy,
) -> Result<ProbeResult> {
    let y = table.targets(target)?;
    let row_fold = table
        .rows
        .iter()
        .map(|r| assignment.fold_of(&r.speaker))
        .collect::<Result<Vec<_>>>()?;
    let x = table.matrix();

    // (fold, test rows, predictions) for every fold with test rows
    type FoldPredictions = Option<(usize, Vec<usize>, Vec<f64>)>;
    let folds: Vec<Result<FoldPredictions>> = (0..assignment.folds)
        .into_par_iter()
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..table.len()).partition(|&i| row_fold[i] == f);
            if test.is_empty() {
                log::warn!("layer {} fold {f}: no test rows", table.layer);
                return Ok(None);
            }
            if train.is_empty() {
                return Err(Error::invalid(format!(
                    "layer {} fold {f}: empty training split",
                    table.layer
                )));
            }
            let train_spk: BTreeSet<&str> = train
                .iter()
                .map(|&i| table.rows[i].speaker.as_str())
                .collect();
            if let Some(s) = test
                .iter()
                .map(|&i| table.rows[i].speaker.as_str())
                .find(|s| train_spk.contains(s))
            {
                return Err(Error::invalid(format!(
                    "speaker {s} leaks into both splits of fold {f}"
                )));
            }
            let x_train = x.select_rows(&train);
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = fit_ridge(&x_train, &y_train, lambda.resolve(&x_train))?;
            let pred = model.predict(&x.select_rows(&test))?;
            let sq: Vec<f64> = test
                .iter()
                .zip(&pred)
                .map(|(&i, p)| (p - y[i]).powi(2))
                .collect();
            Ok(Some((f, test, sq)))
        })
        .collect();

    let mut per_fold_mse = Vec::new();
    let mut accent_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let (mut total, mut count) = (0.0, 0usize);
    for res in folds {
        let Some((f, test, sq)) = res? else { continue };
        let s: f64 = sq.iter().sum();
        per_fold_mse.push((f, s / sq.len() as f64, sq.len()));
        total += s;
        count += sq.len();
        for (&i, e) in test.iter().zip(&sq) {
            let acc = accent_acc.entry(table.rows[i].accent.clone()).or_default();
            acc.0 += e;
            acc.1 += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid(format!(
            "layer {}: no rows to evaluate",
            table.layer
        )));
    }
    Ok(ProbeResult {
        layer: table.layer,
        target,
        per_accent_mse: accent_acc
            .into_iter()
            .map(|(a, (s, c))| (a, s / c as f64))
            .collect(),
        overall_mse: total / count as f64,
        per_fold_mse,
    })
}
