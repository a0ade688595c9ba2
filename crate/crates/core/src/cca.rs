//! Projection-weighted canonical correlation between pooled representations
//! and one-hot phoneme labels.
//!
//! Fitting whitens both views through a truncated symmetric
//! eigendecomposition of their covariances, then takes the SVD of the
//! whitened cross-covariance. Canonical correlations are the singular values;
//! the directions are the singular vectors mapped back through the whiteners.
//!
//! The summary score is `sum_i a_i * rho_i`, where the weight `a_i` of the
//! i-th direction is the share of `sum_j |<h_i, x_j>|` over the centered
//! training rows `x_j`, with `h_i` scaled so its training variate has unit
//! variance. Because canonical variates do not change under an invertible
//! affine map of X, neither do the weights nor the score.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::table::SegmentTable;

/// Test variates with variance below this (training variates have unit
/// variance) are treated as degenerate.
const DEGENERATE_VAR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CcaOptions {
    /// Relative ridge added to each auto-covariance: `ridge_eps * mean(diag)`.
    pub ridge_eps: f64,
    /// Eigenvalues below `rank_tol * max eigenvalue` are dropped before whitening.
    pub rank_tol: f64,
}

impl Default for CcaOptions {
    fn default() -> Self {
        Self {
            ridge_eps: 1e-8,
            rank_tol: 1e-10,
        }
    }
}

/// One-hot encoding of segment labels over an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub classes: Vec<String>,
    pub y: DMatrix<f64>,
}

impl LabelMatrix {
    /// Encodes `labels` against `classes`. Labels outside the class list
    /// become all-zero rows.
    pub fn encode<S: AsRef<str>>(labels: &[S], classes: Vec<String>) -> Self {
        let index: BTreeMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut y = DMatrix::zeros(labels.len(), classes.len());
        for (r, l) in labels.iter().enumerate() {
            if let Some(&c) = index.get(l.as_ref()) {
                y[(r, c)] = 1.0;
            }
        }
        Self { classes, y }
    }

    /// Encodes over the sorted set of distinct labels.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let classes: BTreeSet<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        Self::encode(labels, classes.into_iter().collect())
    }
}

/// Fitted canonical directions.
#[derive(Debug, Clone)]
pub struct CcaDirections {
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    /// `d1 x k`, columns are the X-view directions.
    pub v: DMatrix<f64>,
    /// `d2 x k`, columns are the Y-view directions.
    pub w: DMatrix<f64>,
    /// Canonical correlations, non-increasing, in `[0, 1]`.
    pub train_correlations: Vec<f64>,
    /// Projection weights, non-negative, summing to 1.
    pub weights: Vec<f64>,
}

impl CcaDirections {
    pub fn rank(&self) -> usize {
        self.train_correlations.len()
    }

    /// Weighted sum of the training correlations.
    pub fn train_score(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.train_correlations)
            .map(|(a, r)| a * r)
            .sum()
    }

    /// Canonical variates of `x` (centered with the training mean).
    pub fn project_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        center_with(x, &self.mean_x) * &self.v
    }

    pub fn project_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        center_with(y, &self.mean_y) * &self.w
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn center_with(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Maps a covariance to `U_r diag(1/sqrt(l + ridge))`, keeping only the
/// eigen-directions above the rank tolerance (largest first).
fn whitener(cov: &DMatrix<f64>, opts: &CcaOptions, view: &str) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    let mean_diag = cov.trace() / d as f64;
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return Err(Error::numerical(format!("{view} view has zero variance")));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let lmax = eig.eigenvalues[order[0]];
    if !(lmax > 0.0) {
        return Err(Error::numerical(format!("{view} view has zero variance")));
    }
    let ridge = opts.ridge_eps * mean_diag;
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > opts.rank_tol * lmax)
        .collect();
    let mut w = DMatrix::zeros(d, kept.len());
    for (c, &i) in kept.iter().enumerate() {
        let scale = 1.0 / (eig.eigenvalues[i] + ridge).sqrt();
        w.set_column(c, &(eig.eigenvectors.column(i) * scale));
    }
    Ok(w)
}

/// Fits canonical directions between `x` (n x d1) and `y` (n x d2).
pub fn fit_cca(x: &DMatrix<f64>, y: &DMatrix<f64>, opts: &CcaOptions) -> Result<CcaDirections> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::invalid(format!(
            "views have {} and {} rows",
            n,
            y.nrows()
        )));
    }
    let (d1, d2) = (x.ncols(), y.ncols());
    if d1 == 0 || d2 == 0 {
        return Err(Error::invalid("both views need at least one column"));
    }
    if n <= d1.max(d2) {
        return Err(Error::invalid(format!(
            "CCA needs more rows than columns: n = {n}, d1 = {d1}, d2 = {d2}"
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in CCA input"));
    }
    let mean_x = column_means(x);
    let mean_y = column_means(y);
    let xc = center_with(x, &mean_x);
    let yc = center_with(y, &mean_y);
    let denom = (n - 1) as f64;
    let sxx = xc.tr_mul(&xc) / denom;
    let syy = yc.tr_mul(&yc) / denom;
    let sxy = xc.tr_mul(&yc) / denom;

    let wx = whitener(&sxx, opts, "X")?;
    let wy = whitener(&syy, opts, "Y")?;
    let t = wx.tr_mul(&sxy) * &wy;
    let svd = SVD::new(t, true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let k = wx.ncols().min(wy.ncols());

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    order.truncate(k);

    let mut v = DMatrix::zeros(d1, k);
    let mut w = DMatrix::zeros(d2, k);
    let mut rho = Vec::with_capacity(k);
    for (c, &i) in order.iter().enumerate() {
        v.set_column(c, &(&wx * u.column(i)));
        w.set_column(c, &(&wy * vt.row(i).transpose()));
        rho.push(svd.singular_values[i].clamp(0.0, 1.0));
    }

    // Rescale so each training variate has unit variance, then weight.
    let hx = &xc * &v;
    let mut weights = Vec::with_capacity(k);
    for c in 0..k {
        let col = hx.column(c);
        let sd = (col.norm_squared() / denom).sqrt();
        if sd > 0.0 {
            v.column_mut(c).scale_mut(1.0 / sd);
            let hy_sd = ((&yc * w.column(c)).norm_squared() / denom).sqrt();
            if hy_sd > 0.0 {
                w.column_mut(c).scale_mut(1.0 / hy_sd);
            }
            weights.push(col.abs().sum() / sd);
        } else {
            weights.push(0.0);
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::numerical("all canonical variates are degenerate"));
    }
    weights.iter_mut().for_each(|a| *a /= total);

    Ok(CcaDirections {
        mean_x,
        mean_y,
        v,
        w,
        train_correlations: rho,
        weights,
    })
}

/// Per-direction result of a held-out evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaEval {
    pub score: f64,
    /// Test correlation per direction; `None` for skipped degenerate ones.
    pub correlations: Vec<Option<f64>>,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (n - 1.0).max(1.0);
    if saa / denom < DEGENERATE_VAR || sbb / denom < DEGENERATE_VAR {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Weighted test correlation with directions and weights from training.
/// Pearson correlations use the test fold's own standard deviations.
pub fn eval_cca_detailed(
    dirs: &CcaDirections,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<CcaEval> {
    if x.nrows() != y.nrows() || x.nrows() < 2 {
        return Err(Error::invalid(format!(
            "test views need matching row counts >= 2, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() != dirs.v.nrows() || y.ncols() != dirs.w.nrows() {
        return Err(Error::invalid(format!(
            "test dimensions ({}, {}) do not match training ({}, {})",
            x.ncols(),
            y.ncols(),
            dirs.v.nrows(),
            dirs.w.nrows()
        )));
    }
    let hx = dirs.project_x(x);
    let hy = dirs.project_y(y);
    let mut correlations = Vec::with_capacity(dirs.rank());
    let (mut num, mut wsum) = (0.0, 0.0);
    for i in 0..dirs.rank() {
        let r = pearson(hx.column(i).as_slice(), hy.column(i).as_slice());
        if let Some(r) = r {
            num += dirs.weights[i] * r;
            wsum += dirs.weights[i];
        }
        correlations.push(r);
    }
    let skipped = correlations.iter().filter(|c| c.is_none()).count();
    if skipped > 0 {
        log::debug!("{skipped} degenerate canonical direction(s) skipped on the test fold");
    }
    if !(wsum > 0.0) {
        return Err(Error::numerical(
            "every canonical direction is degenerate on the test fold",
        ));
    }
    Ok(CcaEval {
        score: num / wsum,
        correlations,
    })
}

pub fn eval_cca(dirs: &CcaDirections, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    eval_cca_detailed(dirs, x, y).map(|e| e.score)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CcaProtocol {
    pub folds: usize,
    pub eval_folds: usize,
    pub seed: u64,
    /// Deal rows into folds class by class instead of plain shuffled blocks.
    pub stratify: bool,
    #[serde(flatten)]
    pub options: CcaOptions,
}

impl Default for CcaProtocol {
    fn default() -> Self {
        Self {
            folds: 10,
            eval_folds: 3,
            seed: 0,
            stratify: false,
            options: CcaOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcaResult {
    pub layer: usize,
    /// `None` means all accents.
    pub accent: Option<String>,
    pub fold_scores: Vec<f64>,
    pub score: f64,
    pub per_fold_rho: Vec<Vec<Option<f64>>>,
}

/// Seeded fold membership: `folds[f]` lists row indices of fold `f`.
pub fn split_folds<S: AsRef<str>>(
    labels: &[S],
    folds: usize,
    seed: u64,
    stratify: bool,
) -> Vec<Vec<usize>> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    Stream::new(seed).shuffle(&mut order);
    let mut out = vec![Vec::new(); folds];
    if stratify {
        order.sort_by(|&a, &b| labels[a].as_ref().cmp(labels[b].as_ref()));
        for (pos, &row) in order.iter().enumerate() {
            out[pos % folds].push(row);
        }
    } else {
        for f in 0..folds {
            out[f] = order[f * n / folds..(f + 1) * n / folds].to_vec();
        }
    }
    out
}

/// The fold protocol: fit on all folds but one, score the held-out fold,
/// for each of the first `eval_folds` folds; the result is the mean.
pub fn cca_protocol(
    table: &SegmentTable,
    accent: Option<&str>,
    protocol: &CcaProtocol,
) -> Result<CcaResult> {
    if protocol.folds < 2 || protocol.eval_folds == 0 || protocol.eval_folds > protocol.folds {
        return Err(Error::invalid(format!(
            "need 2 <= folds and 1 <= eval_folds <= folds, got {} and {}",
            protocol.folds, protocol.eval_folds
        )));
    }
    let filtered;
    let table = match accent {
        Some(a) => {
            filtered = table.filter_accent(a);
            &filtered
        }
        None => table,
    };
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    let all = LabelMatrix::from_labels(&labels);
    let (d1, d2) = (table.dim, all.classes.len());
    let needed = protocol.folds * (d1 + d2);
    if table.len() < needed {
        return Err(Error::invalid(format!(
            "layer {} accent {}: {} rows, the {}-fold protocol needs at least {}",
            table.layer,
            accent.unwrap_or("all"),
            table.len(),
            protocol.folds,
            needed
        )));
    }
    if d2 < 2 {
        return Err(Error::invalid("all segments carry the same label"));
    }
    let x = table.matrix();
    let folds = split_folds(&labels, protocol.folds, protocol.seed, protocol.stratify);

    let evals: Vec<Result<CcaEval>> = (0..protocol.eval_folds)
        .into_par_iter()
        .map(|f| {
            let test = &folds[f];
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, rows)| rows.iter().copied())
                .collect();
            let train_labels: Vec<&str> = train.iter().map(|&i| labels[i]).collect();
            let present: BTreeSet<&str> = train_labels.iter().copied().collect();
            if present.len() < all.classes.len() {
                log::warn!(
                    "layer {} fold {f}: {} class(es) absent from training, columns dropped",
                    table.layer,
                    all.classes.len() - present.len()
                );
            }
            let classes: Vec<String> = present.iter().map(|s| s.to_string()).collect();
            let test_labels: Vec<&str> = test.iter().map(|&i| labels[i]).collect();
            let y_train = LabelMatrix::encode(&train_labels, classes.clone()).y;
            let y_test = LabelMatrix::encode(&test_labels, classes).y;
            let x_train = x.select_rows(&train);
            let x_test = x.select_rows(test);
            let dirs = fit_cca(&x_train, &y_train, &protocol.options)?;
            eval_cca_detailed(&dirs, &x_test, &y_test)
        })
        .collect();

    let mut fold_scores = Vec::with_capacity(evals.len());
    let mut per_fold_rho = Vec::with_capacity(evals.len());
    for e in evals {
        let e = e?;
        fold_scores.push(e.score);
        per_fold_rho.push(e.correlations);
    }
    let score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
    Ok(CcaResult {
        layer: table.layer,
        accent: accent.map(str::to_string),
        fold_scores,
        score,
        per_fold_rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rng: &mut Stream, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.normal())
    }

    #[test]
    fn identical_one_hot_views_correlate_fully() {
        let labels: Vec<String> = (0..300).map(|i| format!("c{}", i % 3)).collect();
        let y = LabelMatrix::from_labels(&labels).y;
        let dirs = fit_cca(&y, &y, &CcaOptions::default()).unwrap();
        // one-hot covariance has rank 2; the null direction is truncated
        assert_eq!(dirs.rank(), 2);
        assert!(dirs.train_correlations.iter().all(|&r| r > 0.999));
        assert!((eval_cca(&dirs, &y, &y).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eval_on_training_data_matches_train_score() {
        let mut rng = Stream::new(5);
        let labels: Vec<String> = (0..2000).map(|_| format!("p{}", rng.below(6))).collect();
        let y = LabelMatrix::from_labels(&labels).y;
        let x = DMatrix::from_fn(2000, 8, |i, j| {
            let c = labels[i].as_bytes()[1] as f64;
            if j < 3 {
                c * (j as f64 + 1.0) * 0.1
            } else {
                0.0
            }
        }) + gaussian(&mut rng, 2000, 8);
        let dirs = fit_cca(&x, &y, &CcaOptions::default()).unwrap();
        let e = eval_cca(&dirs, &x, &y).unwrap();
        assert!(
            (e - dirs.train_score()).abs() < 1e-6,
            "{e} vs {}",
            dirs.train_score()
        );
        for w in dirs.train_correlations.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!((dirs.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_variates_are_uncorrelated() {
        let mut rng = Stream::new(17);
        let x = gaussian(&mut rng, 3000, 10);
        let mix = gaussian(&mut rng, 10, 6);
        let y = &x * mix + gaussian(&mut rng, 3000, 6) * 2.0;
        let dirs = fit_cca(&x, &y, &CcaOptions::default()).unwrap();
        let hx = dirs.project_x(&x);
        let hy = dirs.project_y(&y);
        let n1 = (x.nrows() - 1) as f64;
        let gx = hx.tr_mul(&hx) / n1;
        let gy = hy.tr_mul(&hy) / n1;
        for i in 0..dirs.rank() {
            for j in 0..dirs.rank() {
                if i != j {
                    assert!(gx[(i, j)].abs() < 1e-6, "x gram {i},{j} = {}", gx[(i, j)]);
                    assert!(gy[(i, j)].abs() < 1e-6, "y gram {i},{j} = {}", gy[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn error_paths() {
        let x = DMatrix::from_element(5, 3, 1.0);
        assert!(fit_cca(&x, &x, &CcaOptions::default()).is_err()); // zero variance
        let mut rng = Stream::new(1);
        let x = gaussian(&mut rng, 4, 4);
        assert!(fit_cca(&x, &x, &CcaOptions::default()).is_err()); // n too small
        let y = DMatrix::from_element(50, 1, 1.0);
        let x = gaussian(&mut rng, 50, 2);
        assert!(fit_cca(&x, &y, &CcaOptions::default()).is_err()); // constant labels
    }

    #[test]
    fn stratified_folds_partition_rows() {
        let labels: Vec<String> = (0..103).map(|i| format!("c{}", i % 4)).collect();
        for strat in [false, true] {
            let folds = split_folds(&labels, 10, 3, strat);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            assert_eq!(all, (0..103).collect::<Vec<_>>());
            assert!(folds.iter().all(|f| f.len() == 10 || f.len() == 11));
        }
    }
}
