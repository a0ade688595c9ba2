use std::collections::{BTreeMap, BTreeSet};

use layerprobe::probes::{fit_ridge, grouped_cv, mse, FoldAssignment, LambdaPolicy};
use layerprobe::rng::Stream;
use layerprobe::table::{SegmentRow, SegmentTable, Target};
use nalgebra::DMatrix;

/// Rows spread round-robin over `speakers` speakers of two accents.
fn table(x: &DMatrix<f64>, y: &[f64], speakers: usize) -> SegmentTable {
    let rows = (0..x.nrows())
        .map(|i| {
            let s = i % speakers;
            SegmentRow {
                vector: x.row(i).iter().copied().collect(),
                label: "w".into(),
                speaker: format!("spk{s}"),
                accent: format!("A{}", s % 2),
                utt_id: format!("u{i}"),
                index: 0,
                start_s: 0.0,
                end_s: 0.3,
                prominence: Some(y[i]),
                boundary: Some(-y[i]),
            }
        })
        .collect();
    SegmentTable {
        layer: 0,
        dim: x.ncols(),
        rows,
    }
}

fn assignment(t: &SegmentTable) -> FoldAssignment {
    FoldAssignment::auto(
        t.rows
            .iter()
            .map(|r| (r.speaker.as_str(), r.accent.as_str())),
        4,
    )
    .unwrap()
}

fn features(r: &mut Stream, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, j| (1.0 + 0.5 * j as f64) * r.normal() + j as f64)
}

fn planted(r: &mut Stream, x: &DMatrix<f64>, noise_sd: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..x.ncols())
        .map(|_| r.normal() / (x.ncols() as f64).sqrt())
        .collect();
    (0..x.nrows())
        .map(|i| x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise_sd * r.normal())
        .collect()
}

/// Plain gradient descent on the same objective, in standardized coordinates.
fn gradient_descent(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let (n, d) = x.shape();
    let nf = n as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / nf).collect();
    let stds: Vec<f64> = x
        .column_iter()
        .zip(&means)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf).sqrt())
        .collect();
    let z = DMatrix::from_fn(n, d, |i, j| (x[(i, j)] - means[j]) / stds[j]);
    // step 1/L with L bounded by the trace of Z'Z/n plus lambda
    let step = 1.0 / (d as f64 + lambda);
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..200_000 {
        let resid: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|j| z[(i, j)] * w[j]).sum::<f64>() + b - y[i])
            .collect();
        let gw: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| z[(i, j)] * resid[i]).sum::<f64>() / nf + lambda * w[j])
            .collect();
        let gb = resid.iter().sum::<f64>() / nf;
        w.iter_mut().zip(&gw).for_each(|(wj, g)| *wj -= step * g);
        b -= gb;
        if gw.iter().chain([&gb]).all(|g| g.abs() < 1e-12) {
            break;
        }
    }
    (w, b)
}

#[test]
fn closed_form_matches_gradient_descent() {
    let mut r = Stream::new(1);
    let x = features(&mut r, 1000, 32);
    let y = planted(&mut r, &x, 0.5);
    let lambda = LambdaPolicy::Auto.resolve(&x);
    let model = fit_ridge(&x, &y, lambda).unwrap();
    let (w, b) = gradient_descent(&x, &y, lambda);
    for (a, g) in model.weights.iter().zip(&w) {
        assert!((a - g).abs() <= 1e-4, "{a} vs {g}");
    }
    assert!((model.bias - b).abs() <= 1e-4);
    let pred_gd: Vec<f64> = (0..1000)
        .map(|i| {
            b + (0..32)
                .map(|j| (x[(i, j)] - model.feature_means[j]) / model.feature_stds[j] * w[j])
                .sum::<f64>()
        })
        .collect();
    let (m1, m2) = (mse(&model.predict(&x).unwrap(), &y), mse(&pred_gd, &y));
    assert!((m1 - m2).abs() <= 1e-4, "{m1} vs {m2}");
}

#[test]
fn planted_noise_sets_the_error_floor() {
    // D is large enough that the excess risk of estimating w (about
    // D/(n_train - D), 9% of the noise here) dominates the 2% sampling error
    // of the MSE, so the floor is not crossed by chance.
    let mut r = Stream::new(2);
    let x = features(&mut r, 4000, 256);
    let y = planted(&mut r, &x, 0.2);
    let t = table(&x, &y, 8);
    let res = grouped_cv(&t, Target::Prominence, &assignment(&t), LambdaPolicy::Auto).unwrap();
    assert!(
        (0.04..=0.05).contains(&res.overall_mse),
        "{}",
        res.overall_mse
    );
    assert_eq!(res.per_fold_mse.len(), 4);
    let weighted: f64 = res
        .per_fold_mse
        .iter()
        .map(|(_, m, c)| m * *c as f64)
        .sum::<f64>()
        / 4000.0;
    assert!((weighted - res.overall_mse).abs() < 1e-12);
}

#[test]
fn unrelated_targets_cannot_beat_their_variance() {
    let mut r = Stream::new(3);
    let x = features(&mut r, 2000, 16);
    let y: Vec<f64> = (0..2000).map(|_| r.normal()).collect();
    let t = table(&x, &y, 8);
    let res = grouped_cv(&t, Target::Prominence, &assignment(&t), LambdaPolicy::Auto).unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
    assert!(res.overall_mse >= 0.95 * var);
}

#[test]
fn scaling_targets_scales_mse_quadratically() {
    let mut r = Stream::new(4);
    let x = features(&mut r, 800, 8);
    let y = planted(&mut r, &x, 0.3);
    let t = table(&x, &y, 8);
    let a = assignment(&t);
    let base = grouped_cv(&t, Target::Boundary, &a, LambdaPolicy::Auto).unwrap();
    let c = 3.5;
    let scaled = table(&x, &y.iter().map(|v| c * v).collect::<Vec<_>>(), 8);
    let res = grouped_cv(&scaled, Target::Boundary, &a, LambdaPolicy::Auto).unwrap();
    assert!((res.overall_mse - c * c * base.overall_mse).abs() <= 1e-9 * res.overall_mse);
    for (acc, m) in &base.per_accent_mse {
        assert!((res.per_accent_mse[acc] - c * c * m).abs() <= 1e-9 * res.per_accent_mse[acc]);
    }
}

#[test]
fn folds_never_share_speakers() {
    let mut r = Stream::new(5);
    let x = features(&mut r, 400, 4);
    let y = planted(&mut r, &x, 0.1);
    let t = table(&x, &y, 8);
    let a = assignment(&t);
    for f in 0..a.folds {
        let test: BTreeSet<&str> = t
            .rows
            .iter()
            .filter(|r| a.fold_of(&r.speaker).unwrap() == f)
            .map(|r| r.speaker.as_str())
            .collect();
        let train: BTreeSet<&str> = t
            .rows
            .iter()
            .filter(|r| a.fold_of(&r.speaker).unwrap() != f)
            .map(|r| r.speaker.as_str())
            .collect();
        assert!(!test.is_empty());
        assert!(test.is_disjoint(&train));
    }
    assert!(a.is_accent_balanced(
        t.rows
            .iter()
            .map(|r| (r.speaker.as_str(), r.accent.as_str()))
    ));

    let mut partial: BTreeMap<String, usize> = a.speaker_to_fold.clone();
    partial.remove("spk5");
    let e = grouped_cv(
        &t,
        Target::Prominence,
        &FoldAssignment::new(4, partial).unwrap(),
        LambdaPolicy::Auto,
    )
    .unwrap_err();
    assert!(e.to_string().contains("spk5"), "{e}");
}
