//! Real-versus-synthetic classifier accuracy.
//!
//! A logistic regression sees the standardized features together with all
//! pairwise products (re-standardized). Without the products the model
//! could only compare means, and synthetic data that gets the marginals
//! right while breaking the correlations would pass as real.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Standardizer};
use crate::rng::Rng;

pub const MIN_ROWS: usize = 200;
pub const EPOCHS: usize = 500;
pub const LEARNING_RATE: f64 = 0.1;
pub const TRAIN_FRACTION: f64 = 0.7;
/// Rows kept per class; larger inputs are subsampled.
pub const MAX_ROWS_PER_CLASS: usize = 10_000;

/// Appends `x_i·x_j` for every `i ≤ j`.
fn expand(z: &Matrix) -> Matrix {
    let p = z.cols();
    let width = p + p * (p + 1) / 2;
    let mut data = Vec::with_capacity(z.rows() * width);
    for r in 0..z.rows() {
        let row = z.row(r);
        data.extend_from_slice(row);
        for i in 0..p {
            for j in i..p {
                data.push(row[i] * row[j]);
            }
        }
    }
    Matrix::new(z.rows(), width, data).expect("consistent width")
}

/// Fits `w, b` by full-batch gradient descent on the mean log-loss.
fn fit_logistic(x: &Matrix, y: &[f64]) -> (Vec<f64>, f64) {
    let (n, p) = (x.rows(), x.cols());
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut gw = vec![0.0; p];
    for _ in 0..EPOCHS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (r, &label) in y.iter().enumerate() {
            let row = x.row(r);
            let s = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = sigmoid(s) - label;
            gb += err;
            for (g, a) in gw.iter_mut().zip(row) {
                *g += err * a;
            }
        }
        let scale = LEARNING_RATE / n as f64;
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= scale * g;
        }
        b -= scale * gb;
    }
    (w, b)
}

/// Like [`Standardizer::fit`], but constant columns are only centred.
fn tolerant_standardizer(m: &Matrix) -> Standardizer {
    let mean = m.column_means();
    let n = m.rows().max(2) as f64;
    let std = (0..m.cols())
        .map(|c| {
            let ss: f64 = (0..m.rows()).map(|r| (m.get(r, c) - mean[c]).powi(2)).sum();
            let s = (ss / (n - 1.0)).sqrt();
            if s > 1e-12 * (1.0 + mean[c].abs()) {
                s
            } else {
                1.0
            }
        })
        .collect();
    Standardizer { mean, std }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Held-out accuracy of a classifier separating `real` from `synth`, folded
/// to `max(acc, 1 − acc)`.
pub fn discriminative_score(real: &Matrix, synth: &Matrix, rng: &mut Rng) -> Result<f64> {
    if real.cols() != synth.cols() {
        return Err(Error::shape(
            "discriminative score",
            format!("{} real features vs {} synthetic", real.cols(), synth.cols()),
        ));
    }
    if real.rows() < MIN_ROWS || synth.rows() < MIN_ROWS {
        return Err(Error::InvalidArgument(format!(
            "discriminative score needs at least {MIN_ROWS} rows per set, got {} and {}",
            real.rows(),
            synth.rows()
        )));
    }
    // Balance the classes so that accuracy 0.5 means "indistinguishable".
    let per_class = real.rows().min(synth.rows()).min(MAX_ROWS_PER_CLASS);
    let mut pick = |m: &Matrix| {
        let mut idx: Vec<usize> = (0..m.rows()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(per_class);
        idx.sort_unstable();
        m.select_rows(&idx)
    };
    let x = pick(real).vstack(&pick(synth))?;
    let labels: Vec<f64> = (0..2 * per_class).map(|i| if i < per_class { 1.0 } else { 0.0 }).collect();

    let mut order: Vec<usize> = (0..x.rows()).collect();
    rng.shuffle(&mut order);
    let n_train = (TRAIN_FRACTION * x.rows() as f64).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train);
    let y_train: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<f64> = test_idx.iter().map(|&i| labels[i]).collect();
    if y_train.iter().all(|&v| v == y_train[0]) || y_test.is_empty() {
        return Err(Error::Degenerate("train/test split holds a single class".into()));
    }

    let x_train = x.select_rows(train_idx);
    let first = tolerant_standardizer(&x_train);
    let q_train = expand(&first.transform(&x_train));
    let second = tolerant_standardizer(&q_train);
    let features = |m: &Matrix| second.transform(&expand(&first.transform(m)));
    let (w, b) = fit_logistic(&features(&x_train), &y_train);

    let x_test = features(&x.select_rows(test_idx));
    let correct = y_test
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let s = b + x_test.row(r).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (s >= 0.0) == (label == 1.0)
        })
        .count();
    let acc = correct as f64 / y_test.len() as f64;
    Ok(acc.max(1.0 - acc))
}
