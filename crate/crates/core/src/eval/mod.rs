//! Fidelity of synthetic flows: one-class SVM inlier rate, per-feature
//! marginal distances, PCA drift and a real-versus-synthetic classifier.
//!
//! Everything is computed in decoded numeric space. Real and synthetic
//! tables are both passed through the codebook (encode, then decode), so
//! both sides carry the same quantization and only the joint structure
//! differs.

mod discriminator;
mod ocsvm;

use std::fmt::{self, Write as _};

pub use discriminator::discriminative_score;
pub use ocsvm::{fit_ocsvm, objective, solve, OcsvmModel, Solution, DEFAULT_MAX_ITER, DEFAULT_NU};

use crate::codec::{decode, encode, Codebook, FeatureSpec};
use crate::error::{Error, Result};
use crate::ingest::FlowTable;
use crate::pca::{pca_matrix, ratio_drift};
use crate::rng::Rng;

/// Share of real rows held out from the one-class SVM fit.
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// `½ Σ |p_i − q_i|` after normalizing both histograms.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let at = |v: &[f64], s: f64, i: usize| if s > 0.0 { v.get(i).copied().unwrap_or(0.0) / s } else { 0.0 };
    0.5 * (0..n).map(|i| (at(p, sp, i) - at(q, sq, i)).abs()).sum::<f64>()
}

fn histogram(table: &FlowTable, cb: &Codebook, i: usize) -> Result<Vec<f64>> {
    let name = &cb.features()[i];
    let mut counts = vec![0.0; cb.k()];
    match &cb.specs()[i] {
        FeatureSpec::NumericBins { .. } => {
            let col = table.numeric_column(name).ok_or_else(|| Error::UnknownFeature(name.clone()))?;
            for v in col {
                counts[cb.numeric_symbol(i, v)] += 1.0;
            }
        }
        FeatureSpec::CategoryMap { .. } => {
            let col = table.categorical_column(name).ok_or_else(|| Error::UnknownFeature(name.clone()))?;
            for c in col {
                counts[cb.category_symbol(i, c)] += 1.0;
            }
        }
    }
    Ok(counts)
}

/// Total-variation distance between the codebook histograms of `feature` in
/// the two tables.
pub fn marginal_tv_distance(real: &FlowTable, synth: &FlowTable, cb: &Codebook, feature: &str) -> Result<f64> {
    let i = cb.position(feature).ok_or_else(|| Error::UnknownFeature(feature.to_string()))?;
    Ok(tv_distance(&histogram(real, cb, i)?, &histogram(synth, cb, i)?))
}

/// Deterministic `(train, holdout)` split of `0..n`, both sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derived(seed, "eval-split").shuffle(&mut idx);
    let n_holdout = (HOLDOUT_FRACTION * n as f64).round() as usize;
    let mut holdout = idx.split_off(n - n_holdout);
    idx.sort_unstable();
    holdout.sort_unstable();
    (idx, holdout)
}

/// Passes `table` through the codebook so it carries the same quantization
/// as decoded samples.
pub fn round_trip(table: &FlowTable, cb: &Codebook) -> Result<FlowTable> {
    let ds = encode(table, cb)?;
    Ok(decode(ds.iter(), cb)?.table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub nu: f64,
    /// Percentage of synthetic rows inside the real-data region.
    pub inlier_pct: f64,
    /// The same rate on held-out real rows.
    pub real_holdout_inlier_pct: f64,
    /// `max(acc, 1 − acc)` of the real-versus-synthetic classifier.
    pub discriminative_accuracy: f64,
    /// Per-feature marginal total-variation distance, codebook order.
    pub tv: Vec<(String, f64)>,
    pub pca_real: Vec<f64>,
    /// `None` when the synthetic numeric columns are degenerate.
    pub pca_synth: Option<Vec<f64>>,
    pub pca_drift: Option<Vec<f64>>,
    pub n_real_train: usize,
    pub n_real_holdout: usize,
    pub n_synth: usize,
    pub ocsvm_iterations: usize,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

impl EvalReport {
    pub fn tv_mean(&self) -> f64 {
        self.tv.iter().map(|(_, d)| d).sum::<f64>() / self.tv.len().max(1) as f64
    }

    pub fn tv_max(&self) -> f64 {
        self.tv.iter().map(|(_, d)| *d).fold(0.0, f64::max)
    }

    pub fn pca_drift_max(&self) -> Option<f64> {
        self.pca_drift.as_ref().map(|d| d.iter().copied().fold(0.0, f64::max))
    }

    pub const CSV_HEADER: &'static str =
        "model,nu,inlier_pct,real_holdout_inlier_pct,discriminative_accuracy,tv_mean,tv_max,pca_drift_max,n_synth";

    /// One CSV row matching [`EvalReport::CSV_HEADER`].
    pub fn csv_row(&self, label: &str) -> String {
        let drift = self.pca_drift_max().map_or_else(|| "NA".to_string(), |d| format!("{d:.6}"));
        format!(
            "{label},{},{:.4},{:.4},{:.4},{:.6},{:.6},{drift},{}",
            self.nu,
            self.inlier_pct,
            self.real_holdout_inlier_pct,
            self.discriminative_accuracy,
            self.tv_mean(),
            self.tv_max(),
            self.n_synth
        )
    }
}

/// Plain `key=value` lines.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let _ = writeln!(s, "nu={}", self.nu);
        let _ = writeln!(s, "inlier_pct={:.4}", self.inlier_pct);
        let _ = writeln!(s, "real_holdout_inlier_pct={:.4}", self.real_holdout_inlier_pct);
        let _ = writeln!(s, "discriminative_accuracy={:.4}", self.discriminative_accuracy);
        let _ = writeln!(s, "n_real_train={}", self.n_real_train);
        let _ = writeln!(s, "n_real_holdout={}", self.n_real_holdout);
        let _ = writeln!(s, "n_synth={}", self.n_synth);
        let _ = writeln!(s, "ocsvm_iterations={}", self.ocsvm_iterations);
        for (name, d) in &self.tv {
            let _ = writeln!(s, "tv.{name}={d:.6}");
        }
        let _ = writeln!(s, "tv_mean={:.6}", self.tv_mean());
        let _ = writeln!(s, "pca_real={}", join(&self.pca_real));
        match (&self.pca_synth, &self.pca_drift) {
            (Some(p), Some(d)) => {
                let _ = writeln!(s, "pca_synth={}", join(p));
                let _ = writeln!(s, "pca_drift={}", join(d));
            }
            _ => {
                let _ = writeln!(s, "pca_synth=NA");
                let _ = writeln!(s, "pca_drift=NA");
            }
        }
        f.write_str(&s)
    }
}

/// Scores `synth` against `real`. The one-class SVM is fitted on a training
/// split of the real rows and also scores the held-out real rows, which
/// anchors the synthetic rate. Pure in all arguments.
pub fn evaluate(real: &FlowTable, synth: &FlowTable, cb: &Codebook, nu: f64, seed: u64) -> Result<EvalReport> {
    let real = round_trip(real, cb)?;
    let synth = round_trip(synth, cb)?;
    let numeric = cb.numeric_features();
    if numeric.is_empty() {
        return Err(Error::Degenerate("the codebook has no numeric features to evaluate".into()));
    }
    let real_m = real.select_numeric(&numeric)?;
    let synth_m = synth.select_numeric(&numeric)?;

    let (train, holdout) = split_indices(real_m.rows(), seed);
    let svm = fit_ocsvm(&real_m.select_rows(&train), nu, DEFAULT_MAX_ITER)?;
    let real_holdout_inlier_pct = svm.inlier_rate(&real_m.select_rows(&holdout))?;
    let inlier_pct = svm.inlier_rate(&synth_m)?;

    let tv = cb
        .features()
        .iter()
        .map(|name| Ok((name.clone(), marginal_tv_distance(&real, &synth, cb, name)?)))
        .collect::<Result<Vec<_>>>()?;

    let max = numeric.len();
    let pca_real = pca_matrix(&real_m, max)?.explained_variance_ratio;
    let pca_synth = pca_matrix(&synth_m, max).ok().map(|p| p.explained_variance_ratio);
    let pca_drift = pca_synth.as_ref().map(|p| ratio_drift(&pca_real, p));

    let discriminative_accuracy = discriminative_score(&real_m, &synth_m, &mut Rng::derived(seed, "discriminator"))?;

    Ok(EvalReport {
        nu,
        inlier_pct,
        real_holdout_inlier_pct,
        discriminative_accuracy,
        tv,
        pca_real,
        pca_synth,
        pca_drift,
        n_real_train: train.len(),
        n_real_holdout: holdout.len(),
        n_synth: synth_m.rows(),
        ocsvm_iterations: svm.iterations,
    })
}
