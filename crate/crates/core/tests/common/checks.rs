//! Whole-property checks shared by the integration tests and the acceptance
//! run. Each returns `Ok(summary)` or `Err(reason)`.

use std::time::{Duration, Instant};

use flowsynth::codec::{decode, encode, fit_codebook, FeatureSpec, OVERFLOW_CATEGORY};
use flowsynth::eval::{fit_ocsvm, objective, solve, DEFAULT_MAX_ITER};
use flowsynth::ingest::{ColumnKind, ColumnSpec, FlowTable};
use flowsynth::linalg::Matrix;
use flowsynth::pca::pca_matrix;
use flowsynth::train::{evaluate_loss, loss_and_grads, train, Batch};
use flowsynth::{Architecture, BinningMode, Model, ModelConfig, Rng, SymbolDataset, TrainConfig};

use super::oracle::{gradient_suite, tolerance};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradients() -> Outcome {
    let t = Instant::now();
    let checks = gradient_suite(20);
    let elapsed = t.elapsed();
    for c in &checks {
        ensure(c.worst < tolerance(c.name), || {
            format!("{} relative error {:.3e} over tolerance {:.0e}", c.name, c.worst, tolerance(c.name))
        })?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    Ok(format!("{} ops x 20 draws, worst rel err {worst:.2e}, {:.1}s", checks.len(), elapsed.as_secs_f64()))
}

/// `n` random sequences: the start symbol, then `len − 1` value symbols.
pub fn random_dataset(n: usize, len: usize, vocab: usize, rng: &mut Rng) -> SymbolDataset {
    let mut ids = Vec::with_capacity(n * len);
    for _ in 0..n {
        ids.push(vocab - 1);
        ids.extend((1..len).map(|_| rng.below(vocab - 1)));
    }
    SymbolDataset::new(ids, len, vocab).unwrap()
}

/// A small configuration of `arch`, cheap enough for exhaustive checks.
pub fn small_config(arch: Architecture, vocab: usize, context: usize) -> ModelConfig {
    let mut c = ModelConfig::new(arch, vocab, context);
    c.embed_dim = 16;
    c.hidden_dim = 16;
    c.n_blocks = 2;
    c.n_heads = 2;
    c
}

fn softmax64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Fresh models predict uniformly: step-0 cross-entropy close to `ln V` for
/// a small ε and exactly uniform softmax rows for ε = 0.
pub fn eps_init() -> Outcome {
    let vocab = 50;
    let target = (vocab as f64).ln();
    let mut rng = Rng::new(2024);
    let ds = random_dataset(64, 10, vocab, &mut rng);
    let batch = Batch::from_indices(&ds, &(0..64).collect::<Vec<_>>());
    let mut parts = Vec::new();
    for arch in Architecture::ALL {
        let cfg = ModelConfig::new(arch, vocab, 9);
        let m = Model::init(cfg.clone(), &mut Rng::new(7)).map_err(|e| e.to_string())?;
        let loss = loss_and_grads(&m, &batch).map_err(|e| e.to_string())?.loss as f64;
        ensure((0.95 * target..=1.05 * target).contains(&loss), || {
            format!("{arch} step-0 loss {loss:.4} outside [0.95, 1.05]·ln {vocab}")
        })?;

        let mut flat = cfg;
        flat.eps_init = 0.0;
        let m = Model::init(flat, &mut Rng::new(7)).map_err(|e| e.to_string())?;
        let logits = m.logits(&batch.inputs, batch.batch).map_err(|e| e.to_string())?;
        let worst = logits
            .data()
            .chunks(vocab)
            .flat_map(softmax64)
            .map(|p| (p - 1.0 / vocab as f64).abs())
            .fold(0.0, f64::max);
        ensure(worst < 1e-7, || format!("{arch} with eps=0 deviates from uniform by {worst:.2e}"))?;
        parts.push(format!("{arch} {loss:.4}"));
    }
    Ok(format!("ln 50 = {target:.4}; step-0 loss {}; eps=0 exactly uniform", parts.join(", ")))
}

/// Changing inputs after position `t` must leave logits up to `t`
/// bit-identical, for every `t` and several lengths.
pub fn causality() -> Outcome {
    let vocab = 20;
    let mut rng = Rng::new(99);
    let mut checked = 0;
    for arch in Architecture::ALL {
        for len in [1usize, 2, 5, 12] {
            let cfg = small_config(arch, vocab, 12);
            let m = Model::init(cfg, &mut Rng::new(len as u64)).map_err(|e| e.to_string())?;
            let batch = 3;
            let ids: Vec<usize> = (0..batch * len).map(|_| rng.below(vocab)).collect();
            let base = m.logits(&ids, batch).map_err(|e| e.to_string())?;
            for t in 0..len {
                let mut other = ids.clone();
                for b in 0..batch {
                    for s in t + 1..len {
                        other[b * len + s] = (ids[b * len + s] + 1 + rng.below(vocab - 1)) % vocab;
                    }
                }
                let out = m.logits(&other, batch).map_err(|e| e.to_string())?;
                for b in 0..batch {
                    let range = b * len * vocab..(b * len + t + 1) * vocab;
                    let same = base.data()[range.clone()]
                        .iter()
                        .zip(&out.data()[range])
                        .all(|(x, y)| x.to_bits() == y.to_bits());
                    ensure(same, || format!("{arch}: T={len}, changing inputs after t={t} moved earlier logits"))?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (architecture, T, t) cases bit-identical"))
}

#[derive(Clone, Debug)]
pub struct Memorization {
    pub arch: Architecture,
    pub final_loss: f64,
    /// Lowest achievable mean loss on the training sequences.
    pub floor: f64,
    pub elapsed: Duration,
}

/// Lowest mean per-position cross-entropy any model can reach on `indices`:
/// the empirical entropy of the sequences divided by the predicted positions.
pub fn entropy_floor(ds: &SymbolDataset, indices: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &i in indices {
        *counts.entry(ds.sequence(i).to_vec()).or_insert(0usize) += 1;
    }
    let n = indices.len() as f64;
    let h: f64 = counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum();
    h / (ds.seq_len() - 1) as f64
}

/// 5,000 Adam steps on a 50-sequence corpus of length 10 with `K = 49`.
pub fn memorize(arch: Architecture) -> Result<Memorization, String> {
    let ds = random_dataset(50, 10, 50, &mut Rng::new(31));
    let cfg = TrainConfig {
        max_steps: 5000,
        batch_size: 32,
        learning_rate: Some(3e-3),
        eval_every: 1000,
        seed: 5,
        ..TrainConfig::default()
    };
    let (train_idx, _) = flowsynth::train::batch::split(ds.len(), cfg.holdout_fraction);
    let mut m = Model::init(ModelConfig::new(arch, 50, 9), &mut Rng::new(3)).map_err(|e| e.to_string())?;
    let t = Instant::now();
    train(&mut m, &ds, &cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let final_loss = evaluate_loss(&m, &ds, &train_idx).map_err(|e| e.to_string())? as f64;
    Ok(Memorization {
        arch,
        final_loss,
        floor: entropy_floor(&ds, &train_idx),
        elapsed,
    })
}

/// Random flows with three numeric and two categorical columns.
pub fn random_flows(n: usize, rng: &mut Rng) -> FlowTable {
    let names = ["bytes", "duration", "port", "proto", "app"];
    let kinds = [
        ColumnKind::Numeric,
        ColumnKind::Numeric,
        ColumnKind::Numeric,
        ColumnKind::Categorical,
        ColumnKind::Categorical,
    ];
    let schema = names
        .iter()
        .zip(kinds)
        .enumerate()
        .map(|(index, (name, kind))| ColumnSpec {
            name: name.to_string(),
            kind,
            index,
        })
        .collect();
    let mut numeric = Vec::with_capacity(3 * n);
    let mut proto = Vec::with_capacity(n);
    let mut app = Vec::with_capacity(n);
    for _ in 0..n {
        numeric.push((rng.normal() * 2.0 + 8.0).exp());
        numeric.push(rng.uniform_range(0.0, 120.0));
        numeric.push(rng.below(65536) as f64);
        proto.push(["tcp", "udp", "icmp"][rng.below(3)].to_string());
        // Heavy-tailed: far more distinct values than symbols.
        app.push(format!("app{}", (rng.uniform().powi(3) * 400.0) as usize));
    }
    FlowTable::new(schema, Matrix::new(n, 3, numeric).unwrap(), vec![proto, app]).unwrap()
}

/// `decode(encode(x))` stays within half a bin of every numeric value and
/// reproduces every kept category; encoding is total on out-of-range values.
pub fn codec_round_trip() -> Outcome {
    let mut rng = Rng::new(77);
    let table = random_flows(10_000, &mut rng);
    let features = ["bytes", "duration", "port", "proto", "app"];
    let mut overflowed = 0;
    for mode in [BinningMode::EqualWidth, BinningMode::EqualFrequency] {
        let cb = fit_codebook(&table, &features, 49, mode).map_err(|e| e.to_string())?;
        let ds = encode(&table, &cb).map_err(|e| e.to_string())?;
        let back = decode(ds.iter(), &cb).map_err(|e| e.to_string())?;
        ensure(back.skipped.is_empty() && back.table.n_rows() == table.n_rows(), || "rows lost".into())?;
        for (i, spec) in cb.specs().iter().enumerate() {
            let name = &cb.features()[i];
            match spec {
                FeatureSpec::NumericBins { edges } => {
                    let orig = table.numeric_column(name).unwrap();
                    let dec = back.table.numeric_column(name).unwrap();
                    for (r, (&x, &y)) in orig.iter().zip(&dec).enumerate() {
                        let b = cb.numeric_symbol(i, x);
                        let half = 0.5 * (edges[b + 1] - edges[b]);
                        ensure((x - y).abs() <= half * (1.0 + 1e-12), || {
                            format!("{mode:?} {name} row {r}: {x} decoded to {y}, half width {half}")
                        })?;
                    }
                }
                FeatureSpec::CategoryMap { .. } => {
                    let orig = table.categorical_column(name).unwrap();
                    let dec = back.table.categorical_column(name).unwrap();
                    for (x, y) in orig.iter().zip(dec) {
                        if y == OVERFLOW_CATEGORY {
                            overflowed += 1;
                        } else {
                            ensure(x == y, || format!("{name}: '{x}' decoded to '{y}'"))?;
                        }
                    }
                }
            }
        }
        // Values far outside the fitted range and unseen categories.
        let mut wild = random_flows(200, &mut rng);
        let extreme = wild.numeric_data().map_columns(|c, v| if c == 0 { -1e300 } else { v * 1e9 });
        let cats: Vec<Vec<String>> = (0..2).map(|_| vec!["never-seen".to_string(); 200]).collect();
        wild = FlowTable::new(wild.schema().to_vec(), extreme, cats).unwrap();
        let ds = encode(&wild, &cb).map_err(|e| format!("encode not total: {e}"))?;
        ensure(ds.ids().iter().all(|&s| s < cb.vocab_size()), || "symbol out of range".into())?;
    }
    Ok(format!("10k rows x 2 modes within half a bin; {overflowed} long-tail categories mapped to {OVERFLOW_CATEGORY}"))
}

pub fn gaussian(n: usize, d: usize, rng: &mut Rng) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Minimizes the one-class objective over `(w, ρ)` by exhaustive zooming
/// grid search on `w`, with ρ placed at the best score breakpoint (the
/// objective is piecewise linear in ρ with kinks at the scores).
pub fn brute_force_objective(phi: &Matrix, nu: f64) -> f64 {
    let best_for = |w: &[f64]| -> f64 {
        (0..phi.rows())
            .map(|r| objective(phi, w, w.iter().zip(phi.row(r)).map(|(a, b)| a * b).sum(), nu))
            .fold(f64::INFINITY, f64::min)
    };
    let (mut cx, mut cy, mut half) = (0.0f64, 0.0f64, 2.0f64);
    let steps = 40;
    let mut best = f64::INFINITY;
    while half > 1e-9 {
        let mut arg = (cx, cy);
        for i in 0..=steps {
            for j in 0..=steps {
                let w = [cx - half + 2.0 * half * i as f64 / steps as f64, cy - half + 2.0 * half * j as f64 / steps as f64];
                let v = best_for(&w);
                if v < best {
                    best = v;
                    arg = (w[0], w[1]);
                }
            }
        }
        (cx, cy) = arg;
        half *= 0.25;
    }
    best
}

/// ν-property on a large Gaussian sample and agreement with the brute-force
/// optimum on a 20-point instance.
pub fn ocsvm() -> Outcome {
    let mut rng = Rng::new(8);
    let nu = 0.1;
    let x = gaussian(10_000, 2, &mut rng);
    let m = fit_ocsvm(&x, nu, DEFAULT_MAX_ITER).map_err(|e| e.to_string())?;
    let frac = m.train_outlier_fraction;
    ensure((nu - 0.05..=nu + 0.02).contains(&frac) && (frac - 0.1).abs() <= 0.03, || {
        format!("training outlier fraction {frac}")
    })?;

    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut rng = Rng::new(100 + seed);
        let fitted = fit_ocsvm(&gaussian(200, 2, &mut rng), nu, DEFAULT_MAX_ITER).map_err(|e| e.to_string())?;
        let phi = fitted.features(&gaussian(20, 2, &mut rng));
        for small_nu in [0.1, 0.25, 0.5] {
            let sol = solve(&phi, small_nu, 20_000).map_err(|e| e.to_string())?;
            let oracle = brute_force_objective(&phi, small_nu);
            let diff = (sol.objective - oracle).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-3, || {
                format!("n=20, nu={small_nu}: solver {:.6} vs brute force {oracle:.6}", sol.objective)
            })?;
        }
    }
    Ok(format!("outlier fraction {frac:.4} at nu=0.1, n=10k; n=20 oracle gap <= {worst:.1e}"))
}

/// Eigenvalues of a symmetric matrix by power iteration with deflation.
pub fn power_iteration_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + k * 3) % 5) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..100_000 {
            let mut w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let next: f64 = (0..n).map(|i| w[i] * (0..n).map(|j| m[i][j] * w[j]).sum::<f64>()).sum();
            let moved = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = next;
            if moved < 1e-13 {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                m[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push(lambda);
    }
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

/// Correlation matrix computed directly from the definition.
pub fn correlation(x: &Matrix) -> Vec<Vec<f64>> {
    let (n, p) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..p).map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64).collect();
    let cov = |a: usize, b: usize| (0..n).map(|r| (x.get(r, a) - mean[a]) * (x.get(r, b) - mean[b])).sum::<f64>();
    (0..p)
        .map(|a| (0..p).map(|b| cov(a, b) / (cov(a, a) * cov(b, b)).sqrt()).collect())
        .collect()
}

/// Explained-variance ratios sum to one, decrease, and match the
/// power-iteration oracle on random correlated 6-column tables.
pub fn pca() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = Rng::new(500 + seed);
        let n = 300 + rng.below(300);
        let mix: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let scales = [3.0, 2.0, 1.5, 1.0, 0.5, 0.2];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = scales.iter().map(|s| s * rng.normal()).collect();
                (0..6).map(|c| (0..6).map(|k| z[k] * mix[k][c]).sum::<f64>() * (c + 1) as f64 + c as f64).collect()
            })
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let r = pca_matrix(&x, 6).map_err(|e| e.to_string())?;
        let ratios = &r.explained_variance_ratio;
        let total: f64 = ratios.iter().sum();
        ensure((total - 1.0).abs() <= 1e-6, || format!("ratios sum to {total}"))?;
        ensure(ratios.windows(2).all(|w| w[0] >= w[1]), || format!("ratios not sorted: {ratios:?}"))?;
        let eig = power_iteration_eigenvalues(&correlation(&x));
        let trace: f64 = eig.iter().map(|v| v.max(0.0)).sum();
        for (a, b) in ratios.iter().zip(&eig) {
            let diff = (a - b.max(0.0) / trace).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-6, || format!("seed {seed}: ratio {a} vs oracle {}", b / trace))?;
        }
    }
    Ok(format!("10 random 6-column tables; max deviation from oracle {worst:.1e}"))
}
