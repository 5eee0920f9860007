//! Float-64 reference implementations of the differentiable ops and a
//! central finite-difference gradient checker. Nothing here calls into the
//! autodiff engine; checks compare its analytic gradients against these.
#![allow(dead_code)]

use flowsynth::graph::{Graph, NormMode, RunningStats, Var};
use flowsynth::{Rng, Tensor};

pub const FD_STEP: f64 = 1e-3;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn embedding(table: &[f64], ids: &[usize], d: usize) -> Vec<f64> {
    ids.iter()
        .flat_map(|&i| table[i * d..(i + 1) * d].to_vec())
        .collect()
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn softmax(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(move |v| (v - m).exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

pub fn cross_entropy(logits: &[f64], targets: &[usize], v: usize, divisor: f64) -> f64 {
    logits
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum::<f64>()
        / divisor
}

pub fn batch_norm_train(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let n = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|i| x[i * c + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * c + j] = (col[i] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j];
        }
    }
    out
}

pub fn batch_norm_eval(x: &[f64], gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let j = i % c;
            (v - mean[j]) / (var[j] + 1e-5).sqrt() * gamma[j] + beta[j]
        })
        .collect()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = gamma.len();
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            row.iter()
                .zip(gamma.iter().zip(beta))
                .map(move |(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
                .collect::<Vec<_>>()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn causal_conv(
    x: &[f64],
    f: &[f64],
    batch: usize,
    len: usize,
    c_in: usize,
    c_out: usize,
    taps: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * len * c_out];
    for b in 0..batch {
        for t in 0..len {
            for k in 0..taps {
                let Some(src) = t.checked_sub(k * dilation) else {
                    continue;
                };
                for o in 0..c_out {
                    for i in 0..c_in {
                        y[(b * len + t) * c_out + o] +=
                            x[(b * len + src) * c_in + i] * f[(k * c_in + i) * c_out + o];
                    }
                }
            }
        }
    }
    y
}

pub fn attention(q: &[f64], k: &[f64], v: &[f64], batch: usize, len: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; batch * len * d];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..len {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..dh)
                            .map(|j| q[(b * len + t) * d + h * dh + j] * k[(b * len + s) * d + h * dh + j])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let p = softmax(&scores, scores.len());
                for (s, ps) in p.iter().enumerate() {
                    for j in 0..dh {
                        out[(b * len + t) * d + h * dh + j] += ps * v[(b * len + s) * d + h * dh + j];
                    }
                }
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` with respect to `inputs[which]`.
pub fn fd_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], which: usize) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let orig = work[which][i];
            work[which][i] = orig + FD_STEP;
            let up = f(&work);
            work[which][i] = orig - FD_STEP;
            let down = f(&work);
            work[which][i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with a floor so all-zero gradients compare equal.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (f64::from(*a) - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

pub fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (rng.normal() * scale) as f32).collect()
}

/// Values kept away from zero so relu kinks do not sit inside a FD step.
pub fn random_vec_off_zero(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v = rng.normal();
            if v.abs() > 0.05 {
                break v as f32;
            }
        })
        .collect()
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One checked op: its analytic gradients against finite differences of
/// the oracle. Returns the worst relative error over all inputs.
pub struct Check {
    pub name: &'static str,
    pub worst: f64,
}

/// Builds `loss = Σ proj ⊙ op(inputs)` in the graph and in the oracle and
/// compares gradients for every input.
pub fn check_op(
    shapes: &[Vec<usize>],
    values: &[Vec<f32>],
    proj: &[f32],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    oracle: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(values)
        .map(|(s, v)| g.param(&tensor(s, v.clone())))
        .collect();
    let out = build(&mut g, &vars);
    let out_shape = g.shape(out).to_vec();
    let w = g.constant(tensor(&out_shape, proj.to_vec()));
    let weighted = g.mul(out, w).unwrap();
    let loss = g.sum(weighted);
    g.backward(loss).unwrap();
    let wide: Vec<Vec<f64>> = values.iter().map(|v| widen(v)).collect();
    let pw = widen(proj);
    let f = |inp: &[Vec<f64>]| dot(&oracle(inp), &pw);
    (0..vars.len())
        .map(|i| rel_err(g.grad(vars[i]).unwrap(), &fd_grad(&f, &wide, i)))
        .fold(0.0, f64::max)
}

/// Scalar-loss variant: `build` returns the loss directly.
pub fn check_scalar(
    shapes: &[Vec<usize>],
    values: &[Vec<f32>],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    oracle: &dyn Fn(&[Vec<f64>]) -> f64,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(values)
        .map(|(s, v)| g.param(&tensor(s, v.clone())))
        .collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let wide: Vec<Vec<f64>> = values.iter().map(|v| widen(v)).collect();
    (0..vars.len())
        .map(|i| rel_err(g.grad(vars[i]).unwrap(), &fd_grad(oracle, &wide, i)))
        .fold(0.0, f64::max)
}

/// Runs every op's gradient check over `seeds` random shape/value draws and
/// returns the worst relative error per op.
pub fn gradient_suite(seeds: u64) -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut record = |name: &'static str, err: f64| {
        if let Some(c) = checks.iter_mut().find(|c| c.name == name) {
            c.worst = c.worst.max(err);
        } else {
            checks.push(Check { name, worst: err });
        }
    };
    for seed in 0..seeds {
        let mut rng = Rng::new(1000 + seed);
        let dim = |rng: &mut Rng, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);

        // matmul
        let (m, k, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 4));
        let a = random_vec(&mut rng, m * k, 1.0);
        let b = random_vec(&mut rng, k * n, 1.0);
        let p = random_vec(&mut rng, m * n, 1.0);
        record(
            "matmul",
            check_op(
                &[vec![m, k], vec![k, n]],
                &[a, b],
                &p,
                &|g, v| g.matmul(v[0], v[1]).unwrap(),
                &|i| matmul(&i[0], &i[1], m, k, n),
            ),
        );

        // embedding with duplicate ids
        let (rows, d) = (dim(&mut rng, 2, 5), dim(&mut rng, 1, 4));
        let ids: Vec<usize> = (0..dim(&mut rng, 1, 7)).map(|_| rng.below(rows)).collect();
        let table = random_vec(&mut rng, rows * d, 1.0);
        let p = random_vec(&mut rng, ids.len() * d, 1.0);
        let ids2 = ids.clone();
        record(
            "embedding_lookup",
            check_op(
                &[vec![rows, d]],
                &[table],
                &p,
                &move |g, v| g.embedding(v[0], &ids2).unwrap(),
                &|i| embedding(&i[0], &ids, d),
            ),
        );

        // tanh / relu
        let len = dim(&mut rng, 1, 12);
        let x = random_vec(&mut rng, len, 1.5);
        let p = random_vec(&mut rng, len, 1.0);
        record(
            "tanh_act",
            check_op(&[vec![len]], &[x], &p, &|g, v| g.tanh(v[0]), &|i| tanh(&i[0])),
        );
        let x = random_vec_off_zero(&mut rng, len);
        record(
            "relu_act",
            check_op(&[vec![len]], &[x], &p, &|g, v| g.relu(v[0]), &|i| relu(&i[0])),
        );

        // softmax
        let (r, c) = (dim(&mut rng, 1, 4), dim(&mut rng, 2, 6));
        let x = random_vec(&mut rng, r * c, 2.0);
        let p = random_vec(&mut rng, r * c, 1.0);
        record(
            "softmax_rows",
            check_op(
                &[vec![r, c]],
                &[x],
                &p,
                &|g, v| g.softmax_rows(v[0]).unwrap(),
                &|i| softmax(&i[0], c),
            ),
        );

        // cross entropy
        let (r, c) = (dim(&mut rng, 1, 6), dim(&mut rng, 2, 8));
        let x = random_vec(&mut rng, r * c, 2.0);
        let targets: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
        let divisor = dim(&mut rng, 1, 3) as f32;
        let t2 = targets.clone();
        record(
            "cross_entropy",
            check_scalar(
                &[vec![r, c]],
                &[x],
                &move |g, v| g.cross_entropy(v[0], &t2, divisor).unwrap(),
                &|i| cross_entropy(&i[0], &targets, c, f64::from(divisor)),
            ),
        );

        // batch norm, train and eval
        let (r, c) = (dim(&mut rng, 3, 8), dim(&mut rng, 1, 4));
        let x = random_vec(&mut rng, r * c, 2.0);
        let gamma = random_vec(&mut rng, c, 1.0);
        let beta = random_vec(&mut rng, c, 1.0);
        let p = random_vec(&mut rng, r * c, 1.0);
        record(
            "batch_norm",
            check_op(
                &[vec![r, c], vec![c], vec![c]],
                &[x.clone(), gamma.clone(), beta.clone()],
                &p,
                &|g, v| {
                    g.batch_norm(v[0], v[1], v[2], NormMode::Train, &RunningStats::new(c))
                        .unwrap()
                        .0
                },
                &|i| batch_norm_train(&i[0], &i[1], &i[2]),
            ),
        );
        let running = RunningStats {
            mean: random_vec(&mut rng, c, 1.0),
            var: (0..c).map(|_| 0.5 + rng.uniform() as f32).collect(),
        };
        let (rm, rv) = (widen(&running.mean), widen(&running.var));
        record(
            "batch_norm_eval",
            check_op(
                &[vec![r, c], vec![c], vec![c]],
                &[x, gamma, beta],
                &p,
                &move |g, v| {
                    g.batch_norm(v[0], v[1], v[2], NormMode::Eval, &running)
                        .unwrap()
                        .0
                },
                &|i| batch_norm_eval(&i[0], &i[1], &i[2], &rm, &rv),
            ),
        );

        // layer norm; width 2 is excluded because each normalised row is then
        // exactly ±1 and the true input gradient is O(eps).
        let (r, c) = (dim(&mut rng, 1, 5), dim(&mut rng, 3, 6));
        let x = random_vec(&mut rng, r * c, 2.0);
        let gamma = random_vec(&mut rng, c, 1.0);
        let beta = random_vec(&mut rng, c, 1.0);
        let p = random_vec(&mut rng, r * c, 1.0);
        record(
            "layer_norm",
            check_op(
                &[vec![r, c], vec![c], vec![c]],
                &[x, gamma, beta],
                &p,
                &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
                &|i| layer_norm(&i[0], &i[1], &i[2]),
            ),
        );

        // causal conv
        let (b, t, ci, co) = (
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 7),
            dim(&mut rng, 1, 3),
            dim(&mut rng, 1, 3),
        );
        let (taps, dil) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let x = random_vec(&mut rng, b * t * ci, 1.0);
        let f = random_vec(&mut rng, taps * ci * co, 1.0);
        let p = random_vec(&mut rng, b * t * co, 1.0);
        record(
            "causal_conv1d",
            check_op(
                &[vec![b, t, ci], vec![taps, ci, co]],
                &[x, f],
                &p,
                &|g, v| g.causal_conv1d(v[0], v[1], dil).unwrap(),
                &|i| causal_conv(&i[0], &i[1], b, t, ci, co, taps, dil),
            ),
        );

        // masked multi-head attention
        let heads = dim(&mut rng, 1, 2);
        let (b, t, d) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 5), heads * dim(&mut rng, 1, 3));
        let q = random_vec(&mut rng, b * t * d, 1.0);
        let kk = random_vec(&mut rng, b * t * d, 1.0);
        let vv = random_vec(&mut rng, b * t * d, 1.0);
        let p = random_vec(&mut rng, b * t * d, 1.0);
        let sh = vec![b, t, d];
        record(
            "causal_attention",
            check_op(
                &[sh.clone(), sh.clone(), sh],
                &[q, kk, vv],
                &p,
                &|g, v| g.causal_attention(v[0], v[1], v[2], heads).unwrap(),
                &|i| attention(&i[0], &i[1], &i[2], b, t, d, heads),
            ),
        );

        // 3-layer MLP through the whole backward pass
        let (n_in, h1, h2, classes, rows) = (
            dim(&mut rng, 2, 5),
            dim(&mut rng, 2, 6),
            dim(&mut rng, 2, 6),
            dim(&mut rng, 2, 5),
            dim(&mut rng, 2, 6),
        );
        let x = random_vec(&mut rng, rows * n_in, 1.0);
        let w1 = random_vec(&mut rng, n_in * h1, 0.7);
        let b1 = random_vec(&mut rng, h1, 0.1);
        let w2 = random_vec(&mut rng, h1 * h2, 0.7);
        let w3 = random_vec(&mut rng, h2 * classes, 0.7);
        let targets: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
        let t2 = targets.clone();
        record(
            "backward_mlp",
            check_scalar(
                &[
                    vec![rows, n_in],
                    vec![n_in, h1],
                    vec![h1],
                    vec![h1, h2],
                    vec![h2, classes],
                ],
                &[x, w1, b1, w2, w3],
                &move |g, v| {
                    let a = g.matmul(v[0], v[1]).unwrap();
                    let a = g.add_bias(a, v[2]).unwrap();
                    let a = g.tanh(a);
                    let a = g.matmul(a, v[3]).unwrap();
                    let a = g.tanh(a);
                    let z = g.matmul(a, v[4]).unwrap();
                    g.cross_entropy(z, &t2, rows as f32).unwrap()
                },
                &|i| {
                    let a = matmul(&i[0], &i[1], rows, n_in, h1);
                    let a: Vec<f64> = a
                        .iter()
                        .enumerate()
                        .map(|(j, v)| (v + i[2][j % h1]).tanh())
                        .collect();
                    let a = tanh(&matmul(&a, &i[3], rows, h1, h2));
                    let z = matmul(&a, &i[4], rows, h2, classes);
                    cross_entropy(&z, &targets, classes, rows as f64)
                },
            ),
        );
    }
    checks
}

/// Tolerance per checked op: batch norm couples every row through the
/// batch variance and gets the looser bound.
pub fn tolerance(name: &str) -> f64 {
    if name == "batch_norm" {
        1e-2
    } else {
        1e-3
    }
}
