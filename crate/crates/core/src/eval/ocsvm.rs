//! Linear one-class SVM.
//!
//! The primal is
//!
//! ```text
//! min_{w,ρ}  ½‖w‖² + 1/(νn) Σ max(0, ρ − w·φ_i) − ρ
//! ```
//!
//! On centred, standardized data its optimum is the trivial `w = 0, ρ = 0`
//! (the origin sits inside the data), so the linear kernel is applied to a
//! fixed feature map instead: features are standardized, whitened with the
//! training covariance, and mapped to `φ_j = 1 − z_j²/c` with `c` one more
//! than the largest training `z_j²`. Training points then lie in the
//! positive orthant, away from the origin, and `w·φ ≥ ρ` with `w ≥ 0`
//! describes an ellipsoid around the data.
//!
//! The solver profiles ρ out exactly (it is the ν-quantile of the scores
//! `w·φ_i`) and takes full-batch subgradient steps `w ← w − η_t (w − g)`
//! with `η_t = 1/t`, where `g` is the subgradient contribution of the lowest
//! scoring νn points. `w` always stays a convex combination of such points,
//! so `‖w‖² − w·g` is a certified duality gap and serves as the stopping
//! rule.

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix, Standardizer};

pub const DEFAULT_NU: f64 = 0.1;
/// Minimum training rows.
pub const MIN_ROWS: usize = 100;
/// Accepted training outlier fraction: `[ν − 0.05, ν + 0.02]`.
pub const NU_SLACK_BELOW: f64 = 0.05;
pub const NU_SLACK_ABOVE: f64 = 0.02;
pub const DEFAULT_MAX_ITER: usize = 5000;
const GAP_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct OcsvmModel {
    pub w: Vec<f64>,
    pub rho: f64,
    pub nu: f64,
    pub standardizer: Standardizer,
    /// Rows map standardized features to whitened coordinates.
    pub whitening: Matrix,
    /// Divisor `c` of the quadratic map.
    pub scale: f64,
    /// Primal objective at the returned iterate.
    pub objective: f64,
    /// Duality gap at the returned iterate.
    pub gap: f64,
    pub iterations: usize,
    /// Fraction of training rows with a negative decision value.
    pub train_outlier_fraction: f64,
}

impl OcsvmModel {
    /// The feature map `φ` applied to raw rows.
    pub fn features(&self, data: &Matrix) -> Matrix {
        let z = self.standardizer.transform(data).matmul(&self.whitening).expect("whitening shape");
        z.map_columns(|_, v| 1.0 - v * v / self.scale)
    }

    /// `w·φ(x) − ρ` for every row.
    pub fn decision_values(&self, data: &Matrix) -> Result<Vec<f64>> {
        if data.cols() != self.standardizer.mean.len() {
            return Err(Error::shape(
                "one-class SVM",
                format!("{} features, model expects {}", data.cols(), self.standardizer.mean.len()),
            ));
        }
        let phi = self.features(data);
        Ok((0..phi.rows()).map(|r| dot(&self.w, phi.row(r)) - self.rho).collect())
    }

    fn tolerance(&self) -> f64 {
        1e-9 * self.rho.abs().max(1.0)
    }

    /// Percentage of rows with a non-negative decision value.
    pub fn inlier_rate(&self, data: &Matrix) -> Result<f64> {
        if data.rows() == 0 {
            return Err(Error::InvalidArgument("cannot score an empty data set".into()));
        }
        let tol = self.tolerance();
        let d = self.decision_values(data)?;
        let inside = d.iter().filter(|&&v| v >= -tol).count();
        Ok(100.0 * inside as f64 / d.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Primal objective of `(w, ρ)` on mapped features `phi`.
pub fn objective(phi: &Matrix, w: &[f64], rho: f64, nu: f64) -> f64 {
    let n = phi.rows() as f64;
    let hinge: f64 = (0..phi.rows()).map(|r| (rho - dot(w, phi.row(r))).max(0.0)).sum();
    0.5 * dot(w, w) + hinge / (nu * n) - rho
}

/// Result of [`solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub w: Vec<f64>,
    pub rho: f64,
    pub objective: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Optimal ρ for fixed scores and the matching subgradient weights: the
/// `k = ⌊νn⌋` lowest scores get `1/(νn)` each and the next one the rest.
fn profile(scores: &[f64], nu: f64, order: &mut Vec<usize>) -> (f64, Vec<(usize, f64)>) {
    let n = scores.len();
    let budget = nu * n as f64;
    let k = (budget.floor() as usize).min(n - 1);
    order.clear();
    order.extend(0..n);
    let cmp = |a: &usize, b: &usize| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b));
    order.select_nth_unstable_by(k, cmp);
    let pivot = order[k];
    let mut weights: Vec<(usize, f64)> = order[..k].iter().map(|&i| (i, 1.0 / budget)).collect();
    let rest = 1.0 - k as f64 / budget;
    if rest > 0.0 {
        weights.push((pivot, rest));
    }
    (scores[pivot], weights)
}

/// Solves the linear one-class SVM on already mapped features.
pub fn solve(phi: &Matrix, nu: f64, max_iter: usize) -> Result<Solution> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::InvalidArgument(format!("nu must lie in (0, 1), got {nu}")));
    }
    if phi.rows() < 2 {
        return Err(Error::Degenerate("one-class SVM needs at least 2 rows".into()));
    }
    let (n, d) = (phi.rows(), phi.cols());
    // Start from the mean point, which lies in the reduced hull.
    let mut w = phi.column_means();
    let mut order = Vec::with_capacity(n);
    let mut scores = vec![0.0; n];
    let mut best: Option<Solution> = None;
    for t in 1..=max_iter {
        for (r, s) in scores.iter_mut().enumerate() {
            *s = dot(&w, phi.row(r));
        }
        let (rho, weights) = profile(&scores, nu, &mut order);
        let mut g = vec![0.0; d];
        for &(i, a) in &weights {
            for (gj, x) in g.iter_mut().zip(phi.row(i)) {
                *gj += a * x;
            }
        }
        let ww = dot(&w, &w);
        let gap = ww - dot(&w, &g);
        let obj = objective(phi, &w, rho, nu);
        if best.as_ref().is_none_or(|b| obj < b.objective) {
            best = Some(Solution {
                w: w.clone(),
                rho,
                objective: obj,
                gap,
                iterations: t,
            });
        }
        if gap <= GAP_TOL * ww.max(1e-12) {
            break;
        }
        let eta = 1.0 / (t as f64 + 1.0);
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj = (1.0 - eta) * *wj + eta * gj;
        }
    }
    let mut sol = best.expect("at least one iteration");
    sol.iterations = sol.iterations.max(1);
    Ok(sol)
}

/// Fits the one-class SVM on the rows of `real`.
pub fn fit_ocsvm(real: &Matrix, nu: f64, max_iter: usize) -> Result<OcsvmModel> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::InvalidArgument(format!("nu must lie in (0, 1), got {nu}")));
    }
    if real.rows() < MIN_ROWS {
        return Err(Error::InvalidArgument(format!(
            "one-class SVM needs at least {MIN_ROWS} rows, got {}",
            real.rows()
        )));
    }
    let standardizer = Standardizer::fit(real)?;
    let z = standardizer.transform(real);
    let eig = symmetric_eigen(&z.covariance()?)?;
    let top = eig.values[0].max(f64::MIN_POSITIVE);
    let mut whitening = eig.vectors.clone();
    for (j, &lambda) in eig.values.iter().enumerate() {
        let s = 1.0 / lambda.max(1e-12 * top).sqrt();
        for r in 0..whitening.rows() {
            let v = whitening.get(r, j) * s;
            whitening.set(r, j, v);
        }
    }
    let white = z.matmul(&whitening)?;
    let scale = 1.0 + white.data().iter().map(|v| v * v).fold(0.0, f64::max);
    let phi = white.map_columns(|_, v| 1.0 - v * v / scale);
    let sol = solve(&phi, nu, max_iter)?;
    let mut model = OcsvmModel {
        w: sol.w,
        rho: sol.rho,
        nu,
        standardizer,
        whitening,
        scale,
        objective: sol.objective,
        gap: sol.gap,
        iterations: sol.iterations,
        train_outlier_fraction: 0.0,
    };
    let tol = model.tolerance();
    let d: Vec<f64> = (0..phi.rows()).map(|r| dot(&model.w, phi.row(r)) - model.rho).collect();
    let outliers = d.iter().filter(|&&v| v < -tol).count() as f64 / d.len() as f64;
    model.train_outlier_fraction = outliers;
    if outliers < nu - NU_SLACK_BELOW || outliers > nu + NU_SLACK_ABOVE {
        return Err(Error::NonConvergence(format!(
            "training outlier fraction {outliers:.4} outside [{:.2}, {:.2}] after {} iterations",
            nu - NU_SLACK_BELOW,
            nu + NU_SLACK_ABOVE,
            model.iterations
        )));
    }
    Ok(model)
}
