//! Plain SGD and Adam with bias correction.

use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn default_lr(self) -> f32 {
        match self {
            Optimizer::Sgd => 0.1,
            Optimizer::Adam { .. } => 3e-4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

/// `w ← w − lr·g`.
pub fn sgd_step(w: &mut [f32], g: &[f32], lr: f32) {
    for (w, g) in w.iter_mut().zip(g) {
        *w -= lr * g;
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam update at step `t` (1-based).
pub fn adam_step(w: &mut [f32], g: &[f32], state: &mut AdamMoments, lr: f32, t: u64, (beta1, beta2, eps): (f64, f64, f64)) {
    if state.m.len() != w.len() {
        state.m = vec![0.0; w.len()];
        state.v = vec![0.0; w.len()];
    }
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for ((w, &g), (m, v)) in w
        .iter_mut()
        .zip(g)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = f64::from(g);
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let step = f64::from(lr) * (*m / c1) / ((*v / c2).sqrt() + eps);
        *w = (f64::from(*w) - step) as f32;
    }
}

/// Optimizer state over named tensors.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    t: u64,
    moments: BTreeMap<String, AdamMoments>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        Self {
            kind,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every `(name, weights, gradient)` triple.
    pub fn step<'a>(&mut self, lr: f32, updates: impl IntoIterator<Item = (&'a str, &'a mut [f32], &'a [f32])>) {
        self.t += 1;
        for (name, w, g) in updates {
            match self.kind {
                Optimizer::Sgd => sgd_step(w, g, lr),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let state = self.moments.entry(name.to_string()).or_default();
                    adam_step(w, g, state, lr, self.t, (beta1, beta2, eps));
                }
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_on_quadratic() {
        // d/dw (w−3)² at w = 0 is −6; one step of lr 0.1 lands on 0.6.
        let mut w = [0.0f32];
        sgd_step(&mut w, &[-6.0], 0.1);
        assert!((w[0] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient() {
        let mut w = [1.5f32];
        sgd_step(&mut w, &[0.0], 0.1);
        assert_eq!(w[0], 1.5);
        let mut st = OptimizerState::new(Optimizer::adam());
        st.step(0.1, [("w", &mut w[..], &[0.0f32][..])]);
        assert_eq!(w[0], 1.5);
        assert_eq!(st.steps(), 1);
        assert_eq!(st.moments["w"].m, vec![0.0]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut w = [0.0f32];
        let mut st = OptimizerState::new(Optimizer::adam());
        for _ in 0..2000 {
            let g = [2.0 * (w[0] - 3.0)];
            st.step(0.05, [("w", &mut w[..], &g[..])]);
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![30.0f32, 40.0], vec![0.0]];
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - 50.0).abs() < 1e-9);
        let after: f64 = g.iter().flatten().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        assert!(after <= 5.0 + 1e-6);
        let mut small = vec![vec![1.0f32]];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0][0], 1.0);
    }
}
