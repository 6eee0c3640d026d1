//! The second-order memristive map driving the tamper hash.
//!
//! State `(x, q)` evolves as `x' = mu x (1 - x) + k cos(q) x`, `q' = q + x`,
//! starting from `q0 = x0 / 2`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaosParams {
    mu: f64,
    k: f64,
    iterations: usize,
}

impl ChaosParams {
    pub fn new(mu: f64, k: f64, iterations: usize) -> Result<Self> {
        if !mu.is_finite() || !k.is_finite() {
            return Err(Error::InvalidArgument("map parameters must be finite".into()));
        }
        if iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        Ok(ChaosParams { mu, k, iterations })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    #[inline]
    fn step(&self, x: f64, q: f64) -> (f64, f64) {
        (self.mu * x * (1.0 - x) + self.k * q.cos() * x, q + x)
    }
}

impl Default for ChaosParams {
    fn default() -> Self {
        ChaosParams {
            mu: 0.2,
            k: 2.0,
            iterations: 100,
        }
    }
}

/// Runs the map from `x0` and returns the final `x`.
pub fn chaotic_iterate(x0: f64, params: &ChaosParams) -> Result<f64> {
    if !x0.is_finite() {
        return Err(Error::InvalidArgument(format!("initial state {x0} is not finite")));
    }
    let (mut x, mut q) = (x0, x0 / 2.0);
    for step in 1..=params.iterations {
        (x, q) = params.step(x, q);
        if !x.is_finite() || !q.is_finite() {
            return Err(Error::MapDivergence { step });
        }
    }
    Ok(x)
}

/// Both Lyapunov exponents of the map along the orbit from `(x0, q0)`,
/// largest first.
///
/// Tangent vectors are pushed through the Jacobian each step and
/// re-orthonormalized by Gram-Schmidt; the exponents are the mean log
/// stretch factors over `horizon` steps after `warmup` discarded ones.
pub fn lyapunov_exponents(
    params: &ChaosParams,
    x0: f64,
    q0: f64,
    warmup: usize,
    horizon: usize,
) -> Result<(f64, f64)> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    if !x0.is_finite() || !q0.is_finite() {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let (mut x, mut q) = (x0, q0);
    for step in 1..=warmup {
        (x, q) = params.step(x, q);
        if !x.is_finite() {
            return Err(Error::MapDivergence { step });
        }
    }

    let mut v1 = [1.0, 0.0];
    let mut v2 = [0.0, 1.0];
    let (mut sum1, mut sum2) = (0.0, 0.0);
    for step in 1..=horizon {
        let j = [
            [params.mu * (1.0 - 2.0 * x) + params.k * q.cos(), -params.k * x * q.sin()],
            [1.0, 1.0],
        ];
        let apply = |v: [f64; 2]| [j[0][0] * v[0] + j[0][1] * v[1], j[1][0] * v[0] + j[1][1] * v[1]];
        let w1 = apply(v1);
        let w2 = apply(v2);

        let r11 = w1[0].hypot(w1[1]);
        let e1 = [w1[0] / r11, w1[1] / r11];
        let r12 = e1[0] * w2[0] + e1[1] * w2[1];
        let u2 = [w2[0] - r12 * e1[0], w2[1] - r12 * e1[1]];
        let r22 = u2[0].hypot(u2[1]);
        if !(r11 > 0.0 && r22 > 0.0) || !r11.is_finite() || !r22.is_finite() {
            return Err(Error::MapDivergence { step: warmup + step });
        }
        sum1 += r11.ln();
        sum2 += r22.ln();
        v1 = e1;
        v2 = [u2[0] / r22, u2[1] / r22];

        (x, q) = params.step(x, q);
        if !x.is_finite() || !q.is_finite() {
            return Err(Error::MapDivergence { step: warmup + step });
        }
    }
    let l1 = sum1 / horizon as f64;
    let l2 = sum2 / horizon as f64;
    Ok(if l1 >= l2 { (l1, l2) } else { (l2, l1) })
}
