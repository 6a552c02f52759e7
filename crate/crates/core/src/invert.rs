//! Euler summation for numerical Laplace-transform inversion.
//!
//! `f(t) ≈ e^{A/2}/t · Σ_j C(m,j) 2^{-m} s_{n+j}`, where `s_k` are partial
//! sums of the alternating series `Re F(A/2t)/2 + Σ_{k≥1} (-1)^k Re F((A+2πik)/2t)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerConfig {
    pub n_terms: usize,
    pub m_avg: usize,
    /// Places the Bromwich contour at `Re s = a / (2t)`; the discretization
    /// error is roughly `e^{-a}` times the function scale.
    pub a: f64,
}

impl Default for EulerConfig {
    fn default() -> Self {
        EulerConfig {
            n_terms: 15,
            m_avg: 15,
            a: 12.0 * std::f64::consts::LN_10,
        }
    }
}

impl EulerConfig {
    pub fn evaluations(&self) -> usize {
        self.n_terms + self.m_avg + 1
    }

    /// Transform arguments for time `t`, in summation order.
    pub fn nodes(&self, t: f64) -> Vec<Complex64> {
        (0..self.evaluations())
            .map(|k| Complex64::new(self.a, 2.0 * std::f64::consts::PI * k as f64) / (2.0 * t))
            .collect()
    }

    /// Combines transform values at `nodes(t)` into the inverse at `t`.
    pub fn combine(&self, t: f64, values: &[Complex64]) -> f64 {
        assert_eq!(values.len(), self.evaluations());
        let weights = self.weights();
        let mut partial = 0.0;
        let mut acc = 0.0;
        for (k, v) in values.iter().enumerate() {
            let term = if k == 0 {
                v.re / 2.0
            } else if k % 2 == 0 {
                v.re
            } else {
                -v.re
            };
            partial += term;
            if k >= self.n_terms {
                acc += weights[k - self.n_terms] * partial;
            }
        }
        (self.a / 2.0).exp() / t * acc
    }

    /// Componentwise `combine` for vector-valued transforms.
    pub fn combine_vec(&self, t: f64, values: &[Vec<Complex64>]) -> Vec<f64> {
        assert_eq!(values.len(), self.evaluations());
        let len = values.first().map_or(0, |v| v.len());
        let weights = self.weights();
        let scale = (self.a / 2.0).exp() / t;
        let mut partial = vec![0.0; len];
        let mut acc = vec![0.0; len];
        for (k, v) in values.iter().enumerate() {
            let sign = if k == 0 {
                0.5
            } else if k % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            for ((p, a), x) in partial.iter_mut().zip(acc.iter_mut()).zip(v) {
                *p += sign * x.re;
                if k >= self.n_terms {
                    *a += weights[k - self.n_terms] * *p;
                }
            }
        }
        acc.into_iter().map(|a| scale * a).collect()
    }

    /// Binomial averaging weights `C(m,j) / 2^m`.
    fn weights(&self) -> Vec<f64> {
        let m = self.m_avg;
        let mut w = Vec::with_capacity(m + 1);
        let mut c = 1.0f64;
        for j in 0..=m {
            w.push(c);
            c = c * (m - j) as f64 / (j + 1) as f64;
        }
        let total = 2f64.powi(m as i32);
        w.into_iter().map(|x| x / total).collect()
    }
}

/// Inverts a scalar transform at time `t`.
pub fn euler_invert<F>(f: F, t: f64, cfg: &EulerConfig) -> Result<f64>
where
    F: Fn(Complex64) -> Complex64,
{
    let values = cfg
        .nodes(t)
        .into_iter()
        .map(|s| {
            let v = f(s);
            if v.re.is_finite() && v.im.is_finite() {
                Ok(v)
            } else {
                Err(Error::Inversion { re: s.re, im: s.im })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cfg.combine(t, &values))
}
