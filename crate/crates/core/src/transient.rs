//! Transient expected costs and state-occupancy times via Laplace transforms.
//!
//! Both functionals satisfy first-step equations of the form
//! `(κ + s) x_i - Σ_j R_ij x_j = b_i`, solved for each Euler node `s`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::invert::EulerConfig;
use crate::model::{ModelParams, Reservation, State, StateSpace};
use crate::rates::RateMatrix;
use crate::solve::ShiftedSystem;
use crate::waiting::{self, ChainMode};

/// Entries of an inverted distribution below this magnitude are treated as 0.
const CLAMP: f64 = 1e-9;
/// Allowed deviation of an inverted distribution's total mass from 1.
const MASS_TOL: f64 = 1e-6;

/// A rate matrix together with the reusable shifted linear system
/// `A(s) = diag(κ + s) - R`.
#[derive(Debug)]
pub struct TransientModel {
    rates: RateMatrix,
    system: ShiftedSystem,
    euler: EulerConfig,
}

impl TransientModel {
    pub fn new(p: &ModelParams, res: &Reservation) -> Result<Self> {
        p.validate()?;
        res.validate(p)?;
        Self::from_rates(RateMatrix::reservation(p, res)?)
    }

    pub fn from_rates(rates: RateMatrix) -> Result<Self> {
        let off: Vec<(usize, usize, f64)> = (0..rates.len())
            .flat_map(|i| {
                let (t, r) = rates.row_slices(i);
                t.iter().zip(r).map(move |(&j, &x)| (i, j, x))
            })
            .collect();
        let system = ShiftedSystem::new(rates.kappas(), off)?;
        Ok(TransientModel {
            rates,
            system,
            euler: EulerConfig::default(),
        })
    }

    pub fn with_euler(mut self, euler: EulerConfig) -> Self {
        self.euler = euler;
        self
    }

    pub fn euler(&self) -> &EulerConfig {
        &self.euler
    }

    pub fn rates(&self) -> &RateMatrix {
        &self.rates
    }

    pub fn space(&self) -> &StateSpace {
        self.rates.space()
    }

    pub fn index_of(&self, s: &State) -> Result<usize> {
        self.space().index_of(s).ok_or_else(|| Error::InvalidState {
            state: s.to_string(),
            reason: "not in the state space of this reservation vector".into(),
        })
    }

    /// Transform of the expected accumulated cost, one entry per initial state.
    pub fn cost_transform(&self, s: Complex64) -> Result<Vec<Complex64>> {
        check_shift(s)?;
        let rhs: Vec<Complex64> = self.rates.cost_rates().into_iter().map(|u| Complex64::new(u, 0.0)).collect();
        let mut x = self.system.factor(s)?.solve(&rhs)?;
        for v in &mut x {
            *v /= s;
        }
        Ok(x)
    }

    /// Expected cost of abandonments and blocked arrivals over `(0, t)`.
    pub fn expected_cost(&self, nu0: &State, t: f64) -> Result<f64> {
        Ok(self.expected_costs(nu0, &[t])?[0])
    }

    /// `expected_cost` at several horizons.
    pub fn expected_costs(&self, nu0: &State, times: &[f64]) -> Result<Vec<f64>> {
        let i0 = self.index_of(nu0)?;
        check_times(times)?;
        let rates = self.rates.cost_rates();
        times
            .iter()
            .map(|&t| {
                let values = self
                    .euler
                    .nodes(t)
                    .into_par_iter()
                    .map(|s| {
                        let rhs: Vec<Complex64> = rates.iter().map(|&u| Complex64::new(u, 0.0)).collect();
                        let x = self.system.factor(s)?.solve(&rhs)?;
                        Ok(x[i0] / s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(self.euler.combine(t, &values).max(0.0))
            })
            .collect()
    }

    /// Row `nu0` of the time-in-state transform: entry `j` transforms the
    /// expected time spent in state `j` during `(0, T)`.
    pub fn time_in_state_transform(&self, nu0: &State, s: Complex64) -> Result<Vec<Complex64>> {
        check_shift(s)?;
        let i0 = self.index_of(nu0)?;
        self.time_row(i0, s)
    }

    fn time_row(&self, i0: usize, s: Complex64) -> Result<Vec<Complex64>> {
        let mut e = vec![Complex64::new(0.0, 0.0); self.rates.len()];
        e[i0] = Complex64::new(1.0, 0.0);
        let mut w = self.system.factor(s)?.solve_transpose(&e)?;
        for v in &mut w {
            *v /= s;
        }
        Ok(w)
    }

    /// Expected time spent in each state during `(0, t)`.
    pub fn expected_time_in_state(&self, nu0: &State, t: f64) -> Result<Vec<f64>> {
        let i0 = self.index_of(nu0)?;
        check_times(&[t])?;
        let values = self
            .euler
            .nodes(t)
            .into_par_iter()
            .map(|s| self.time_row(i0, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.euler.combine_vec(t, &values))
    }

    /// State seen by an arrival placed uniformly at random in `(0, t)`.
    pub fn observed_distribution(&self, nu0: &State, t: f64) -> Result<ObservedStateDistribution> {
        let v = self.expected_time_in_state(nu0, t)?;
        // Mass is checked before clamping: on large spaces the many entries
        // below the clamp carry real probability in aggregate.
        let raw = v.iter().sum::<f64>() / t;
        if (raw - 1.0).abs() > MASS_TOL {
            return Err(Error::Normalization { sum: raw });
        }
        let mut probs = Vec::with_capacity(v.len());
        for x in v {
            let r = x / t;
            if r < -MASS_TOL {
                return Err(Error::Normalization { sum: r });
            }
            probs.push(if r.abs() < CLAMP { 0.0 } else { r.max(0.0) });
        }
        let sum: f64 = probs.iter().sum();
        for r in &mut probs {
            *r /= sum;
        }
        Ok(ObservedStateDistribution {
            initial: *nu0,
            horizon: t,
            space: self.space().clone(),
            probs,
        })
    }
}

fn check_shift(s: Complex64) -> Result<()> {
    if s.re > 0.0 && s.re.is_finite() && s.im.is_finite() {
        Ok(())
    } else {
        Err(Error::params("s", format!("real part must be positive, got {s}")))
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    match times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        Some(t) => Err(Error::params("T", format!("horizon must be positive, got {t}"))),
        None => Ok(()),
    }
}

/// Probability that a uniformly timed arrival finds the system in each state.
#[derive(Debug, Clone)]
pub struct ObservedStateDistribution {
    pub initial: State,
    pub horizon: f64,
    space: StateSpace,
    probs: Vec<f64>,
}

impl ObservedStateDistribution {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, s: &State) -> f64 {
        self.space.index_of(s).map_or(0.0, |i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&State, f64)> {
        self.space.iter().zip(self.probs.iter().copied())
    }
}

pub fn cost_transform(p: &ModelParams, res: &Reservation, s: Complex64) -> Result<Vec<Complex64>> {
    TransientModel::new(p, res)?.cost_transform(s)
}

pub fn expected_cost(p: &ModelParams, res: &Reservation, nu0: &State, t: f64) -> Result<f64> {
    TransientModel::new(p, res)?.expected_cost(nu0, t)
}

pub fn time_in_state_transform(p: &ModelParams, res: &Reservation, nu0: &State, s: Complex64) -> Result<Vec<Complex64>> {
    TransientModel::new(p, res)?.time_in_state_transform(nu0, s)
}

pub fn observed_distribution(p: &ModelParams, res: &Reservation, nu0: &State, t: f64) -> Result<ObservedStateDistribution> {
    TransientModel::new(p, res)?.observed_distribution(nu0, t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Minimize expected cost over `(0, T)`.
    ExpectedCost,
    /// Maximize the probability of being answered within `y`.
    ServiceLevel { y: f64, mode: ChainMode },
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanRow {
    pub theta: Reservation,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanResult {
    pub best: Reservation,
    pub best_value: f64,
    pub rows: Vec<ScanRow>,
}

/// Evaluates every reservation vector and picks the best one; ties go to the
/// lexicographically smallest vector.
pub fn optimize_reservation(p: &ModelParams, nu0: &State, t: f64, objective: Objective) -> Result<ScanResult> {
    p.validate()?;
    let rows = Reservation::grid(p)
        .into_par_iter()
        .map(|theta| {
            let value = match objective {
                Objective::ExpectedCost => expected_cost(p, &theta, nu0, t)?,
                Objective::ServiceLevel { y, mode } => waiting::service_level(p, &theta, nu0, t, &[y], mode)?[0].overall,
            };
            Ok(ScanRow { theta, value })
        })
        .collect::<Result<Vec<_>>>()?;
    let better = |a: f64, b: f64| match objective {
        Objective::ExpectedCost => a < b,
        Objective::ServiceLevel { .. } => a > b,
    };
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if better(r.value, rows[best].value) {
            best = i;
        }
    }
    Ok(ScanResult {
        best: rows[best].theta.clone(),
        best_value: rows[best].value,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::cost_params;

    fn tiny() -> ModelParams {
        let mut p = cost_params();
        p.ell = 3;
        p
    }

    #[test]
    fn pure_blocking_is_linear_in_time() {
        let mut p = tiny();
        p.ell = 0;
        p.beta = 1.5;
        let m = TransientModel::new(&p, &Reservation::zero(&p)).unwrap();
        let s = Complex64::new(0.7, 0.3);
        let c = m.cost_transform(s).unwrap();
        let rate = p.beta * p.total_arrival_rate();
        assert!((c[0] - rate / (s * s)).norm() < 1e-12);
        let t = m.expected_cost(&State::zero(p.state_len()), 4.0).unwrap();
        assert!((t - 4.0 * rate).abs() < 1e-6);
    }

    #[test]
    fn time_in_state_sums_to_horizon() {
        let p = tiny();
        let m = TransientModel::new(&p, &Reservation::zero(&p)).unwrap();
        let nu0 = State::zero(p.state_len());
        let s = Complex64::new(0.4, 0.0);
        let row: Complex64 = m.time_in_state_transform(&nu0, s).unwrap().into_iter().sum();
        assert!((row - 1.0 / (s * s)).norm() < 1e-12);
        let v: f64 = m.expected_time_in_state(&nu0, 9.0).unwrap().iter().sum();
        assert!((v - 9.0).abs() < 1e-6 * 9.0);
    }

    #[test]
    fn short_horizon_is_point_mass() {
        let p = tiny();
        let m = TransientModel::new(&p, &Reservation::zero(&p)).unwrap();
        let nu0 = State::zero(p.state_len());
        let r = m.observed_distribution(&nu0, 1e-6).unwrap();
        assert!((r.prob(&nu0) - 1.0).abs() < 1e-4);
        assert!(m.expected_cost(&nu0, 1e-6).unwrap().abs() < 1e-4);
    }

    #[test]
    fn bad_initial_state() {
        let p = tiny();
        let m = TransientModel::new(&p, &Reservation::zero(&p)).unwrap();
        let bad = State::new(&[9, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(m.expected_cost(&bad, 1.0), Err(Error::InvalidState { .. })));
    }
}
