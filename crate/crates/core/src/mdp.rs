//! Optimal allocation policies for the 2-level model.
//!
//! Finite horizon: backward induction on the embedded jump chain, one step
//! per transition. Infinite horizon: damped value iteration for the
//! continuously discounted cost.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{enumerate_mdp_states, MdpState, ModelParams, StateSpace};
use crate::rates::{mdp_branches, Action, Decision, Outcome};

/// Values closer than this are treated as ties.
pub const TIE_TOL: f64 = 1e-10;

/// Chosen action per decision type, indexed by `Decision::index`.
pub type Choices = [Option<Action>; 3];

/// Preference among tied actions: assigning work beats holding agents back.
fn rank(a: Action) -> u8 {
    match a {
        Action::Assign | Action::TakeLevel2 => 0,
        Action::TakeLevel1 => 1,
        Action::Queue | Action::Reserve => 2,
    }
}

struct Group {
    decision: Decision,
    actions: Vec<Action>,
    /// `(rate, cost, target per action)` for every branch sharing the decision.
    branches: Vec<(f64, f64, Vec<usize>)>,
}

/// Decision model flattened to state indices.
struct Compiled {
    space: StateSpace,
    kappa: Vec<f64>,
    forced: Vec<Vec<(usize, f64, f64)>>,
    groups: Vec<Vec<Group>>,
}

impl Compiled {
    fn new(p: &ModelParams) -> Result<Self> {
        if p.num_levels != 2 {
            return Err(Error::params("num_levels", "the decision model needs exactly 2 levels"));
        }
        let space = enumerate_mdp_states(p)?;
        let idx = |s: &MdpState| space.index_of(&s.to_state()).expect("feasible options stay in the state space");
        let mut kappa = Vec::with_capacity(space.len());
        let mut forced = Vec::with_capacity(space.len());
        let mut groups = Vec::with_capacity(space.len());
        for st in space.iter() {
            let s = MdpState::from_state(st);
            let mut k = 0.0;
            let mut f = Vec::new();
            let mut g: Vec<Group> = Vec::new();
            for b in mdp_branches(&s, p) {
                k += b.rate;
                match b.outcome {
                    Outcome::Forced(t) => f.push((idx(&t), b.rate, b.cost)),
                    Outcome::Choice { decision, options } => {
                        let actions: Vec<Action> = options.iter().map(|(a, _)| *a).collect();
                        let targets: Vec<usize> = options.iter().map(|(_, t)| idx(t)).collect();
                        match g.iter_mut().find(|x| x.decision == decision) {
                            Some(x) => {
                                if x.actions != actions {
                                    return Err(Error::Solver(format!("inconsistent action sets for {decision} in {s}")));
                                }
                                x.branches.push((b.rate, b.cost, targets));
                            }
                            None => g.push(Group {
                                decision,
                                actions,
                                branches: vec![(b.rate, b.cost, targets)],
                            }),
                        }
                    }
                }
            }
            kappa.push(k);
            forced.push(f);
            groups.push(g);
        }
        Ok(Compiled {
            space,
            kappa,
            forced,
            groups,
        })
    }

    /// `Σ rate · (cost + V(target))` under the best actions, and those actions.
    fn bellman(&self, i: usize, v: &[f64]) -> (f64, Choices) {
        let mut total: f64 = self.forced[i].iter().map(|&(t, r, c)| r * (c + v[t])).sum();
        let mut choices: Choices = [None; 3];
        for g in &self.groups[i] {
            let mut best: Option<(f64, Action)> = None;
            for (k, &a) in g.actions.iter().enumerate() {
                let val: f64 = g.branches.iter().map(|(r, c, ts)| r * (c + v[ts[k]])).sum();
                best = match best {
                    None => Some((val, a)),
                    Some((bv, ba)) => {
                        if val < bv - TIE_TOL || ((val - bv).abs() <= TIE_TOL && rank(a) < rank(ba)) {
                            Some((val, a))
                        } else {
                            Some((bv, ba))
                        }
                    }
                };
            }
            let (bv, ba) = best.expect("a decision has at least two actions");
            total += bv;
            choices[g.decision.index()] = Some(ba);
        }
        (total, choices)
    }
}

#[derive(Debug, Clone, Serialize)]
pub enum PolicyTable {
    /// `steps[m][state]` for `m` in `0..M`.
    FiniteHorizon { steps: Vec<Vec<Choices>> },
    Stationary { actions: Vec<Choices> },
}

#[derive(Debug, Clone, Serialize)]
pub enum ValueTable {
    /// `values[m][state]` for `m` in `0..=M`.
    FiniteHorizon { values: Vec<Vec<f64>> },
    Stationary { values: Vec<f64> },
}

impl PolicyTable {
    /// Action at step `m` (ignored for stationary tables).
    pub fn action(&self, space: &StateSpace, m: usize, s: &MdpState, d: Decision) -> Option<Action> {
        let i = space.index_of(&s.to_state())?;
        match self {
            PolicyTable::FiniteHorizon { steps } => steps.get(m)?[i][d.index()],
            PolicyTable::Stationary { actions } => actions[i][d.index()],
        }
    }

    /// CSV rows `m,state,event,action`; `m` is `*` for stationary tables.
    pub fn write_csv<W: Write>(&self, space: &StateSpace, mut w: W) -> Result<()> {
        writeln!(w, "m,state,event,action")?;
        let mut emit = |m: &str, table: &[Choices]| -> Result<()> {
            for (i, choices) in table.iter().enumerate() {
                let s = MdpState::from_state(&space.state(i));
                for d in Decision::ALL {
                    if let Some(a) = choices[d.index()] {
                        writeln!(w, "{m},\"{s}\",{d},{a}")?;
                    }
                }
            }
            Ok(())
        };
        match self {
            PolicyTable::FiniteHorizon { steps } => {
                for (m, table) in steps.iter().enumerate() {
                    emit(&m.to_string(), table)?;
                }
            }
            PolicyTable::Stationary { actions } => emit("*", actions)?,
        }
        Ok(())
    }
}

impl ValueTable {
    /// Value at step `m` (ignored for stationary tables).
    pub fn value(&self, space: &StateSpace, m: usize, s: &MdpState) -> Option<f64> {
        let i = space.index_of(&s.to_state())?;
        match self {
            ValueTable::FiniteHorizon { values } => values.get(m).map(|v| v[i]),
            ValueTable::Stationary { values } => Some(values[i]),
        }
    }

    /// CSV rows `m,state,value`.
    pub fn write_csv<W: Write>(&self, space: &StateSpace, mut w: W) -> Result<()> {
        writeln!(w, "m,state,value")?;
        let mut emit = |m: &str, v: &[f64]| -> Result<()> {
            for (i, x) in v.iter().enumerate() {
                writeln!(w, "{m},\"{}\",{x}", MdpState::from_state(&space.state(i)))?;
            }
            Ok(())
        };
        match self {
            ValueTable::FiniteHorizon { values } => {
                for (m, v) in values.iter().enumerate() {
                    emit(&m.to_string(), v)?;
                }
            }
            ValueTable::Stationary { values } => emit("*", values)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FiniteHorizonSolution {
    pub space: StateSpace,
    pub values: ValueTable,
    pub policy: PolicyTable,
}

/// Minimum expected abandonment cost over the next `steps` transitions.
pub fn backward_induction(p: &ModelParams, steps: usize) -> Result<FiniteHorizonSolution> {
    p.validate()?;
    if steps == 0 {
        return Err(Error::params("M", "horizon must be at least one step"));
    }
    let c = Compiled::new(p)?;
    let n = c.space.len();
    let mut values = vec![vec![0.0; n]; steps + 1];
    let mut policy = vec![Vec::new(); steps];
    for m in (0..steps).rev() {
        let next = &values[m + 1];
        let (v, a): (Vec<f64>, Vec<Choices>) = (0..n)
            .into_par_iter()
            .map(|i| {
                if c.kappa[i] == 0.0 {
                    return (0.0, [None; 3]);
                }
                let (sum, ch) = c.bellman(i, next);
                (sum / c.kappa[i], ch)
            })
            .unzip();
        values[m] = v;
        policy[m] = a;
    }
    Ok(FiniteHorizonSolution {
        space: c.space,
        values: ValueTable::FiniteHorizon { values },
        policy: PolicyTable::FiniteHorizon { steps: policy },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueIterationConfig {
    /// Continuous discount rate.
    pub delta: f64,
    /// Weight kept on the previous iterate.
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ValueIterationConfig {
    fn default() -> Self {
        ValueIterationConfig {
            delta: 0.05,
            alpha: 0.0,
            max_iter: 1_000_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StationarySolution {
    pub space: StateSpace,
    pub values: ValueTable,
    pub policy: PolicyTable,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
}

/// Damped value iteration for the discounted infinite-horizon cost.
/// `initial` defaults to zero. Non-convergence is reported, not an error.
pub fn value_iteration_discounted(p: &ModelParams, cfg: &ValueIterationConfig, initial: Option<&[f64]>) -> Result<StationarySolution> {
    p.validate()?;
    if !(cfg.delta > 0.0) {
        return Err(Error::params("delta", "discount rate must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.alpha) {
        return Err(Error::params("alpha", "damping must lie in [0, 1)"));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::params("tol", "tolerance must be positive"));
    }
    let c = Compiled::new(p)?;
    let n = c.space.len();
    let mut v = match initial {
        Some(v0) if v0.len() != n => {
            return Err(Error::params("V0", format!("expected {n} values, got {}", v0.len())));
        }
        Some(v0) => v0.to_vec(),
        None => vec![0.0; n],
    };
    let mut policy: Vec<Choices> = vec![[None; 3]; n];
    let mut stable = 0;
    let mut residuals = Vec::new();
    let mut converged = false;
    while residuals.len() < cfg.max_iter {
        let (next, acts): (Vec<f64>, Vec<Choices>) = (0..n)
            .into_par_iter()
            .map(|i| {
                let (sum, ch) = c.bellman(i, &v);
                (cfg.alpha * v[i] + (1.0 - cfg.alpha) * sum / (cfg.delta + c.kappa[i]), ch)
            })
            .unzip();
        let res = next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        residuals.push(res);
        stable = if acts == policy { stable + 1 } else { 0 };
        v = next;
        policy = acts;
        if res < cfg.tol && stable >= 2 {
            converged = true;
            break;
        }
    }
    Ok(StationarySolution {
        space: c.space,
        values: ValueTable::Stationary { values: v },
        policy: PolicyTable::Stationary { actions: policy },
        iterations: residuals.len(),
        converged,
        residuals,
    })
}

/// Largest one-sweep contraction factor `max κ / (δ + κ)`.
pub fn contraction_factor(p: &ModelParams, delta: f64) -> Result<f64> {
    let c = Compiled::new(p)?;
    Ok(c.kappa.iter().map(|k| k / (delta + k)).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        ModelParams {
            num_levels: 2,
            lambda: vec![1.0, 1.0],
            mu: vec![0.25, 0.25],
            mu_up: vec![0.25],
            theta: vec![1.0, 2.0],
            gamma: vec![1.0, 2.0],
            beta: 0.0,
            k: vec![2, 2],
            ell: 6,
        }
    }

    #[test]
    fn one_step_is_abandonment_probability() {
        let p = small();
        let sol = backward_induction(&p, 1).unwrap();
        let value = |s: MdpState| sol.values.value(&sol.space, 0, &s).unwrap();
        // 5 callers, room for arrivals.
        let s = MdpState { a1: 2, a2: 2, aq: 0, b2: 0, bq: 1 };
        let kappa = 2.0 + 2.0 * 0.25 + 2.0 * 0.25 + 2.0;
        assert!((value(s) - 2.0 * 2.0 / kappa).abs() < 1e-12);
        // Full system: blocked arrivals are free self-loops, not events.
        let s = MdpState { a1: 2, a2: 2, aq: 1, b2: 0, bq: 1 };
        let kappa = 2.0 * 0.25 + 2.0 * 0.25 + 1.0 + 2.0;
        assert!((value(s) - (1.0 * 1.0 + 2.0 * 2.0) / kappa).abs() < 1e-12);
    }

    #[test]
    fn zero_costs_give_zero_values() {
        let mut p = small();
        p.gamma = vec![0.0, 0.0];
        let sol = value_iteration_discounted(&p, &ValueIterationConfig::default(), None).unwrap();
        assert!(sol.converged);
        match sol.values {
            ValueTable::Stationary { values } => assert!(values.iter().all(|&v| v == 0.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn policy_csv_has_header() {
        let p = small();
        let sol = backward_induction(&p, 2).unwrap();
        let mut buf = Vec::new();
        sol.policy.write_csv(&sol.space, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("m,state,event,action\n0,"));
    }
}
