//! Waiting-time distributions of tagged callers and service levels.
//!
//! A tagged caller of level `j` is followed through a chain whose states
//! record only the callers that can still affect it. `Ξ^j(x, y)` is the
//! probability of reaching an agent within `y` time units from chain state
//! `x`; it is computed by Euler-inverting `W̃(s)`, which solves
//! `(ψ + s) W̃ - R W̃ = served_rate / s`.

use std::collections::HashMap;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invert::EulerConfig;
use crate::model::{project_for_level, enumerate_wait_states, Levels, ModelParams, Reservation, State, StateSpace};
use crate::rates::{push_transitions, Event};
use crate::solve::ShiftedSystem;
use crate::transient::{ObservedStateDistribution, TransientModel};

/// Which tagged-caller dynamics to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainMode {
    /// Per-level reduced recursions (four levels only). A queued level-2
    /// caller is picked up by a level-3 agent only when level 2 is saturated.
    #[default]
    Reduced,
    /// As `Reduced`, but the level-3 pick-up test compares against the
    /// level-4 capacity instead.
    ReducedStrict,
    /// Tagged chains derived from the full transition catalogue, with blocking
    /// decided on the full arrival-time state. Untracked callers are still
    /// projected away, which leaves a small bias at level 2.
    Exact,
}

impl std::str::FromStr for ChainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(ChainMode::Reduced),
            "reduced-strict" => Ok(ChainMode::ReducedStrict),
            "exact" => Ok(ChainMode::Exact),
            _ => Err(Error::params("mode", format!("unknown chain mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ServiceLevelResult {
    pub y: f64,
    /// `P^j`, indexed by 0-based level.
    pub per_level: Vec<f64>,
    /// λ-weighted average of `per_level`.
    pub overall: f64,
}

enum Next {
    Served,
    Lost,
    /// Tagged caller moves to another chain state, which is classified on
    /// its own (it may turn out blocked or immediately served).
    Classify(State),
    /// Tagged caller keeps waiting in the given state.
    Wait(State),
}

enum Step {
    Blocked,
    Immediate,
    Wait(Vec<(Next, f64)>),
}

/// Solved tagged chain of one level.
struct Chain {
    status: HashMap<State, Status>,
    system: Option<ShiftedSystem>,
    served: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Status {
    Blocked,
    Immediate,
    Node(usize),
}

impl Chain {
    fn build<F>(starts: &[State], step: F) -> Result<Chain>
    where
        F: Fn(&State) -> Result<Step>,
    {
        let mut status: HashMap<State, Status> = HashMap::new();
        let mut nodes: Vec<Vec<(Next, f64)>> = Vec::new();
        let mut stack: Vec<(State, bool)> = starts.iter().rev().map(|s| (*s, false)).collect();
        while let Some((x, forced)) = stack.pop() {
            if status.contains_key(&x) {
                continue;
            }
            let st = step(&x)?;
            let events = match st {
                Step::Blocked if !forced => {
                    status.insert(x, Status::Blocked);
                    continue;
                }
                Step::Immediate if !forced => {
                    status.insert(x, Status::Immediate);
                    continue;
                }
                Step::Wait(ev) => ev,
                _ => {
                    return Err(Error::Solver(format!("tagged state {x} is not a waiting state")));
                }
            };
            status.insert(x, Status::Node(nodes.len()));
            for (next, _) in events.iter().rev() {
                match next {
                    Next::Classify(t) => stack.push((*t, false)),
                    Next::Wait(t) => stack.push((*t, true)),
                    _ => {}
                }
            }
            nodes.push(events);
        }
        let n = nodes.len();
        let mut psi = vec![0.0; n];
        let mut served = vec![0.0; n];
        let mut off = Vec::new();
        for (i, events) in nodes.iter().enumerate() {
            for (next, r) in events {
                psi[i] += r;
                let target = match next {
                    Next::Served => {
                        served[i] += r;
                        continue;
                    }
                    Next::Lost => continue,
                    Next::Classify(t) | Next::Wait(t) => t,
                };
                match status[target] {
                    Status::Blocked => {}
                    Status::Immediate => served[i] += r,
                    Status::Node(j) => off.push((i, j, *r)),
                }
            }
        }
        let system = if n > 0 { Some(ShiftedSystem::new(&psi, off)?) } else { None };
        Ok(Chain { status, system, served })
    }

    /// `W̃(s)` over the chain's waiting nodes.
    fn node_transform(&self, s: Complex64) -> Result<Vec<Complex64>> {
        match &self.system {
            None => Ok(Vec::new()),
            Some(sys) => {
                let rhs: Vec<Complex64> = self.served.iter().map(|&r| Complex64::new(r, 0.0) / s).collect();
                sys.factor(s)?.solve(&rhs)
            }
        }
    }

    fn transform(&self, x: &State, s: Complex64) -> Result<Complex64> {
        Ok(self.transforms(std::slice::from_ref(x), s)?[0])
    }

    fn transforms(&self, xs: &[State], s: Complex64) -> Result<Vec<Complex64>> {
        let w = self.node_transform(s)?;
        Ok(xs
            .iter()
            .map(|x| match self.status[x] {
                Status::Blocked => Complex64::new(0.0, 0.0),
                Status::Immediate => 1.0 / s,
                Status::Node(i) => w[i],
            })
            .collect())
    }

    /// `Ξ(x, y)` for every `x`, at each `y`.
    fn cdf(&self, xs: &[State], ys: &[f64], euler: &EulerConfig) -> Result<Vec<Vec<f64>>> {
        ys.iter()
            .map(|&y| {
                let values = euler
                    .nodes(y)
                    .into_par_iter()
                    .map(|s| self.node_transform(s))
                    .collect::<Result<Vec<_>>>()?;
                let w = if self.system.is_some() { euler.combine_vec(y, &values) } else { Vec::new() };
                Ok(xs
                    .iter()
                    .map(|x| match self.status[x] {
                        Status::Blocked => 0.0,
                        Status::Immediate => 1.0,
                        Status::Node(i) => w[i].clamp(0.0, 1.0),
                    })
                    .collect())
            })
            .collect()
    }
}

fn level_chain(level: usize, p: &ModelParams, res: &Reservation, mode: ChainMode, starts: &[State]) -> Result<Chain> {
    match mode {
        ChainMode::Exact => Chain::build(starts, |x| exact_step(level, x, p, res)),
        ChainMode::Reduced | ChainMode::ReducedStrict => {
            if p.num_levels != 4 {
                return Err(Error::params(
                    "mode",
                    "reduced tagged recursions need 4 levels; use the exact mode",
                ));
            }
            let strict = mode == ChainMode::ReducedStrict;
            Chain::build(starts, |x| reduced_step(level, x, p, res, strict))
        }
    }
}

fn check_level(level: usize, p: &ModelParams) -> Result<()> {
    if level == 0 || level > p.num_levels {
        Err(Error::params("level", format!("must be in 1..={}", p.num_levels)))
    } else {
        Ok(())
    }
}

/// `Ξ̃^j(x, s)` for every tagged state of `level` (1-based), in the order of
/// `enumerate_wait_states`.
pub fn wait_transform(level: usize, p: &ModelParams, res: &Reservation, s: Complex64, mode: ChainMode) -> Result<Vec<(State, Complex64)>> {
    p.validate()?;
    res.validate(p)?;
    check_level(level, p)?;
    if !(s.re > 0.0) {
        return Err(Error::params("s", "real part must be positive"));
    }
    let space = enumerate_wait_states(level, p, res)?;
    let chain = level_chain(level, p, res, mode, space.states())?;
    let values = chain.transforms(space.states(), s)?;
    Ok(space.states().iter().copied().zip(values).collect())
}

pub fn wait_transform_level1(p: &ModelParams, res: &Reservation, s: Complex64) -> Result<Vec<(State, Complex64)>> {
    wait_transform(1, p, res, s, ChainMode::Reduced)
}

pub fn wait_transform_level2(p: &ModelParams, res: &Reservation, s: Complex64) -> Result<Vec<(State, Complex64)>> {
    wait_transform(2, p, res, s, ChainMode::Reduced)
}

pub fn wait_transform_level3(p: &ModelParams, res: &Reservation, s: Complex64) -> Result<Vec<(State, Complex64)>> {
    wait_transform(3, p, res, s, ChainMode::Reduced)
}

pub fn wait_transform_level4(p: &ModelParams, res: &Reservation, s: Complex64) -> Result<Vec<(State, Complex64)>> {
    wait_transform(4, p, res, s, ChainMode::Reduced)
}

/// `Ξ^j(x, y)` for a single tagged state.
pub fn wait_cdf(level: usize, p: &ModelParams, res: &Reservation, x: &State, ys: &[f64], mode: ChainMode) -> Result<Vec<f64>> {
    p.validate()?;
    res.validate(p)?;
    check_level(level, p)?;
    let chain = level_chain(level, p, res, mode, std::slice::from_ref(x))?;
    let euler = EulerConfig::default();
    Ok(chain.cdf(std::slice::from_ref(x), ys, &euler)?.into_iter().map(|v| v[0]).collect())
}

/// Transform of `Ξ^j(x, ·)` at a single `s`.
pub fn wait_transform_at(level: usize, p: &ModelParams, res: &Reservation, x: &State, s: Complex64, mode: ChainMode) -> Result<Complex64> {
    check_level(level, p)?;
    level_chain(level, p, res, mode, std::slice::from_ref(x))?.transform(x, s)
}

/// Probability that a caller arriving uniformly in `(0, t)` is answered
/// within each `y`, per level and overall.
pub fn service_level(p: &ModelParams, res: &Reservation, nu0: &State, t: f64, ys: &[f64], mode: ChainMode) -> Result<Vec<ServiceLevelResult>> {
    let model = TransientModel::new(p, res)?;
    let r = model.observed_distribution(nu0, t)?;
    service_level_from(p, res, &r, ys, mode)
}

/// As `service_level`, given an already computed arrival-state distribution.
pub fn service_level_from(p: &ModelParams, res: &Reservation, r: &ObservedStateDistribution, ys: &[f64], mode: ChainMode) -> Result<Vec<ServiceLevelResult>> {
    if let Some(y) = ys.iter().find(|y| !(**y > 0.0 && y.is_finite())) {
        return Err(Error::params("y", format!("must be positive, got {y}")));
    }
    let euler = EulerConfig::default();
    // The projection drops lower-level callers, so only the full state can
    // tell whether an arrival is blocked. The reduced recursions keep their
    // own, projected capacity test.
    let exact = mode == ChainMode::Exact;
    let per_level: Vec<Vec<f64>> = (1..=p.num_levels)
        .into_par_iter()
        .map(|level| {
            let space = project_space(level, r.space());
            let chain = level_chain(level, p, res, mode, space.states())?;
            let xi = chain.cdf(space.states(), ys, &euler)?;
            Ok(xi
                .iter()
                .map(|xi_y| {
                    r.iter()
                        .filter(|(s, _)| !(exact && s.total_callers() >= p.ell))
                        .map(|(s, prob)| prob * xi_y[space.index_of(&project_for_level(s, level)).expect("projection")])
                        .sum::<f64>()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let total = p.total_arrival_rate();
    Ok(ys
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let levels: Vec<f64> = per_level.iter().map(|v| v[k]).collect();
            let overall = levels.iter().zip(&p.lambda).map(|(q, l)| l * q).sum::<f64>() / total;
            ServiceLevelResult {
                y,
                per_level: levels,
                overall,
            }
        })
        .collect())
}

fn project_space(level: usize, full: &StateSpace) -> StateSpace {
    StateSpace::new(
        crate::model::Family::Wait(level as u8),
        full.iter().map(|s| project_for_level(s, level)).collect(),
    )
}

fn to_state(v: &[i32]) -> Result<State> {
    let mut buf = Vec::with_capacity(v.len());
    for &x in v {
        if !(0..=255).contains(&x) {
            return Err(Error::Solver(format!("tagged chain left the lattice at {v:?}")));
        }
        buf.push(x as u8);
    }
    Ok(State::new(&buf))
}

fn ind(c: bool) -> i32 {
    c as i32
}

/// One step of the reduced recursions for a 4-level model.
fn reduced_step(level: usize, x: &State, p: &ModelParams, res: &Reservation, strict: bool) -> Result<Step> {
    let k: Vec<i32> = p.k.iter().map(|&v| v as i32).collect();
    let (k1, k2, k3, k4) = (k[0], k[1], k[2], k[3]);
    let th: Vec<i32> = res.theta_res.iter().map(|&v| v as i32).collect();
    let (t2, t3, t4) = (th[0], th[1], th[2]);
    let ell = p.ell as i32;
    let (lam, mu, mu_up, ab) = (&p.lambda, &p.mu, &p.mu_up, &p.theta);
    let c: Vec<i32> = x.coords().iter().map(|&v| v as i32).collect();
    let mut ev: Vec<(Next, f64)> = Vec::new();
    let mut add = |t: Vec<i32>, r: f64| -> Result<()> {
        if r > 0.0 {
            ev.push((Next::Classify(to_state(&t)?), r));
        }
        Ok(())
    };
    match level {
        4 => {
            let (c1, d) = (c[0], c[1]);
            if c1 + d >= ell {
                return Ok(Step::Blocked);
            }
            if d < k4 - c1 {
                return Ok(Step::Immediate);
            }
            add(vec![c1 - 1, d], c1 as f64 * mu_up[2])?;
            add(vec![c1, d - 1], (k4 - c1) as f64 * mu[3] + (d - (k4 - c1)) as f64 * ab[3])?;
            ev.push((Next::Lost, ab[3]));
        }
        3 => {
            let (b1, cc, c1, d) = (c[0], c[1], c[2], c[3]);
            if b1 + cc + d >= ell {
                return Ok(Step::Blocked);
            }
            if k3 - b1 > cc - c1 || k4 > d + c1 + t4 {
                return Ok(Step::Immediate);
            }
            if b1 + cc + d < ell - 1 {
                add(vec![b1, cc, c1, d + 1], lam[3])?;
            }
            let i4 = ind(cc + 1 - c1 > k3 - b1 && d == k4 - c1 - t4);
            add(vec![b1, cc - 1, c1, d], (k3 - b1) as f64 * mu[2])?;
            add(vec![b1 - 1, cc, c1, d], b1 as f64 * mu_up[1])?;
            add(vec![b1, cc - 1, c1 - (1 - i4), d], c1 as f64 * mu_up[2])?;
            add(vec![b1, cc, c1 + i4, d - 1], (k4 - c1).min(d) as f64 * mu[3])?;
            add(vec![b1, cc - 1, c1, d], (cc - (k3 - b1 + c1)) as f64 * ab[2])?;
            add(vec![b1, cc, c1, d - 1], (d - (k4 - c1)).max(0) as f64 * ab[3])?;
            ev.push((Next::Lost, ab[2]));
        }
        2 => {
            let (a1, b, b1, cc, c1, d) = (c[0], c[1], c[2], c[3], c[4], c[5]);
            if a1 + b + cc + d >= ell {
                return Ok(Step::Blocked);
            }
            if k2 - a1 > b - b1 || k3 - t3 > cc + b1 {
                return Ok(Step::Immediate);
            }
            if a1 + b + cc + d < ell - 1 {
                add(vec![a1, b, b1, cc + 1, c1, d], lam[2])?;
                add(vec![a1, b, b1, cc, c1, d + 1], lam[3])?;
            }
            add(vec![a1 - 1, b, b1, cc, c1, d], a1 as f64 * mu_up[0])?;
            add(vec![a1, b - 1, b1, cc, c1, d], (k2 - a1) as f64 * mu[1])?;
            let i3 = ind(b + 1 - b1 > k2 - a1 && cc == k3 - b1 - t3);
            add(vec![a1, b - 1, b1 - (1 - i3), cc, c1, d], b1 as f64 * mu_up[1])?;
            let saturated = if strict { b + 1 - b1 > k4 - c1 } else { b + 1 - b1 > k2 - a1 };
            let pick = ind(saturated && cc - c1 == k3 - b1 - t3);
            add(vec![a1, b, b1 + pick, cc - 1, c1, d], (k3 - b1).min(cc - c1) as f64 * mu[2])?;
            let i4 = ind(cc - c1 > k3 - b1 && d == k4 - c1 - t4);
            add(vec![a1, b, b1, cc - 1, c1 - (1 - i4), d], c1 as f64 * mu_up[2])?;
            add(vec![a1, b, b1, cc, c1 + i4, d - 1], (k4 - c1).min(d) as f64 * mu[3])?;
            add(vec![a1, b - 1, b1, cc, c1, d], (b - (k2 - a1 + b1)) as f64 * ab[1])?;
            add(vec![a1, b, b1, cc - 1, c1, d], (cc - (k3 - b1 + c1)).max(0) as f64 * ab[2])?;
            add(vec![a1, b, b1, cc, c1, d - 1], (d - (k4 - c1)).max(0) as f64 * ab[3])?;
            ev.push((Next::Lost, ab[1]));
        }
        1 => {
            let (a, a1, b, b1, cc, c1, d) = (c[0], c[1], c[2], c[3], c[4], c[5], c[6]);
            if a + b + cc + d >= ell {
                return Ok(Step::Blocked);
            }
            if k1 > a - a1 || k2 - t2 > b + a1 {
                return Ok(Step::Immediate);
            }
            if a + b + cc + d < ell - 1 {
                let up2 = ind(b - b1 >= k2 && cc < k3 - t3 - b1);
                add(vec![a, a1, b + 1, b1 + up2, cc, c1, d], lam[1])?;
                let up3 = ind(cc - c1 >= k3 && d < k4 - t4 - c1);
                add(vec![a, a1, b, b1, cc + 1, c1 + up3, d], lam[2])?;
                add(vec![a, a1, b, b1, cc, c1, d + 1], lam[3])?;
            }
            add(vec![a - 1, a1, b, b1, cc, c1, d], k1 as f64 * mu[0])?;
            let i2 = ind(a - a1 > k1 && b - b1 == k2 - t2 - a1);
            add(vec![a - 1, a1 - (1 - i2), b, b1, cc, c1, d], a1 as f64 * mu_up[0])?;
            add(vec![a, a1 + i2, b - 1, b1, cc, c1, d], (b - b1).min(k2 - a1) as f64 * mu[1])?;
            let i3 = ind(b - b1 > k2 - a1 && cc == k3 - t3 - b1);
            add(vec![a, a1, b - 1, b1 - (1 - i3), cc, c1, d], b1 as f64 * mu_up[1])?;
            let pick = ind(b - b1 > k2 && cc - c1 == k3 - t3 - b1);
            add(vec![a, a1, b, b1 + pick, cc - 1, c1, d], (cc - c1).min(k3 - b1) as f64 * mu[2])?;
            let i4 = ind(cc - c1 > k3 - b1 && d == k4 - t4 - c1);
            add(vec![a, a1, b, b1, cc - 1, c1 - (1 - i4), d], c1 as f64 * mu_up[2])?;
            add(vec![a, a1, b, b1, cc, c1 + i4, d - 1], d.min(k4 - c1) as f64 * mu[3])?;
            add(vec![a - 1, a1, b, b1, cc, c1, d], (a - (k1 + a1)) as f64 * ab[0])?;
            add(vec![a, a1, b - 1, b1, cc, c1, d], (b - (k2 - a1 + b1)).max(0) as f64 * ab[1])?;
            add(vec![a, a1, b, b1, cc - 1, c1, d], (cc - (k3 - b1 + c1)).max(0) as f64 * ab[2])?;
            add(vec![a, a1, b, b1, cc, c1, d - 1], (d - (k4 - c1)).max(0) as f64 * ab[3])?;
            ev.push((Next::Lost, ab[0]));
        }
        _ => unreachable!("level checked by caller"),
    }
    Ok(Step::Wait(ev))
}

/// Full-layout state seen by a level-`level` arrival whose chain state is
/// `x`: lower levels are empty except for the callers served by level
/// `level` agents.
fn pseudo_state(level: usize, x: &State, p: &ModelParams) -> State {
    if level == 1 {
        return *x;
    }
    let mut buf = vec![0u8; p.state_len()];
    let off = 2 * (level - 2);
    let c = x.coords();
    buf[off] = c[0];
    buf[off + 1..].copy_from_slice(c);
    State::new(&buf)
}

fn exact_step(level: usize, x: &State, p: &ModelParams, res: &Reservation) -> Result<Step> {
    let j = level - 1;
    let z = pseudo_state(level, x, p);
    if z.total_callers() >= p.ell {
        return Ok(Step::Blocked);
    }
    let mut out = Vec::new();
    push_transitions(&z, p, res, &mut out);
    let arrival = out
        .iter()
        .find(|(_, _, e)| *e == Event::Arrival(j as u8))
        .map(|(t, _, _)| *t)
        .expect("arrival exists below capacity");
    if Levels::of(&arrival, &p.k).queue[j] == 0 {
        return Ok(Step::Immediate);
    }
    // the tagged caller waits at the back of the level-j queue
    let mut tagged = z;
    tagged.add(2 * j, 1);
    let queue = Levels::of(&tagged, &p.k).queue[j];
    out.clear();
    push_transitions(&tagged, p, res, &mut out);
    let ahead = |t: &State| {
        let mut t = *t;
        t.add(2 * j, -1);
        project_for_level(&t, level)
    };
    let mut ev = Vec::with_capacity(out.len() + 1);
    for (t, r, e) in out {
        match e {
            Event::Arrival(i) if (i as usize) <= j => continue,
            Event::Abandon(i) if i as usize == j => {
                ev.push((Next::Lost, p.theta[j]));
                if queue > 1 {
                    ev.push((Next::Wait(ahead(&t)), (queue - 1) as f64 * p.theta[j]));
                }
            }
            _ => {
                if Levels::of(&t, &p.k).queue[j] == 0 {
                    ev.push((Next::Served, r));
                } else {
                    ev.push((Next::Wait(ahead(&t)), r));
                }
            }
        }
    }
    Ok(Step::Wait(ev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::cost_params;

    #[test]
    fn empty_state_is_immediate_at_every_level() {
        let p = cost_params();
        let res = Reservation::zero(&p);
        for level in 1..=4 {
            for mode in [ChainMode::Reduced, ChainMode::Exact] {
                let x = project_for_level(&State::zero(p.state_len()), level);
                let v = wait_cdf(level, &p, &res, &x, &[0.5, 3.0], mode).unwrap();
                assert_eq!(v, vec![1.0, 1.0]);
            }
        }
    }

    #[test]
    fn blocked_state_is_never_served() {
        let p = cost_params();
        let res = Reservation::zero(&p);
        let x = State::new(&[0, 10]);
        let v = wait_cdf(4, &p, &res, &x, &[1.0], ChainMode::Reduced).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn mode_parses() {
        assert_eq!("reduced-strict".parse::<ChainMode>().unwrap(), ChainMode::ReducedStrict);
        assert!("nope".parse::<ChainMode>().is_err());
    }
}
