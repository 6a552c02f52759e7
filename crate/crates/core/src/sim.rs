//! Discrete-event simulation of the call center, used as an independent
//! check on the transform-based results.
//!
//! Each replication draws from its own ChaCha stream selected by
//! `(seed, replication)`, so results do not depend on thread count.
//! Queued callers are tracked individually in FIFO order; an abandonment
//! removes a uniformly chosen waiting caller, which is equivalent to
//! independent exponential patience.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::PolicyTable;
use crate::model::{enumerate_mdp_states, enumerate_states, is_member, Levels, MdpState, ModelParams, Reservation, State, StateSpace};
use crate::rates::{push_transitions, transitions_from_2, Event};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489004;

/// Replications per work unit; fixes the summation order.
const CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub enum SimPolicy {
    Reservation(Reservation),
    /// Decision-model policy; finite-horizon tables are indexed by jump count
    /// and keep their last step once exhausted.
    Table(PolicyTable),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub replications: usize,
    pub horizon: f64,
    pub seed: u64,
    pub policy: SimPolicy,
    pub occupancy: bool,
    /// Answer-time targets for the service-level estimates; empty disables
    /// caller tracking.
    pub wait_targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    fn from_sums(sum: f64, sum_sq: f64, n: usize) -> Estimate {
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 { ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
        Estimate {
            mean,
            std_err: (var / nf).sqrt(),
        }
    }

    /// Half-width of the 99% confidence interval.
    pub fn half_width(&self) -> f64 {
        Z99 * self.std_err
    }

    pub fn covers(&self, value: f64) -> bool {
        (value - self.mean).abs() <= self.half_width()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ServiceEstimate {
    pub y: f64,
    pub per_level: Vec<Estimate>,
    pub overall: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub replications: usize,
    pub horizon: f64,
    pub seed: u64,
    pub initial_state: String,
    pub cost: Estimate,
    pub abandonments: Vec<Estimate>,
    pub blocked: Estimate,
    /// `(state, fraction of (0, T) spent there)`.
    pub occupancy: Option<Vec<(String, Estimate)>>,
    pub service_levels: Vec<ServiceEstimate>,
}

/// Accumulated sums over replications.
#[derive(Clone)]
struct Acc {
    n: usize,
    cost: [f64; 2],
    abandon: Vec<[f64; 2]>,
    blocked: [f64; 2],
    occupancy: Vec<[f64; 2]>,
    /// `[target][level]`
    good: Vec<Vec<[f64; 2]>>,
    overall: Vec<[f64; 2]>,
}

impl Acc {
    fn new(levels: usize, states: usize, targets: usize) -> Acc {
        Acc {
            n: 0,
            cost: [0.0; 2],
            abandon: vec![[0.0; 2]; levels],
            blocked: [0.0; 2],
            occupancy: vec![[0.0; 2]; states],
            good: vec![vec![[0.0; 2]; levels]; targets],
            overall: vec![[0.0; 2]; targets],
        }
    }

    fn add(slot: &mut [f64; 2], x: f64) {
        slot[0] += x;
        slot[1] += x * x;
    }

    fn merge(&mut self, o: &Acc) {
        let m = |a: &mut [f64; 2], b: &[f64; 2]| {
            a[0] += b[0];
            a[1] += b[1];
        };
        self.n += o.n;
        m(&mut self.cost, &o.cost);
        m(&mut self.blocked, &o.blocked);
        self.abandon.iter_mut().zip(&o.abandon).for_each(|(a, b)| m(a, b));
        self.occupancy.iter_mut().zip(&o.occupancy).for_each(|(a, b)| m(a, b));
        for (ga, gb) in self.good.iter_mut().zip(&o.good) {
            ga.iter_mut().zip(gb).for_each(|(a, b)| m(a, b));
        }
        self.overall.iter_mut().zip(&o.overall).for_each(|(a, b)| m(a, b));
    }
}

/// Outcome of one replication.
struct Run {
    cost: f64,
    abandon: Vec<f64>,
    blocked: f64,
    occupancy: Vec<(usize, f64)>,
    /// Arrivals in `(0, T)` answered within each target, per level.
    good: Vec<Vec<f64>>,
}

enum Dynamics<'a> {
    Reservation(&'a Reservation),
    Table { table: &'a PolicyTable, space: StateSpace },
}

impl Dynamics<'_> {
    fn transitions(&self, s: &State, p: &ModelParams, step: usize, out: &mut Vec<(State, f64, Event)>) -> Result<()> {
        out.clear();
        match self {
            Dynamics::Reservation(res) => push_transitions(s, p, res, out),
            Dynamics::Table { table, space } => {
                let m = MdpState::from_state(s);
                let steps = match table {
                    PolicyTable::FiniteHorizon { steps } => steps.len(),
                    PolicyTable::Stationary { .. } => 1,
                };
                let at = step.min(steps.saturating_sub(1));
                let ts = transitions_from_2(&m, p, |d| table.action(space, at, &m, d))?;
                out.extend(ts.into_iter().map(|(t, r, e)| (t.to_state(), r, e)));
            }
        }
        Ok(())
    }

    /// Queued callers per level.
    fn queues(&self, s: &State, p: &ModelParams) -> [i32; 4] {
        match self {
            Dynamics::Reservation(_) => Levels::of(s, &p.k).queue,
            Dynamics::Table { .. } => {
                let m = MdpState::from_state(s);
                [m.aq as i32, m.bq as i32, 0, 0]
            }
        }
    }

    fn total(&self, s: &State) -> u32 {
        match self {
            Dynamics::Reservation(_) => s.total_callers(),
            Dynamics::Table { .. } => MdpState::from_state(s).total(),
        }
    }
}

fn exp_sample(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn replicate(p: &ModelParams, dynamics: &Dynamics, space: &StateSpace, cfg: &SimConfig, nu0: &State, rep: usize) -> Result<Run> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);
    let nu = p.num_levels;
    let t_end = cfg.horizon;
    let track = !cfg.wait_targets.is_empty();
    let y_max = cfg.wait_targets.iter().cloned().fold(0.0, f64::max);
    let stop = if track { t_end + y_max } else { t_end };
    let arrival_total = p.total_arrival_rate();

    let mut run = Run {
        cost: 0.0,
        abandon: vec![0.0; nu],
        blocked: 0.0,
        occupancy: Vec::new(),
        good: vec![vec![0.0; nu]; cfg.wait_targets.len()],
    };
    let record = |run: &mut Run, level: usize, wait: f64| {
        for (k, &y) in cfg.wait_targets.iter().enumerate() {
            if wait <= y {
                run.good[k][level] += 1.0;
            }
        }
    };
    // arrival times of queued callers; only arrivals before `t_end` matter
    let mut queues: Vec<VecDeque<f64>> = vec![VecDeque::new(); nu];
    let mut s = *nu0;
    let mut now = 0.0;
    let mut step = 0usize;
    let mut out = Vec::with_capacity(16);
    let mut occ_idx = if cfg.occupancy { space.index_of(&s) } else { None };
    let mut q_now = dynamics.queues(&s, p);
    for (i, q) in queues.iter_mut().enumerate() {
        // callers already waiting at time 0 are not arrivals of the window
        q.extend(std::iter::repeat(f64::NEG_INFINITY).take(q_now[i].max(0) as usize));
    }
    loop {
        dynamics.transitions(&s, p, step, &mut out)?;
        let full = dynamics.total(&s) >= p.ell;
        let kappa: f64 = out.iter().map(|t| t.1).sum::<f64>() + if full { arrival_total } else { 0.0 };
        let dt = if kappa > 0.0 { exp_sample(&mut rng, kappa) } else { f64::INFINITY };
        let next = now + dt;
        if let Some(i) = occ_idx {
            let span = next.min(t_end) - now.min(t_end);
            if span > 0.0 {
                run.occupancy.push((i, span));
            }
        }
        if next >= stop {
            break;
        }
        now = next;
        let mut pick = rng.random::<f64>() * kappa;
        let mut chosen = None;
        for (k, t) in out.iter().enumerate() {
            if pick < t.1 {
                chosen = Some(k);
                break;
            }
            pick -= t.1;
        }
        let in_window = now < t_end;
        let Some(k) = chosen.or(if full { None } else { Some(out.len() - 1) }) else {
            // blocked arrival
            if in_window {
                run.blocked += 1.0;
                run.cost += p.beta;
            }
            continue;
        };
        let (t, _, event) = out[k];
        let q_next = dynamics.queues(&t, p);
        match event {
            Event::Arrival(i) => {
                let i = i as usize;
                if q_next[i] > q_now[i] {
                    queues[i].push_back(now);
                } else if in_window && track {
                    record(&mut run, i, 0.0);
                }
            }
            Event::Abandon(i) => {
                let i = i as usize;
                let idx = rng.random_range(0..queues[i].len());
                queues[i].remove(idx);
                if in_window {
                    run.abandon[i] += 1.0;
                    run.cost += p.gamma[i];
                }
            }
            _ => {}
        }
        for i in 0..nu {
            let expected = queues[i].len() as i32;
            let drop = expected - q_next[i];
            if drop < 0 {
                return Err(Error::Solver(format!("queue {} grew without an arrival at {}", i + 1, t)));
            }
            for _ in 0..drop {
                let arrived = queues[i].pop_front().expect("queue length tracked");
                if track && arrived >= 0.0 && arrived < t_end {
                    record(&mut run, i, now - arrived);
                }
            }
        }
        q_now = q_next;
        s = t;
        step += 1;
        if cfg.occupancy {
            occ_idx = space.index_of(&s);
        }
    }
    Ok(run)
}

/// Runs `cfg.replications` independent replications from `nu0`.
pub fn simulate(p: &ModelParams, cfg: &SimConfig, nu0: &State) -> Result<SimReport> {
    p.validate()?;
    if cfg.replications == 0 {
        return Err(Error::params("replications", "must be positive"));
    }
    if !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
        return Err(Error::params("T", "horizon must be positive"));
    }
    if let Some(y) = cfg.wait_targets.iter().find(|y| !(**y >= 0.0 && y.is_finite())) {
        return Err(Error::params("y", format!("answer-time target must be non-negative, got {y}")));
    }
    let (dynamics, space) = match &cfg.policy {
        SimPolicy::Reservation(res) => {
            res.validate(p)?;
            if !is_member(nu0, p, res) {
                return Err(Error::InvalidState {
                    state: nu0.to_string(),
                    reason: format!("not in the state space for thresholds {res}"),
                });
            }
            let space = if cfg.occupancy { enumerate_states(p, res)? } else { StateSpace::new(crate::model::Family::Reservation, Vec::new()) };
            (Dynamics::Reservation(res), space)
        }
        SimPolicy::Table(table) => {
            let space = enumerate_mdp_states(p)?;
            if space.index_of(nu0).is_none() {
                return Err(Error::InvalidState {
                    state: nu0.to_string(),
                    reason: "not in the 2-level state space".into(),
                });
            }
            (Dynamics::Table { table, space: space.clone() }, space)
        }
    };
    let nu = p.num_levels;
    let targets = cfg.wait_targets.len();
    let n_states = if cfg.occupancy { space.len() } else { 0 };
    let t = cfg.horizon;
    let chunks: Vec<usize> = (0..cfg.replications.div_ceil(CHUNK)).collect();
    let parts = chunks
        .into_par_iter()
        .map(|c| {
            let mut acc = Acc::new(nu, n_states, targets);
            let mut occ = vec![0.0; n_states];
            for rep in c * CHUNK..((c + 1) * CHUNK).min(cfg.replications) {
                let run = replicate(p, &dynamics, &space, cfg, nu0, rep)?;
                acc.n += 1;
                Acc::add(&mut acc.cost, run.cost);
                Acc::add(&mut acc.blocked, run.blocked);
                for (a, x) in acc.abandon.iter_mut().zip(&run.abandon) {
                    Acc::add(a, *x);
                }
                if cfg.occupancy {
                    occ.iter_mut().for_each(|x| *x = 0.0);
                    for (i, span) in &run.occupancy {
                        occ[*i] += span / t;
                    }
                    for (a, x) in acc.occupancy.iter_mut().zip(&occ) {
                        Acc::add(a, *x);
                    }
                }
                for k in 0..targets {
                    let mut all = 0.0;
                    for j in 0..nu {
                        Acc::add(&mut acc.good[k][j], run.good[k][j] / (p.lambda[j] * t));
                        all += run.good[k][j];
                    }
                    Acc::add(&mut acc.overall[k], all / (p.total_arrival_rate() * t));
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Acc::new(nu, n_states, targets);
    for part in &parts {
        total.merge(part);
    }
    let n = total.n;
    let est = |a: &[f64; 2]| Estimate::from_sums(a[0], a[1], n);
    Ok(SimReport {
        replications: n,
        horizon: t,
        seed: cfg.seed,
        initial_state: nu0.to_string(),
        cost: est(&total.cost),
        abandonments: total.abandon.iter().map(est).collect(),
        blocked: est(&total.blocked),
        occupancy: cfg
            .occupancy
            .then(|| space.iter().zip(&total.occupancy).map(|(s, a)| (s.to_string(), est(a))).collect()),
        service_levels: cfg
            .wait_targets
            .iter()
            .enumerate()
            .map(|(k, &y)| ServiceEstimate {
                y,
                per_level: total.good[k].iter().map(est).collect(),
                overall: est(&total.overall[k]),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::cost_params;

    fn cfg(res: Reservation) -> SimConfig {
        SimConfig {
            replications: 300,
            horizon: 10.0,
            seed: 7,
            policy: SimPolicy::Reservation(res),
            occupancy: true,
            wait_targets: vec![0.5],
        }
    }

    #[test]
    fn zero_costs_give_zero_cost() {
        let mut p = cost_params();
        p.gamma = vec![0.0; 4];
        let r = simulate(&p, &cfg(Reservation::zero(&p)), &State::zero(7)).unwrap();
        assert_eq!(r.cost.mean, 0.0);
        assert_eq!(r.cost.std_err, 0.0);
    }

    #[test]
    fn occupancy_fractions_sum_to_one() {
        let p = cost_params();
        let r = simulate(&p, &cfg(Reservation::zero(&p)), &State::zero(7)).unwrap();
        let total: f64 = r.occupancy.unwrap().iter().map(|(_, e)| e.mean).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_report() {
        let p = cost_params();
        let a = simulate(&p, &cfg(Reservation::zero(&p)), &State::zero(7)).unwrap();
        let b = simulate(&p, &cfg(Reservation::zero(&p)), &State::zero(7)).unwrap();
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.service_levels[0].overall, b.service_levels[0].overall);
    }
}
