//! Transition catalogue and sparse rate matrices.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    enumerate_mdp_states, enumerate_states, is_member, Levels, MdpState, ModelParams, Reservation, State,
    StateSpace,
};

/// What fired. Levels are 0-based internally and printed 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Event {
    Arrival(u8),
    ServiceOwn(u8),
    /// A level-`i` caller finishes service with a level-`i+1` agent.
    ServiceUp(u8),
    Abandon(u8),
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Arrival(i) => write!(f, "arrival-{}", i + 1),
            Event::ServiceOwn(i) => write!(f, "service-own-{}", i + 1),
            Event::ServiceUp(i) => write!(f, "service-up-{}", i + 1),
            Event::Abandon(i) => write!(f, "abandon-{}", i + 1),
        }
    }
}

impl Event {
    pub fn cost(&self, p: &ModelParams) -> f64 {
        match self {
            Event::Abandon(i) => p.gamma[*i as usize],
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
    pub event: Event,
    pub cost: f64,
}

/// Outgoing transitions of a reservation-model state.
pub fn transitions_from(s: &State, p: &ModelParams, res: &Reservation) -> Result<Vec<(State, f64, Event)>> {
    if !is_member(s, p, res) {
        return Err(Error::InvalidState {
            state: s.to_string(),
            reason: format!("not in the state space for thresholds {res}"),
        });
    }
    let mut out = Vec::with_capacity(4 * p.num_levels);
    push_transitions(s, p, res, &mut out);
    Ok(out)
}

pub(crate) fn push_transitions(s: &State, p: &ModelParams, res: &Reservation, out: &mut Vec<(State, f64, Event)>) {
    let nu = p.num_levels;
    let l = Levels::of(s, &p.k);
    let n_idx = |i: usize| 2 * i;
    let u_idx = |i: usize| 2 * i + 1;

    if l.total() < p.ell as i32 {
        for i in 0..nu {
            let mut t = *s;
            t.add(n_idx(i), 1);
            if i + 1 < nu
                && l.present(i) >= p.k[i] as i32 - l.down[i]
                && l.present(i + 1) < res.up_capacity(p, i) - l.up[i]
            {
                t.add(u_idx(i), 1);
            }
            out.push((t, p.lambda[i], Event::Arrival(i as u8)));
        }
    }
    for i in 0..nu {
        if l.own[i] > 0 {
            let mut t = *s;
            t.add(n_idx(i), -1);
            // the freed agent picks up a queued caller from the level below
            if i > 0 && l.queue[i - 1] > 0 && l.present(i) == res.up_capacity(p, i - 1) - l.down[i] {
                t.add(u_idx(i - 1), 1);
            }
            out.push((t, l.own[i] as f64 * p.mu[i], Event::ServiceOwn(i as u8)));
        }
        if i + 1 < nu && l.up[i] > 0 {
            let mut t = *s;
            t.add(n_idx(i), -1);
            let keeps = l.queue[i] > 0 && l.present(i + 1) == res.up_capacity(p, i) - l.up[i];
            if !keeps {
                t.add(u_idx(i), -1);
            }
            out.push((t, l.up[i] as f64 * p.mu_up[i], Event::ServiceUp(i as u8)));
        }
        if l.queue[i] > 0 {
            let mut t = *s;
            t.add(n_idx(i), -1);
            out.push((t, l.queue[i] as f64 * p.theta[i], Event::Abandon(i as u8)));
        }
    }
}

/// Sparse generator in compressed-row form with cost annotations.
#[derive(Debug, Clone)]
pub struct RateMatrix {
    space: StateSpace,
    row_start: Vec<usize>,
    target: Vec<usize>,
    rate: Vec<f64>,
    event: Vec<Event>,
    cost: Vec<f64>,
    kappa: Vec<f64>,
    blocking: Vec<f64>,
    dropped: usize,
}

impl RateMatrix {
    /// Rate matrix of the reservation model under thresholds `res`.
    pub fn reservation(p: &ModelParams, res: &Reservation) -> Result<Self> {
        let space = enumerate_states(p, res)?;
        let rows: Vec<Vec<(State, f64, Event)>> = space
            .states()
            .par_iter()
            .map(|s| {
                let mut out = Vec::with_capacity(4 * p.num_levels);
                push_transitions(s, p, res, &mut out);
                out
            })
            .collect();
        let full: Vec<bool> = space.iter().map(|s| s.total_callers() >= p.ell).collect();
        Ok(Self::assemble(space, rows, &full, p))
    }

    /// Rate matrix of the 2-level decision model under a fixed policy.
    pub fn mdp<F>(p: &ModelParams, policy: F) -> Result<Self>
    where
        F: Fn(&MdpState, Decision) -> Option<Action> + Sync,
    {
        let space = enumerate_mdp_states(p)?;
        let rows = space
            .states()
            .par_iter()
            .map(|s| {
                let m = MdpState::from_state(s);
                let ts = transitions_from_2(&m, p, |d| policy(&m, d))?;
                Ok(ts.into_iter().map(|(t, r, e)| (t.to_state(), r, e)).collect())
            })
            .collect::<Result<Vec<Vec<_>>>>()?;
        let full: Vec<bool> = space.iter().map(|s| MdpState::from_state(s).total() >= p.ell).collect();
        Ok(Self::assemble(space, rows, &full, p))
    }

    fn assemble(space: StateSpace, rows: Vec<Vec<(State, f64, Event)>>, full: &[bool], p: &ModelParams) -> Self {
        let n = space.len();
        let block_rate = p.beta * p.total_arrival_rate();
        let mut m = RateMatrix {
            row_start: Vec::with_capacity(n + 1),
            target: Vec::new(),
            rate: Vec::new(),
            event: Vec::new(),
            cost: Vec::new(),
            kappa: vec![0.0; n],
            blocking: vec![0.0; n],
            dropped: 0,
            space,
        };
        m.row_start.push(0);
        for (i, row) in rows.into_iter().enumerate() {
            for (t, r, e) in row {
                m.kappa[i] += r;
                match m.space.index_of(&t) {
                    Some(j) => {
                        debug_assert_ne!(i, j, "self-loop emitted");
                        m.target.push(j);
                        m.rate.push(r);
                        m.event.push(e);
                        m.cost.push(e.cost(p));
                    }
                    None => m.dropped += 1,
                }
            }
            if full[i] {
                m.blocking[i] = block_rate;
            }
            m.row_start.push(m.target.len());
        }
        m
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.target.len()
    }

    /// Total exit rate of state `i`.
    pub fn kappa(&self, i: usize) -> f64 {
        self.kappa[i]
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappa
    }

    /// Continuous blocking-cost rate of state `i` (nonzero only when full).
    pub fn blocking_rate(&self, i: usize) -> f64 {
        self.blocking[i]
    }

    /// Transitions whose target was outside the state space.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = Transition> + '_ {
        (self.row_start[i]..self.row_start[i + 1]).map(move |k| Transition {
            from: i,
            to: self.target[k],
            rate: self.rate[k],
            event: self.event[k],
            cost: self.cost[k],
        })
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len()).flat_map(move |i| self.row(i))
    }

    pub(crate) fn row_slices(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_start[i]..self.row_start[i + 1];
        (&self.target[r.clone()], &self.rate[r])
    }

    /// Expected cost per unit time in each state: abandonment rates times
    /// their costs plus the blocking rate.
    pub fn cost_rates(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.row(i).map(|t| t.rate * t.cost).sum::<f64>() + self.blocking[i])
            .collect()
    }

    /// Debug dump as CSV: `from,to,rate,event,cost`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "from,to,rate,event,cost")?;
        for t in self.transitions() {
            writeln!(
                w,
                "\"{}\",\"{}\",{},{},{}",
                self.space.state(t.from),
                self.space.state(t.to),
                t.rate,
                t.event,
                t.cost
            )?;
        }
        Ok(())
    }
}

/// Embedded jump chain: transition probabilities `rate / kappa`.
#[derive(Debug, Clone)]
pub struct JumpChain {
    row_start: Vec<usize>,
    target: Vec<usize>,
    prob: Vec<f64>,
}

impl JumpChain {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_start[i]..self.row_start[i + 1]).map(move |k| (self.target[k], self.prob[k]))
    }

    pub fn len(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// States with no exit (only possible when the capacity is zero) become absorbing.
pub fn jump_chain(rm: &RateMatrix) -> JumpChain {
    let mut jc = JumpChain {
        row_start: vec![0],
        target: Vec::with_capacity(rm.nnz()),
        prob: Vec::with_capacity(rm.nnz()),
    };
    for i in 0..rm.len() {
        let kappa = rm.kappa(i);
        if kappa > 0.0 {
            for t in rm.row(i) {
                jc.target.push(t.to);
                jc.prob.push(t.rate / kappa);
            }
        } else {
            jc.target.push(i);
            jc.prob.push(1.0);
        }
        jc.row_start.push(jc.target.len());
    }
    jc
}

/// Decision points of the 2-level model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Decision {
    /// Level-1 arrival while every level-1 agent is busy and a level-2 agent is idle.
    Level1Arrival,
    /// Level-2 arrival while a level-2 agent is idle.
    Level2Arrival,
    /// A level-2 agent finishes a call while callers are queued.
    Level2Freed,
}

impl Decision {
    pub const ALL: [Decision; 3] = [Decision::Level1Arrival, Decision::Level2Arrival, Decision::Level2Freed];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Level1Arrival => "arrival-1",
            Decision::Level2Arrival => "arrival-2",
            Decision::Level2Freed => "level2-freed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Action {
    /// Put the arriving caller with an idle level-2 agent.
    Assign,
    Queue,
    TakeLevel1,
    TakeLevel2,
    /// Leave the freed level-2 agent idle.
    Reserve,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Assign => "assign",
            Action::Queue => "queue",
            Action::TakeLevel1 => "take-level1",
            Action::TakeLevel2 => "take-level2",
            Action::Reserve => "reserve",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Forced(MdpState),
    Choice {
        decision: Decision,
        options: Vec<(Action, MdpState)>,
    },
}

/// One exponential clock of a decision-model state and what it leads to.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpBranch {
    pub rate: f64,
    pub event: Event,
    pub cost: f64,
    pub outcome: Outcome,
}

fn resolve(decision: Decision, options: Vec<(Action, MdpState)>, p: &ModelParams) -> Outcome {
    let mut options: Vec<_> = options.into_iter().filter(|(_, t)| t.is_member(p)).collect();
    if options.len() == 1 {
        Outcome::Forced(options.pop().unwrap().1)
    } else {
        Outcome::Choice { decision, options }
    }
}

/// Every clock of a decision-model state, with the feasible actions where a
/// choice exists.
pub fn mdp_branches(s: &MdpState, p: &ModelParams) -> Vec<MdpBranch> {
    let (k1, k2) = (p.k[0], p.k[1]);
    let free2 = s.level2_free(p) > 0;
    let mut out = Vec::with_capacity(7);
    let mut push = |rate: f64, event: Event, outcome: Outcome| {
        if rate > 0.0 {
            out.push(MdpBranch {
                rate,
                event,
                cost: event.cost(p),
                outcome,
            });
        }
    };

    if s.total() < p.ell {
        let outcome = if s.a1 < k1 {
            Outcome::Forced(MdpState { a1: s.a1 + 1, ..*s })
        } else if free2 {
            resolve(
                Decision::Level1Arrival,
                vec![
                    (Action::Assign, MdpState { a2: s.a2 + 1, ..*s }),
                    (Action::Queue, MdpState { aq: s.aq + 1, ..*s }),
                ],
                p,
            )
        } else {
            Outcome::Forced(MdpState { aq: s.aq + 1, ..*s })
        };
        push(p.lambda[0], Event::Arrival(0), outcome);

        let outcome = if free2 {
            resolve(
                Decision::Level2Arrival,
                vec![
                    (Action::Assign, MdpState { b2: s.b2 + 1, ..*s }),
                    (Action::Queue, MdpState { bq: s.bq + 1, ..*s }),
                ],
                p,
            )
        } else {
            Outcome::Forced(MdpState { bq: s.bq + 1, ..*s })
        };
        push(p.lambda[1], Event::Arrival(1), outcome);
    }

    let own1 = if s.aq > 0 {
        MdpState { aq: s.aq - 1, ..*s }
    } else {
        MdpState { a1: s.a1.saturating_sub(1), ..*s }
    };
    push(s.a1 as f64 * p.mu[0], Event::ServiceOwn(0), Outcome::Forced(own1));

    let freed = |post: MdpState| {
        let mut options = vec![(Action::Reserve, post)];
        if post.aq > 0 {
            options.insert(0, (Action::TakeLevel1, MdpState { a2: post.a2 + 1, aq: post.aq - 1, ..post }));
        }
        if post.bq > 0 {
            options.insert(0, (Action::TakeLevel2, MdpState { b2: post.b2 + 1, bq: post.bq - 1, ..post }));
        }
        resolve(Decision::Level2Freed, options, p)
    };
    if s.a2 > 0 {
        push(s.a2 as f64 * p.mu_up[0], Event::ServiceUp(0), freed(MdpState { a2: s.a2 - 1, ..*s }));
    }
    if s.b2 > 0 {
        push(s.b2 as f64 * p.mu[1], Event::ServiceOwn(1), freed(MdpState { b2: s.b2 - 1, ..*s }));
    }
    if s.aq > 0 {
        push(s.aq as f64 * p.theta[0], Event::Abandon(0), Outcome::Forced(MdpState { aq: s.aq - 1, ..*s }));
    }
    if s.bq > 0 {
        push(s.bq as f64 * p.theta[1], Event::Abandon(1), Outcome::Forced(MdpState { bq: s.bq - 1, ..*s }));
    }
    debug_assert!(k2 >= s.a2 + s.b2);
    out
}

/// Transitions of a decision-model state with every choice resolved by `policy`.
pub fn transitions_from_2<F>(s: &MdpState, p: &ModelParams, policy: F) -> Result<Vec<(MdpState, f64, Event)>>
where
    F: Fn(Decision) -> Option<Action>,
{
    if !s.is_member(p) {
        return Err(Error::InvalidState {
            state: s.to_string(),
            reason: "not in the 2-level state space".into(),
        });
    }
    mdp_branches(s, p)
        .into_iter()
        .map(|b| {
            let target = match b.outcome {
                Outcome::Forced(t) => t,
                Outcome::Choice { decision, options } => {
                    let missing = || Error::IncompletePolicy {
                        state: s.to_string(),
                        event: decision.to_string(),
                    };
                    let a = policy(decision).ok_or_else(missing)?;
                    options.iter().find(|(o, _)| *o == a).map(|(_, t)| *t).ok_or_else(missing)?
                }
            };
            Ok((target, b.rate, b.event))
        })
        .collect()
}

/// Threshold rule expressed as decision-model actions: a level-2 agent takes
/// level-1 work only while more than `theta2` level-2 agents would stay idle
/// beforehand, and queued level-2 callers always go first.
pub fn threshold_action(s: &MdpState, d: Decision, theta2: u32, p: &ModelParams) -> Action {
    let free = s.level2_free(p);
    match d {
        Decision::Level1Arrival => {
            if free > theta2 as i64 {
                Action::Assign
            } else {
                Action::Queue
            }
        }
        Decision::Level2Arrival => Action::Assign,
        Decision::Level2Freed => {
            // `s` is the pre-event state; the event frees one more agent
            if s.bq > 0 {
                Action::TakeLevel2
            } else if s.aq > 0 && free + 1 > theta2 as i64 {
                Action::TakeLevel1
            } else {
                Action::Reserve
            }
        }
    }
}
