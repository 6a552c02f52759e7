//! Model parameters, states and state-space enumeration.
//!
//! A reservation-model state for `nu` levels is laid out as
//! `(n1, u1, n2, u2, ..., n_nu)`: `n_i` callers of level `i` are in the system
//! and `u_i` of them are being served by level `i+1` agents. For four levels
//! this is the familiar `(a, a1, b, b1, c, c1, d)`.
//!
//! The 2-level decision model uses a different layout, `(a1, a2, aq, b2, bq)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LEVELS: usize = 4;
const MAX_COORDS: usize = 2 * MAX_LEVELS - 1;

/// Largest capacity representable by the compact state encoding.
pub const MAX_CAPACITY: u32 = u8::MAX as u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub num_levels: usize,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_up: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: f64,
    pub k: Vec<u32>,
    pub ell: u32,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let nu = self.num_levels;
        if !(2..=MAX_LEVELS).contains(&nu) {
            return Err(Error::params("num_levels", format!("must be 2, 3 or 4, got {nu}")));
        }
        let check_len = |field: &'static str, len: usize, want: usize| {
            if len != want {
                Err(Error::params(field, format!("expected {want} entries, got {len}")))
            } else {
                Ok(())
            }
        };
        check_len("lambda", self.lambda.len(), nu)?;
        check_len("mu", self.mu.len(), nu)?;
        check_len("mu_up", self.mu_up.len(), nu - 1)?;
        check_len("theta", self.theta.len(), nu)?;
        check_len("gamma", self.gamma.len(), nu)?;
        check_len("k", self.k.len(), nu)?;

        let positive = |field: &'static str, xs: &[f64]| {
            match xs.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
                Some(i) => Err(Error::params(field, format!("entry {} must be a positive finite rate", i + 1))),
                None => Ok(()),
            }
        };
        positive("lambda", &self.lambda)?;
        positive("mu", &self.mu)?;
        positive("mu_up", &self.mu_up)?;
        positive("theta", &self.theta)?;
        if let Some(i) = self.gamma.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::params("gamma", format!("entry {} must be nonnegative", i + 1)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::params("beta", "must be nonnegative"));
        }
        if let Some(i) = self.k.iter().position(|&k| k == 0) {
            return Err(Error::params("k", format!("entry {} must be at least 1", i + 1)));
        }
        if self.ell > MAX_CAPACITY {
            return Err(Error::params("ell", format!("capacity above {MAX_CAPACITY} is not supported")));
        }
        Ok(())
    }

    /// Reads and validates a JSON parameter file.
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: ModelParams = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn total_arrival_rate(&self) -> f64 {
        self.lambda.iter().sum()
    }

    /// Number of coordinates of a reservation-model state.
    pub fn state_len(&self) -> usize {
        2 * self.num_levels - 1
    }
}

/// Reservation thresholds `(Θ2, ..., Θ_nu)`: `theta_res[i]` is the number of
/// level `i+2` agents held back from serving level `i+1` calls.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reservation {
    pub theta_res: Vec<u32>,
}

impl Reservation {
    pub fn new(theta_res: Vec<u32>) -> Self {
        Reservation { theta_res }
    }

    pub fn zero(p: &ModelParams) -> Self {
        Reservation::new(vec![0; p.num_levels - 1])
    }

    pub fn validate(&self, p: &ModelParams) -> Result<()> {
        if self.theta_res.len() != p.num_levels - 1 {
            return Err(Error::params(
                "theta_res",
                format!("expected {} thresholds, got {}", p.num_levels - 1, self.theta_res.len()),
            ));
        }
        for (i, &t) in self.theta_res.iter().enumerate() {
            if t > p.k[i + 1] {
                return Err(Error::params(
                    "theta_res",
                    format!("threshold for level {} is {t}, above k = {}", i + 2, p.k[i + 1]),
                ));
            }
        }
        Ok(())
    }

    /// Agents of level `i+1` (0-based `i`) that may serve level-`i` calls.
    pub(crate) fn up_capacity(&self, p: &ModelParams, i: usize) -> i32 {
        p.k[i + 1] as i32 - self.theta_res[i] as i32
    }

    /// Every threshold vector in lexicographic order.
    pub fn grid(p: &ModelParams) -> Vec<Reservation> {
        let mut out = vec![Vec::new()];
        for i in 1..p.num_levels {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..=p.k[i]).map(move |t| {
                        let mut v = prefix.clone();
                        v.push(t);
                        v
                    })
                })
                .collect();
        }
        out.into_iter().map(Reservation::new).collect()
    }
}

impl fmt::Display for Reservation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.theta_res.iter().map(|t| t.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Compact, copyable state vector (at most seven small counts).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    len: u8,
    coords: [u8; MAX_COORDS],
}

impl State {
    pub fn new(coords: &[u8]) -> Self {
        assert!(coords.len() <= MAX_COORDS, "state has too many coordinates");
        let mut c = [0u8; MAX_COORDS];
        c[..coords.len()].copy_from_slice(coords);
        State { len: coords.len() as u8, coords: c }
    }

    pub fn zero(len: usize) -> Self {
        State::new(&vec![0; len])
    }

    pub fn from_counts(coords: &[u32]) -> Result<Self> {
        if coords.len() > MAX_COORDS {
            return Err(Error::InvalidState {
                state: format!("{coords:?}"),
                reason: format!("at most {MAX_COORDS} coordinates"),
            });
        }
        let mut c = Vec::with_capacity(coords.len());
        for &x in coords {
            c.push(u8::try_from(x).map_err(|_| Error::InvalidState {
                state: format!("{coords:?}"),
                reason: "count too large".into(),
            })?);
        }
        Ok(State::new(&c))
    }

    pub fn coords(&self) -> &[u8] {
        &self.coords[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> u32 {
        self.coords()[i] as u32
    }

    pub(crate) fn add(&mut self, i: usize, delta: i32) {
        let v = self.coords[i] as i32 + delta;
        debug_assert!((0..=255).contains(&v), "coordinate underflow/overflow");
        self.coords[i] = v as u8;
    }

    /// Callers of (0-based) level `i` in a reservation-layout state.
    pub fn callers(&self, i: usize) -> u32 {
        self.get(2 * i)
    }

    /// Level-`i` callers served by level `i+1` agents; zero for the top level.
    pub fn served_up(&self, i: usize) -> u32 {
        let j = 2 * i + 1;
        if j < self.len() {
            self.get(j)
        } else {
            0
        }
    }

    pub fn levels(&self) -> usize {
        (self.len() + 1) / 2
    }

    pub fn total_callers(&self) -> u32 {
        (0..self.levels()).map(|i| self.callers(i)).sum()
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coords().iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for State {
    type Err = Error;

    /// Accepts `1,0,2,0,1,0,0` with or without surrounding parentheses.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let counts = inner
            .split(',')
            .map(|x| x.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidState {
                state: s.to_string(),
                reason: e.to_string(),
            })?;
        State::from_counts(&counts)
    }
}

/// Per-level bookkeeping of a reservation-layout state, in signed arithmetic.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Levels {
    pub nu: usize,
    pub n: [i32; MAX_LEVELS],
    pub up: [i32; MAX_LEVELS],
    /// Level-`i` agents busy with level `i-1` callers.
    pub down: [i32; MAX_LEVELS],
    pub own: [i32; MAX_LEVELS],
    pub queue: [i32; MAX_LEVELS],
    pub free: [i32; MAX_LEVELS],
}

impl Levels {
    pub fn of(s: &State, k: &[u32]) -> Self {
        let nu = s.levels();
        let mut l = Levels {
            nu,
            n: [0; MAX_LEVELS],
            up: [0; MAX_LEVELS],
            down: [0; MAX_LEVELS],
            own: [0; MAX_LEVELS],
            queue: [0; MAX_LEVELS],
            free: [0; MAX_LEVELS],
        };
        for i in 0..nu {
            l.n[i] = s.callers(i) as i32;
            l.up[i] = s.served_up(i) as i32;
            l.down[i] = if i > 0 { s.served_up(i - 1) as i32 } else { 0 };
        }
        for i in 0..nu {
            let avail = k[i] as i32 - l.down[i];
            let present = l.n[i] - l.up[i];
            l.own[i] = present.min(avail);
            l.queue[i] = (present - avail).max(0);
            l.free[i] = avail - l.own[i];
        }
        l
    }

    /// Level-`i` callers not handed up to level `i+1`, served or waiting.
    pub fn present(&self, i: usize) -> i32 {
        self.n[i] - self.up[i]
    }

    pub fn total(&self) -> i32 {
        self.n[..self.nu].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LevelOccupancy {
    pub own_served: u32,
    pub up_served: u32,
    pub waiting: u32,
    pub free_agents: u32,
}

fn invalid(s: &State, reason: impl Into<String>) -> Error {
    Error::InvalidState {
        state: s.to_string(),
        reason: reason.into(),
    }
}

/// Checks the shape of a reservation-layout state without requiring that it
/// be reachable under a particular threshold vector.
pub fn check_well_formed(s: &State, p: &ModelParams) -> Result<()> {
    if s.len() != p.state_len() {
        return Err(invalid(s, format!("expected {} coordinates for {} levels", p.state_len(), p.num_levels)));
    }
    if s.total_callers() > p.ell {
        return Err(invalid(s, format!("more than ell = {} callers", p.ell)));
    }
    for i in 0..p.num_levels - 1 {
        if s.served_up(i) > s.callers(i) {
            return Err(invalid(s, format!("level {} has more up-served than present callers", i + 1)));
        }
        if s.served_up(i) > p.k[i + 1] {
            return Err(invalid(s, format!("level {} uses more than k = {} agents", i + 2, p.k[i + 1])));
        }
    }
    Ok(())
}

pub fn derive_occupancy(s: &State, p: &ModelParams) -> Result<Vec<LevelOccupancy>> {
    check_well_formed(s, p)?;
    let l = Levels::of(s, &p.k);
    Ok((0..p.num_levels)
        .map(|i| LevelOccupancy {
            own_served: l.own[i] as u32,
            up_served: l.up[i] as u32,
            waiting: l.queue[i] as u32,
            free_agents: l.free[i] as u32,
        })
        .collect())
}

/// Membership in the reservation state space for thresholds `res`.
///
/// Bounds are stated on served counts: `u_i` cannot exceed the unreserved
/// level-`i+1` agents, and whenever level `i` has a queue beyond its own free
/// agents the unreserved level-`i+1` agents that are not occupied by their own
/// callers must all be taken.
pub fn is_member(s: &State, p: &ModelParams, res: &Reservation) -> bool {
    if check_well_formed(s, p).is_err() {
        return false;
    }
    let l = Levels::of(s, &p.k);
    for i in 0..p.num_levels - 1 {
        let cap = res.up_capacity(p, i);
        if l.up[i] > cap.min(l.n[i]) {
            return false;
        }
        let lower = (l.n[i] - p.k[i] as i32 + l.down[i])
            .min(cap - l.present(i + 1))
            .max(0);
        if l.up[i] < lower {
            return false;
        }
    }
    true
}

/// A sorted, index-addressable set of states of one family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Mdp2,
    Reservation,
    /// Tagged-caller chain for the given 1-based level.
    Wait(u8),
}

#[derive(Debug, Clone)]
pub struct StateSpace {
    family: Family,
    states: Vec<State>,
}

impl StateSpace {
    pub fn new(family: Family, mut states: Vec<State>) -> Self {
        states.sort_unstable();
        states.dedup();
        StateSpace { family, states }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, index: usize) -> State {
        self.states[index]
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn index_of(&self, s: &State) -> Option<usize> {
        self.states.binary_search(s).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = &State> {
        self.states.iter()
    }
}

/// Enumerates the reservation state space in lexicographic order.
pub fn enumerate_states(p: &ModelParams, res: &Reservation) -> Result<StateSpace> {
    p.validate()?;
    res.validate(p)?;
    let len = p.state_len();
    let mut out = Vec::new();
    let mut buf = vec![0u8; len];
    fill(0, 0, &mut buf, p, res, &mut out);
    Ok(StateSpace::new(Family::Reservation, out))
}

fn fill(pos: usize, used: u32, buf: &mut [u8], p: &ModelParams, res: &Reservation, out: &mut Vec<State>) {
    if pos == buf.len() {
        let s = State::new(buf);
        if is_member(&s, p, res) {
            out.push(s);
        }
        return;
    }
    if pos % 2 == 0 {
        for n in 0..=(p.ell - used) {
            buf[pos] = n as u8;
            fill(pos + 1, used + n, buf, p, res, out);
        }
    } else {
        let i = pos / 2;
        let cap = res.up_capacity(p, i).max(0) as u32;
        for u in 0..=cap.min(buf[pos - 1] as u32) {
            buf[pos] = u as u8;
            fill(pos + 1, used, buf, p, res, out);
        }
    }
    buf[pos] = 0;
}

/// Projection of a full state onto the coordinates a tagged caller of the
/// given 1-based level depends on: everything from `u_{j-1}` onward.
pub fn project_for_level(s: &State, level: usize) -> State {
    if level <= 1 {
        *s
    } else {
        State::new(&s.coords()[2 * (level - 2) + 1..])
    }
}

/// Tagged-caller states of a level: the projections of every reservation state.
pub fn enumerate_wait_states(level: usize, p: &ModelParams, res: &Reservation) -> Result<StateSpace> {
    if level == 0 || level > p.num_levels {
        return Err(Error::params("level", format!("must be in 1..={}", p.num_levels)));
    }
    let full = enumerate_states(p, res)?;
    let states = full.iter().map(|s| project_for_level(s, level)).collect();
    Ok(StateSpace::new(Family::Wait(level as u8), states))
}

/// State of the 2-level decision model.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MdpState {
    pub a1: u32,
    pub a2: u32,
    pub aq: u32,
    pub b2: u32,
    pub bq: u32,
}

impl MdpState {
    pub fn total(&self) -> u32 {
        self.a1 + self.a2 + self.aq + self.b2 + self.bq
    }

    /// Idle level-2 agents.
    pub fn level2_free(&self, p: &ModelParams) -> i64 {
        p.k[1] as i64 - self.a2 as i64 - self.b2 as i64
    }

    pub fn to_state(self) -> State {
        State::new(&[self.a1 as u8, self.a2 as u8, self.aq as u8, self.b2 as u8, self.bq as u8])
    }

    pub fn from_state(s: &State) -> Self {
        MdpState {
            a1: s.get(0),
            a2: s.get(1),
            aq: s.get(2),
            b2: s.get(3),
            bq: s.get(4),
        }
    }

    pub fn is_member(&self, p: &ModelParams) -> bool {
        let (k1, k2) = (p.k[0], p.k[1]);
        self.a1 <= k1
            && self.a2 <= k2
            && self.b2 <= k2.saturating_sub(self.a2)
            && self.a2 + self.b2 <= k2
            && self.total() <= p.ell
            && (self.a1 == k1 || self.aq == 0)
            && (self.a2 + self.b2 == k2 || self.aq == 0 || self.bq == 0)
    }
}

impl fmt::Display for MdpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{},{})", self.a1, self.a2, self.aq, self.b2, self.bq)
    }
}

/// Enumerates the 2-level decision-model state space lexicographically.
pub fn enumerate_mdp_states(p: &ModelParams) -> Result<StateSpace> {
    p.validate()?;
    if p.num_levels != 2 {
        return Err(Error::params("num_levels", "the decision model needs exactly 2 levels"));
    }
    let (k1, k2, ell) = (p.k[0], p.k[1], p.ell);
    let mut out = Vec::new();
    for a1 in 0..=k1.min(ell) {
        for a2 in 0..=k2.min(ell - a1) {
            for aq in 0..=(ell - a1 - a2) {
                for b2 in 0..=(k2 - a2).min(ell - a1 - a2 - aq) {
                    for bq in 0..=(ell - a1 - a2 - aq - b2) {
                        let s = MdpState { a1, a2, aq, b2, bq };
                        if s.is_member(p) {
                            out.push(s.to_state());
                        }
                    }
                }
            }
        }
    }
    Ok(StateSpace::new(Family::Mdp2, out))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn cost_params() -> ModelParams {
        ModelParams {
            num_levels: 4,
            lambda: vec![1.0, 0.5, 0.2, 0.125],
            mu: vec![2.0 / 3.0, 0.5, 0.25, 1.0 / 6.0],
            mu_up: vec![2.0 / 3.0, 0.5, 0.25],
            theta: vec![2.0, 1.0, 1.0, 1.0],
            gamma: vec![1.0; 4],
            beta: 0.0,
            k: vec![3, 2, 2, 2],
            ell: 10,
        }
    }

    #[test]
    fn empty_state_has_no_occupancy_beyond_free_agents() {
        let p = cost_params();
        let occ = derive_occupancy(&State::zero(7), &p).unwrap();
        for (o, k) in occ.iter().zip(&p.k) {
            assert_eq!((o.own_served, o.up_served, o.waiting), (0, 0, 0));
            assert_eq!(o.free_agents, *k);
        }
    }

    #[test]
    fn occupancy_hand_example() {
        let p = cost_params();
        let occ = derive_occupancy(&"(4,1,2,0,0,0,0)".parse().unwrap(), &p).unwrap();
        assert_eq!((occ[0].own_served, occ[0].up_served, occ[0].waiting), (3, 1, 0));
        assert_eq!((occ[1].own_served, occ[1].waiting), (1, 1));
    }

    #[test]
    fn wrong_family_is_rejected() {
        let p = cost_params();
        let s: State = "(5,1,1,2,0)".parse().unwrap();
        assert!(derive_occupancy(&s, &p).is_err());
    }

    #[test]
    fn zero_capacity_has_one_state() {
        let mut p = cost_params();
        p.ell = 0;
        let space = enumerate_states(&p, &Reservation::zero(&p)).unwrap();
        assert_eq!(space.len(), 1);
        assert_eq!(space.state(0), State::zero(7));
    }

    #[test]
    fn reservation_grid_is_lexicographic() {
        let p = cost_params();
        let g = Reservation::grid(&p);
        assert_eq!(g.len(), 27);
        assert_eq!(g[0].theta_res, vec![0, 0, 0]);
        assert_eq!(g[1].theta_res, vec![0, 0, 1]);
        assert_eq!(g[26].theta_res, vec![2, 2, 2]);
    }

    #[test]
    fn level4_wait_states_small_case() {
        let mut p = cost_params();
        p.ell = 2;
        p.k[3] = 1;
        let ws = enumerate_wait_states(4, &p, &Reservation::zero(&p)).unwrap();
        let got: Vec<String> = ws.iter().map(|s| s.to_string()).collect();
        assert_eq!(got, ["(0,0)", "(0,1)", "(0,2)", "(1,0)", "(1,1)"]);
    }

    #[test]
    fn state_parse_roundtrip() {
        let s: State = "1, 0,2,0,1,0,0".parse().unwrap();
        assert_eq!(s.to_string(), "(1,0,2,0,1,0,0)");
        assert!("(1,x)".parse::<State>().is_err());
    }
}
