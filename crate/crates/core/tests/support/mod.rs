//! Shared random instances and property checks.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use callcenter::invert::{euler_invert, EulerConfig};
use callcenter::model::{enumerate_states, enumerate_wait_states, ModelParams, Reservation, State};
use callcenter::rates::{transitions_from, Event, RateMatrix};
use callcenter::transient::TransientModel;
use callcenter::waiting::{wait_cdf, ChainMode};
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type CheckResult = Result<(), TestCaseError>;

pub fn fixture(name: &str) -> ModelParams {
    ModelParams::from_json_file(format!("{}/fixtures/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub p: ModelParams,
    pub res: Reservation,
}

fn rate() -> impl Strategy<Value = f64> {
    0.1f64..2.0
}

prop_compose! {
    pub fn instance()(nu in 2usize..=4)(
        nu in Just(nu),
        lambda in prop::collection::vec(rate(), nu),
        mu in prop::collection::vec(rate(), nu),
        mu_up in prop::collection::vec(rate(), nu - 1),
        theta in prop::collection::vec(rate(), nu),
        gamma in prop::collection::vec(0.0f64..3.0, nu),
        beta in 0.0f64..2.0,
        k in prop::collection::vec(1u32..=3, nu),
        ell in 0u32..=8,
        picks in prop::collection::vec(0u32..=3, nu - 1),
    ) -> Instance {
        let res = Reservation::new(picks.iter().enumerate().map(|(i, t)| t % (k[i + 1] + 1)).collect());
        let p = ModelParams { num_levels: nu, lambda, mu, mu_up, theta, gamma, beta, k, ell };
        Instance { p, res }
    }
}

pub const CASES: u32 = 200;

pub fn config() -> ProptestConfig {
    ProptestConfig {
        cases: CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

pub fn reachable(p: &ModelParams, res: &Reservation) -> BTreeSet<State> {
    let start = State::zero(p.state_len());
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        for (t, _, _) in transitions_from(&s, p, res).unwrap() {
            if seen.insert(t) {
                queue.push_back(t);
            }
        }
    }
    seen
}

/// Configurations with at most ℓ callers that a larger system can reach from
/// empty. Membership rules other than the head-count do not depend on ℓ, but
/// some snapshots need more than ℓ callers on the way in.
pub fn realizable(p: &ModelParams, res: &Reservation) -> BTreeSet<State> {
    let roomy = ModelParams {
        ell: p.ell + p.k.iter().sum::<u32>(),
        ..p.clone()
    };
    reachable(&roomy, res).into_iter().filter(|s| s.total_callers() <= p.ell).collect()
}

pub fn enumeration_matches_realizable_set(inst: &Instance) -> CheckResult {
    let listed: BTreeSet<State> = enumerate_states(&inst.p, &inst.res).unwrap().iter().copied().collect();
    let from_empty = reachable(&inst.p, &inst.res);
    prop_assert!(from_empty.is_subset(&listed));
    prop_assert_eq!(listed, realizable(&inst.p, &inst.res));
    Ok(())
}

pub fn rates_are_closed_and_conserve_callers(inst: &Instance) -> CheckResult {
    let Instance { p, res } = inst;
    let rm = RateMatrix::reservation(p, res).unwrap();
    prop_assert_eq!(rm.dropped(), 0);
    for (i, s) in rm.space().iter().enumerate() {
        let mut arrivals = 0.0;
        let mut out = 0.0;
        for t in rm.row(i) {
            let target = rm.space().state(t.to);
            let delta = target.total_callers() as i64 - s.total_callers() as i64;
            match t.event {
                Event::Arrival(_) => {
                    prop_assert_eq!(delta, 1);
                    arrivals += t.rate;
                }
                _ => prop_assert_eq!(delta, -1),
            }
            out += t.rate;
        }
        prop_assert!((out - rm.kappa(i)).abs() <= 1e-12 * out.max(1.0));
        let want = if s.total_callers() < p.ell { p.total_arrival_rate() } else { 0.0 };
        prop_assert!((arrivals - want).abs() <= 1e-12 * want.max(1.0));
    }
    Ok(())
}

pub fn jump_chain_rows_sum_to_one(inst: &Instance) -> CheckResult {
    let rm = RateMatrix::reservation(&inst.p, &inst.res).unwrap();
    for i in 0..rm.len() {
        let k = rm.kappa(i);
        if k > 0.0 {
            let total: f64 = rm.row(i).map(|t| t.rate / k).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "row {} sums to {}", i, total);
        }
    }
    Ok(())
}

pub fn cost_is_linear_in_gamma(inst: &Instance, scale: f64, t: f64) -> CheckResult {
    let Instance { p, res } = inst;
    let nu0 = State::zero(p.state_len());
    let cost = |g: Vec<f64>, b: f64| {
        let q = ModelParams {
            gamma: g,
            beta: b,
            ..p.clone()
        };
        TransientModel::new(&q, res).unwrap().expected_cost(&nu0, t).unwrap()
    };
    let base = cost(p.gamma.clone(), p.beta);
    let scaled = cost(p.gamma.iter().map(|g| g * scale).collect(), p.beta * scale);
    prop_assert!((scaled - scale * base).abs() <= 1e-7 * (1.0 + scaled.abs()));
    let parts: f64 = (0..p.num_levels)
        .map(|j| {
            let mut g = vec![0.0; p.num_levels];
            g[j] = p.gamma[j];
            cost(g, 0.0)
        })
        .sum::<f64>()
        + cost(vec![0.0; p.num_levels], p.beta);
    prop_assert!((parts - base).abs() <= 1e-7 * (1.0 + base.abs()));
    Ok(())
}

pub fn time_in_state_sums_to_horizon(inst: &Instance, t: f64) -> CheckResult {
    let m = TransientModel::new(&inst.p, &inst.res).unwrap();
    let v = m.expected_time_in_state(&State::zero(inst.p.state_len()), t).unwrap();
    let total: f64 = v.iter().sum();
    prop_assert!((total - t).abs() <= 1e-6 * t, "{} vs {}", total, t);
    Ok(())
}

pub fn wait_cdf_is_a_monotone_sub_cdf(inst: &Instance, pick: usize, level_pick: usize) -> CheckResult {
    let Instance { p, res } = inst;
    let level = 1 + level_pick % p.num_levels;
    let space = enumerate_wait_states(level, p, res).unwrap();
    let x = space.state(pick % space.len());
    let ys = [0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 20.0];
    let mut modes = vec![ChainMode::Exact];
    if p.num_levels == 4 {
        modes.push(ChainMode::Reduced);
    }
    for mode in modes {
        let f = wait_cdf(level, p, res, &x, &ys, mode).unwrap();
        for w in f.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-7, "{:?} not monotone: {:?}", mode, f);
        }
        prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    Ok(())
}

pub fn euler_closed_form_battery(a: f64, b: f64, t: f64) -> CheckResult {
    let cfg = EulerConfig::default();
    let one = Complex64::new(1.0, 0.0);
    let exp = euler_invert(|s| one / (s + a), t, &cfg).unwrap();
    prop_assert!((exp - (-a * t).exp()).abs() <= 1e-6);
    let ramp = euler_invert(|s| one / (s * s), t, &cfg).unwrap();
    prop_assert!((ramp - t).abs() <= 1e-6 * t.max(1.0));
    let mix = euler_invert(|s| one / ((s + a) * (s + a + b)), t, &cfg).unwrap();
    let want = ((-a * t).exp() - (-(a + b) * t).exp()) / b;
    prop_assert!((mix - want).abs() <= 1e-6);
    Ok(())
}
