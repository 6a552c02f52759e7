//! Independent oracles: reachability, closed-form races, known transforms,
//! and the decision-model generator under a threshold policy.

use std::collections::{BTreeSet, VecDeque};

use callcenter::invert::{euler_invert, EulerConfig};
use callcenter::model::{enumerate_states, ModelParams, Reservation, State};
use callcenter::rates::{transitions_from, Action, Decision, RateMatrix};
use callcenter::transient::{expected_cost, TransientModel};
use callcenter::waiting::{wait_cdf, ChainMode};
use num_complex::Complex64;

fn fixture(name: &str) -> ModelParams {
    ModelParams::from_json_file(format!("{}/fixtures/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn reachable_from_empty(p: &ModelParams, res: &Reservation) -> BTreeSet<State> {
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

#[test]
fn enumeration_equals_reachable_set() {
    for name in ["two_level", "cost_example1", "wait_example", "distribution_example"] {
        let p = fixture(name);
        for theta in Reservation::grid(&p).into_iter().step_by(4) {
            let listed: BTreeSet<State> = enumerate_states(&p, &theta).unwrap().iter().copied().collect();
            // Capacities here leave room for every snapshot to be reached.
            assert_eq!(listed, reachable_from_empty(&p, &theta), "{name} {theta}");
        }
    }
    let p = fixture("cost_example1");
    assert_eq!(enumerate_states(&p, &Reservation::zero(&p)).unwrap().len(), 5841);
}

/// A level-4 caller at the head of the queue with every top agent busy waits
/// for the first of `r` competing completions or leaves at rate θ4.
#[test]
fn level4_head_of_queue_is_a_race() {
    let p = fixture("cost_example1");
    let res = Reservation::zero(&p);
    let k4 = p.k[3];
    let ys = [0.1, 0.5, 1.0, 3.0, 10.0];
    let cases = [
        (State::new(&[0, k4 as u8]), k4 as f64 * p.mu[3]),
        (State::new(&[1, k4 as u8 - 1]), p.mu_up[2] + (k4 - 1) as f64 * p.mu[3]),
    ];
    for (x, r) in cases {
        let total = r + p.theta[3];
        for mode in [ChainMode::Reduced, ChainMode::ReducedStrict, ChainMode::Exact] {
            let got = wait_cdf(4, &p, &res, &x, &ys, mode).unwrap();
            for (y, g) in ys.iter().zip(got) {
                let want = r / total * (1.0 - (-total * y).exp());
                assert!((g - want).abs() < 1e-8, "{x} {mode:?} y={y}: {g} vs {want}");
            }
        }
    }
}

#[test]
fn euler_inverts_known_transforms() {
    let cfg = EulerConfig::default();
    let one = Complex64::new(1.0, 0.0);
    let cases: Vec<(Box<dyn Fn(Complex64) -> Complex64>, Box<dyn Fn(f64) -> f64>)> = vec![
        (Box::new(move |s| one / s), Box::new(|_| 1.0)),
        (Box::new(move |s| one / (s * s)), Box::new(|t| t)),
        (Box::new(move |s| one / (s + 0.7)), Box::new(|t| (-0.7 * t).exp())),
        (Box::new(move |s| one / (s * (s + 2.0))), Box::new(|t| (1.0 - (-2.0 * t).exp()) / 2.0)),
        (Box::new(move |s| one / ((s + 1.0) * (s + 1.0))), Box::new(|t| t * (-t).exp())),
        (Box::new(move |s| 2.0 / (s * s * s)), Box::new(|t| t * t)),
    ];
    for (i, (f, g)) in cases.iter().enumerate() {
        for t in [0.05, 0.5, 1.0, 4.0, 20.0, 60.0] {
            let v = euler_invert(f, t, &cfg).unwrap();
            let want = g(t);
            assert!((v - want).abs() <= 1e-6 * want.abs().max(1.0), "case {i} t={t}: {v} vs {want}");
        }
    }
}

/// The reservation chain and the decision model driven by the same threshold
/// rule are two encodings of one process.
#[test]
fn threshold_policy_matches_reservation_costs() {
    let p = fixture("two_level");
    for r in 0..=p.k[1] as i64 {
        let rm = RateMatrix::mdp(&p, |s, d| {
            let free = s.level2_free(&p);
            Some(match d {
                Decision::Level1Arrival if free > r => Action::Assign,
                Decision::Level1Arrival => Action::Queue,
                Decision::Level2Arrival => Action::Assign,
                Decision::Level2Freed if s.bq > 0 => Action::TakeLevel2,
                Decision::Level2Freed if s.aq > 0 && free + 1 > r => Action::TakeLevel1,
                Decision::Level2Freed => Action::Reserve,
            })
        })
        .unwrap();
        assert_eq!(rm.dropped(), 0);
        let via_mdp = TransientModel::from_rates(rm).unwrap().expected_cost(&State::zero(5), 15.0).unwrap();
        let direct = expected_cost(&p, &Reservation::new(vec![r as u32]), &State::zero(3), 15.0).unwrap();
        assert!((via_mdp - direct).abs() < 1e-7 * direct, "Θ2={r}: {via_mdp} vs {direct}");
    }
}
