//! Randomized invariants on small instances (ℓ ≤ 8), 200 cases per property.

mod support;

use proptest::prelude::*;
use support::*;

proptest! {
    #![proptest_config(config())]

    #[test]
    fn enumeration(inst in instance()) {
        enumeration_matches_realizable_set(&inst)?;
    }

    #[test]
    fn closure_and_conservation(inst in instance()) {
        rates_are_closed_and_conserve_callers(&inst)?;
    }

    #[test]
    fn jump_chain(inst in instance()) {
        jump_chain_rows_sum_to_one(&inst)?;
    }

    #[test]
    fn gamma_linearity(inst in instance(), scale in 0.1f64..5.0, t in 0.5f64..20.0) {
        cost_is_linear_in_gamma(&inst, scale, t)?;
    }

    #[test]
    fn time_in_state(inst in instance(), t in 0.1f64..60.0) {
        time_in_state_sums_to_horizon(&inst, t)?;
    }

    #[test]
    fn sub_cdf(inst in instance(), pick in 0usize..10_000, level_pick in 0usize..4) {
        wait_cdf_is_a_monotone_sub_cdf(&inst, pick, level_pick)?;
    }

    #[test]
    fn euler(a in 0.01f64..3.0, b in 0.01f64..3.0, t in 0.05f64..60.0) {
        euler_closed_form_battery(a, b, t)?;
    }
}
