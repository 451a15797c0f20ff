use optomech::cycle::Direction;
use optomech::kickmap::{
    backward_kick, cycle_candidate, find_fixed_cycles, forward_kick, full_passage, kick_coefficients, kick_work,
    BackwardOutcome,
};
use optomech::model::{coupling_strength, HBAR, SPEED_OF_LIGHT};
use optomech::SystemParams;
use proptest::prelude::*;
use std::f64::consts::PI;

fn params(power: f64) -> SystemParams {
    SystemParams::reference().with_power(power)
}

#[test]
fn coefficients_from_first_principles() {
    let p = params(11.0);
    let omega_l = 2.0 * PI * SPEED_OF_LIGHT / p.lambda_l;
    let al2 = 2.0 * p.kappa * p.power / (HBAR * omega_l);
    let g = 4.0 * PI * SPEED_OF_LIGHT / (p.n_order as f64 * p.lambda_l * p.lambda_l);
    assert!((coupling_strength(&p, 0).unwrap() - g).abs() < 1e-12 * g);
    let c = kick_coefficients(0, &p).unwrap();
    assert!((c.lead - HBAR * al2 * PI / p.kappa).abs() < 1e-12 * c.lead);
    let second = 3.0 * HBAR * HBAR * al2 * al2 * g * PI / (8.0 * p.mass * p.kappa.powi(4));
    assert!((c.second - second).abs() < 1e-12 * second);
}

#[test]
fn fast_passages_match_the_integrated_mode() {
    for pw in [3.0, 11.0] {
        let p = params(pw);
        for v in [8.0, -8.0, 30.0, -30.0] {
            let dir = if v > 0.0 { Direction::Forward } else { Direction::Backward };
            let sim = full_passage(1, v, &p).unwrap();
            assert!(sim.crossed);
            let w = kick_work(1, v, dir, &p).unwrap();
            assert!((sim.work - w).abs() < 0.03 * w.abs(), "{pw} W v={v}: {} vs {w}", sim.work);
        }
    }
}

#[test]
fn slow_backward_passage_turns_back_in_both_models() {
    let p = params(11.0);
    let sim = full_passage(0, -0.5, &p).unwrap();
    assert!(!sim.crossed);
    assert!(sim.v_out > 0.0);
    assert!(matches!(backward_kick(0, -0.5, &p).unwrap(), BackwardOutcome::Blocked { .. }));
}

#[test]
fn fixed_cycles_are_closed_orbits() {
    let p = params(7.0);
    let grid: Vec<f64> = (0..200).map(|i| 0.1e-6 + 3e-6 * i as f64 / 199.0).collect();
    let scan = find_fixed_cycles(&p, &grid).unwrap();
    assert!(scan.cycles.iter().any(|c| c.stable));
    for c in &scan.cycles {
        let again = cycle_candidate(c.a_max, &p).unwrap();
        assert!(again.residual.abs() < p.lambda_l * 1e-4);
        assert!(c.a_min >= 0.0 && c.a_max > 0.0);
        assert!((c.a_bar - ((c.a_min.powi(2) + c.a_max.powi(2)) / 2.0).sqrt()).abs() < 1e-18);
    }
}

proptest! {
    #[test]
    fn leading_terms_cancel(power in 0.1f64..20.0, v in 0.05f64..100.0, k in -20i64..20) {
        let p = params(power);
        let c = kick_coefficients(k, &p).unwrap();
        let sum = kick_work(k, v, Direction::Forward, &p).unwrap()
            + kick_work(k, -v, Direction::Backward, &p).unwrap();
        prop_assert!((sum - 2.0 * c.second / v).abs() <= 4.0 * f64::EPSILON * c.lead);
    }

    #[test]
    fn forward_kick_conserves_energy(power in 0.1f64..20.0, v in 0.05f64..100.0) {
        let p = params(power);
        let kick = forward_kick(0, v, &p).unwrap();
        let de = 0.5 * p.mass * (kick.v_out.powi(2) - v * v);
        prop_assert!((de - kick.work).abs() <= 1e-9 * kick.work);
        prop_assert!(kick.v_out > v);
    }
}
