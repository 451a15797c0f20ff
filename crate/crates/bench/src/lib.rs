//! Shared fixtures for the criterion benchmarks.

use optomech::integrator::initial_state;
use optomech::{FullState, SystemParams};

pub fn reference(power: f64) -> SystemParams {
    SystemParams::reference().with_power(power)
}

/// Mirror at the origin moving at the speed of a 1 µm orbit, modes slaved.
pub fn moving_state(params: &SystemParams) -> FullState {
    initial_state(params, 0.0, params.mass * params.omega_m * 1e-6).expect("valid reference state")
}
