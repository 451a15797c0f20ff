//! Classical simulation of a driven Fabry–Pérot cavity whose end mirror
//! oscillates over many optical wavelengths.
//!
//! The mirror sweeps through the resonances of successive longitudinal
//! modes, picking up a radiation-pressure kick at each one. The crate
//! integrates the coupled mode/mirror equations ([`integrator`]), extracts
//! limit cycles and attractor branches ([`cycle`]), and provides a reduced
//! kick-map model that predicts self-sustained amplitudes from an energy
//! balance ([`kickmap`]). Parameter scans over drive power and spring
//! nonlinearity live in [`sweep`]; file formats in [`io`].

pub mod cycle;
pub mod dynamics;
pub mod error;
pub mod integrator;
pub mod io;
pub mod kickmap;
pub mod model;
pub mod sweep;

pub use cycle::{BranchSet, LimitCycle};
pub use dynamics::{FullState, MirrorState, ModeSet};
pub use error::{Error, Result};
pub use integrator::{EnergyLedger, IntegratorConfig, Sample, Trajectory, TurningPoint};
pub use kickmap::CycleCandidate;
pub use model::SystemParams;
