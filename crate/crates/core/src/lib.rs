//! Swing-dynamics simulation and identification of IoT load-altering attacks
//! from PMU measurements.

pub mod attack;
pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod estimate;
pub mod grid;
pub mod ode;
pub mod optim;
pub mod pinn;
pub mod pmu;
pub mod sr;
pub mod ukf;

pub use error::{Error, Result};
