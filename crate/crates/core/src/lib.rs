//! Synthesis, simulation, and verification toolkit for disturbance-observer-based
//! robust output feedback control of MIMO nonlinear plants.
//!
//! The toolkit works on plants written in normal form: per-output integrator
//! chains driven by `F(z, x) + G(z, x, t) u`, plus internal dynamics
//! `zdot = F0(z, x)`, where the input gain matrix `G` is uncertain and only a
//! nominal gain `Gbar` is known. The controller combines a high-gain observer
//! (the `q` filter), a disturbance-estimation filter (the `p` filter), and
//! smooth saturations that keep observer peaking away from the plant.
//!
//! Module map:
//! - [`plant`]: normal-form plant/nominal-model types and the satellite example.
//! - [`synthesis`]: gain design via disk-avoidance Nyquist tests, SPR checks,
//!   filter-matrix assembly, and saturation-level estimation.
//! - [`controller`]: runtime controller output and state derivatives.
//! - [`simulator`]: fixed-step RK4 closed-loop/nominal integration, trajectory
//!   recording, CSV export, and timescale sweeps.
//! - [`analysis`]: fast-coordinate reconstruction, quasi-steady states, sector
//!   and gain-bound checks, and trajectory metrics.

pub mod analysis;
pub mod controller;
pub mod error;
pub mod plant;
pub mod poly;
pub mod simulator;
pub mod synthesis;

pub use error::{Error, Result};
