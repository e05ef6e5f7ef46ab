//! Configuration, the multirate simulation loop, outputs and sweeps.

pub mod config;
pub mod controller;
pub mod output;
pub mod sim;
pub mod sweep;

pub use config::{load_config, parse_config, ConfigError, SimConfig};
pub use output::{write_outputs, OutputError, OutputPaths, Summary};
pub use sim::{initial_state, run_from, run_simulation, Event, EventKind, Sample, SimLog, Termination};
pub use sweep::{run_sweep, SweepPoint, SweepRange};
