//! Benchmark fixtures shared by the criterion targets.

use pdmp_core::{example, PdmpConfig};

/// The rotation/contraction example with slow switching.
pub fn example_config(horizon: f64, step: f64) -> PdmpConfig {
    example::config(1.5, 2.0, 1.0, horizon, step, 7).expect("example config is valid")
}
