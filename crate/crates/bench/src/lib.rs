//! Shared fixtures for the criterion benchmarks.

use otmetric::measurements::MeasurementSet;
use otmetric::scenario::{simulate, ScenarioConfig, Truth};

/// Default scenario on an `n x n` grid.
pub fn scenario(n: usize) -> ScenarioConfig {
    ScenarioConfig::parse(&format!("scenario.name = bench\ngrid.n = {n}\n"))
        .expect("bench scenario")
}

/// Truth and noiseless measurements for [`scenario`].
pub fn measured(n: usize) -> (ScenarioConfig, Truth, MeasurementSet) {
    let cfg = scenario(n);
    let truth = Truth::synthesize(&cfg).expect("truth");
    let (ms, _) = simulate(&cfg, &truth).expect("probe solves");
    (cfg, truth, ms)
}
