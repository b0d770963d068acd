//! Shared fixtures for the benchmarks.

use pnr_core::povm::{binomial_loss_povm, detection_probabilities, probe_matrix, probes_from_means};
use pnr_core::povm::{ProbeMatrix, StatisticsMatrix};

/// Exact statistics of a binomial-loss detector on the 19-probe ladder.
pub fn round_trip_problem(truncation: usize, outcomes: usize) -> (StatisticsMatrix, ProbeMatrix) {
    let means: Vec<f64> = (0..19).map(|i| 0.3 + 5.7 * i as f64 / 18.0).collect();
    let probes = probe_matrix(&probes_from_means(&means).unwrap(), truncation).unwrap();
    let povm = binomial_loss_povm(0.547, outcomes, truncation).unwrap();
    (detection_probabilities(&povm, &probes).unwrap(), probes)
}
