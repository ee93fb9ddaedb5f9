//! Shared fixtures for the criterion benches.

use fusecal_core::analytic::{generate, AnalyticConfig};
use fusecal_core::{MultiSourceDataset, Network, NetworkConfig};

/// Standardized analytic training set for `sources` with an initialized network.
pub fn analytic_fixture(sources: &[usize], seed: u64) -> (Network, MultiSourceDataset) {
    let cfg = AnalyticConfig {
        sources: sources.to_vec(),
        ..Default::default()
    };
    let ds = generate(&cfg, cfg.n_train, seed)
        .and_then(|d| d.standardize())
        .expect("default analytic config generates");
    let net = Network::init(&NetworkConfig::default(), &ds, seed).expect("valid default network");
    (net, ds)
}
