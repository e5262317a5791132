#![allow(dead_code)]

use dfl_dds_core::aggregation::Strategy;
use dfl_dds_core::sim::{DataSpec, SimConfig, Topology};

/// Desk-scale experiment: 20 vehicles on a 5x5 grid, 10-class synthetic
/// data, logistic model.
pub fn desk(strategy: Strategy, seed: u64) -> SimConfig {
    let mut c = SimConfig::new(Topology::Grid { rows: 5, cols: 5, spacing: 100.0 }, strategy);
    c.k = 20;
    c.r = 100.0;
    c.data = DataSpec { classes: 10, dim: 20, per_class: 250, spread: 0.3, ..DataSpec::default() };
    c.eta = 0.1;
    c.e = 4;
    c.b = 32;
    c.epochs = 200;
    c.seed = seed;
    c
}

pub fn desk_random(strategy: Strategy, seed: u64) -> SimConfig {
    let mut c = desk(strategy, seed);
    c.topology = Topology::Random { nodes: 25, min_length: 100.0, max_length: 200.0 };
    c
}

/// Small and fast variant for plumbing tests.
pub fn small(strategy: Strategy, seed: u64) -> SimConfig {
    let mut c = desk(strategy, seed);
    c.k = 6;
    c.data.per_class = 60;
    c.epochs = 8;
    c
}
