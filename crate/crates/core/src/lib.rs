//! Decentralized federated learning over a simulated vehicular network.
//!
//! Vehicles drive on a road graph, exchange models with peers in radio
//! range once per global epoch and aggregate them with one of three
//! strategies: diversity-driven weights ([`aggregation::Strategy::Dds`]),
//! sample-count weights (`Dfl`) or push-sum (`Sp`).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod data;
pub mod learner;
pub mod metrics;
pub mod mobility;
pub mod rng;
pub mod road_network;
pub mod sim;
pub mod state_diversity;
