//! Aggregation strategies.
//!
//! DDS picks per-vehicle aggregation weights that minimize the KL divergence
//! between the mixed state vector and the target vector; DFL weights peers by
//! sample count; SP is push-sum with a gradient step on the de-biased
//! estimate. [`epoch_exchange`] runs one synchronized round for a fleet.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TargetVector};
use crate::learner::{self, LearnError, ModelParams};
use crate::mobility::NeighborSets;
use crate::rng;
use crate::state_diversity::{self, StateError, StateVector};

/// Lower bound on mixed-state entries inside the solver's logarithms.
pub const LOG_CLAMP: f64 = 1e-12;
pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;
pub const DEFAULT_SOLVER_MAX_ITER: usize = 5_000;
pub const MAX_BRUTE_FORCE_PARTICIPANTS: usize = 4;

const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AggregationError {
    #[error("no participants")]
    NoParticipants,
    #[error("{weights} weights for {items} participants")]
    CountMismatch { weights: usize, items: usize },
    #[error("target vector entry {0} is not strictly positive")]
    TargetNotPositive(usize),
    #[error("brute force supports at most {MAX_BRUTE_FORCE_PARTICIPANTS} participants, got {0}")]
    TooManyParticipants(usize),
    #[error("grid step must lie in (0, 1], got {0}")]
    InvalidGridStep(f64),
    #[error("solver stopped after {} iterations with stationarity gap {}", .best.iterations, .best.gap)]
    NotConverged { best: Solution },
    #[error("models have different architectures")]
    ArchitectureMismatch,
    #[error("push-sum weight y = {0} is not positive")]
    NonPositiveMass(f64),
    #[error("neighbor sets are not symmetric")]
    AsymmetricNeighbors,
    #[error("neighbor sets cover {neighbors} vehicles, fleet has {fleet}")]
    FleetSizeMismatch { neighbors: usize, fleet: usize },
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("vehicle {id}: {source}")]
    Vehicle { id: usize, source: Box<AggregationError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dds,
    Dfl,
    Sp,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dds => "dds",
            Strategy::Dfl => "dfl",
            Strategy::Sp => "sp",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dds" => Ok(Strategy::Dds),
            "dfl" => Ok(Strategy::Dfl),
            "sp" => Ok(Strategy::Sp),
            other => Err(format!("unknown strategy {other:?} (expected dds, dfl or sp)")),
        }
    }
}

/// Where the state-vector mixing happens relative to the local increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateOrder {
    /// Mix with the aggregation weights, then increment E times, then normalize.
    #[default]
    MixFirst,
    /// Every participant's state is incremented E times and normalized
    /// before the exchange; the mixed result is final.
    IncrementFirst,
}

/// Aggregation weights over the participants `P_k`, aligned with `members`
/// (ascending vehicle id). Vehicles outside `P_k` implicitly weigh zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn is_feasible(&self) -> bool {
        self.members.len() == self.weights.len() && state_diversity::check_simplex(&self.weights).is_ok()
    }

    pub fn weight_of(&self, vehicle: usize) -> f64 {
        self.members.iter().position(|&m| m == vehicle).map_or(0.0, |i| self.weights[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub alpha: Vec<f64>,
    pub objective: f64,
    /// Frank-Wolfe gap `<∇, α> - min ∇`; an upper bound on suboptimality.
    pub gap: f64,
    pub iterations: usize,
}

fn mixed(states: &[&StateVector], alpha: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; states[0].len()];
    for (s, &a) in states.iter().zip(alpha) {
        for (v, x) in m.iter_mut().zip(s.values()) {
            *v += a * x;
        }
    }
    m
}

fn check_inputs(states: &[&StateVector], g: &TargetVector) -> Result<(), AggregationError> {
    if states.is_empty() {
        return Err(AggregationError::NoParticipants);
    }
    if let Some(s) = states.iter().find(|s| s.len() != g.len()) {
        return Err(StateError::LengthMismatch { expected: g.len(), found: s.len() }.into());
    }
    if let Some(j) = g.as_slice().iter().position(|&x| !(x > 0.0)) {
        return Err(AggregationError::TargetNotPositive(j));
    }
    Ok(())
}

fn objective(states: &[&StateVector], g: &TargetVector, alpha: &[f64]) -> f64 {
    state_diversity::kl_of(&mixed(states, alpha), g.as_slice()).expect("target checked positive")
}

fn gradient(states: &[&StateVector], g: &TargetVector, m: &[f64]) -> Vec<f64> {
    let inv_ln2 = std::f64::consts::LOG2_E;
    let log_terms: Vec<f64> = m
        .iter()
        .zip(g.as_slice())
        .map(|(&mk, &gk)| (mk.max(LOG_CLAMP) / gk).log2() + inv_ln2)
        .collect();
    states
        .iter()
        .map(|s| s.values().iter().zip(&log_terms).map(|(x, l)| x * l).sum())
        .collect()
}

/// KL divergence of the mixed state `Σ α_j s_j` from `g`, and its gradient
/// with respect to `α`.
pub fn kl_objective_and_gradient(
    states: &[&StateVector],
    g: &TargetVector,
    alpha: &[f64],
) -> Result<(f64, Vec<f64>), AggregationError> {
    check_inputs(states, g)?;
    if alpha.len() != states.len() {
        return Err(AggregationError::CountMismatch { weights: alpha.len(), items: states.len() });
    }
    let m = mixed(states, alpha);
    let value = state_diversity::kl_of(&m, g.as_slice())?;
    Ok((value, gradient(states, g, &m)))
}

fn fw_gap(alpha: &[f64], grad: &[f64]) -> f64 {
    let dot: f64 = alpha.iter().zip(grad).map(|(a, d)| a * d).sum();
    let min = grad.iter().copied().fold(f64::INFINITY, f64::min);
    (dot - min).max(0.0)
}

/// Exponentiated-gradient descent on the simplex with backtracking.
///
/// Starts from uniform weights with step `η = 1`. Each iteration tries
/// `α·exp(-η∇)` (renormalized) starting from twice the last accepted step
/// and halving until the objective strictly decreases. Stops when the decrease falls below `tol`, when no step
/// decreases it, or after `max_iter` iterations. Returns the per-iteration
/// objective trace (non-increasing by construction) alongside the solution.
pub fn solve_weights_traced(
    states: &[&StateVector],
    g: &TargetVector,
    tol: f64,
    max_iter: usize,
) -> Result<(Solution, Vec<f64>, bool), AggregationError> {
    check_inputs(states, g)?;
    let n = states.len();
    let mut alpha = vec![1.0 / n as f64; n];
    let mut value = objective(states, g, &alpha);
    let mut trace = vec![value];
    let mut stalled = n == 1;
    let mut iterations = 0;
    let mut last_step: f64 = 0.5;
    while !stalled && iterations < max_iter {
        iterations += 1;
        let grad = gradient(states, g, &mixed(states, &alpha));
        let gmin = grad.iter().copied().fold(f64::INFINITY, f64::min);
        let mut step = (2.0 * last_step).min(MAX_STEP);
        let mut accepted = None;
        while step >= MIN_STEP {
            let mut cand: Vec<f64> = alpha.iter().zip(&grad).map(|(a, d)| a * (-step * (d - gmin)).exp()).collect();
            let sum: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|a| *a /= sum);
            let v = objective(states, g, &cand);
            if v < value {
                last_step = step;
                accepted = Some((cand, v));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, v)) => {
                let improvement = value - v;
                alpha = cand;
                value = v;
                trace.push(value);
                if improvement < tol {
                    stalled = true;
                }
            }
            None => stalled = true,
        }
    }
    let gap = fw_gap(&alpha, &gradient(states, g, &mixed(states, &alpha)));
    let converged = stalled || gap <= tol;
    Ok((Solution { alpha, objective: value, gap, iterations }, trace, converged))
}

/// Weights minimizing `KL(Σ α_j s_j ‖ g)` over the simplex.
///
/// Fails with [`AggregationError::NotConverged`] (carrying the best iterate)
/// when `max_iter` is exhausted while the stationarity gap exceeds `tol`.
pub fn solve_weights(
    states: &[&StateVector],
    g: &TargetVector,
    tol: f64,
    max_iter: usize,
) -> Result<Solution, AggregationError> {
    let (sol, _, converged) = solve_weights_traced(states, g, tol, max_iter)?;
    if converged {
        Ok(sol)
    } else {
        Err(AggregationError::NotConverged { best: sol })
    }
}

/// Exhaustive search over the simplex grid with resolution `grid_step`;
/// ties go to the lexicographically smallest weight vector.
pub fn brute_force_weights(
    states: &[&StateVector],
    g: &TargetVector,
    grid_step: f64,
) -> Result<Solution, AggregationError> {
    check_inputs(states, g)?;
    let n = states.len();
    if n > MAX_BRUTE_FORCE_PARTICIPANTS {
        return Err(AggregationError::TooManyParticipants(n));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(AggregationError::InvalidGridStep(grid_step));
    }
    let ticks = (1.0 / grid_step).round() as usize;
    let mut counts = vec![0usize; n];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut visit = |counts: &[usize]| {
        let alpha: Vec<f64> = counts.iter().map(|&c| c as f64 / ticks as f64).collect();
        let v = objective(states, g, &alpha);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, alpha));
        }
    };
    // lexicographic enumeration of compositions of `ticks` into n parts
    fn rec(pos: usize, left: usize, counts: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if pos == counts.len() - 1 {
            counts[pos] = left;
            visit(counts);
            return;
        }
        for c in 0..=left {
            counts[pos] = c;
            rec(pos + 1, left - c, counts, visit);
        }
    }
    rec(0, ticks, &mut counts, &mut visit);
    let (objective, alpha) = best.expect("grid is non-empty");
    let gap = fw_gap(&alpha, &gradient(states, g, &mixed(states, &alpha)));
    Ok(Solution { alpha, objective, gap, iterations: 0 })
}

/// Elementwise `Σ α_j w_j`, summed in the given order.
pub fn aggregate_models(models: &[&ModelParams], alpha: &[f64]) -> Result<ModelParams, AggregationError> {
    if models.is_empty() {
        return Err(AggregationError::NoParticipants);
    }
    if models.len() != alpha.len() {
        return Err(AggregationError::CountMismatch { weights: alpha.len(), items: models.len() });
    }
    state_diversity::check_simplex(alpha)?;
    if models.iter().any(|m| !m.compatible(models[0])) {
        return Err(AggregationError::ArchitectureMismatch);
    }
    let mut w = vec![0.0; models[0].w.len()];
    for (m, &a) in models.iter().zip(alpha) {
        for (acc, x) in w.iter_mut().zip(&m.w) {
            *acc += a * x;
        }
    }
    Ok(models[0].with_weights(w))
}

/// Weights proportional to sample counts.
pub fn dfl_weights(sizes: &[usize]) -> Result<Vec<f64>, AggregationError> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 {
        return Err(AggregationError::NoParticipants);
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub state_order: StateOrder,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            local_epochs: 8,
            batch: 80,
            solver_tol: DEFAULT_SOLVER_TOL,
            solver_max_iter: DEFAULT_SOLVER_MAX_ITER,
            state_order: StateOrder::MixFirst,
        }
    }
}

/// Everything one vehicle carries between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRuntime {
    pub id: usize,
    pub model: ModelParams,
    pub state: StateVector,
    pub data: Arc<[usize]>,
    /// Push-sum numerator `x_k`.
    pub sp_x: Vec<f64>,
    /// Push-sum weight `y_k`.
    pub sp_y: f64,
}

impl VehicleRuntime {
    pub fn new(id: usize, model: ModelParams, fleet_size: usize, data: Arc<[usize]>) -> Self {
        let sp_x = model.w.clone();
        Self { id, model, state: StateVector::zeros(fleet_size), data, sp_x, sp_y: 1.0 }
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub runtime: VehicleRuntime,
    pub weights: WeightVector,
    pub solver_warning: bool,
}

fn boosted(s: &StateVector, k: usize, rate: f64, rounds: usize) -> Result<StateVector, StateError> {
    let mut s = s.clone();
    for _ in 0..rounds {
        s = state_diversity::local_increment(&s, k, rate)?;
    }
    state_diversity::normalize(&s)
}

fn participants<'a>(v: &'a VehicleRuntime, received: &[&'a VehicleRuntime]) -> Vec<&'a VehicleRuntime> {
    let mut p: Vec<&VehicleRuntime> = received.iter().copied().chain(std::iter::once(v)).collect();
    p.sort_by_key(|r| r.id);
    p
}

fn mixing_states(p: &[&VehicleRuntime], hp: &Hyperparams, rounds: usize) -> Result<Vec<StateVector>, StateError> {
    match hp.state_order {
        StateOrder::MixFirst => Ok(p.iter().map(|r| r.state.clone()).collect()),
        StateOrder::IncrementFirst => p.iter().map(|r| boosted(&r.state, r.id, hp.lr, rounds)).collect(),
    }
}

fn finish_state(mixed: StateVector, k: usize, hp: &Hyperparams, rounds: usize) -> Result<StateVector, StateError> {
    match hp.state_order {
        StateOrder::MixFirst => boosted(&mixed, k, hp.lr, rounds),
        StateOrder::IncrementFirst => Ok(mixed),
    }
}

fn weighted_round(
    v: &VehicleRuntime,
    p: &[&VehicleRuntime],
    states: &[StateVector],
    alpha: &[f64],
    ds: &Dataset,
    hp: &Hyperparams,
    rng: &mut rng::SimRng,
) -> Result<VehicleRuntime, AggregationError> {
    let models: Vec<&ModelParams> = p.iter().map(|r| &r.model).collect();
    let aggregated = aggregate_models(&models, alpha)?;
    let model = learner::local_epochs(&aggregated, ds, &v.data, hp.local_epochs, hp.batch, hp.lr, rng)?;
    let refs: Vec<&StateVector> = states.iter().collect();
    let state = finish_state(state_diversity::mix(&refs, alpha)?, v.id, hp, hp.local_epochs)?;
    Ok(VehicleRuntime { model, state, ..v.clone() })
}

/// One DDS round for vehicle `v` given the runtimes received from `M_k`:
/// solve for weights over `P_k`, aggregate models, train E local epochs,
/// then update the state vector with the same weights.
///
/// A solver that runs out of iterations does not stall the vehicle: the best
/// iterate is used and `solver_warning` is set.
pub fn dds_vehicle_step(
    v: &VehicleRuntime,
    received: &[&VehicleRuntime],
    g: &TargetVector,
    ds: &Dataset,
    hp: &Hyperparams,
    rng: &mut rng::SimRng,
) -> Result<StepOutcome, AggregationError> {
    let p = participants(v, received);
    let states = mixing_states(&p, hp, hp.local_epochs)?;
    let refs: Vec<&StateVector> = states.iter().collect();
    let (alpha, solver_warning) = match solve_weights(&refs, g, hp.solver_tol, hp.solver_max_iter) {
        Ok(sol) => (sol.alpha, false),
        Err(AggregationError::NotConverged { best }) => {
            log::warn!("vehicle {}: weight solver did not converge (gap {:e}), using best iterate", v.id, best.gap);
            (best.alpha, true)
        }
        Err(e) => return Err(e),
    };
    let runtime = weighted_round(v, &p, &states, &alpha, ds, hp, rng)?;
    let members = p.iter().map(|r| r.id).collect();
    Ok(StepOutcome { runtime, weights: WeightVector { members, weights: alpha }, solver_warning })
}

/// DFL baseline: same round as DDS with sample-count weights.
pub fn dfl_vehicle_step(
    v: &VehicleRuntime,
    received: &[&VehicleRuntime],
    ds: &Dataset,
    hp: &Hyperparams,
    rng: &mut rng::SimRng,
) -> Result<StepOutcome, AggregationError> {
    let p = participants(v, received);
    let alpha = dfl_weights(&p.iter().map(|r| r.sample_count()).collect::<Vec<_>>())?;
    let states = mixing_states(&p, hp, hp.local_epochs)?;
    let runtime = weighted_round(v, &p, &states, &alpha, ds, hp, rng)?;
    let members = p.iter().map(|r| r.id).collect();
    Ok(StepOutcome { runtime, weights: WeightVector { members, weights: alpha }, solver_warning: false })
}

/// What a push-sum sender broadcasts to each member of its `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpShare {
    pub from: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub state: StateVector,
}

/// Even share `(x/p, y/p)` of vehicle `v` with `p = |P_v|`.
pub fn sp_share(v: &VehicleRuntime, p: usize) -> SpShare {
    let p = p as f64;
    SpShare { from: v.id, x: v.sp_x.iter().map(|x| x / p).collect(), y: v.sp_y / p, state: v.state.clone() }
}

/// One push-sum round for vehicle `v`: sum the own share and the shares
/// received from `M_k` (ascending sender id), de-bias `z = x / y`, take one
/// full-batch gradient step `x ← x - lr·y·∇F(z)` and publish `x / y`.
///
/// The state vector is mixed with the implied model weights
/// `α_j = (y_j / p_j) / y`, incremented once and renormalized.
pub fn sp_vehicle_step(
    v: &VehicleRuntime,
    participant_count: usize,
    received: &[SpShare],
    ds: &Dataset,
    hp: &Hyperparams,
) -> Result<StepOutcome, AggregationError> {
    let own = sp_share(v, participant_count);
    let mut shares: Vec<&SpShare> = received.iter().chain(std::iter::once(&own)).collect();
    shares.sort_by_key(|s| s.from);
    let mut x = vec![0.0; v.sp_x.len()];
    let mut y = 0.0;
    for s in &shares {
        for (acc, xi) in x.iter_mut().zip(&s.x) {
            *acc += xi;
        }
        y += s.y;
    }
    if !(y > 0.0) {
        return Err(AggregationError::NonPositiveMass(y));
    }
    let z = v.model.with_weights(x.iter().map(|xi| xi / y).collect());
    let grad = learner::full_gradient(&z, ds, &v.data)?;
    for (xi, gi) in x.iter_mut().zip(&grad) {
        *xi -= hp.lr * y * gi;
    }
    let model = v.model.with_weights(x.iter().map(|xi| xi / y).collect());
    if !model.is_finite() {
        return Err(LearnError::NonFinite.into());
    }

    let alpha: Vec<f64> = {
        let raw: Vec<f64> = shares.iter().map(|s| s.y / y).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|a| a / sum).collect()
    };
    let states: Vec<StateVector> = match hp.state_order {
        StateOrder::MixFirst => shares.iter().map(|s| s.state.clone()).collect(),
        StateOrder::IncrementFirst => shares.iter().map(|s| boosted(&s.state, s.from, hp.lr, 1)).collect::<Result<_, _>>()?,
    };
    let refs: Vec<&StateVector> = states.iter().collect();
    let state = finish_state(state_diversity::mix(&refs, &alpha)?, v.id, hp, 1)?;
    let members = shares.iter().map(|s| s.from).collect();
    Ok(StepOutcome {
        runtime: VehicleRuntime { model, state, sp_x: x, sp_y: y, ..v.clone() },
        weights: WeightVector { members, weights: alpha },
        solver_warning: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeOutcome {
    pub runtimes: Vec<VehicleRuntime>,
    pub weights: Vec<WeightVector>,
    pub solver_warnings: usize,
}

/// Stream seeding the local training of vehicle `k` in `epoch`.
pub fn training_rng(master_seed: u64, vehicle: usize, epoch: usize) -> rng::SimRng {
    rng::stream(master_seed, "train", &[vehicle as u64, epoch as u64])
}

/// One synchronized round: every vehicle reads the epoch-`t` snapshot
/// `runtimes` and produces its epoch-`t+1` runtime. Vehicles may run in
/// parallel; results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn epoch_exchange(
    strategy: Strategy,
    runtimes: &[VehicleRuntime],
    neighbors: &NeighborSets,
    g: &TargetVector,
    ds: &Dataset,
    hp: &Hyperparams,
    master_seed: u64,
    epoch: usize,
) -> Result<ExchangeOutcome, AggregationError> {
    if neighbors.len() != runtimes.len() {
        return Err(AggregationError::FleetSizeMismatch { neighbors: neighbors.len(), fleet: runtimes.len() });
    }
    if !neighbors.is_symmetric() {
        return Err(AggregationError::AsymmetricNeighbors);
    }
    let shares: Vec<SpShare> = match strategy {
        Strategy::Sp => runtimes.iter().map(|v| sp_share(v, neighbors.neighbors(v.id).len() + 1)).collect(),
        _ => Vec::new(),
    };
    let results: Vec<Result<StepOutcome, AggregationError>> = (0..runtimes.len())
        .into_par_iter()
        .map(|k| {
            let v = &runtimes[k];
            let received: Vec<&VehicleRuntime> = neighbors.neighbors(k).iter().map(|&j| &runtimes[j]).collect();
            let mut rng = training_rng(master_seed, k, epoch);
            match strategy {
                Strategy::Dds => dds_vehicle_step(v, &received, g, ds, hp, &mut rng),
                Strategy::Dfl => dfl_vehicle_step(v, &received, ds, hp, &mut rng),
                Strategy::Sp => {
                    let got: Vec<SpShare> = neighbors.neighbors(k).iter().map(|&j| shares[j].clone()).collect();
                    sp_vehicle_step(v, neighbors.neighbors(k).len() + 1, &got, ds, hp)
                }
            }
            .map_err(|e| AggregationError::Vehicle { id: k, source: Box::new(e) })
        })
        .collect();
    let mut out = ExchangeOutcome { runtimes: Vec::with_capacity(runtimes.len()), weights: Vec::new(), solver_warnings: 0 };
    for r in results {
        let step = r?;
        out.solver_warnings += step.solver_warning as usize;
        out.runtimes.push(step.runtime);
        out.weights.push(step.weights);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use crate::data::gen_synthetic;
    use crate::learner::{init_model, Arch};
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;
    use rand::Rng;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::from_values(v.to_vec()).unwrap()
    }

    fn random_simplex(r: &mut rng::SimRng, k: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn isolated_vehicle_objective() {
        let g = TargetVector::from_sizes(&[1, 2, 3]).unwrap();
        let s = sv(&[0.2, 0.3, 0.5]);
        let (v, grad) = kl_objective_and_gradient(&[&s], &g, &[1.0]).unwrap();
        assert!((v - state_diversity::kl_divergence(&s, &g).unwrap()).abs() < 1e-15);
        assert_eq!(grad.len(), 1);
        let sol = solve_weights(&[&s], &g, DEFAULT_SOLVER_TOL, DEFAULT_SOLVER_MAX_ITER).unwrap();
        assert_eq!(sol.alpha, vec![1.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::stream(3, "test/kl-fd", &[]);
        for inst in 0..20 {
            let k = r.random_range(2..7);
            let p = r.random_range(1..5);
            let states: Vec<StateVector> = (0..p).map(|_| sv(&random_simplex(&mut r, k))).collect();
            let refs: Vec<&StateVector> = states.iter().collect();
            let g = TargetVector::from_probabilities(random_simplex(&mut r, k)).unwrap();
            let alpha = random_simplex(&mut r, p);
            let (_, grad) = kl_objective_and_gradient(&refs, &g, &alpha).unwrap();
            let eps = 1e-6;
            let fd: Vec<f64> = (0..p)
                .map(|j| {
                    let mut a = alpha.clone();
                    let mut b = alpha.clone();
                    a[j] += eps;
                    b[j] -= eps;
                    (kl_objective_and_gradient(&refs, &g, &a).unwrap().0 - kl_objective_and_gradient(&refs, &g, &b).unwrap().0)
                        / (2.0 * eps)
                })
                .collect();
            for (a, n) in grad.iter().zip(&fd) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-4, "instance {inst}: analytic {a} vs fd {n}");
            }
        }
    }

    #[test]
    fn equal_states_give_equal_gradient() {
        let s = sv(&[0.1, 0.6, 0.3]);
        let g = TargetVector::from_sizes(&[3, 3, 4]).unwrap();
        let (_, grad) = kl_objective_and_gradient(&[&s, &s, &s], &g, &[0.2, 0.5, 0.3]).unwrap();
        assert!(grad.iter().all(|x| (x - grad[0]).abs() < 1e-15));
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let (e1, e2) = (StateVector::one_hot(2, 0), StateVector::one_hot(2, 1));
        let g = TargetVector::uniform(2);
        let sol = solve_weights(&[&e1, &e2], &g, DEFAULT_SOLVER_TOL, DEFAULT_SOLVER_MAX_ITER).unwrap();
        assert!((sol.alpha[0] - 0.5).abs() < 1e-6 && (sol.alpha[1] - 0.5).abs() < 1e-6);
        let bf = brute_force_weights(&[&e1, &e2], &g, 0.01).unwrap();
        assert_eq!(bf.alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn brute_force_single_participant() {
        let s = sv(&[0.5, 0.5]);
        let sol = brute_force_weights(&[&s], &TargetVector::uniform(2), 0.1).unwrap();
        assert_eq!(sol.alpha, vec![1.0]);
    }

    #[test]
    fn brute_force_rejects_large_sets() {
        let s = StateVector::one_hot(5, 0);
        let refs = vec![&s; 5];
        assert_eq!(brute_force_weights(&refs, &TargetVector::uniform(5), 0.1), Err(AggregationError::TooManyParticipants(5)));
    }

    #[test]
    fn brute_force_ties_prefer_lexicographically_smallest() {
        // identical states: the objective is flat, so the first grid point wins
        let s = sv(&[0.3, 0.7]);
        let sol = brute_force_weights(&[&s, &s, &s], &TargetVector::uniform(2), 0.25).unwrap();
        assert_eq!(sol.alpha, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn solver_matches_brute_force_on_small_instances() {
        let mut r = rng::stream(17, "test/solver-vs-grid", &[]);
        for inst in 0..25 {
            let k = r.random_range(2..=5);
            let p = r.random_range(1..=3);
            let states: Vec<StateVector> = (0..p).map(|_| sv(&random_simplex(&mut r, k))).collect();
            let refs: Vec<&StateVector> = states.iter().collect();
            let g = TargetVector::from_probabilities(random_simplex(&mut r, k)).unwrap();
            let sol = solve_weights(&refs, &g, DEFAULT_SOLVER_TOL, DEFAULT_SOLVER_MAX_ITER).unwrap();
            let bf = brute_force_weights(&refs, &g, 1e-2).unwrap();
            assert!(sol.objective <= bf.objective + 1e-4, "instance {inst}: {} vs {}", sol.objective, bf.objective);
        }
    }

    #[test]
    fn solver_trace_never_increases() {
        let mut r = rng::stream(5, "test/monotone", &[]);
        for _ in 0..50 {
            let k = r.random_range(2..10);
            let p = r.random_range(2..8);
            let states: Vec<StateVector> = (0..p).map(|_| sv(&random_simplex(&mut r, k))).collect();
            let refs: Vec<&StateVector> = states.iter().collect();
            let g = TargetVector::from_probabilities(random_simplex(&mut r, k)).unwrap();
            let (sol, trace, converged) = solve_weights_traced(&refs, &g, DEFAULT_SOLVER_TOL, DEFAULT_SOLVER_MAX_ITER).unwrap();
            assert!(converged, "gap {} after {} iterations", sol.gap, sol.iterations);
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(state_diversity::check_simplex(&sol.alpha).is_ok());
        }
    }

    #[test]
    fn solver_reports_non_convergence() {
        let g = TargetVector::from_sizes(&[1, 5, 2]).unwrap();
        let (a, b) = (sv(&[0.7, 0.2, 0.1]), sv(&[0.1, 0.1, 0.8]));
        match solve_weights(&[&a, &b], &g, 0.0, 1) {
            Err(AggregationError::NotConverged { best }) => {
                assert_eq!(best.iterations, 1);
                assert!(state_diversity::check_simplex(&best.alpha).is_ok());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_states_return_uniform_weights() {
        let z = StateVector::zeros(3);
        let sol = solve_weights(&[&z, &z], &TargetVector::uniform(3), DEFAULT_SOLVER_TOL, 10).unwrap();
        assert_eq!(sol.alpha, vec![0.5, 0.5]);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn one_hot_neighbors_optimum_is_proportional() {
        // With disjoint one-hot states the optimum restricted to P is g|_P renormalized.
        let g = TargetVector::from_sizes(&[100, 100, 10, 100]).unwrap();
        let (a, c, d) = (StateVector::one_hot(4, 0), StateVector::one_hot(4, 2), StateVector::one_hot(4, 3));
        let sol = solve_weights(&[&a, &c, &d], &g, DEFAULT_SOLVER_TOL, DEFAULT_SOLVER_MAX_ITER).unwrap();
        let naive = dfl_weights(&[100, 10, 100]).unwrap();
        for (x, y) in sol.alpha.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-4, "{:?} vs {naive:?}", sol.alpha);
        }
        assert!((sol.objective - (310.0f64 / 210.0).log2()).abs() < 1e-9);
    }

    #[test]
    fn relay_contribution_beats_naive_weights() {
        // A hears C and D; C has already averaged with B, so C's model carries
        // B's data. Sample-count weights ignore that and under-weight C.
        let g = TargetVector::from_sizes(&[100, 100, 10, 100]).unwrap();
        let a = StateVector::one_hot(4, 0);
        let c = sv(&[0.0, 0.5, 0.5, 0.0]);
        let d = StateVector::one_hot(4, 3);
        let refs = [&a, &c, &d];
        let naive = dfl_weights(&[100, 10, 100]).unwrap();
        let naive_kl = kl_objective_and_gradient(&refs, &g, &naive).unwrap().0;
        let sol = solve_weights(&refs, &g, DEFAULT_SOLVER_TOL, DEFAULT_SOLVER_MAX_ITER).unwrap();
        assert!(sol.objective < naive_kl - 1e-3, "{} vs {naive_kl}", sol.objective);
        assert!(sol.alpha[1] > naive[1]);
    }

    #[test]
    fn aggregate_examples() {
        let m = |w: Vec<f64>| ModelParams { arch: Arch::Logistic, dim: w.len() - 1, classes: 1, w };
        let a = m(vec![1.5, -2.0, 3.25]);
        let b = m(vec![7.0, 8.0, 9.0]);
        assert_eq!(aggregate_models(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        let neg = m(a.w.iter().map(|x| -x).collect());
        assert!(aggregate_models(&[&a, &neg], &[0.5, 0.5]).unwrap().w.iter().all(|&x| x == 0.0));
        let s = |x: f64| m(vec![x]);
        let out = aggregate_models(&[&s(1.0), &s(2.0), &s(4.0)], &[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(out.w, vec![2.0]);
        let other = ModelParams::zeros(Arch::Mlp { hidden: 1 }, 1, 1);
        assert_eq!(aggregate_models(&[&other, &m(vec![0.0, 0.0, 0.0])], &[0.5, 0.5]), Err(AggregationError::ArchitectureMismatch));
    }

    #[test]
    fn dfl_weight_examples() {
        let w = dfl_weights(&[100, 10, 100]).unwrap();
        assert!((w[1] - 10.0 / 210.0).abs() < 1e-15);
        assert_eq!(dfl_weights(&[5, 5, 5, 5]).unwrap(), vec![0.25; 4]);
        assert_eq!(dfl_weights(&[1, 3]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(dfl_weights(&[0, 0]), Err(AggregationError::NoParticipants));
    }

    fn small_fleet(k: usize, identical_data: bool) -> (Dataset, Vec<VehicleRuntime>, TargetVector) {
        let (train, _) = gen_synthetic(3, 4, 100, 0.4, 2).unwrap();
        let model = init_model(Arch::Logistic, 4, 3, 1);
        let runtimes: Vec<VehicleRuntime> = (0..k)
            .map(|id| {
                let idx: Vec<usize> = if identical_data { (0..30).collect() } else { (id * 30..(id + 1) * 30).collect() };
                VehicleRuntime::new(id, model.clone(), k, idx.into())
            })
            .collect();
        let g = TargetVector::from_sizes(&vec![30; k]).unwrap();
        (train, runtimes, g)
    }

    #[test]
    fn isolated_dds_vehicle_trains_alone() {
        let (ds, fleet, g) = small_fleet(3, false);
        let hp = Hyperparams { local_epochs: 2, batch: 8, ..Hyperparams::default() };
        let out = dds_vehicle_step(&fleet[1], &[], &g, &ds, &hp, &mut training_rng(9, 1, 0)).unwrap();
        assert_eq!(out.weights.weights, vec![1.0]);
        let alone = learner::local_epochs(&fleet[1].model, &ds, &fleet[1].data, 2, 8, 0.1, &mut training_rng(9, 1, 0)).unwrap();
        assert_eq!(out.runtime.model, alone);
        assert_eq!(out.runtime.state.values(), &[0.0, 1.0, 0.0]);
        let again = dds_vehicle_step(&out.runtime, &[], &g, &ds, &hp, &mut training_rng(9, 1, 1)).unwrap();
        assert_eq!(again.runtime.state.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn identical_fleet_stays_identical() {
        let (ds, fleet, g) = small_fleet(4, true);
        let hp = Hyperparams { local_epochs: 1, batch: 10, ..Hyperparams::default() };
        let nb = NeighborSets::complete(4);
        // equal per-vehicle training streams: reuse the same seed for every vehicle
        let outs: Vec<VehicleRuntime> = (0..4)
            .map(|k| {
                let rec: Vec<&VehicleRuntime> = nb.neighbors(k).iter().map(|&j| &fleet[j]).collect();
                dds_vehicle_step(&fleet[k], &rec, &g, &ds, &hp, &mut training_rng(0, 0, 0)).unwrap().runtime
            })
            .collect();
        assert!(outs.iter().all(|o| o.model == outs[0].model));
    }

    #[test]
    fn two_vehicle_chain_kl_does_not_increase() {
        let (ds, mut fleet, _) = small_fleet(2, false);
        let g = TargetVector::from_sizes(&[30, 30]).unwrap();
        let hp = Hyperparams { local_epochs: 2, batch: 10, ..Hyperparams::default() };
        let nb = NeighborSets::complete(2);
        let mut trace = Vec::new();
        for epoch in 0..10 {
            fleet = epoch_exchange(Strategy::Dds, &fleet, &nb, &g, &ds, &hp, 1, epoch).unwrap().runtimes;
            let mean_kl = fleet.iter().map(|v| state_diversity::kl_divergence(&v.state, &g).unwrap()).sum::<f64>() / 2.0;
            trace.push(mean_kl);
        }
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{trace:?}");
        // fixed point: even mix, then own entry boosted by E·lr = 0.2
        let p: [f64; 2] = [0.7 / 1.2, 0.5 / 1.2];
        let fixed: f64 = p.iter().map(|x| x * (2.0 * x).log2()).sum();
        assert!((trace[9] - fixed).abs() < 1e-6, "{trace:?} vs {fixed}");
    }

    #[test]
    fn isolated_sp_vehicle_is_gradient_descent() {
        let (ds, fleet, _) = small_fleet(1, false);
        let hp = Hyperparams::default();
        let v = &fleet[0];
        let out = sp_vehicle_step(v, 1, &[], &ds, &hp).unwrap().runtime;
        let gd = learner::local_update(&v.model, &ds, &v.data, hp.lr).unwrap();
        for (a, b) in out.model.w.iter().zip(&gd.w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.sp_y, 1.0);
    }

    // Zero gradients make SP a pure push-sum average; compare against powers
    // of the 2x2 mixing matrix [[1/2, 1/2], [1/2, 1/2]] applied to (x, y).
    #[test]
    fn sp_pair_reaches_average_model() {
        let ds = Dataset::new(vec![0.0, 0.0], vec![0], 2, 1).unwrap(); // one class: zero gradient
        let mk = |w: Vec<f64>| ModelParams { arch: Arch::Logistic, dim: 2, classes: 1, w };
        let a = VehicleRuntime::new(0, mk(vec![1.0, -3.0, 2.0]), 2, vec![0].into());
        let b = VehicleRuntime::new(1, mk(vec![5.0, 1.0, 0.0]), 2, vec![0].into());
        let mut fleet = vec![a, b];
        let nb = NeighborSets::complete(2);
        let hp = Hyperparams::default();
        let (mut x, mut y) = ([fleet[0].sp_x.clone(), fleet[1].sp_x.clone()], [1.0, 1.0]);
        for epoch in 0..5 {
            fleet = epoch_exchange(Strategy::Sp, &fleet, &nb, &TargetVector::uniform(2), &ds, &hp, 0, epoch).unwrap().runtimes;
            let avg: Vec<f64> = x[0].iter().zip(&x[1]).map(|(p, q)| 0.5 * p + 0.5 * q).collect();
            x = [avg.clone(), avg];
            y = [0.5 * y[0] + 0.5 * y[1]; 2];
            for k in 0..2 {
                let expect: Vec<f64> = x[k].iter().map(|v| v / y[k]).collect();
                for (p, q) in fleet[k].model.w.iter().zip(&expect) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
        assert_eq!(fleet[0].model.w, vec![3.0, -1.0, 1.0]);
    }

    #[test]
    fn sp_rejects_non_positive_mass() {
        let (ds, mut fleet, _) = small_fleet(1, false);
        fleet[0].sp_y = 0.0;
        assert_eq!(sp_vehicle_step(&fleet[0], 1, &[], &ds, &Hyperparams::default()).unwrap_err(), AggregationError::NonPositiveMass(0.0));
    }

    #[test]
    fn exchange_with_no_links_is_independent_training() {
        let (ds, fleet, g) = small_fleet(3, false);
        let hp = Hyperparams { local_epochs: 1, batch: 16, ..Hyperparams::default() };
        let out = epoch_exchange(Strategy::Dds, &fleet, &NeighborSets::empty(3), &g, &ds, &hp, 4, 0).unwrap();
        for (k, v) in out.runtimes.iter().enumerate() {
            let alone = learner::local_epochs(&fleet[k].model, &ds, &fleet[k].data, 1, 16, 0.1, &mut training_rng(4, k, 0)).unwrap();
            assert_eq!(v.model, alone);
        }
    }

    #[test]
    fn exchange_rejects_asymmetric_links() {
        let (ds, fleet, g) = small_fleet(2, false);
        let nb = NeighborSets::from_lists(vec![vec![1], vec![]]);
        let err = epoch_exchange(Strategy::Dfl, &fleet, &nb, &g, &ds, &Hyperparams::default(), 0, 0).unwrap_err();
        assert_eq!(err, AggregationError::AsymmetricNeighbors);
    }

    // Snapshot semantics: each vehicle's output equals the step computed in
    // isolation from the untouched epoch-t snapshot.
    #[test]
    fn exchange_reads_only_the_snapshot() {
        let (ds, fleet, g) = small_fleet(4, false);
        let hp = Hyperparams { local_epochs: 1, batch: 10, ..Hyperparams::default() };
        let nb = NeighborSets::from_lists(vec![vec![1, 2], vec![0], vec![0, 3], vec![2]]);
        let snapshot = fleet.clone();
        let out = epoch_exchange(Strategy::Dds, &fleet, &nb, &g, &ds, &hp, 8, 3).unwrap();
        assert_eq!(fleet, snapshot);
        for k in 0..4 {
            let rec: Vec<&VehicleRuntime> = nb.neighbors(k).iter().map(|&j| &snapshot[j]).collect();
            let solo = dds_vehicle_step(&snapshot[k], &rec, &g, &ds, &hp, &mut training_rng(8, k, 3)).unwrap();
            assert_eq!(out.runtimes[k], solo.runtime);
        }
    }

    #[test]
    fn increment_first_order_is_supported() {
        let (ds, fleet, g) = small_fleet(3, false);
        let hp = Hyperparams { local_epochs: 1, batch: 10, state_order: StateOrder::IncrementFirst, ..Hyperparams::default() };
        let nb = NeighborSets::complete(3);
        let mut f = fleet;
        for epoch in 0..3 {
            f = epoch_exchange(Strategy::Dds, &f, &nb, &g, &ds, &hp, 0, epoch).unwrap().runtimes;
            for v in &f {
                assert!((v.state.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    fn fleet_strategy() -> impl proptest::strategy::Strategy<Value = (usize, Vec<(usize, usize)>, u64)> {
        (2usize..6).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 0..10), any::<u64>()))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn push_sum_mass_is_conserved((k, links, seed) in fleet_strategy()) {
            let mut lists = vec![Vec::new(); k];
            for (a, b) in links {
                if a != b {
                    lists[a].push(b);
                    lists[b].push(a);
                }
            }
            let nb = NeighborSets::from_lists(lists);
            let (ds, mut fleet, g) = small_fleet(k, false);
            let mut r = rng::stream(seed, "test/mass", &[]);
            for v in &mut fleet {
                v.sp_y = r.random_range(0.1..3.0);
            }
            let before: f64 = fleet.iter().map(|v| v.sp_y).sum();
            let out = epoch_exchange(Strategy::Sp, &fleet, &nb, &g, &ds, &Hyperparams::default(), seed, 0).unwrap();
            let after: f64 = out.runtimes.iter().map(|v| v.sp_y).sum();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn every_weight_vector_is_feasible((k, links, seed) in fleet_strategy(), which in 0usize..3) {
            let mut lists = vec![Vec::new(); k];
            for (a, b) in links {
                if a != b {
                    lists[a].push(b);
                    lists[b].push(a);
                }
            }
            let nb = NeighborSets::from_lists(lists);
            let (ds, mut fleet, g) = small_fleet(k, false);
            let strategy = [Strategy::Dds, Strategy::Dfl, Strategy::Sp][which];
            let hp = Hyperparams { local_epochs: 1, batch: 15, ..Hyperparams::default() };
            for epoch in 0..3 {
                let out = epoch_exchange(strategy, &fleet, &nb, &g, &ds, &hp, seed, epoch).unwrap();
                for (v, w) in out.runtimes.iter().zip(&out.weights) {
                    prop_assert!(w.is_feasible());
                    prop_assert_eq!(&w.members, &nb.participants(v.id));
                }
                fleet = out.runtimes;
            }
        }
    }
}
