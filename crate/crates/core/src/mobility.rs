//! Manhattan-style vehicle mobility on a road graph and the per-epoch
//! communication graph derived from a fixed radio range.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::rng::{self, SimRng};
use crate::road_network::RoadGraph;

/// Default vehicle speed in m/s.
pub const DEFAULT_SPEED: f64 = 13.89;

pub const P_STRAIGHT: f64 = 0.5;
pub const P_LEFT: f64 = 0.25;
pub const P_RIGHT: f64 = 0.25;

// Outgoing directions within 45 degrees of the incoming heading count as straight.
const STRAIGHT_HALF_ANGLE: f64 = std::f64::consts::FRAC_PI_4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MobilityError {
    #[error("fleet needs at least one vehicle")]
    EmptyFleet,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Straight,
    Left,
    Right,
    UTurn,
}

/// One vehicle travelling along the directed edge `from -> to`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub from: usize,
    pub to: usize,
    /// Meters travelled from `from` along the edge.
    pub progress: f64,
    pub speed: f64,
    rng: SimRng,
}

impl Vehicle {
    pub fn new(from: usize, to: usize, progress: f64, speed: f64, rng: SimRng) -> Self {
        Self { from, to, progress, speed, rng }
    }

    pub fn position(&self, g: &RoadGraph) -> (f64, f64) {
        let (a, b) = (g.node(self.from), g.node(self.to));
        let len = (b.x - a.x).hypot(b.y - a.y);
        let t = if len > 0.0 { self.progress / len } else { 0.0 };
        (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub vehicles: Vec<Vehicle>,
}

impl FleetState {
    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn positions(&self, g: &RoadGraph) -> Vec<(f64, f64)> {
        self.vehicles.iter().map(|v| v.position(g)).collect()
    }
}

/// Neighbor sets `M_k` (sorted, excluding `k`) of every vehicle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    neighbors: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn from_lists(mut neighbors: Vec<Vec<usize>>) -> Self {
        for l in &mut neighbors {
            l.sort_unstable();
            l.dedup();
        }
        Self { neighbors }
    }

    /// Every vehicle isolated.
    pub fn empty(k: usize) -> Self {
        Self { neighbors: vec![Vec::new(); k] }
    }

    /// Every vehicle connected to every other.
    pub fn complete(k: usize) -> Self {
        Self { neighbors: (0..k).map(|i| (0..k).filter(|&j| j != i).collect()).collect() }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    /// `P_k = M_k ∪ {k}`, ascending.
    pub fn participants(&self, k: usize) -> Vec<usize> {
        let mut p = self.neighbors[k].clone();
        let pos = p.partition_point(|&j| j < k);
        p.insert(pos, k);
        p
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(k, m)| {
            m.iter().all(|&j| j != k && j < self.neighbors.len() && self.neighbors[j].binary_search(&k).is_ok())
        })
    }
}

/// Place `k` vehicles uniformly on the road network: edge chosen with
/// probability proportional to its length, position uniform along it,
/// direction by coin flip.
pub fn init_fleet(g: &RoadGraph, k: usize, speed: f64, seed: u64) -> Result<FleetState, MobilityError> {
    if k == 0 {
        return Err(MobilityError::EmptyFleet);
    }
    if !(speed >= 0.0 && speed.is_finite()) {
        return Err(MobilityError::InvalidParameter(format!("speed must be non-negative, got {speed}")));
    }
    if g.edge_count() == 0 {
        return Err(MobilityError::InvalidParameter("road graph has no edges".into()));
    }
    let lengths: Vec<f64> = g.edges().iter().map(|e| e.length).collect();
    let pick = WeightedIndex::new(&lengths).expect("edge lengths are positive");
    let mut placement = rng::stream(seed, "fleet/placement", &[]);
    let vehicles = (0..k)
        .map(|id| {
            let e = g.edge(pick.sample(&mut placement));
            let progress = placement.random_range(0.0..e.length);
            let (from, to, progress) = if placement.random_bool(0.5) {
                (e.a, e.b, progress)
            } else {
                (e.b, e.a, progress)
            };
            Vehicle::new(from, to, progress, speed, rng::stream(seed, "fleet/vehicle", &[id as u64]))
        })
        .collect();
    Ok(FleetState { vehicles })
}

/// Classify the turn `from -> at -> next` by the signed angle between the
/// incoming and outgoing directions.
pub fn classify_turn(g: &RoadGraph, from: usize, at: usize, next: usize) -> Turn {
    if next == from {
        return Turn::UTurn;
    }
    let (f, a, n) = (g.node(from), g.node(at), g.node(next));
    let (ix, iy) = (a.x - f.x, a.y - f.y);
    let (ox, oy) = (n.x - a.x, n.y - a.y);
    let angle = (ix * oy - iy * ox).atan2(ix * ox + iy * oy);
    if angle.abs() <= STRAIGHT_HALF_ANGLE {
        Turn::Straight
    } else if angle > 0.0 {
        Turn::Left
    } else {
        Turn::Right
    }
}

/// Candidate next nodes at junction `at` (arriving from `from`) with their
/// selection probabilities. Class probabilities are shared equally among the
/// candidates of that class and renormalized over the classes present.
/// Candidates are listed in ascending node id. A dead end yields a U-turn.
pub fn turn_options(g: &RoadGraph, from: usize, at: usize) -> Vec<(usize, f64)> {
    let cands: Vec<(usize, Turn)> = g
        .neighbors(at)
        .iter()
        .filter(|&&(n, _)| n != from)
        .map(|&(n, _)| (n, classify_turn(g, from, at, n)))
        .collect();
    if cands.is_empty() {
        return vec![(from, 1.0)];
    }
    let count = |t: Turn| cands.iter().filter(|(_, c)| *c == t).count() as f64;
    let (ns, nl, nr) = (count(Turn::Straight), count(Turn::Left), count(Turn::Right));
    let class_p = |t: Turn| match t {
        Turn::Straight => P_STRAIGHT / ns,
        Turn::Left => P_LEFT / nl,
        Turn::Right => P_RIGHT / nr,
        Turn::UTurn => 0.0,
    };
    let total: f64 = cands.iter().map(|&(_, t)| class_p(t)).sum();
    cands.into_iter().map(|(n, t)| (n, class_p(t) / total)).collect()
}

fn choose_next(g: &RoadGraph, from: usize, at: usize, rng: &mut SimRng) -> usize {
    let opts = turn_options(g, from, at);
    if opts.len() == 1 {
        return opts[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(n, p) in &opts {
        acc += p;
        if u < acc {
            return n;
        }
    }
    opts[opts.len() - 1].0
}

fn advance(v: &mut Vehicle, g: &RoadGraph, dt: f64) {
    let mut remaining = v.speed * dt;
    loop {
        let len = g.edge(g.edge_between(v.from, v.to).expect("vehicle on a valid edge")).length;
        let left = len - v.progress;
        if remaining < left {
            v.progress += remaining;
            return;
        }
        remaining -= left;
        let next = choose_next(g, v.from, v.to, &mut v.rng);
        v.from = v.to;
        v.to = next;
        v.progress = 0.0;
    }
}

/// Advance every vehicle by `speed * dt` meters, turning at junctions.
/// Vehicles draw from their own random streams, so the result is the same
/// for any degree of parallelism.
pub fn step_fleet(f: &FleetState, g: &RoadGraph, dt: f64) -> Result<FleetState, MobilityError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(MobilityError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let mut next = f.clone();
    next.vehicles.par_iter_mut().for_each(|v| advance(v, g, dt));
    Ok(next)
}

pub fn comm_graph(f: &FleetState, g: &RoadGraph, r: f64) -> Result<NeighborSets, MobilityError> {
    if !(r > 0.0) {
        return Err(MobilityError::InvalidParameter(format!("range must be positive, got {r}")));
    }
    Ok(neighbors_within(&f.positions(g), r))
}

/// Pairs of points at Euclidean distance `<= r`.
pub fn neighbors_within(pos: &[(f64, f64)], r: f64) -> NeighborSets {
    let mut neighbors = vec![Vec::new(); pos.len()];
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            if (pos[i].0 - pos[j].0).hypot(pos[i].1 - pos[j].1) <= r {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    NeighborSets { neighbors }
}

/// Append `epoch,vehicle_id,x,y` rows for the current fleet.
pub fn write_trajectory_rows<W: Write>(
    out: &mut csv::Writer<W>,
    epoch: usize,
    f: &FleetState,
    g: &RoadGraph,
) -> csv::Result<()> {
    for (id, (x, y)) in f.positions(g).into_iter().enumerate() {
        out.write_record([epoch.to_string(), id.to_string(), x.to_string(), y.to_string()])?;
    }
    Ok(())
}

pub const TRAJECTORY_HEADER: [&str; 4] = ["epoch", "vehicle_id", "x", "y"];
