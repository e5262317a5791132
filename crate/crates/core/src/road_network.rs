//! Road network topologies: grid, spider and perturbed-grid random nets.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::rng;

const LENGTH_TOL: f64 = 1e-9;
const RANDOM_NET_RETRIES: usize = 100;
const RANDOM_NET_MAX_DEGREE: usize = 5;
const RANDOM_NET_DROP_PROB: f64 = 0.3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RoadError {
    #[error("grid needs at least 2 rows and 2 columns, got {rows}x{cols}")]
    DegenerateGrid { rows: usize, cols: usize },
    #[error("spider needs at least 3 arms and 1 circle, got {arms} arms / {circles} circles")]
    DegenerateSpider { arms: usize, circles: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("random net still disconnected after {0} attempts")]
    Disconnected(usize),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// Undirected road graph with metric coordinates.
///
/// Node ids are dense (`nodes[i].id == i`). Construction through
/// [`RoadGraph::new`] checks connectivity, edge lengths and the absence of
/// self-loops and duplicate edges.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    // node -> sorted (neighbor, edge index)
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl RoadGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, RoadError> {
        if nodes.is_empty() {
            return Err(RoadError::InvalidGraph("no nodes".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(RoadError::InvalidGraph(format!(
                    "node ids must be dense, found id {} at position {i}",
                    n.id
                )));
            }
            if !n.x.is_finite() || !n.y.is_finite() {
                return Err(RoadError::InvalidGraph(format!("node {i} has non-finite coordinates")));
            }
        }
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (ei, e) in edges.iter().enumerate() {
            if e.a >= nodes.len() || e.b >= nodes.len() {
                return Err(RoadError::InvalidGraph(format!("edge {ei} references unknown node")));
            }
            if e.a == e.b {
                return Err(RoadError::InvalidGraph(format!("self-loop at node {}", e.a)));
            }
            if !seen.insert((e.a.min(e.b), e.a.max(e.b))) {
                return Err(RoadError::InvalidGraph(format!("duplicate edge {}-{}", e.a, e.b)));
            }
            let d = distance(&nodes[e.a], &nodes[e.b]);
            if (d - e.length).abs() > LENGTH_TOL {
                return Err(RoadError::InvalidGraph(format!(
                    "edge {}-{} length {} differs from endpoint distance {d}",
                    e.a, e.b, e.length
                )));
            }
            adjacency[e.a].push((e.b, ei));
            adjacency[e.b].push((e.a, ei));
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        let g = Self { nodes, edges, adjacency };
        if !g.is_connected() {
            return Err(RoadError::InvalidGraph("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    /// Neighbors of `node` with the connecting edge index, ascending by neighbor id.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency[a]
            .binary_search_by_key(&b, |&(n, _)| n)
            .ok()
            .map(|i| self.adjacency[a][i].1)
    }

    pub fn is_connected(&self) -> bool {
        connected(self.nodes.len(), &self.adjacency)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("road graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn connected(n: usize, adjacency: &[Vec<(usize, usize)>]) -> bool {
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

fn distance(a: &Node, b: &Node) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

fn edge_between_nodes(nodes: &[Node], a: usize, b: usize) -> Edge {
    Edge { a, b, length: distance(&nodes[a], &nodes[b]) }
}

// {"nodes":[[id,x,y],...],"edges":[[a,b,len],...]}
#[derive(Serialize, Deserialize)]
struct RoadGraphRepr {
    nodes: Vec<(usize, f64, f64)>,
    edges: Vec<(usize, usize, f64)>,
}

impl Serialize for RoadGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RoadGraphRepr {
            nodes: self.nodes.iter().map(|n| (n.id, n.x, n.y)).collect(),
            edges: self.edges.iter().map(|e| (e.a, e.b, e.length)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RoadGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = RoadGraphRepr::deserialize(d)?;
        let nodes = repr.nodes.into_iter().map(|(id, x, y)| Node { id, x, y }).collect();
        let edges = repr.edges.into_iter().map(|(a, b, length)| Edge { a, b, length }).collect();
        RoadGraph::new(nodes, edges).map_err(D::Error::custom)
    }
}

/// Regular lattice with 4-neighbor connectivity. Node `r * cols + c` sits at
/// `(c * spacing, r * spacing)`.
pub fn gen_grid(rows: usize, cols: usize, spacing: f64) -> Result<RoadGraph, RoadError> {
    if rows < 2 || cols < 2 {
        return Err(RoadError::DegenerateGrid { rows, cols });
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(RoadError::InvalidParameter(format!("spacing must be positive, got {spacing}")));
    }
    let nodes = lattice_nodes(rows, cols, spacing);
    let mut edges = Vec::with_capacity(rows * (cols - 1) + cols * (rows - 1));
    for r in 0..rows {
        for c in 0..cols - 1 {
            edges.push(edge_between_nodes(&nodes, r * cols + c, r * cols + c + 1));
        }
    }
    for r in 0..rows - 1 {
        for c in 0..cols {
            edges.push(edge_between_nodes(&nodes, r * cols + c, (r + 1) * cols + c));
        }
    }
    RoadGraph::new(nodes, edges)
}

fn lattice_nodes(rows: usize, cols: usize, spacing: f64) -> Vec<Node> {
    (0..rows * cols)
        .map(|id| Node {
            id,
            x: (id % cols) as f64 * spacing,
            y: (id / cols) as f64 * spacing,
        })
        .collect()
}

/// Concentric rings joined by radial arms, plus a center node (id 0).
///
/// Ring `c` (1-based) holds `arms` nodes at radius `c * radius_inc`; node
/// `1 + (c - 1) * arms + a` lies on arm `a`.
pub fn gen_spider(arms: usize, circles: usize, radius_inc: f64) -> Result<RoadGraph, RoadError> {
    if arms < 3 || circles < 1 {
        return Err(RoadError::DegenerateSpider { arms, circles });
    }
    if !(radius_inc > 0.0 && radius_inc.is_finite()) {
        return Err(RoadError::InvalidParameter(format!(
            "radius increment must be positive, got {radius_inc}"
        )));
    }
    let ring_id = |c: usize, a: usize| 1 + (c - 1) * arms + a;
    let mut nodes = vec![Node { id: 0, x: 0.0, y: 0.0 }];
    for c in 1..=circles {
        let radius = c as f64 * radius_inc;
        for a in 0..arms {
            let theta = std::f64::consts::TAU * a as f64 / arms as f64;
            nodes.push(Node { id: ring_id(c, a), x: radius * theta.cos(), y: radius * theta.sin() });
        }
    }
    let mut edges = Vec::new();
    for c in 1..=circles {
        for a in 0..arms {
            edges.push(edge_between_nodes(&nodes, ring_id(c, a), ring_id(c, (a + 1) % arms)));
            let inner = if c == 1 { 0 } else { ring_id(c - 1, a) };
            edges.push(edge_between_nodes(&nodes, inner, ring_id(c, a)));
        }
    }
    RoadGraph::new(nodes, edges)
}

/// Perturbed-grid random road net.
///
/// Nodes are laid on a near-square lattice with spacing at the middle of the
/// length range, then jittered. Lattice and diagonal candidate edges outside
/// `[min_len, max_len]` are rejected, diagonals are only added while both
/// endpoints stay below degree 5, and a random subset of edges is deleted
/// whenever deletion keeps the graph connected.
pub fn gen_random(n_nodes: usize, min_len: f64, max_len: f64, seed: u64) -> Result<RoadGraph, RoadError> {
    if n_nodes < 2 {
        return Err(RoadError::InvalidParameter(format!("need at least 2 nodes, got {n_nodes}")));
    }
    if !(min_len > 0.0 && min_len <= max_len && max_len.is_finite()) {
        return Err(RoadError::InvalidParameter(format!(
            "need 0 < min_len <= max_len, got [{min_len}, {max_len}]"
        )));
    }
    let cols = (n_nodes as f64).sqrt().ceil() as usize;
    let spacing = 0.5 * (min_len + max_len);
    let jitter = (max_len - min_len) / 8.0;
    let mut rng = rng::stream(seed, "road/random", &[]);

    for _ in 0..RANDOM_NET_RETRIES {
        let nodes: Vec<Node> = (0..n_nodes)
            .map(|id| {
                let (dx, dy) = if jitter > 0.0 {
                    (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
                } else {
                    (0.0, 0.0)
                };
                Node {
                    id,
                    x: (id % cols) as f64 * spacing + dx,
                    y: (id / cols) as f64 * spacing + dy,
                }
            })
            .collect();
        let in_range = |e: &Edge| e.length >= min_len && e.length <= max_len;

        let mut edges: Vec<Edge> = Vec::new();
        let mut degree = vec![0usize; n_nodes];
        for id in 0..n_nodes {
            let c = id % cols;
            let mut cands = Vec::new();
            if c + 1 < cols && id + 1 < n_nodes {
                cands.push(id + 1);
            }
            if id + cols < n_nodes {
                cands.push(id + cols);
            }
            for other in cands {
                let e = edge_between_nodes(&nodes, id, other);
                if in_range(&e) {
                    degree[id] += 1;
                    degree[other] += 1;
                    edges.push(e);
                }
            }
        }
        for id in 0..n_nodes {
            let c = id % cols;
            let mut diag = Vec::new();
            if c + 1 < cols && id + cols + 1 < n_nodes {
                diag.push(id + cols + 1);
            }
            if c > 0 && id + cols - 1 < n_nodes {
                diag.push(id + cols - 1);
            }
            for other in diag {
                if degree[id] >= RANDOM_NET_MAX_DEGREE || degree[other] >= RANDOM_NET_MAX_DEGREE {
                    continue;
                }
                let e = edge_between_nodes(&nodes, id, other);
                if in_range(&e) && rng.random_bool(0.5) {
                    degree[id] += 1;
                    degree[other] += 1;
                    edges.push(e);
                }
            }
        }

        let mut keep = vec![true; edges.len()];
        if !connected(n_nodes, &adjacency_of(n_nodes, &edges, &keep)) {
            continue;
        }
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.shuffle(&mut rng);
        for ei in order {
            if !rng.random_bool(RANDOM_NET_DROP_PROB) {
                continue;
            }
            keep[ei] = false;
            if !connected(n_nodes, &adjacency_of(n_nodes, &edges, &keep)) {
                keep[ei] = true;
            }
        }
        let edges: Vec<Edge> = edges.into_iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e).collect();
        return RoadGraph::new(nodes, edges);
    }
    Err(RoadError::Disconnected(RANDOM_NET_RETRIES))
}

fn adjacency_of(n: usize, edges: &[Edge], keep: &[bool]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); n];
    for (ei, e) in edges.iter().enumerate().filter(|(i, _)| keep[*i]) {
        adj[e.a].push((e.b, ei));
        adj[e.b].push((e.a, ei));
    }
    adj
}

pub fn degree_histogram(g: &RoadGraph) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for n in 0..g.node_count() {
        *hist.entry(g.degree(n)).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        pairs.iter().copied().collect()
    }

    // Hand-check oracle: count lattice neighbors of every cell directly.
    fn lattice_histogram_oracle(rows: usize, cols: usize) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                let deg = [(0, 1), (0, -1), (1, 0), (-1, 0)]
                    .iter()
                    .filter(|(dr, dc)| {
                        let (nr, nc) = (r + dr, c + dc);
                        nr >= 0 && nc >= 0 && nr < rows as i64 && nc < cols as i64
                    })
                    .count();
                *h.entry(deg).or_insert(0) += 1;
            }
        }
        h
    }

    #[test]
    fn grid_10x10_matches_reported_degrees() {
        let g = gen_grid(10, 10, 100.0).unwrap();
        assert_eq!(g.node_count(), 100);
        assert_eq!(degree_histogram(&g), hist(&[(2, 4), (3, 32), (4, 64)]));
    }

    #[test]
    fn smallest_grid() {
        let g = gen_grid(2, 2, 100.0).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edge_count(), 4);
        assert_eq!(degree_histogram(&g), hist(&[(2, 4)]));
    }

    #[test]
    fn grid_3x4() {
        let g = gen_grid(3, 4, 50.0).unwrap();
        assert_eq!(g.node_count(), 12);
        assert_eq!(g.edge_count(), 17);
        assert_eq!(lattice_histogram_oracle(3, 4), hist(&[(2, 4), (3, 6), (4, 2)]));
        assert_eq!(degree_histogram(&g), lattice_histogram_oracle(3, 4));
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert_eq!(gen_grid(1, 5, 10.0), Err(RoadError::DegenerateGrid { rows: 1, cols: 5 }));
        assert!(gen_grid(3, 3, 0.0).is_err());
    }

    #[test]
    fn spider_default() {
        let g = gen_spider(10, 10, 100.0).unwrap();
        assert_eq!(g.node_count(), 101);
        assert!(g.is_connected());
    }

    #[test]
    fn spider_minimal() {
        let g = gen_spider(3, 1, 100.0).unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.degree(0), 3);
        assert_eq!(degree_histogram(&g), hist(&[(3, 4)]));
    }

    #[test]
    fn spider_two_rings() {
        let g = gen_spider(4, 2, 100.0).unwrap();
        assert_eq!(g.node_count(), 9);
        for a in 0..4 {
            assert_eq!(g.degree(1 + a), 4, "inner ring node {a}");
            assert_eq!(g.degree(5 + a), 3, "outer ring node {a}");
        }
        assert_eq!(g.degree(0), 4);
    }

    #[test]
    fn spider_rejects_two_arms() {
        assert!(matches!(gen_spider(2, 3, 10.0), Err(RoadError::DegenerateSpider { .. })));
    }

    #[test]
    fn random_default_range() {
        let g = gen_random(100, 100.0, 200.0, 42).unwrap();
        assert_eq!(g.node_count(), 100);
        assert!(g.is_connected());
        for n in 0..g.node_count() {
            assert!((1..=5).contains(&g.degree(n)), "node {n} degree {}", g.degree(n));
        }
        for e in g.edges() {
            assert!(e.length >= 100.0 && e.length <= 200.0);
        }
    }

    #[test]
    fn random_two_nodes() {
        let g = gen_random(2, 100.0, 100.0, 0).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!((g.edges()[0].length - 100.0).abs() < 1e-12);
        assert_eq!(degree_histogram(&g), hist(&[(1, 2)]));
    }

    #[test]
    fn random_is_deterministic() {
        let a = gen_random(60, 100.0, 200.0, 9).unwrap();
        let b = gen_random(60, 100.0, 200.0, 9).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = gen_random(60, 100.0, 200.0, 10).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn json_layout_and_round_trip() {
        let g = gen_grid(2, 2, 100.0).unwrap();
        let s = g.to_json();
        assert!(s.starts_with(r#"{"nodes":[[0,0.0,0.0],[1,100.0,0.0]"#), "{s}");
        assert!(s.contains(r#""edges":[[0,1,100.0]"#), "{s}");
        assert_eq!(RoadGraph::from_json(&s).unwrap(), g);
    }

    #[test]
    fn json_rejects_bad_length() {
        let s = r#"{"nodes":[[0,0,0],[1,3,4]],"edges":[[0,1,6.0]]}"#;
        assert!(RoadGraph::from_json(s).is_err());
        let s = r#"{"nodes":[[0,0,0],[1,3,4]],"edges":[[0,1,5.0]]}"#;
        assert_eq!(RoadGraph::from_json(s).unwrap().edge_count(), 1);
    }
}
