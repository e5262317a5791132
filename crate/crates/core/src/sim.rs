//! Experiment configuration, the synchronized epoch loop and CSV output.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aggregation::{self, AggregationError, Hyperparams, StateOrder, Strategy, VehicleRuntime};
use crate::data::{self, DataError, Dataset, Partition, TargetVector};
use crate::learner::{self, Arch, LearnError};
use crate::metrics::{self, EpochMetrics};
use crate::mobility::{self, FleetState, MobilityError};
use crate::rng;
use crate::road_network::{self, RoadError, RoadGraph};
use crate::state_diversity;

pub const SEED_ENV: &str = "DFLDDS_SEED";

pub const METRICS_HEADER: [&str; 6] =
    ["epoch", "avg_accuracy", "consensus_distance", "pearson_acc_entropy", "min_accuracy", "max_accuracy"];

pub const NOT_AVAILABLE: &str = "NA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Topology {
    Grid { rows: usize, cols: usize, spacing: f64 },
    Spider { arms: usize, circles: usize, radius_increment: f64 },
    Random { nodes: usize, min_length: f64, max_length: f64 },
    /// Road graph JSON as written by `gen-network`.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    BalancedNoniid {
        #[serde(default = "default_shards")]
        shards_per_vehicle: usize,
    },
    UnbalancedIid { levels: Vec<usize> },
}

fn default_shards() -> usize {
    4
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::BalancedNoniid { shards_per_vehicle: default_shards() }
    }
}

/// Synthetic Gaussian-cluster data, or train/test CSV files with the
/// `label,f0,f1,...` layout when both paths are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub train_csv: Option<String>,
    pub test_csv: Option<String>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { classes: 10, dim: 20, per_class: 600, spread: 1.0, train_csv: None, test_csv: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub topology: Topology,
    pub strategy: Strategy,
    #[serde(rename = "K", default = "d_k")]
    pub k: usize,
    #[serde(default = "d_r")]
    pub r: f64,
    #[serde(default = "d_speed")]
    pub speed: f64,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default = "d_model")]
    pub model: Arch,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(rename = "E", default = "d_e")]
    pub e: usize,
    #[serde(rename = "B", default = "d_b")]
    pub b: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_targets")]
    pub targets: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub state_order: StateOrder,
    /// Stop once the average accuracy reaches the largest target.
    #[serde(default)]
    pub early_stop: bool,
}

fn d_k() -> usize {
    100
}
fn d_r() -> f64 {
    100.0
}
fn d_speed() -> f64 {
    mobility::DEFAULT_SPEED
}
fn d_dt() -> f64 {
    30.0
}
fn d_model() -> Arch {
    Arch::Logistic
}
fn d_eta() -> f64 {
    0.1
}
fn d_e() -> usize {
    8
}
fn d_b() -> usize {
    80
}
fn d_epochs() -> usize {
    100
}
fn d_targets() -> Vec<f64> {
    vec![0.90, 0.92, 0.95]
}

const TOP_LEVEL_KEYS: [&str; 18] = [
    "topology", "strategy", "K", "r", "speed", "dt", "partition", "data", "model", "eta", "E", "B", "epochs",
    "targets", "seed", "threads", "state_order", "early_stop",
];

const ALIASES: [(&str, &str); 12] = [
    ("lr", "eta"),
    ("learning_rate", "eta"),
    ("η", "eta"),
    ("vehicles", "K"),
    ("num_vehicles", "K"),
    ("local_epochs", "E"),
    ("batch", "B"),
    ("batch_size", "B"),
    ("range", "r"),
    ("comm_range", "r"),
    ("network", "topology"),
    ("rounds", "epochs"),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unknown config key {key:?}{}", .suggestion.map(|s| format!(" (did you mean {s:?}?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<&'static str> },
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
    }
}

fn suggest(key: &str) -> Option<&'static str> {
    if let Some((_, to)) = ALIASES.iter().find(|(from, _)| from.eq_ignore_ascii_case(key)) {
        return Some(to);
    }
    if let Some(k) = TOP_LEVEL_KEYS.iter().find(|k| k.eq_ignore_ascii_case(key)) {
        return Some(k);
    }
    TOP_LEVEL_KEYS.iter().map(|k| (edit_distance(k, key), *k)).filter(|(d, _)| *d <= 2).min().map(|(_, k)| k)
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (ca != *cb) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn check_raw(v: &Value) -> Result<(), ConfigError> {
    let obj = v.as_object().ok_or_else(|| ConfigError::invalid("config", "top level must be a JSON object"))?;
    for key in obj.keys() {
        if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { key: key.clone(), suggestion: suggest(key) });
        }
    }
    for field in ["K", "E", "B", "epochs"] {
        if let Some(x) = obj.get(field) {
            if x.as_u64().is_none_or(|n| n == 0) {
                return Err(ConfigError::invalid(field, format!("must be a positive integer, got {x}")));
            }
        }
    }
    for field in ["r", "speed", "dt", "eta"] {
        if let Some(x) = obj.get(field) {
            if x.as_f64().is_none_or(|f| !(f > 0.0 && f.is_finite())) {
                return Err(ConfigError::invalid(field, format!("must be a positive number, got {x}")));
            }
        }
    }
    Ok(())
}

fn parse_error(e: serde_json::Error) -> ConfigError {
    ConfigError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
}

impl SimConfig {
    /// Configuration with every default filled in.
    pub fn new(topology: Topology, strategy: Strategy) -> Self {
        serde_json::from_value(serde_json::json!({ "topology": topology, "strategy": strategy }))
            .expect("defaults deserialize")
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let raw: Value = serde_json::from_str(s).map_err(parse_error)?;
        check_raw(&raw)?;
        // Re-parse from text so typed errors keep their line numbers.
        let cfg: SimConfig = serde_json::from_str(s).map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, x: usize| if x == 0 { Err(ConfigError::invalid(field, "must be positive")) } else { Ok(()) };
        let positive_f = |field: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::invalid(field, format!("must be a positive number, got {x}")))
            }
        };
        positive("K", self.k)?;
        positive("E", self.e)?;
        positive("B", self.b)?;
        positive("epochs", self.epochs)?;
        positive_f("r", self.r)?;
        positive_f("speed", self.speed)?;
        positive_f("dt", self.dt)?;
        positive_f("eta", self.eta)?;
        match &self.topology {
            Topology::Grid { rows, cols, spacing } => {
                positive("topology.rows", *rows)?;
                positive("topology.cols", *cols)?;
                positive_f("topology.spacing", *spacing)?;
            }
            Topology::Spider { arms, circles, radius_increment } => {
                positive("topology.arms", *arms)?;
                positive("topology.circles", *circles)?;
                positive_f("topology.radius_increment", *radius_increment)?;
            }
            Topology::Random { nodes, min_length, max_length } => {
                positive("topology.nodes", *nodes)?;
                positive_f("topology.min_length", *min_length)?;
                positive_f("topology.max_length", *max_length)?;
                if max_length < min_length {
                    return Err(ConfigError::invalid("topology.max_length", "must be at least min_length"));
                }
            }
            Topology::File { .. } => {}
        }
        match &self.partition {
            PartitionSpec::BalancedNoniid { shards_per_vehicle } => positive("partition.shards_per_vehicle", *shards_per_vehicle)?,
            PartitionSpec::UnbalancedIid { levels } => {
                if levels.is_empty() || levels.contains(&0) {
                    return Err(ConfigError::invalid("partition.levels", "must be a non-empty list of positive sizes"));
                }
            }
        }
        if self.data.train_csv.is_some() != self.data.test_csv.is_some() {
            return Err(ConfigError::invalid("data", "train_csv and test_csv must be given together"));
        }
        positive("data.classes", self.data.classes)?;
        positive("data.dim", self.data.dim)?;
        positive("data.per_class", self.data.per_class)?;
        positive_f("data.spread", self.data.spread)?;
        if let Arch::Mlp { hidden } = self.model {
            positive("model.hidden", hidden)?;
        }
        if let Some(t) = self.targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(ConfigError::invalid("targets", format!("{t} is not a fraction in [0, 1]")));
        }
        if self.threads == Some(0) {
            return Err(ConfigError::invalid("threads", "must be positive"));
        }
        Ok(())
    }

    /// Replace the seed with `DFLDDS_SEED` when that variable is set.
    pub fn apply_env_overrides(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| ConfigError::invalid(SEED_ENV, format!("{v:?} is not a u64")))?;
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        rng::fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams { lr: self.eta, local_epochs: self.e, batch: self.b, state_order: self.state_order, ..Hyperparams::default() }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig, ConfigError> {
    let mut s = String::new();
    std::fs::File::open(path)?.read_to_string(&mut s)?;
    SimConfig::from_json_str(&s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
    pub config_hash: u64,
    pub seed: u64,
    pub strategy: Strategy,
    pub solver_warnings: usize,
}

impl MetricsLog {
    pub fn avg_accuracy_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|m| m.avg_accuracy).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|m| m.avg_accuracy)
    }

    /// Mean consensus distance over epochs `from..=to`.
    pub fn mean_consensus(&self, from: usize, to: usize) -> f64 {
        let xs: Vec<f64> =
            self.epochs.iter().filter(|m| (from..=to).contains(&m.epoch)).map(|m| m.consensus_distance).collect();
        metrics::mean(&xs)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("road network: {0}")]
    Road(#[from] RoadError),
    #[error("road network file: {0}")]
    RoadFile(#[from] serde_json::Error),
    #[error("mobility: {0}")]
    Mobility(#[from] MobilityError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dataset has dimension {found}, config says {expected}")]
    DataShape { expected: usize, found: usize },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("setup failed: {0}")]
    Setup(#[from] SetupError),
    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        source: EpochFailure,
        /// Metrics recorded before the failure.
        partial: Box<MetricsLog>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum EpochFailure {
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error("evaluating vehicle {vehicle}: {source}")]
    Evaluation { vehicle: usize, source: LearnError },
}

/// Everything built from the config before the first epoch. Shared by all
/// strategies for a given seed.
#[derive(Debug, Clone)]
pub struct World {
    pub graph: RoadGraph,
    pub fleet: FleetState,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub target: TargetVector,
    pub initial_model: learner::ModelParams,
}

fn read_dataset(path: &str, classes: usize) -> Result<Dataset, SetupError> {
    let f = std::fs::File::open(path).map_err(|source| SetupError::Io { path: path.to_string(), source })?;
    Ok(Dataset::read_csv(f, Some(classes))?)
}

pub fn build_world(cfg: &SimConfig) -> Result<World, SetupError> {
    cfg.validate()?;
    let seed = |name: &str| rng::derive_seed(cfg.seed, name, &[]);
    let graph = match &cfg.topology {
        Topology::Grid { rows, cols, spacing } => road_network::gen_grid(*rows, *cols, *spacing)?,
        Topology::Spider { arms, circles, radius_increment } => road_network::gen_spider(*arms, *circles, *radius_increment)?,
        Topology::Random { nodes, min_length, max_length } => {
            road_network::gen_random(*nodes, *min_length, *max_length, seed("topology"))?
        }
        Topology::File { path } => {
            let text = std::fs::read_to_string(path).map_err(|source| SetupError::Io { path: path.clone(), source })?;
            RoadGraph::from_json(&text)?
        }
    };
    let fleet = mobility::init_fleet(&graph, cfg.k, cfg.speed, seed("fleet"))?;
    let (train, test) = match (&cfg.data.train_csv, &cfg.data.test_csv) {
        (Some(tr), Some(te)) => (read_dataset(tr, cfg.data.classes)?, read_dataset(te, cfg.data.classes)?),
        _ => data::gen_synthetic(cfg.data.classes, cfg.data.dim, cfg.data.per_class, cfg.data.spread, seed("data"))?,
    };
    if train.dim() != test.dim() {
        return Err(SetupError::DataShape { expected: train.dim(), found: test.dim() });
    }
    let partition = match &cfg.partition {
        PartitionSpec::BalancedNoniid { shards_per_vehicle } => {
            data::partition_balanced_noniid(&train, cfg.k, *shards_per_vehicle, seed("partition"))?
        }
        PartitionSpec::UnbalancedIid { levels } => data::partition_unbalanced_iid(&train, cfg.k, levels, seed("partition"))?,
    };
    let target = data::target_vector(&partition)?;
    let initial_model = learner::init_model(cfg.model, train.dim(), train.classes(), seed("model"));
    Ok(World { graph, fleet, train, test, partition, target, initial_model })
}

/// Called after each epoch with the epoch index and the fleet positions used
/// for that epoch's exchange (the initial placement for epoch 0).
pub trait Observer: Send {
    fn epoch(&mut self, epoch: usize, fleet: &FleetState, graph: &RoadGraph, runtimes: &[VehicleRuntime]);
}

impl Observer for () {
    fn epoch(&mut self, _: usize, _: &FleetState, _: &RoadGraph, _: &[VehicleRuntime]) {}
}

fn evaluate_fleet(
    epoch: usize,
    runtimes: &[VehicleRuntime],
    world: &World,
) -> Result<EpochMetrics, EpochFailure> {
    let accuracy: Vec<f64> = runtimes
        .par_iter()
        .map(|v| {
            learner::evaluate(&v.model, &world.test)
                .map(|r| r.accuracy)
                .map_err(|source| EpochFailure::Evaluation { vehicle: v.id, source })
        })
        .collect::<Result<_, _>>()?;
    let models: Vec<&learner::ModelParams> = runtimes.iter().map(|v| &v.model).collect();
    let consensus = metrics::consensus_distance(&models).expect("fleet is non-empty and homogeneous");
    let entropy = runtimes.iter().map(|v| state_diversity::entropy(&v.state)).collect();
    let kl = runtimes
        .iter()
        .map(|v| state_diversity::kl_divergence(&v.state, &world.target).map_err(AggregationError::from))
        .collect::<Result<_, _>>()?;
    Ok(EpochMetrics::new(epoch, accuracy, consensus, entropy, kl))
}

/// Run the configured experiment. Epoch 0 records the initial (identical)
/// models; epochs `1..=epochs` each move the fleet, rebuild the
/// communication graph, exchange and evaluate.
pub fn run(cfg: &SimConfig) -> Result<MetricsLog, RunError> {
    run_observed(cfg, &mut ())
}

pub fn run_observed(cfg: &SimConfig, observer: &mut dyn Observer) -> Result<MetricsLog, RunError> {
    let world = build_world(cfg)?;
    run_world(cfg, &world, observer)
}

pub fn run_world(cfg: &SimConfig, world: &World, observer: &mut dyn Observer) -> Result<MetricsLog, RunError> {
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| SetupError::ThreadPool(e.to_string()))?;
            pool.install(|| epoch_loop(cfg, world, observer))
        }
        None => epoch_loop(cfg, world, observer),
    }
}

fn epoch_loop(cfg: &SimConfig, world: &World, observer: &mut dyn Observer) -> Result<MetricsLog, RunError> {
    let hp = cfg.hyperparams();
    let mut log = MetricsLog {
        epochs: Vec::with_capacity(cfg.epochs + 1),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        strategy: cfg.strategy,
        solver_warnings: 0,
    };
    let mut runtimes: Vec<VehicleRuntime> = (0..cfg.k)
        .map(|id| {
            let data: Arc<[usize]> = world.partition.indices(id).into();
            VehicleRuntime::new(id, world.initial_model.clone(), cfg.k, data)
        })
        .collect();
    let mut fleet = world.fleet.clone();
    let fail = |epoch: usize, source: EpochFailure, log: &MetricsLog| RunError::Epoch { epoch, source, partial: Box::new(log.clone()) };

    match evaluate_fleet(0, &runtimes, world) {
        Ok(m) => log.epochs.push(m),
        Err(e) => return Err(fail(0, e, &log)),
    }
    observer.epoch(0, &fleet, &world.graph, &runtimes);
    let stop_at = cfg.targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    for epoch in 1..=cfg.epochs {
        let step = (|| -> Result<_, EpochFailure> {
            fleet = mobility::step_fleet(&fleet, &world.graph, cfg.dt)?;
            let links = mobility::comm_graph(&fleet, &world.graph, cfg.r)?;
            let out = aggregation::epoch_exchange(
                cfg.strategy,
                &runtimes,
                &links,
                &world.target,
                &world.train,
                &hp,
                cfg.seed,
                epoch,
            )?;
            let m = evaluate_fleet(epoch, &out.runtimes, world)?;
            Ok((out, m))
        })();
        let (out, m) = step.map_err(|e| fail(epoch, e, &log))?;
        runtimes = out.runtimes;
        log.solver_warnings += out.solver_warnings;
        let reached = m.avg_accuracy >= stop_at;
        log::info!("epoch {epoch}: avg accuracy {:.4}, consensus distance {:.4e}", m.avg_accuracy, m.consensus_distance);
        log.epochs.push(m);
        observer.epoch(epoch, &fleet, &world.graph, &runtimes);
        if cfg.early_stop && reached {
            break;
        }
    }
    Ok(log)
}

/// Value rounded to 10 significant digits, printed in shortest form.
pub fn format_sig(x: f64) -> String {
    if !x.is_finite() {
        return NOT_AVAILABLE.to_string();
    }
    let rounded: f64 = format!("{x:.9e}").parse().expect("scientific notation parses");
    format!("{rounded}")
}

fn opt_sig(x: Option<f64>) -> String {
    x.map_or_else(|| NOT_AVAILABLE.to_string(), format_sig)
}

/// Metrics as CSV. `wide` appends per-vehicle `acc_k`, `entropy_k` and
/// `kl_k` columns (all accuracies first, then entropies, then divergences).
pub fn write_metrics<W: Write>(log: &MetricsLog, out: W, wide: bool) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = log.epochs.first().map_or(0, |m| m.per_vehicle_accuracy.len());
    let mut header: Vec<String> = METRICS_HEADER.iter().map(|s| s.to_string()).collect();
    if wide {
        for prefix in ["acc", "entropy", "kl"] {
            header.extend((0..k).map(|i| format!("{prefix}_{i}")));
        }
    }
    w.write_record(&header)?;
    for m in &log.epochs {
        let mut row = vec![
            m.epoch.to_string(),
            format_sig(m.avg_accuracy),
            format_sig(m.consensus_distance),
            opt_sig(m.pearson_acc_entropy()),
            format_sig(m.min_accuracy()),
            format_sig(m.max_accuracy()),
        ];
        if wide {
            for series in [&m.per_vehicle_accuracy, &m.per_vehicle_entropy, &m.per_vehicle_kl] {
                row.extend(series.iter().map(|&x| format_sig(x)));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(log: &MetricsLog, path: impl AsRef<Path>, wide: bool) -> csv::Result<()> {
    write_metrics(log, std::fs::File::create(path)?, wide)
}

/// One parsed metrics row: the fixed columns plus any extra columns by name.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub avg_accuracy: f64,
    pub consensus_distance: f64,
    pub pearson_acc_entropy: Option<f64>,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CsvReadError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing column {0}")]
    MissingColumn(&'static str),
    #[error("row {row}, column {column}: cannot parse {value:?}")]
    BadValue { row: usize, column: String, value: String },
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>, CsvReadError> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    let col = |name: &'static str| header.iter().position(|h| h == name).ok_or(CsvReadError::MissingColumn(name));
    let idx: Vec<usize> = METRICS_HEADER.iter().map(|n| col(n)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (r, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>, CsvReadError> {
            let s = &rec[i];
            if s == NOT_AVAILABLE {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| CsvReadError::BadValue { row: r + 1, column: header[i].to_string(), value: s.to_string() })
        };
        let req = |i: usize| -> Result<f64, CsvReadError> {
            num(i)?.ok_or_else(|| CsvReadError::BadValue { row: r + 1, column: header[i].to_string(), value: NOT_AVAILABLE.into() })
        };
        let epoch = rec[idx[0]]
            .parse()
            .map_err(|_| CsvReadError::BadValue { row: r + 1, column: "epoch".into(), value: rec[idx[0]].to_string() })?;
        let mut extra = BTreeMap::new();
        for (i, name) in header.iter().enumerate() {
            if !idx.contains(&i) {
                if let Some(x) = num(i)? {
                    extra.insert(name.to_string(), x);
                }
            }
        }
        rows.push(MetricsRow {
            epoch,
            avg_accuracy: req(idx[1])?,
            consensus_distance: req(idx[2])?,
            pearson_acc_entropy: num(idx[3])?,
            min_accuracy: req(idx[4])?,
            max_accuracy: req(idx[5])?,
            extra,
        });
    }
    Ok(rows)
}

/// `(target, first epoch reaching it)` for each target.
pub fn epochs_to_targets(rows: &[MetricsRow], targets: &[f64]) -> Vec<(f64, Option<usize>)> {
    let series: Vec<f64> = rows.iter().map(|r| r.avg_accuracy).collect();
    targets.iter().map(|&t| (t, metrics::epochs_to_target(&series, t).map(|i| rows[i].epoch))).collect()
}
