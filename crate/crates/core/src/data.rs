//! Synthetic labeled data, per-vehicle partitions and the target vector.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{shards} shards requested but only {samples} samples available")]
    TooManyShards { shards: usize, samples: usize },
    #[error("partition needs {needed} samples but the dataset has {available}")]
    Infeasible { needed: usize, available: usize },
    #[error("partition holds no samples")]
    EmptyPartition,
    #[error("malformed dataset row {row}: {msg}")]
    Malformed { row: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Labeled samples stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self, DataError> {
        if dim == 0 || classes == 0 {
            return Err(DataError::InvalidParameter("dimension and class count must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::InvalidParameter(format!(
                "{} feature values do not fill {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidParameter(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { features, labels, dim, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset holding the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Write `label,f0,f1,...` rows preceded by a header line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|j| format!("f{j}")));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.labels[i].to_string()];
            row.extend(self.features(i).iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Read `label,f0,f1,...` rows. A header line is optional. The class count
    /// is `classes` when given, else one past the largest label.
    pub fn read_csv<R: Read>(r: R, classes: Option<usize>) -> Result<Dataset, DataError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            if row == 0 && rec.get(0).is_some_and(|f| f.trim().parse::<usize>().is_err()) {
                continue;
            }
            let label: usize = rec
                .get(0)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| DataError::Malformed { row, msg: "label is not a class index".into() })?;
            let width = rec.len() - 1;
            if *dim.get_or_insert(width) != width || width == 0 {
                return Err(DataError::Malformed { row, msg: format!("expected {} features, got {width}", dim.unwrap()) });
            }
            for f in rec.iter().skip(1) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Malformed { row, msg: format!("bad feature value {f:?}") })?;
                features.push(v);
            }
            labels.push(label);
        }
        let dim = dim.ok_or_else(|| DataError::InvalidParameter("empty dataset".into()))?;
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(features, labels, dim, classes)
    }
}

/// Gaussian class clusters around unit-norm random centers, split 80/20 into
/// train and test per class. Both sets are ordered by label.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if classes < 2 || dim < 2 || per_class < 10 {
        return Err(DataError::InvalidParameter(format!(
            "need classes >= 2, dim >= 2, per_class >= 10; got {classes}, {dim}, {per_class}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidParameter(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = rng::stream(seed, "data/synthetic", &[]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, spread).expect("finite spread");
    let n_train = per_class * 4 / 5;
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let (xs, ys) = if i < n_train { (&mut train_x, &mut train_y) } else { (&mut test_x, &mut test_y) };
            xs.extend(center.iter().map(|m| m + noise.sample(&mut rng)));
            ys.push(c);
        }
    }
    Ok((
        Dataset::new(train_x, train_y, dim, classes)?,
        Dataset::new(test_x, test_y, dim, classes)?,
    ))
}

/// Per-vehicle sample indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(assignments: Vec<Vec<usize>>) -> Self {
        Self { assignments }
    }

    pub fn vehicles(&self) -> usize {
        self.assignments.len()
    }

    pub fn indices(&self, k: usize) -> &[usize] {
        &self.assignments[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    pub fn into_inner(self) -> Vec<Vec<usize>> {
        self.assignments
    }

    /// Disjoint and within `[0, n)`.
    pub fn is_valid_for(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        self.assignments.iter().flatten().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

// {"0":[...],"1":[...]} in vehicle order
impl Serialize for Partition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.assignments.len()))?;
        for (k, idx) in self.assignments.iter().enumerate() {
            map.serialize_entry(&k.to_string(), idx)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Partition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, Vec<usize>>::deserialize(d)?;
        let mut by_id = BTreeMap::new();
        for (k, v) in raw {
            let id: usize = k.parse().map_err(|_| D::Error::custom(format!("vehicle id {k:?} is not an integer")))?;
            by_id.insert(id, v);
        }
        if by_id.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(D::Error::custom("vehicle ids must be 0..K without gaps"));
        }
        Ok(Partition::new(by_id.into_values().collect()))
    }
}

/// Label-sorted shards, `shards_per_vehicle` of them dealt to each vehicle at
/// random. Samples past the last full shard are dropped so every vehicle
/// holds exactly the same count.
pub fn partition_balanced_noniid(
    ds: &Dataset,
    vehicles: usize,
    shards_per_vehicle: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    if vehicles == 0 || shards_per_vehicle == 0 {
        return Err(DataError::InvalidParameter("vehicle and shard counts must be positive".into()));
    }
    let shards = vehicles * shards_per_vehicle;
    if shards > ds.len() {
        return Err(DataError::TooManyShards { shards, samples: ds.len() });
    }
    let shard_size = ds.len() / shards;
    let mut sorted: Vec<usize> = (0..ds.len()).collect();
    sorted.sort_by_key(|&i| ds.label(i));
    let mut order: Vec<usize> = (0..shards).collect();
    order.shuffle(&mut rng::stream(seed, "data/shards", &[]));
    let assignments = order
        .chunks(shards_per_vehicle)
        .map(|mine| {
            mine.iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect()
        })
        .collect();
    Ok(Partition::new(assignments))
}

/// IID partition with per-vehicle sizes drawn uniformly from `size_levels`.
pub fn partition_unbalanced_iid(
    ds: &Dataset,
    vehicles: usize,
    size_levels: &[usize],
    seed: u64,
) -> Result<Partition, DataError> {
    if vehicles == 0 || size_levels.is_empty() {
        return Err(DataError::InvalidParameter("need at least one vehicle and one size level".into()));
    }
    let mut rng = rng::stream(seed, "data/iid", &[]);
    let sizes: Vec<usize> = (0..vehicles).map(|_| *size_levels.choose(&mut rng).expect("non-empty")).collect();
    let needed: usize = sizes.iter().sum();
    if needed > ds.len() {
        return Err(DataError::Infeasible { needed, available: ds.len() });
    }
    let mut pool: Vec<usize> = (0..ds.len()).collect();
    pool.shuffle(&mut rng);
    let mut start = 0;
    let assignments = sizes
        .iter()
        .map(|&n| {
            let chunk = pool[start..start + n].to_vec();
            start += n;
            chunk
        })
        .collect();
    Ok(Partition::new(assignments))
}

/// `g_k = n_k / Σ n_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector(Vec<f64>);

impl TargetVector {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self, DataError> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(DataError::EmptyPartition);
        }
        Ok(Self(sizes.iter().map(|&n| n as f64 / total as f64).collect()))
    }

    /// Wrap raw probabilities. Entries must be non-negative and sum to one.
    pub fn from_probabilities(p: Vec<f64>) -> Result<Self, DataError> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidParameter("target vector must be a probability vector".into()));
        }
        Ok(Self(p))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn target_vector(p: &Partition) -> Result<TargetVector, DataError> {
    TargetVector::from_sizes(&p.sizes())
}
