//! Contribution-weight state vectors and their diversity measures.
//!
//! The evaluators here are exact: `0 * log 0 = 0` by branching on zero, and no
//! clamping is applied. All logarithms are base 2.

use crate::data::TargetVector;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StateError {
    #[error("cannot normalize a state vector that sums to zero")]
    ZeroSum,
    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("weights must be non-negative and sum to 1 (sum = {0})")]
    NotOnSimplex(f64),
    #[error("{weights} weights supplied for {states} states")]
    CountMismatch { weights: usize, states: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid learning rate {0}")]
    InvalidRate(f64),
    #[error("entry {0} is negative or non-finite")]
    InvalidEntry(usize),
    #[error("target is zero at index {0} where the state has mass")]
    UnsupportedTarget(usize),
}

pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    values: Vec<f64>,
    normalized: bool,
}

impl StateVector {
    /// All-zero vector of length `k`, as held by every vehicle before training.
    pub fn zeros(k: usize) -> Self {
        Self { values: vec![0.0; k], normalized: false }
    }

    /// Wrap arbitrary non-negative values; `normalized` is set when they sum
    /// to one within tolerance.
    pub fn from_values(values: Vec<f64>) -> Result<Self, StateError> {
        if let Some(i) = values.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(StateError::InvalidEntry(i));
        }
        let normalized = (values.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL;
        Ok(Self { values, normalized })
    }

    pub fn one_hot(k: usize, i: usize) -> Self {
        let mut values = vec![0.0; k];
        values[i] = 1.0;
        Self { values, normalized: true }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Self-contribution bump after one local iteration: `s[k] += rate`.
pub fn local_increment(s: &StateVector, k: usize, rate: f64) -> Result<StateVector, StateError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(StateError::InvalidRate(rate));
    }
    if k >= s.len() {
        return Err(StateError::IndexOutOfRange { index: k, len: s.len() });
    }
    let mut values = s.values.clone();
    values[k] += rate;
    Ok(StateVector { values, normalized: false })
}

pub fn normalize(s: &StateVector) -> Result<StateVector, StateError> {
    let sum = s.sum();
    if !(sum > 0.0) {
        return Err(StateError::ZeroSum);
    }
    Ok(StateVector { values: s.values.iter().map(|v| v / sum).collect(), normalized: true })
}

/// Convex combination `Σ α_j s_j`, summed in the given order.
///
/// Unnormalized (e.g. all-zero initial) states are accepted; the result is
/// flagged normalized only when every input is.
pub fn mix(states: &[&StateVector], alpha: &[f64]) -> Result<StateVector, StateError> {
    if states.len() != alpha.len() || states.is_empty() {
        return Err(StateError::CountMismatch { weights: alpha.len(), states: states.len() });
    }
    check_simplex(alpha)?;
    let k = states[0].len();
    if let Some(s) = states.iter().find(|s| s.len() != k) {
        return Err(StateError::LengthMismatch { expected: k, found: s.len() });
    }
    let mut values = vec![0.0; k];
    for (s, &a) in states.iter().zip(alpha) {
        for (v, x) in values.iter_mut().zip(&s.values) {
            *v += a * x;
        }
    }
    Ok(StateVector { values, normalized: states.iter().all(|s| s.normalized) })
}

pub fn check_simplex(alpha: &[f64]) -> Result<(), StateError> {
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(*a >= 0.0 && *a <= 1.0 + SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(StateError::NotOnSimplex(sum));
    }
    Ok(())
}

/// Shannon entropy in bits, `-Σ s log2 s`.
pub fn entropy(s: &StateVector) -> f64 {
    entropy_of(&s.values)
}

pub fn entropy_of(p: &[f64]) -> f64 {
    // `+ 0.0` turns the -0.0 of a one-hot vector into 0.0
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>() + 0.0
}

/// `Σ s_j log2(s_j / g_j)` in bits.
pub fn kl_divergence(s: &StateVector, g: &TargetVector) -> Result<f64, StateError> {
    kl_of(&s.values, g.as_slice())
}

pub fn kl_of(p: &[f64], g: &[f64]) -> Result<f64, StateError> {
    if p.len() != g.len() {
        return Err(StateError::LengthMismatch { expected: g.len(), found: p.len() });
    }
    let mut total = 0.0;
    for (j, (&pj, &gj)) in p.iter().zip(g).enumerate() {
        if pj > 0.0 {
            if gj <= 0.0 {
                return Err(StateError::UnsupportedTarget(j));
            }
            total += pj * (pj / gj).log2();
        }
    }
    Ok(total)
}
