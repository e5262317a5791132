//! Per-epoch evaluation metrics.

use crate::learner::ModelParams;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("empty fleet")]
    EmptyFleet,
    #[error("models have different architectures")]
    ArchitectureMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub per_vehicle_accuracy: Vec<f64>,
    pub avg_accuracy: f64,
    pub consensus_distance: f64,
    pub per_vehicle_entropy: Vec<f64>,
    pub per_vehicle_kl: Vec<f64>,
}

impl EpochMetrics {
    pub fn new(
        epoch: usize,
        per_vehicle_accuracy: Vec<f64>,
        consensus_distance: f64,
        per_vehicle_entropy: Vec<f64>,
        per_vehicle_kl: Vec<f64>,
    ) -> Self {
        let avg_accuracy = mean(&per_vehicle_accuracy);
        Self { epoch, per_vehicle_accuracy, avg_accuracy, consensus_distance, per_vehicle_entropy, per_vehicle_kl }
    }

    pub fn min_accuracy(&self) -> f64 {
        self.per_vehicle_accuracy.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_accuracy(&self) -> f64 {
        self.per_vehicle_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Pearson coefficient between per-vehicle accuracy and state entropy.
    pub fn pearson_acc_entropy(&self) -> Option<f64> {
        pearson(&self.per_vehicle_accuracy, &self.per_vehicle_entropy)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// `(1/K) Σ_k ‖w̄ − w_k‖²` with `w̄` the fleet-mean model.
pub fn consensus_distance(models: &[&ModelParams]) -> Result<f64, MetricsError> {
    let first = models.first().ok_or(MetricsError::EmptyFleet)?;
    if models.iter().any(|m| !m.compatible(first)) {
        return Err(MetricsError::ArchitectureMismatch);
    }
    let k = models.len() as f64;
    let mut avg = vec![0.0; first.w.len()];
    for m in models {
        for (a, x) in avg.iter_mut().zip(&m.w) {
            *a += x;
        }
    }
    avg.iter_mut().for_each(|a| *a /= k);
    let total: f64 = models
        .iter()
        .map(|m| m.w.iter().zip(&avg).map(|(x, a)| (x - a) * (x - a)).sum::<f64>())
        .sum();
    Ok(total / k)
}

/// Smallest index `t` with `series[t] >= target`, or `None` if never reached.
pub fn epochs_to_target(series: &[f64], target: f64) -> Option<usize> {
    series.iter().position(|&a| a >= target)
}

/// Sample Pearson correlation; `None` for mismatched lengths, fewer than two
/// points, or a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::Arch;
    use proptest::prelude::*;

    fn scalar(w: Vec<f64>) -> ModelParams {
        ModelParams { arch: Arch::Logistic, dim: w.len() - 1, classes: 1, w }
    }

    #[test]
    fn consensus_examples() {
        let a = scalar(vec![1.0, 2.0]);
        assert_eq!(consensus_distance(&[&a, &a, &a]).unwrap(), 0.0);
        let (p, q) = (scalar(vec![0.0, 0.0]), scalar(vec![2.0, 0.0]));
        assert_eq!(consensus_distance(&[&p, &q]).unwrap(), 1.0);
        let (p3, q3) = (scalar(vec![0.0, 0.0]), scalar(vec![6.0, 0.0]));
        assert_eq!(consensus_distance(&[&p3, &q3]).unwrap(), 9.0);
        assert_eq!(consensus_distance(&[]), Err(MetricsError::EmptyFleet));
        let other = scalar(vec![0.0, 0.0, 0.0]);
        assert_eq!(consensus_distance(&[&p, &other]), Err(MetricsError::ArchitectureMismatch));
    }

    #[test]
    fn epochs_to_target_examples() {
        assert_eq!(epochs_to_target(&[0.5, 0.91, 0.89], 0.90), Some(1));
        assert_eq!(epochs_to_target(&[0.5, 0.6], 0.90), None);
        assert_eq!(epochs_to_target(&[0.89, 0.90], 0.90), Some(1));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    #[test]
    fn average_matches_vehicles() {
        let m = EpochMetrics::new(3, vec![0.1, 0.4, 0.7], 0.0, vec![0.0; 3], vec![0.0; 3]);
        assert!((m.avg_accuracy - 0.4).abs() < 1e-12);
        assert_eq!(m.min_accuracy(), 0.1);
        assert_eq!(m.max_accuracy(), 0.7);
    }

    fn models() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, f64)> {
        (1usize..6, 1usize..5).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d + 1), k),
                prop::collection::vec(-50.0f64..50.0, d + 1),
                0.1f64..5.0,
            )
        })
    }

    proptest! {
        #[test]
        fn consensus_translation_invariant_and_homogeneous((ws, shift, c) in models()) {
            let base: Vec<ModelParams> = ws.iter().map(|w| scalar(w.clone())).collect();
            let moved: Vec<ModelParams> =
                ws.iter().map(|w| scalar(w.iter().zip(&shift).map(|(a, b)| a + b).collect())).collect();
            let scaled: Vec<ModelParams> = ws.iter().map(|w| scalar(w.iter().map(|a| a * c).collect())).collect();
            let d0 = consensus_distance(&base.iter().collect::<Vec<_>>()).unwrap();
            let d1 = consensus_distance(&moved.iter().collect::<Vec<_>>()).unwrap();
            let d2 = consensus_distance(&scaled.iter().collect::<Vec<_>>()).unwrap();
            prop_assert!(d0 >= 0.0);
            prop_assert!((d0 - d1).abs() < 1e-9 * (1.0 + d0));
            prop_assert!((d2 - c * c * d0).abs() < 1e-9 * (1.0 + d2));
        }

        #[test]
        fn pearson_affine_invariance(
            xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            if let Some(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let xn: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                prop_assert!((pearson(&xt, &y).unwrap() - r).abs() < 1e-9);
                prop_assert!((pearson(&xn, &y).unwrap() + r).abs() < 1e-9);
            }
        }

        #[test]
        fn epochs_to_target_monotone(series in prop::collection::vec(0.0f64..1.0, 1..30), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            match (epochs_to_target(&series, lo), epochs_to_target(&series, hi)) {
                (Some(a), Some(b)) => prop_assert!(a <= b),
                (None, Some(_)) => prop_assert!(false, "higher target reached but lower not"),
                _ => {}
            }
        }
    }
}
