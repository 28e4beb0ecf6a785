//! Per-round metrics records.

use serde::{Deserialize, Serialize};

/// Metrics for one communication round.
///
/// Wall-clock timing is kept in memory for logs but excluded from
/// serialization so that identical (config, seed) runs emit byte-identical
/// report streams.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Aggregated global model accuracy on the server test split.
    pub global_accuracy: f64,
    pub global_loss: f64,
    /// Per-client local model accuracy on that client's own test partition,
    /// in client-id order.
    pub client_accuracies: Vec<f64>,
    pub mean_client_accuracy: f64,
    /// Learned aggregation weight vectors, `weight_vectors[model][layer]`.
    pub weight_vectors: Vec<Vec<f64>>,
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

impl RoundReport {
    /// Sanity bounds used by tests: all accuracies in [0,1] and finite fields.
    pub fn is_well_formed(&self) -> bool {
        let acc_ok = |a: f64| (0.0..=1.0).contains(&a);
        acc_ok(self.global_accuracy)
            && self.global_loss.is_finite()
            && acc_ok(self.mean_client_accuracy)
            && self.client_accuracies.iter().all(|&a| acc_ok(a))
            && self
                .weight_vectors
                .iter()
                .flatten()
                .all(|v| v.is_finite())
    }
}
