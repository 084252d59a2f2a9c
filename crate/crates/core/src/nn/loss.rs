use crate::nn::{NnError, Tensor};
use crate::scalar::Scalar;

/// Predictions are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Binary targets in {0, 1}; positive samples weighted by `positive_weight`.
    BinaryCrossEntropy { positive_weight: f64 },
    /// One-hot targets over the last axis.
    CategoricalCrossEntropy,
}

/// Mean loss over the batch and its gradient with respect to `predictions`.
pub fn loss<T: Scalar>(kind: LossKind, predictions: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>), NnError> {
    if predictions.shape() != targets.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    let batch = T::from_usize(predictions.batch()).unwrap();
    let mut total = T::zero();
    let grad: Vec<T> = match kind {
        LossKind::BinaryCrossEntropy { positive_weight } => {
            let w = T::from_f64_lossy(positive_weight);
            predictions
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&p, &y)| {
                    let p = p.max(lo).min(hi);
                    total -= w * y * p.ln() + (T::one() - y) * (T::one() - p).ln();
                    (-w * y / p + (T::one() - y) / (T::one() - p)) / batch
                })
                .collect()
        }
        LossKind::CategoricalCrossEntropy => predictions
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| {
                let p = p.max(lo).min(hi);
                total -= y * p.ln();
                -y / p / batch
            })
            .collect(),
    };
    Ok((total / batch, Tensor::new(predictions.shape().to_vec(), grad)?))
}
