use crate::nn::{Gradients, ModelGraph, NnError, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    first: Tensor<T>,
    second: Tensor<T>,
}

/// Adam with bias correction. Moments are only held for trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Vec<Option<Moments<T>>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(graph: &ModelGraph<T>, config: AdamConfig) -> Self {
        let moments = graph
            .nodes()
            .iter()
            .map(|n| {
                n.params
                    .iter()
                    .map(|p| {
                        p.trainable.then(|| Moments {
                            first: Tensor::zeros(p.value.shape()),
                            second: Tensor::zeros(p.value.shape()),
                        })
                    })
                    .collect()
            })
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of parameters that carry optimizer moments.
    pub fn tracked(&self) -> usize {
        self.moments.iter().flatten().flatten().map(|m| m.first.len()).sum()
    }

    /// Applies one update. Frozen parameters are never written.
    pub fn step(&mut self, graph: &mut ModelGraph<T>, grads: &Gradients<T>) -> Result<(), NnError> {
        let slots = grads.slots();
        if slots.len() != self.moments.len() {
            return Err(NnError::GradientMismatch("gradient layout differs from the optimizer's".into()));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let t = self.step as i32;
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.epsilon);

        for (ni, node) in graph.nodes_mut().iter_mut().enumerate() {
            for (pi, param) in node.params.iter_mut().enumerate() {
                let grad = slots[ni].get(pi).and_then(|g| g.as_ref());
                let moments = self.moments[ni].get_mut(pi).and_then(|m| m.as_mut());
                match (param.trainable, moments, grad) {
                    (false, None, None) => {}
                    (true, Some(m), Some(g)) if g.shape() == param.value.shape() => {
                        let values = param.value.data_mut();
                        let first = m.first.data_mut();
                        let second = m.second.data_mut();
                        for i in 0..values.len() {
                            let gi = g.data()[i];
                            first[i] = b1 * first[i] + (T::one() - b1) * gi;
                            second[i] = b2 * second[i] + (T::one() - b2) * gi * gi;
                            let m_hat = first[i] / bias1;
                            let v_hat = second[i] / bias2;
                            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                    _ => {
                        return Err(NnError::GradientMismatch(format!(
                            "node {:?} parameter {pi}: gradient does not match its trainable flag",
                            node.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}
