use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{loss, Adam, AdamConfig, LossKind, ModelGraph, NnError, Tensor};
use crate::scalar::Scalar;
use crate::transform::{GrayscaleImage, IMAGE_SIDE};

/// Largest batch pushed through a graph at inference time.
pub(crate) const INFER_CHUNK: usize = 256;

/// Independent sub-seed for `stream` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ (stream + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

pub(crate) struct FitPlan {
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub seed: u64,
}

/// Minibatch Adam over `plan.samples` items. One generator drives both the
/// per-epoch shuffle and dropout, so a fixed seed fixes the whole run.
/// Batches of fewer than two samples are skipped (batchnorm needs two).
pub(crate) fn fit<T: Scalar>(
    graph: &mut ModelGraph<T>,
    plan: &FitPlan,
    mut make_batch: impl FnMut(&[usize]) -> Result<(Tensor<T>, Tensor<T>), NnError>,
) -> Result<TrainLog, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut adam = Adam::new(graph, plan.adam);
    let mut order: Vec<usize> = (0..plan.samples).collect();
    let mut log = TrainLog::default();
    for _ in 0..plan.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(plan.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let (inputs, targets) = make_batch(chunk)?;
            let (out, cache) = graph.forward_train(&inputs, &mut rng)?;
            let (value, grad) = loss(plan.loss, &out, &targets)?;
            let grads = graph.backward(&cache, &grad)?;
            adam.step(graph, &grads)?;
            total += value.to_f64_lossy() * chunk.len() as f64;
            seen += chunk.len();
        }
        log.epoch_losses.push(if seen == 0 { f64::NAN } else { total / seen as f64 });
    }
    Ok(log)
}

/// `[batch, 16, 16, 1]` tensor from images.
pub fn image_batch<T: Scalar>(images: &[&GrayscaleImage]) -> Tensor<T> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_SIDE * IMAGE_SIDE);
    for img in images {
        data.extend(img.pixels.iter().map(|&p| T::from_f32_lossy(p)));
    }
    Tensor::new(vec![images.len(), IMAGE_SIDE, IMAGE_SIDE, 1], data).expect("nonempty image batch")
}
