//! One-vs-all concatenated-CNN base learners.
//!
//! Layer plan (pre-activation blocks, channels last):
//!
//! ```text
//! input 16×16×1
//! block1: BN → ReLU → Conv8 → BN → ReLU → Conv8            16×16×8
//! concat(input, block1)                                    16×16×9
//! block2: BN → ReLU → Conv16 → BN → ReLU → Conv16          16×16×16
//! concat(block2 input, block2)                             16×16×25
//! block3: BN → ReLU → Conv32 → BN → ReLU → Conv32/2         8×8×32
//! block4: Flatten 2048 → Dense64+ReLU → Dropout .2 → Dense32+ReLU → Dropout .2 → Dense16+ReLU
//! output: Dense1 → Sigmoid
//! ```

use crate::config::TrainConfig;
use crate::nn::{GraphBuilder, LayerSpec, LossKind, ModelGraph, NnError, Tensor};
use crate::scalar::Scalar;
use crate::train::{fit, image_batch, FitPlan, TrainLog, INFER_CHUNK};
use crate::transform::{GrayscaleImage, LabeledImage, IMAGE_SIDE};

/// Width of a truncated base learner's output.
pub const TRUNK_WIDTH: usize = 16;
/// Name of the node whose activation a trunk exposes.
pub const TRUNK_OUTPUT: &str = "b4_relu3";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LearnerError {
    #[error("class {class_id} out of range for {classes} classes")]
    ClassOutOfRange { class_id: usize, classes: usize },
    #[error("degenerate one-vs-all view for class {0}: every record has the same target")]
    DegenerateView(usize),
    #[error("graph is not a base learner: {0}")]
    NotABaseLearner(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseLearner<T> {
    pub class_id: usize,
    pub graph: ModelGraph<T>,
}

fn base_layers(bn: &LayerSpec) -> Result<GraphBuilder, NnError> {
    let conv = |k, stride| LayerSpec::Conv2d { out_channels: k, stride };
    let mut b = GraphBuilder::new(&[IMAGE_SIDE, IMAGE_SIDE, 1]);
    let block = |b: &mut GraphBuilder, tag: &str, from: &str, k: usize, last_stride: usize| -> Result<(), NnError> {
        b.add(&format!("{tag}_bn1"), bn.clone(), &[from])?
            .then(&format!("{tag}_relu1"), LayerSpec::Relu)?
            .then(&format!("{tag}_conv1"), conv(k, 1))?
            .then(&format!("{tag}_bn2"), bn.clone())?
            .then(&format!("{tag}_relu2"), LayerSpec::Relu)?
            .then(&format!("{tag}_conv2"), conv(k, last_stride))?;
        Ok(())
    };
    block(&mut b, "b1", GraphBuilder::INPUT, 8, 1)?;
    b.add("cat1", LayerSpec::ConcatChannels, &[GraphBuilder::INPUT, "b1_conv2"])?;
    block(&mut b, "b2", "cat1", 16, 1)?;
    b.add("cat2", LayerSpec::ConcatChannels, &["cat1", "b2_conv2"])?;
    block(&mut b, "b3", "cat2", 32, 2)?;
    b.then("b4_flatten", LayerSpec::Flatten)?
        .then("b4_dense1", LayerSpec::Dense { out_units: 64 })?
        .then("b4_relu1", LayerSpec::Relu)?
        .then("b4_drop1", LayerSpec::Dropout { rate: 0.2 })?
        .then("b4_dense2", LayerSpec::Dense { out_units: 32 })?
        .then("b4_relu2", LayerSpec::Relu)?
        .then("b4_drop2", LayerSpec::Dropout { rate: 0.2 })?
        .then("b4_dense3", LayerSpec::Dense { out_units: TRUNK_WIDTH })?
        .then(TRUNK_OUTPUT, LayerSpec::Relu)?
        .then("out_dense", LayerSpec::Dense { out_units: 1 })?
        .then("out_sigmoid", LayerSpec::Sigmoid)?;
    Ok(b)
}

/// Freshly initialized, fully trainable base learner with the default
/// batchnorm settings.
pub fn build_base_model<T: Scalar>(class_id: usize, seed: u64) -> BaseLearner<T> {
    build_base_model_with(class_id, seed, &TrainConfig::default())
}

/// Same as [`build_base_model`] with batchnorm momentum/epsilon from `config`.
pub fn build_base_model_with<T: Scalar>(class_id: usize, seed: u64, config: &TrainConfig) -> BaseLearner<T> {
    let bn = LayerSpec::BatchNorm { epsilon: config.bn_epsilon, momentum: config.bn_momentum };
    let graph = base_layers(&bn).and_then(|b| b.build(seed)).expect("fixed architecture is valid");
    BaseLearner { class_id, graph }
}

/// Binary targets for one class over a labeled image set.
#[derive(Clone, Debug)]
pub struct BinaryView<'a> {
    pub class_id: usize,
    pub images: Vec<&'a GrayscaleImage>,
    pub targets: Vec<u8>,
}

impl BinaryView<'_> {
    pub fn positives(&self) -> usize {
        self.targets.iter().filter(|&&t| t == 1).count()
    }
}

pub fn to_one_vs_all(dataset: &[LabeledImage], class_id: usize, classes: usize) -> Result<BinaryView<'_>, LearnerError> {
    if class_id >= classes {
        return Err(LearnerError::ClassOutOfRange { class_id, classes });
    }
    Ok(BinaryView {
        class_id,
        images: dataset.iter().map(|r| &r.image).collect(),
        targets: dataset.iter().map(|r| u8::from(r.class_id as usize == class_id)).collect(),
    })
}

/// `#neg / #pos`, capped, or 1 when weighting is off.
pub fn positive_weight(view: &BinaryView<'_>, config: &TrainConfig) -> f64 {
    let pos = view.positives();
    if !config.positive_weighting || pos == 0 {
        return 1.0;
    }
    ((view.targets.len() - pos) as f64 / pos as f64).min(config.positive_weight_cap)
}

/// Binary cross-entropy training of one base learner.
pub fn train_base_learner<T: Scalar>(
    mut learner: BaseLearner<T>,
    view: &BinaryView<'_>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(BaseLearner<T>, TrainLog), LearnerError> {
    let pos = view.positives();
    if pos == 0 || pos == view.targets.len() {
        return Err(LearnerError::DegenerateView(view.class_id));
    }
    let plan = FitPlan {
        samples: view.images.len(),
        batch_size: config.base_batch_size,
        epochs: config.base_epochs,
        adam: config.adam,
        loss: LossKind::BinaryCrossEntropy { positive_weight: positive_weight(view, config) },
        seed,
    };
    let log = fit(&mut learner.graph, &plan, |idx| {
        let imgs: Vec<&GrayscaleImage> = idx.iter().map(|&i| view.images[i]).collect();
        let targets = idx.iter().map(|&i| T::from_u8(view.targets[i]).unwrap()).collect();
        Ok((image_batch(&imgs), Tensor::new(vec![idx.len(), 1], targets)?))
    })?;
    Ok((learner, log))
}

impl<T: Scalar> BaseLearner<T> {
    /// Sigmoid score per image.
    pub fn scores(&self, images: &[&GrayscaleImage]) -> Result<Vec<T>, NnError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            out.extend_from_slice(self.graph.infer(&image_batch(chunk))?.data());
        }
        Ok(out)
    }
}

/// Drops the sigmoid output layer, freezes every remaining parameter and
/// pins batchnorm/dropout to inference. The result maps an image to the
/// 16-wide penultimate activation.
pub fn freeze_and_truncate<T: Scalar>(learner: BaseLearner<T>) -> Result<ModelGraph<T>, LearnerError> {
    let mut graph = learner.graph;
    let keep = graph
        .node_index(TRUNK_OUTPUT)
        .ok_or_else(|| LearnerError::NotABaseLearner(format!("no {TRUNK_OUTPUT} node")))?;
    graph.truncate(keep + 1)?;
    if graph.output_shape() != [TRUNK_WIDTH] {
        return Err(LearnerError::NotABaseLearner(format!("trunk output {:?}", graph.output_shape())));
    }
    graph.set_trainable(false);
    graph.pin_infer();
    Ok(graph)
}

/// Multiclass baseline: argmax over the learners' sigmoid scores, learners
/// given in class order; ties go to the lowest class.
pub fn one_vs_rest_predict<T: Scalar>(learners: &[BaseLearner<T>], images: &[&GrayscaleImage]) -> Result<Vec<usize>, NnError> {
    let scores = learners.iter().map(|l| l.scores(images)).collect::<Result<Vec<_>, _>>()?;
    Ok((0..images.len())
        .map(|i| {
            let mut best = 0;
            for c in 1..scores.len() {
                if scores[c][i] > scores[best][i] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
