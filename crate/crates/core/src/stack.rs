//! Integrated stacking: frozen base-learner trunks feeding a trainable
//! dense meta head, used and saved as one multiclass model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::TrainConfig;
use crate::learner::TRUNK_WIDTH;
use crate::nn::{
    load_checkpoint, save_checkpoint, CheckpointError, ForwardCache, GraphBuilder, Gradients, LayerSpec, LossKind,
    ModelGraph, NnError, Tensor,
};
use crate::scalar::Scalar;
use crate::train::{fit, image_batch, FitPlan, TrainLog, INFER_CHUNK};
use crate::transform::{GrayscaleImage, LabeledImage, IMAGE_SIDE};

pub const MANIFEST_FILE: &str = "manifest";
pub const META_FILE: &str = "meta.bsnn";
const MANIFEST_HEADER: &str = "pktstack-bundle 1";

pub fn trunk_file_name(class_id: usize) -> String {
    format!("base_{class_id}.bsnn")
}

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error("integration needs at least two trunks, got {0}")]
    TooFewTrunks(usize),
    #[error("trunk {index}: expected 16×16×1 → {TRUNK_WIDTH}, got {input:?} → {output:?}")]
    TrunkShapeMismatch { index: usize, input: Vec<usize>, output: Vec<usize> },
    #[error("trunk {0} still has trainable parameters")]
    TrainableTrunk(usize),
    #[error("{classes} class names for {trunks} trunks")]
    ClassCountMismatch { classes: usize, trunks: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("bundle manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),
    #[error("{file}: {source}")]
    Checkpoint { file: String, source: CheckpointError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class_id: usize,
    pub class_name: String,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegratedModel<T> {
    trunks: Vec<ModelGraph<T>>,
    meta: ModelGraph<T>,
    class_names: Vec<String>,
}

/// Activations kept by [`IntegratedModel::forward_train`].
pub struct IntegratedCache<T> {
    trunks: Vec<ForwardCache<T>>,
    meta: ForwardCache<T>,
}

/// Gradients for every parameter slot of the integrated model.
pub struct IntegratedGradients<T> {
    pub trunks: Vec<Gradients<T>>,
    pub meta: Gradients<T>,
}

/// `concat(16·N) → hidden… (Dense+ReLU, dropout after the first) → DenseN → softmax`.
pub fn build_meta_head<T: Scalar>(classes: usize, config: &TrainConfig, seed: u64) -> Result<ModelGraph<T>, NnError> {
    let mut b = GraphBuilder::new(&[TRUNK_WIDTH * classes]);
    for (i, &units) in config.meta_hidden.iter().enumerate() {
        b.then(&format!("meta_dense{}", i + 1), LayerSpec::Dense { out_units: units })?;
        b.then(&format!("meta_relu{}", i + 1), LayerSpec::Relu)?;
        if i == 0 && config.meta_dropout > 0.0 {
            b.then("meta_drop1", LayerSpec::Dropout { rate: config.meta_dropout })?;
        }
    }
    b.then("meta_out", LayerSpec::Dense { out_units: classes })?;
    b.then("meta_softmax", LayerSpec::Softmax)?;
    b.build(seed)
}

fn check_trunks<T: Scalar>(trunks: &[ModelGraph<T>]) -> Result<(), StackError> {
    if trunks.len() < 2 {
        return Err(StackError::TooFewTrunks(trunks.len()));
    }
    for (index, t) in trunks.iter().enumerate() {
        if t.input_shape() != [IMAGE_SIDE, IMAGE_SIDE, 1] || t.output_shape() != [TRUNK_WIDTH] {
            return Err(StackError::TrunkShapeMismatch {
                index,
                input: t.input_shape().to_vec(),
                output: t.output_shape().to_vec(),
            });
        }
        if t.trainable_parameter_count() > 0 {
            return Err(StackError::TrainableTrunk(index));
        }
    }
    Ok(())
}

/// Grafts a freshly initialized meta head onto frozen trunks given in class
/// order.
pub fn build_integrated<T: Scalar>(
    trunks: Vec<ModelGraph<T>>,
    class_names: Vec<String>,
    config: &TrainConfig,
    seed: u64,
) -> Result<IntegratedModel<T>, StackError> {
    check_trunks(&trunks)?;
    if class_names.len() != trunks.len() {
        return Err(StackError::ClassCountMismatch { classes: class_names.len(), trunks: trunks.len() });
    }
    let meta = build_meta_head(trunks.len(), config, seed)?;
    Ok(IntegratedModel { trunks, meta, class_names })
}

fn concat_features<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, NnError> {
    let batch = parts[0].batch();
    let mut data = Vec::with_capacity(batch * TRUNK_WIDTH * parts.len());
    for i in 0..batch {
        for p in parts {
            data.extend_from_slice(p.sample(i));
        }
    }
    Tensor::new(vec![batch, TRUNK_WIDTH * parts.len()], data)
}

impl<T: Scalar> IntegratedModel<T> {
    pub fn classes(&self) -> usize {
        self.trunks.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn trunks(&self) -> &[ModelGraph<T>] {
        &self.trunks
    }

    pub fn meta_head(&self) -> &ModelGraph<T> {
        &self.meta
    }

    /// Direct access to the head, e.g. to load or inspect weights. Trunks
    /// stay immutable.
    pub fn meta_head_mut(&mut self) -> &mut ModelGraph<T> {
        &mut self.meta
    }

    pub fn meta_input_width(&self) -> usize {
        self.meta.input_shape()[0]
    }

    /// Trunk outputs concatenated in class order: `[batch, 16·N]`.
    pub fn trunk_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let parts = self.trunks.iter().map(|t| t.infer(batch)).collect::<Result<Vec<_>, _>>()?;
        concat_features(&parts)
    }

    /// Class probabilities `[batch, N]`.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.meta.infer(&self.trunk_features(batch)?)
    }

    pub fn predict(&self, image: &GrayscaleImage) -> Result<Prediction, NnError> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    pub fn predict_batch(&self, images: &[&GrayscaleImage]) -> Result<Vec<Prediction>, NnError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let probs = self.infer(&image_batch(chunk))?;
            for i in 0..chunk.len() {
                let p: Vec<f64> = probs.sample(i).iter().map(|v| v.to_f64_lossy()).collect();
                let class_id = argmax(&p);
                out.push(Prediction { class_name: self.class_names[class_id].clone(), class_id, probabilities: p });
            }
        }
        Ok(out)
    }

    /// Training-mode pass through the whole model. Trunks are pinned, so
    /// they behave exactly as at inference.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, IntegratedCache<T>), NnError> {
        let mut parts = Vec::with_capacity(self.trunks.len());
        let mut caches = Vec::with_capacity(self.trunks.len());
        for t in &mut self.trunks {
            let (out, cache) = t.forward_train(batch, rng)?;
            parts.push(out);
            caches.push(cache);
        }
        let (out, meta) = self.meta.forward_train(&concat_features(&parts)?, rng)?;
        Ok((out, IntegratedCache { trunks: caches, meta }))
    }

    /// Backward through the meta head and on into the trunks. Frozen trunks
    /// produce no gradient tensors at all.
    pub fn backward(&self, cache: &IntegratedCache<T>, grad_output: &Tensor<T>) -> Result<IntegratedGradients<T>, NnError> {
        let meta = self.meta.backward(&cache.meta, grad_output)?;
        let trunks = self
            .trunks
            .iter()
            .zip(&cache.trunks)
            .map(|(t, c)| {
                let out = c.outputs().last().expect("nonempty trunk");
                // Only reached when a trunk has trainable parameters; the
                // meta head does not expose its input gradient.
                t.backward(c, &Tensor::zeros(out.shape()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(IntegratedGradients { trunks, meta })
    }

    /// Categorical cross-entropy training of the meta head on `d2`. Trunk
    /// outputs are computed once up front: the trunks are frozen and pinned
    /// to inference, so they are a fixed function of the image.
    pub fn train_meta(&mut self, d2: &[LabeledImage], config: &TrainConfig, seed: u64) -> Result<TrainLog, StackError> {
        if d2.is_empty() {
            return Err(StackError::EmptyDataset);
        }
        let n = self.classes();
        if let Some(bad) = d2.iter().find(|r| r.class_id as usize >= n) {
            return Err(StackError::LabelOutOfRange { label: bad.class_id as usize, classes: n });
        }
        check_trunks(&self.trunks)?;
        let images: Vec<&GrayscaleImage> = d2.iter().map(|r| &r.image).collect();
        let width = self.meta_input_width();
        let mut features = Vec::with_capacity(d2.len() * width);
        for chunk in images.chunks(INFER_CHUNK) {
            features.extend_from_slice(self.trunk_features(&image_batch(chunk))?.data());
        }
        let plan = FitPlan {
            samples: d2.len(),
            batch_size: config.meta_batch_size,
            epochs: config.meta_epochs,
            adam: config.adam,
            loss: LossKind::CategoricalCrossEntropy,
            seed,
        };
        let log = fit(&mut self.meta, &plan, |idx| {
            let mut x = Vec::with_capacity(idx.len() * width);
            let mut y = vec![T::zero(); idx.len() * n];
            for (row, &i) in idx.iter().enumerate() {
                x.extend_from_slice(&features[i * width..(i + 1) * width]);
                y[row * n + d2[i].class_id as usize] = T::one();
            }
            Ok((Tensor::new(vec![idx.len(), width], x)?, Tensor::new(vec![idx.len(), n], y)?))
        })?;
        Ok(log)
    }
}

fn crc_hex(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

/// Writes `manifest`, one `base_<id>.bsnn` per trunk and `meta.bsnn`.
///
/// Manifest lines (tab separated):
/// ```text
/// pktstack-bundle 1
/// classes<TAB><N>
/// class<TAB><id><TAB><name><TAB>base_<id>.bsnn<TAB><crc32 hex>
/// meta<TAB>meta.bsnn<TAB><crc32 hex>
/// ```
pub fn save_integrated<T: Scalar>(model: &IntegratedModel<T>, dir: &Path) -> Result<(), StackError> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\nclasses\t{}\n", model.classes());
    for (id, (trunk, name)) in model.trunks.iter().zip(&model.class_names).enumerate() {
        let bytes = save_checkpoint(trunk);
        let file = trunk_file_name(id);
        fs::write(dir.join(&file), &bytes)?;
        writeln!(manifest, "class\t{id}\t{name}\t{file}\t{}", crc_hex(&bytes)).unwrap();
    }
    let meta = save_checkpoint(&model.meta);
    fs::write(dir.join(META_FILE), &meta)?;
    writeln!(manifest, "meta\t{META_FILE}\t{}", crc_hex(&meta)).unwrap();
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

fn load_checked<T: Scalar>(dir: &Path, file: &str, crc: &str) -> Result<ModelGraph<T>, StackError> {
    if file.contains('/') || file.contains('\\') {
        return Err(StackError::ManifestMismatch(format!("file name {file:?}")));
    }
    let path = dir.join(file);
    if !path.is_file() {
        return Err(StackError::ManifestMismatch(format!("{file} is listed but missing")));
    }
    let bytes = fs::read(&path)?;
    if crc_hex(&bytes) != crc {
        return Err(StackError::ChecksumMismatch(file.to_string()));
    }
    load_checkpoint(&bytes).map_err(|source| match source {
        CheckpointError::ChecksumMismatch => StackError::ChecksumMismatch(file.to_string()),
        source => StackError::Checkpoint { file: file.to_string(), source },
    })
}

pub fn load_integrated<T: Scalar>(dir: &Path) -> Result<IntegratedModel<T>, StackError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(StackError::ManifestMismatch("missing header".into()));
    }
    let mut declared = None;
    let mut entries: Vec<(usize, String, String, String)> = Vec::new();
    let mut meta_entry = None;
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || StackError::ManifestMismatch(format!("bad line {line:?}"));
        match fields.as_slice() {
            ["classes", n] => declared = Some(n.parse::<usize>().map_err(|_| bad())?),
            ["class", id, name, file, crc] => {
                entries.push((id.parse().map_err(|_| bad())?, name.to_string(), file.to_string(), crc.to_string()))
            }
            ["meta", file, crc] => meta_entry = Some((file.to_string(), crc.to_string())),
            _ => return Err(bad()),
        }
    }
    let n = declared.ok_or_else(|| StackError::ManifestMismatch("no class count".into()))?;
    if entries.len() != n || entries.iter().enumerate().any(|(i, e)| e.0 != i) {
        return Err(StackError::ManifestMismatch(format!("{} trunk entries for {n} classes", entries.len())));
    }
    let present = entries.iter().filter(|e| dir.join(&e.2).is_file()).count();
    if present != n {
        return Err(StackError::ManifestMismatch(format!("{present} trunk files present for {n} classes")));
    }
    let (meta_file, meta_crc) = meta_entry.ok_or_else(|| StackError::ManifestMismatch("no meta entry".into()))?;
    let mut trunks = Vec::with_capacity(n);
    let mut class_names = Vec::with_capacity(n);
    for (_, name, file, crc) in entries {
        trunks.push(load_checked(dir, &file, &crc)?);
        class_names.push(name);
    }
    let meta = load_checked::<T>(dir, &meta_file, &meta_crc)?;
    check_trunks(&trunks)?;
    if meta.input_shape() != [TRUNK_WIDTH * n] || meta.output_shape() != [n] {
        return Err(StackError::ManifestMismatch(format!(
            "meta head {:?} → {:?} for {n} classes",
            meta.input_shape(),
            meta.output_shape()
        )));
    }
    Ok(IntegratedModel { trunks, meta, class_names })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn meta_head_widths() {
        let cfg = TrainConfig::default();
        let head: ModelGraph<f32> = build_meta_head(15, &cfg, 0).unwrap();
        assert_eq!(head.input_shape(), [240]);
        assert_eq!(head.output_shape(), [15]);
        let dense: Vec<_> = head
            .nodes()
            .iter()
            .filter_map(|n| match n.spec {
                LayerSpec::Dense { out_units } => Some(out_units),
                _ => None,
            })
            .collect();
        assert_eq!(dense, [128, 64, 15]);
    }
}
