use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::ops::{self, BatchNormTrace, KERNEL};
use crate::nn::{NnError, Tensor};
use crate::scalar::Scalar;

/// One layer kind and its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// 3×3, same padding.
    Conv2d { out_channels: usize, stride: usize },
    BatchNorm { epsilon: f64, momentum: f64 },
    Relu,
    Dense { out_units: usize },
    Dropout { rate: f64 },
    Flatten,
    ConcatChannels,
    Sigmoid,
    Softmax,
}

impl LayerSpec {
    pub const DEFAULT_BN_EPSILON: f64 = 1e-3;
    pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm { epsilon: Self::DEFAULT_BN_EPSILON, momentum: Self::DEFAULT_BN_MOMENTUM }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ConcatChannels => "concat_channels",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidHyperparameter(msg));
        match *self {
            LayerSpec::Conv2d { out_channels, stride } => {
                if out_channels == 0 || !(stride == 1 || stride == 2) {
                    return bad(format!("conv2d out_channels={out_channels} stride={stride}"));
                }
            }
            LayerSpec::Dense { out_units: 0 } => return bad("dense with zero units".into()),
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return bad(format!("dropout rate {rate}"));
            }
            // Written so that a NaN epsilon is rejected too.
            LayerSpec::BatchNorm { epsilon, momentum } if epsilon.is_nan() || epsilon <= 0.0 || !(0.0..=1.0).contains(&momentum) => {
                return bad(format!("batchnorm epsilon={epsilon} momentum={momentum}"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output shape and parameter shapes for the given input shapes.
    fn infer(&self, inputs: &[&[usize]]) -> Result<(Vec<usize>, Vec<Vec<usize>>), NnError> {
        self.validate()?;
        let arity = if matches!(self, LayerSpec::ConcatChannels) { None } else { Some(1) };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(NnError::InvalidGraph(format!("{} takes {n} input, got {}", self.kind(), inputs.len())));
            }
        } else if inputs.len() < 2 {
            return Err(NnError::InvalidGraph("concat_channels needs at least two inputs".into()));
        }
        let x = inputs[0];
        Ok(match *self {
            LayerSpec::Conv2d { out_channels, stride } => {
                let &[h, w, c] = x else {
                    return Err(NnError::ShapeMismatch(format!("conv2d input {x:?}")));
                };
                let (oh, _) = ops::same_padding(h, stride);
                let (ow, _) = ops::same_padding(w, stride);
                (vec![oh, ow, out_channels], vec![vec![KERNEL, KERNEL, c, out_channels], vec![out_channels]])
            }
            LayerSpec::BatchNorm { .. } => {
                let c = *x.last().unwrap();
                (x.to_vec(), vec![vec![c], vec![c]])
            }
            LayerSpec::Dense { out_units } => {
                let &[i] = x else {
                    return Err(NnError::ShapeMismatch(format!("dense input {x:?}; flatten first")));
                };
                (vec![out_units], vec![vec![i, out_units], vec![out_units]])
            }
            LayerSpec::Flatten => (vec![x.iter().product()], vec![]),
            LayerSpec::ConcatChannels => {
                let lead = &x[..x.len() - 1];
                let mut c = 0;
                for s in inputs {
                    if s.len() != x.len() || &s[..s.len() - 1] != lead {
                        return Err(NnError::ConcatSpatialMismatch(format!("{x:?} vs {s:?}")));
                    }
                    c += s[s.len() - 1];
                }
                let mut out = lead.to_vec();
                out.push(c);
                (out, vec![])
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Sigmoid | LayerSpec::Softmax => (x.to_vec(), vec![]),
        })
    }
}

/// Where a node reads one of its operands from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Batchnorm moving averages; never trained by gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<Source>,
    pub out_shape: Vec<usize>,
    pub params: Vec<Param<T>>,
    pub running: Option<RunningStats<T>>,
}

/// Collects layers in topological order before parameters are allocated.
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    nodes: Vec<PendingNode>,
}

/// Name, layer, inputs, output shape and input shapes of a node not yet built.
type PendingNode = (String, LayerSpec, Vec<Source>, Vec<usize>, Vec<Vec<usize>>);

impl GraphBuilder {
    pub const INPUT: &'static str = "input";

    pub fn new(input_shape: &[usize]) -> Self {
        Self { input_shape: input_shape.to_vec(), nodes: Vec::new() }
    }

    fn resolve(&self, name: &str) -> Result<Source, NnError> {
        if name == Self::INPUT {
            return Ok(Source::Input);
        }
        self.nodes
            .iter()
            .position(|n| n.0 == name)
            .map(Source::Node)
            .ok_or_else(|| NnError::InvalidGraph(format!("unknown producer {name:?}")))
    }

    fn shape_of(&self, source: Source) -> &[usize] {
        match source {
            Source::Input => &self.input_shape,
            Source::Node(i) => &self.nodes[i].3,
        }
    }

    /// Appends a node reading from the named producers (`"input"` is the graph input).
    pub fn add(&mut self, name: &str, spec: LayerSpec, inputs: &[&str]) -> Result<&mut Self, NnError> {
        let sources = inputs.iter().map(|n| self.resolve(n)).collect::<Result<Vec<_>, _>>()?;
        self.add_sources(name, spec, sources)
    }

    /// Appends a node fed by the previous node (or the graph input if first).
    pub fn then(&mut self, name: &str, spec: LayerSpec) -> Result<&mut Self, NnError> {
        let prev = if self.nodes.is_empty() { Source::Input } else { Source::Node(self.nodes.len() - 1) };
        self.add_sources(name, spec, vec![prev])
    }

    pub(crate) fn add_sources(&mut self, name: &str, spec: LayerSpec, sources: Vec<Source>) -> Result<&mut Self, NnError> {
        if name == Self::INPUT || self.nodes.iter().any(|n| n.0 == name) {
            return Err(NnError::InvalidGraph(format!("duplicate node name {name:?}")));
        }
        for s in &sources {
            if let Source::Node(i) = *s {
                if i >= self.nodes.len() {
                    return Err(NnError::InvalidGraph(format!("{name:?} reads a later node")));
                }
            }
        }
        let shapes: Vec<&[usize]> = sources.iter().map(|&s| self.shape_of(s)).collect();
        let (out, params) = spec.infer(&shapes)?;
        self.nodes.push((name.to_string(), spec, sources, out, params));
        Ok(self)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.nodes.last().map(|n| n.3.as_slice()).unwrap_or(&self.input_shape)
    }

    /// Allocates parameters: He-uniform weights, zero biases, unit gamma,
    /// zero beta, each layer from its own generator derived from `seed`.
    pub fn build<T: Scalar>(self, seed: u64) -> Result<ModelGraph<T>, NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::InvalidGraph("graph has no nodes".into()));
        }
        let nodes = self
            .nodes
            .into_iter()
            .enumerate()
            .map(|(index, (name, spec, inputs, out_shape, param_shapes))| {
                let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, index));
                let (params, running) = init_params(&spec, &param_shapes, &mut rng);
                Node { name, spec, inputs, out_shape, params, running }
            })
            .collect();
        Ok(ModelGraph { input_shape: self.input_shape, nodes, pinned_infer: false })
    }
}

fn layer_seed(seed: u64, index: usize) -> u64 {
    crate::train::derive_seed(seed, index as u64)
}

fn init_params<T: Scalar>(spec: &LayerSpec, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> (Vec<Param<T>>, Option<RunningStats<T>>) {
    let he_uniform = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
        let limit = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("parameter shape")
    };
    let trainable = |value| Param { value, trainable: true };
    match spec {
        LayerSpec::Conv2d { .. } => {
            let fan_in = shapes[0][0] * shapes[0][1] * shapes[0][2];
            (vec![trainable(he_uniform(&shapes[0], fan_in, rng)), trainable(Tensor::zeros(&shapes[1]))], None)
        }
        LayerSpec::Dense { .. } => {
            let fan_in = shapes[0][0];
            (vec![trainable(he_uniform(&shapes[0], fan_in, rng)), trainable(Tensor::zeros(&shapes[1]))], None)
        }
        LayerSpec::BatchNorm { .. } => {
            let c = shapes[0][0];
            (
                vec![trainable(Tensor::filled(&[c], T::one())), trainable(Tensor::zeros(&[c]))],
                Some(RunningStats { mean: vec![T::zero(); c], var: vec![T::one(); c] }),
            )
        }
        _ => (Vec::new(), None),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug)]
enum Trace<T> {
    Plain,
    BatchNorm(BatchNormTrace<T>),
    Dropout(Tensor<T>),
}

/// Activations recorded by [`ModelGraph::forward_train`].
#[derive(Debug)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    traces: Vec<Trace<T>>,
    infer_mode: bool,
}

impl<T> ForwardCache<T> {
    pub fn outputs(&self) -> &[Tensor<T>] {
        &self.outputs
    }
}

/// Parameter gradients, one slot per parameter. Frozen parameters never get
/// a tensor allocated.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    per_node: Vec<Vec<Option<Tensor<T>>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, node: usize, param: usize) -> Option<&Tensor<T>> {
        self.per_node.get(node)?.get(param)?.as_ref()
    }

    /// Number of gradient tensors actually allocated.
    pub fn allocated(&self) -> usize {
        self.per_node.iter().flatten().filter(|g| g.is_some()).count()
    }

    pub(crate) fn slots(&self) -> &[Vec<Option<Tensor<T>>>] {
        &self.per_node
    }
}

/// Ordered layer graph; the last node is the output.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) pinned_infer: bool,
}

impl<T: Scalar> ModelGraph<T> {
    /// Rebuilds a graph from explicit nodes, re-deriving every shape.
    pub(crate) fn from_parts(input_shape: Vec<usize>, parts: Vec<(String, LayerSpec, Vec<Source>)>) -> Result<GraphBuilder, NnError> {
        let mut b = GraphBuilder::new(&input_shape);
        for (name, spec, sources) in parts {
            b.add_sources(&name, spec, sources)?;
        }
        Ok(b)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes.last().expect("nonempty graph").out_shape
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// True once batchnorm and dropout are locked to inference behavior.
    pub fn is_pinned_infer(&self) -> bool {
        self.pinned_infer
    }

    pub fn pin_infer(&mut self) {
        self.pinned_infer = true;
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.nodes.iter_mut().flat_map(|n| n.params.iter_mut()) {
            p.trainable = trainable;
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.params).map(|p| p.value.len()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.params).filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Drops every node from `len` on; the new last node becomes the output.
    pub fn truncate(&mut self, len: usize) -> Result<(), NnError> {
        if len == 0 || len > self.nodes.len() {
            return Err(NnError::InvalidGraph(format!("cannot keep {len} of {} nodes", self.nodes.len())));
        }
        self.nodes.truncate(len);
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<(), NnError> {
        if batch.shape().get(1..) != Some(self.input_shape.as_slice()) {
            return Err(NnError::ShapeMismatch(format!(
                "batch {:?} for graph input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn operands<'a>(&self, node: &Node<T>, input: &'a Tensor<T>, outputs: &'a [Tensor<T>]) -> Vec<&'a Tensor<T>> {
        node.inputs
            .iter()
            .map(|s| match *s {
                Source::Input => input,
                Source::Node(i) => &outputs[i],
            })
            .collect()
    }

    fn run_infer(node: &Node<T>, xs: &[&Tensor<T>]) -> Result<Tensor<T>, NnError> {
        let x = xs[0];
        Ok(match node.spec {
            LayerSpec::Conv2d { stride, .. } => ops::conv2d_forward(x, &node.params[0].value, &node.params[1].value, stride)?,
            LayerSpec::BatchNorm { epsilon, .. } => {
                let rs = node.running.as_ref().expect("batchnorm statistics");
                ops::batchnorm_forward_infer(x, &node.params[0].value, &node.params[1].value, &rs.mean, &rs.var, T::from_f64_lossy(epsilon))?
            }
            LayerSpec::Dense { .. } => ops::dense_forward(x, &node.params[0].value, &node.params[1].value)?,
            LayerSpec::Relu => ops::relu_forward(x),
            LayerSpec::Dropout { .. } => x.clone(),
            LayerSpec::Flatten => {
                let b = x.batch();
                x.clone().reshape(&[b, x.sample_len()])?
            }
            LayerSpec::ConcatChannels => ops::concat_channels_forward(xs)?,
            LayerSpec::Sigmoid => ops::sigmoid_forward(x),
            LayerSpec::Softmax => ops::softmax_forward(x),
        })
    }

    /// Inference-mode activations of every node.
    pub fn activations(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnError> {
        self.check_batch(batch)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = Self::run_infer(node, &self.operands(node, batch, &outputs))?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Inference-mode forward pass. Read-only, so a trained graph can be
    /// shared between threads.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(self.activations(batch)?.pop().expect("nonempty graph"))
    }

    /// Training-mode forward pass: batch statistics (and running-stat
    /// updates) for batchnorm, sampled masks for dropout. A graph pinned to
    /// inference behaves as in [`ModelGraph::infer`] but still records a cache.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, ForwardCache<T>), NnError> {
        self.check_batch(batch)?;
        let infer_mode = self.pinned_infer;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut traces = Vec::with_capacity(self.nodes.len());
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            let xs = self.operands(node, batch, &outputs);
            let (out, trace) = match node.spec {
                LayerSpec::BatchNorm { epsilon, momentum } if !infer_mode => {
                    let (out, tr) = ops::batchnorm_forward_train(xs[0], &node.params[0].value, &node.params[1].value, T::from_f64_lossy(epsilon))?;
                    let m = T::from_f64_lossy(momentum);
                    let rs = self.nodes[idx].running.as_mut().expect("batchnorm statistics");
                    for (r, &b) in rs.mean.iter_mut().zip(&tr.batch_mean) {
                        *r = m * *r + (T::one() - m) * b;
                    }
                    for (r, &b) in rs.var.iter_mut().zip(&tr.batch_var) {
                        *r = m * *r + (T::one() - m) * b;
                    }
                    (out, Trace::BatchNorm(tr))
                }
                LayerSpec::Dropout { rate } if !infer_mode => {
                    let (out, mask) = ops::dropout_forward(xs[0], rate, rng);
                    (out, Trace::Dropout(mask))
                }
                _ => (Self::run_infer(node, &xs)?, Trace::Plain),
            };
            outputs.push(out);
            traces.push(trace);
        }
        let out = outputs.last().expect("nonempty graph").clone();
        Ok((out, ForwardCache { input: batch.clone(), outputs, traces, infer_mode }))
    }

    /// Which nodes lie on a path from some trainable parameter.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let own = node.params.iter().any(|p| p.trainable);
            let upstream = node.inputs.iter().any(|s| matches!(*s, Source::Node(i) if needs[i]));
            needs.push(own || upstream);
        }
        needs
    }

    /// Gradients of the trainable parameters given the loss gradient with
    /// respect to the graph output.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_output: &Tensor<T>) -> Result<Gradients<T>, NnError> {
        let mut per_node: Vec<Vec<Option<Tensor<T>>>> = self.nodes.iter().map(|n| vec![None; n.params.len()]).collect();
        if cache.outputs.len() != self.nodes.len() {
            return Err(NnError::InvalidGraph("cache from a different graph".into()));
        }
        let needs = self.needs_grad();
        let last = self.nodes.len() - 1;
        if !needs[last] {
            return Ok(Gradients { per_node });
        }
        if grad_output.shape() != cache.outputs[last].shape() {
            return Err(NnError::ShapeMismatch(format!(
                "output gradient {:?} for output {:?}",
                grad_output.shape(),
                cache.outputs[last].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[last] = Some(grad_output.clone());

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !needs[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            let xs = self.operands(node, &cache.input, &cache.outputs);
            let out = &cache.outputs[idx];
            let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; node.params.len()];
            let input_grads: Vec<Tensor<T>> = match (&node.spec, &cache.traces[idx]) {
                (LayerSpec::Conv2d { stride, .. }, _) => {
                    let cg = ops::conv2d_backward(&g, xs[0], &node.params[0].value, *stride)?;
                    param_grads = vec![Some(cg.weights), Some(cg.bias)];
                    vec![cg.input]
                }
                (LayerSpec::Dense { .. }, _) => {
                    let dg = ops::dense_backward(&g, xs[0], &node.params[0].value)?;
                    param_grads = vec![Some(dg.scale), Some(dg.shift)];
                    vec![dg.input]
                }
                (LayerSpec::BatchNorm { .. }, Trace::BatchNorm(tr)) => {
                    let bg = ops::batchnorm_backward_train(&g, tr, &node.params[0].value)?;
                    param_grads = vec![Some(bg.scale), Some(bg.shift)];
                    vec![bg.input]
                }
                (LayerSpec::BatchNorm { epsilon, .. }, _) => {
                    let rs = node.running.as_ref().expect("batchnorm statistics");
                    let bg = ops::batchnorm_backward_infer(&g, xs[0], &node.params[0].value, &rs.mean, &rs.var, T::from_f64_lossy(*epsilon))?;
                    param_grads = vec![Some(bg.scale), Some(bg.shift)];
                    vec![bg.input]
                }
                (LayerSpec::Relu, _) => vec![ops::relu_backward(&g, xs[0])],
                (LayerSpec::Dropout { .. }, Trace::Dropout(mask)) => vec![ops::dropout_apply(&g, mask)],
                (LayerSpec::Dropout { .. }, _) => vec![g],
                (LayerSpec::Flatten, _) => vec![g.reshape(xs[0].shape())?],
                (LayerSpec::ConcatChannels, _) => {
                    let channels: Vec<usize> = xs.iter().map(|x| *x.shape().last().unwrap()).collect();
                    ops::concat_channels_backward(&g, &channels)?
                }
                (LayerSpec::Sigmoid, _) => vec![ops::sigmoid_backward(&g, out)],
                (LayerSpec::Softmax, _) => vec![ops::softmax_backward(&g, out)],
            };
            for (slot, (p, grad)) in per_node[idx].iter_mut().zip(node.params.iter().zip(param_grads)) {
                if p.trainable {
                    *slot = grad;
                }
            }
            for (source, gi) in node.inputs.iter().zip(input_grads) {
                if let Source::Node(j) = *source {
                    if !needs[j] {
                        continue;
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&gi),
                        empty => *empty = Some(gi),
                    }
                }
            }
        }
        debug_assert!(!cache.infer_mode || self.pinned_infer);
        Ok(Gradients { per_node })
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    name: n.name.clone(),
                    spec: n.spec.clone(),
                    inputs: n.inputs.clone(),
                    out_shape: n.out_shape.clone(),
                    params: n.params.iter().map(|p| Param { value: p.value.cast(), trainable: p.trainable }).collect(),
                    running: n.running.as_ref().map(|r| RunningStats {
                        mean: r.mean.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                        var: r.var.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    }),
                })
                .collect(),
            pinned_infer: self.pinned_infer,
        }
    }
}
