//! Declarative layer graphs and their executor.
//!
//! A [`NetworkSpec`] is a topologically ordered list of nodes. Each node
//! consumes named inputs (either declared input slots or earlier nodes) and
//! produces one activation. A [`Network`] binds a spec to its parameters and
//! keeps whatever the last forward pass needs for the backward pass.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, BatchNormCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LEAKY_RELU_SLOPE: f64 = 0.1;
pub const BATCHNORM_EPSILON: f64 = 1e-3;
pub const BATCHNORM_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Batchnorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    Maxpool2,
    Upsample2,
    Concat,
    Add,
    Conv1x1Head {
        in_channels: usize,
        out_channels: usize,
    },
    Sigmoid,
    Softmax,
}

impl LayerKind {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerKind::Batchnorm {
            channels,
            epsilon: BATCHNORM_EPSILON,
            momentum: BATCHNORM_MOMENTUM,
        }
    }

    pub fn leaky_relu() -> Self {
        LayerKind::LeakyRelu {
            slope: LEAKY_RELU_SLOPE,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Batchnorm { .. } => "batchnorm",
            LayerKind::LeakyRelu { .. } => "leaky_relu",
            LayerKind::Maxpool2 => "maxpool2",
            LayerKind::Upsample2 => "upsample2",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::Conv1x1Head { .. } => "conv1x1_head",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::LeakyRelu { slope } if slope != LEAKY_RELU_SLOPE => Err(
                Error::InvalidArgument(format!("leaky_relu slope must be 0.1, got {slope}")),
            ),
            LayerKind::Batchnorm { epsilon, .. } if epsilon <= 0.0 => Err(Error::InvalidArgument(
                format!("batchnorm epsilon must be positive, got {epsilon}"),
            )),
            LayerKind::Conv2d { kernel, .. } if kernel % 2 == 0 => Err(Error::InvalidArgument(
                format!("conv2d kernel must be odd, got {kernel}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSlot {
    pub name: String,
    pub channels: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: LayerKind,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSlot {
    pub name: String,
    pub node: String,
}

/// Named shape of one trainable parameter or persistent buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: crate::netbuilder::NetKind,
    pub inputs: Vec<InputSlot>,
    pub nodes: Vec<Node>,
    pub outputs: Vec<OutputSlot>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Checks that every node refers to known producers and has a valid layer.
    pub fn validate(&self) -> Result<()> {
        let mut known: HashMap<&str, ()> = self.inputs.iter().map(|s| (s.name.as_str(), ())).collect();
        for node in &self.nodes {
            node.layer.validate()?;
            for inp in &node.inputs {
                if !known.contains_key(inp.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "node `{}` consumes unknown producer `{inp}`",
                        node.name
                    )));
                }
            }
            if known.insert(node.name.as_str(), ()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate node name `{}`", node.name)));
            }
        }
        for out in &self.outputs {
            if !known.contains_key(out.node.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "output `{}` refers to unknown node `{}`",
                    out.name, out.node
                )));
            }
        }
        Ok(())
    }

    pub fn input(&self, name: &str) -> Option<&InputSlot> {
        self.inputs.iter().find(|s| s.name == name)
    }

    /// Parameters and buffers in deterministic node order.
    pub fn parameters(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let p = |suffix: &str, shape: Vec<usize>, trainable| ParamInfo {
                name: format!("{}.{suffix}", node.name),
                shape,
                trainable,
            };
            match node.layer {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    out.push(p("weight", vec![out_channels, in_channels, kernel, kernel], true));
                    out.push(p("bias", vec![out_channels], true));
                }
                LayerKind::Conv1x1Head {
                    in_channels,
                    out_channels,
                } => {
                    out.push(p("weight", vec![out_channels, in_channels, 1, 1], true));
                    out.push(p("bias", vec![out_channels], true));
                }
                LayerKind::Batchnorm { channels, .. } => {
                    out.push(p("gamma", vec![channels], true));
                    out.push(p("beta", vec![channels], true));
                    out.push(p("running_mean", vec![channels], false));
                    out.push(p("running_var", vec![channels], false));
                }
                _ => {}
            }
        }
        out
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

/// Trainable parameters (with gradient slots) and non-trainable buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Fan-in scaled uniform initialisation from a seeded generator.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for info in spec.parameters() {
            let n: usize = info.shape.iter().product();
            let suffix = info.name.rsplit('.').next().unwrap_or_default();
            let data: Vec<f64> = match suffix {
                "weight" => {
                    let fan_in: usize = info.shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                }
                "gamma" | "running_var" => vec![1.0; n],
                _ => vec![0.0; n],
            };
            let t = Tensor::new(info.shape.clone(), data).expect("shape from spec");
            if info.trainable {
                store.params.insert(info.name, t);
            } else {
                store.buffers.insert(info.name, t);
            }
        }
        store
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    fn buffer(&self, name: &str) -> &Tensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("buffer `{name}` missing from store"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Batch statistics in batch-norm; running statistics are updated.
    Train,
    /// Like `Train`, but running statistics move towards the batch
    /// statistics by the given weight instead of the layer momentum.
    /// Weights `1/k` for batches `k = 1, 2, ...` give a plain average.
    Recalibrate(f64),
    /// Running statistics in batch-norm.
    Eval,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    BatchNorm(BatchNormCache),
    Argmax(Vec<usize>),
    ConcatChannels(Vec<usize>),
}

struct Cache {
    inputs: HashMap<String, Tensor>,
    acts: Vec<Tensor>,
    aux: Vec<Aux>,
}

/// A network specification bound to parameters.
pub struct Network {
    spec: NetworkSpec,
    store: ParamStore,
    index: HashMap<String, usize>,
    cache: Option<Cache>,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let store = ParamStore::init(&spec, seed);
        Network::with_params(spec, store)
    }

    pub fn with_params(spec: NetworkSpec, store: ParamStore) -> Result<Self> {
        spec.validate()?;
        for info in spec.parameters() {
            let t = store
                .get(&info.name)
                .ok_or_else(|| Error::MissingBlob(info.name.clone()))?;
            if t.shape() != info.shape.as_slice() {
                return Err(Error::Shape {
                    location: info.name.clone(),
                    expected: info.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        let index = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.clone(), i))
            .collect();
        Ok(Network {
            spec,
            store,
            index,
            cache: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_parts(self) -> (NetworkSpec, ParamStore) {
        (self.spec, self.store)
    }

    fn check_inputs(&self, inputs: &HashMap<String, Tensor>) -> Result<usize> {
        let mut batch = None;
        for slot in &self.spec.inputs {
            let t = inputs.get(&slot.name).ok_or_else(|| {
                Error::InvalidArgument(format!("missing input `{}`", slot.name))
            })?;
            let b = t.shape().first().copied().unwrap_or(0);
            let expected = vec![b, slot.channels, slot.size, slot.size];
            if t.shape() != expected.as_slice() || batch.is_some_and(|n| n != b) {
                return Err(Error::Shape {
                    location: format!("input `{}`", slot.name),
                    expected: vec![batch.unwrap_or(b), slot.channels, slot.size, slot.size],
                    actual: t.shape().to_vec(),
                });
            }
            batch = Some(b);
        }
        batch.ok_or_else(|| Error::InvalidArgument("network declares no inputs".into()))
    }

    /// Runs the graph, recording activations for a later [`Network::backward`].
    pub fn forward(
        &mut self,
        inputs: HashMap<String, Tensor>,
        mode: Mode,
    ) -> Result<BTreeMap<String, Tensor>> {
        self.check_inputs(&inputs)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.spec.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.spec.nodes.len());

        for node in &self.spec.nodes {
            let fetch = |name: &str| -> &Tensor {
                match self.index.get(name) {
                    Some(&i) => &acts[i],
                    None => &inputs[name],
                }
            };
            let args: Vec<&Tensor> = node.inputs.iter().map(|n| fetch(n)).collect();
            let wrap = |e: Error| match e {
                Error::Shape {
                    expected, actual, ..
                } => Error::Shape {
                    location: format!("layer `{}` ({})", node.name, node.layer.name()),
                    expected,
                    actual,
                },
                Error::InvalidArgument(m) => {
                    Error::InvalidArgument(format!("layer `{}`: {m}", node.name))
                }
                other => other,
            };
            let (out, a) = match node.layer {
                LayerKind::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => {
                    check_channels(&node.name, args[0], in_channels)?;
                    let w = self.store.param(&format!("{}.weight", node.name));
                    let b = self.store.param(&format!("{}.bias", node.name));
                    let y = kernels::conv2d_forward(args[0], w.data(), b.data(), kernel)
                        .map_err(wrap)?;
                    (y, Aux::None)
                }
                LayerKind::Conv1x1Head { in_channels, .. } => {
                    check_channels(&node.name, args[0], in_channels)?;
                    let w = self.store.param(&format!("{}.weight", node.name));
                    let b = self.store.param(&format!("{}.bias", node.name));
                    let y = kernels::conv2d_forward(args[0], w.data(), b.data(), 1).map_err(wrap)?;
                    (y, Aux::None)
                }
                LayerKind::Batchnorm {
                    channels,
                    epsilon,
                    momentum,
                } => {
                    check_channels(&node.name, args[0], channels)?;
                    let gamma = self.store.param(&format!("{}.gamma", node.name)).data().to_vec();
                    let beta = self.store.param(&format!("{}.beta", node.name)).data().to_vec();
                    let rm_key = format!("{}.running_mean", node.name);
                    let rv_key = format!("{}.running_var", node.name);
                    match mode {
                        Mode::Train | Mode::Recalibrate(_) => {
                            let keep = match mode {
                                Mode::Recalibrate(w) => 1.0 - w,
                                _ => momentum,
                            };
                            let (y, c, stats) =
                                kernels::batchnorm_forward_train(args[0], &gamma, &beta, epsilon)
                                    .map_err(wrap)?;
                            let rm = self.store.buffers.get_mut(&rm_key).expect("buffer");
                            for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                                *r = keep * *r + (1.0 - keep) * m;
                            }
                            let rv = self.store.buffers.get_mut(&rv_key).expect("buffer");
                            for (r, v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                                *r = keep * *r + (1.0 - keep) * v;
                            }
                            (y, Aux::BatchNorm(c))
                        }
                        Mode::Eval => {
                            let rm = self.store.buffer(&rm_key);
                            let rv = self.store.buffer(&rv_key);
                            let (y, c) = kernels::batchnorm_forward_eval(
                                args[0],
                                &gamma,
                                &beta,
                                rm.data(),
                                rv.data(),
                                epsilon,
                            )
                            .map_err(wrap)?;
                            (y, Aux::BatchNorm(c))
                        }
                    }
                }
                LayerKind::LeakyRelu { slope } => {
                    (kernels::leaky_relu_forward(args[0], slope), Aux::None)
                }
                LayerKind::Maxpool2 => {
                    let (y, arg) = kernels::maxpool2_forward(args[0]).map_err(wrap)?;
                    (y, Aux::Argmax(arg))
                }
                LayerKind::Upsample2 => (kernels::upsample2_forward(args[0]).map_err(wrap)?, Aux::None),
                LayerKind::Concat => {
                    let chans = args
                        .iter()
                        .map(|t| t.dims4().map(|d| d[1]))
                        .collect::<Result<Vec<_>>>()
                        .map_err(wrap)?;
                    (
                        kernels::concat_forward(&args).map_err(wrap)?,
                        Aux::ConcatChannels(chans),
                    )
                }
                LayerKind::Add => {
                    let mut y = args[0].clone();
                    for other in &args[1..] {
                        if other.shape() != y.shape() {
                            return Err(wrap(Error::Shape {
                                location: String::new(),
                                expected: y.shape().to_vec(),
                                actual: other.shape().to_vec(),
                            }));
                        }
                        for (a, b) in y.data_mut().iter_mut().zip(other.data()) {
                            *a += b;
                        }
                    }
                    (y, Aux::None)
                }
                LayerKind::Sigmoid => (kernels::sigmoid_forward(args[0]), Aux::None),
                LayerKind::Softmax => (kernels::softmax_forward(args[0]).map_err(wrap)?, Aux::None),
            };
            acts.push(out);
            aux.push(a);
        }

        let outputs = self
            .spec
            .outputs
            .iter()
            .map(|o| (o.name.clone(), acts[self.index[&o.node]].clone()))
            .collect();
        self.cache = Some(Cache { inputs, acts, aux });
        Ok(outputs)
    }

    /// Back-propagates output gradients; fills the gradient slot of every
    /// trainable parameter (overwriting previous contents) and returns the
    /// gradients with respect to the network inputs.
    pub fn backward(
        &mut self,
        output_grads: &BTreeMap<String, Tensor>,
    ) -> Result<HashMap<String, Tensor>> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.spec.nodes.len()];
        let mut input_grads: HashMap<String, Tensor> = HashMap::new();

        for out in &self.spec.outputs {
            if let Some(g) = output_grads.get(&out.name) {
                let i = self.index[&out.node];
                if g.shape() != cache.acts[i].shape() {
                    return Err(Error::Shape {
                        location: format!("gradient of output `{}`", out.name),
                        expected: cache.acts[i].shape().to_vec(),
                        actual: g.shape().to_vec(),
                    });
                }
                accumulate(&mut grads[i], g.clone());
            }
        }
        for t in self.store.params.values_mut() {
            t.grad_mut().fill(0.0);
        }

        for (i, node) in self.spec.nodes.iter().enumerate().rev() {
            let Some(dy) = grads[i].take() else { continue };
            let input_of = |name: &str| -> &Tensor {
                match self.index.get(name) {
                    Some(&j) => &cache.acts[j],
                    None => &cache.inputs[name],
                }
            };
            let upstream: Vec<Tensor> = match node.layer {
                LayerKind::Conv2d { .. } | LayerKind::Conv1x1Head { .. } => {
                    let k = kernel_of(&node.layer);
                    let wkey = format!("{}.weight", node.name);
                    let bkey = format!("{}.bias", node.name);
                    let x = input_of(&node.inputs[0]);
                    let g = kernels::conv2d_backward(x, self.store.param(&wkey).data(), k, &dy)?;
                    add_into(self.store.params.get_mut(&wkey).expect("weight").grad_mut(), &g.weight);
                    add_into(self.store.params.get_mut(&bkey).expect("bias").grad_mut(), &g.bias);
                    vec![g.input]
                }
                LayerKind::Batchnorm { .. } => {
                    let Aux::BatchNorm(bc) = &cache.aux[i] else { unreachable!() };
                    let gkey = format!("{}.gamma", node.name);
                    let bkey = format!("{}.beta", node.name);
                    let (dx, dg, db) =
                        kernels::batchnorm_backward(&dy, bc, self.store.param(&gkey).data())?;
                    add_into(self.store.params.get_mut(&gkey).expect("gamma").grad_mut(), &dg);
                    add_into(self.store.params.get_mut(&bkey).expect("beta").grad_mut(), &db);
                    vec![dx]
                }
                LayerKind::LeakyRelu { slope } => {
                    vec![kernels::leaky_relu_backward(&cache.acts[i], &dy, slope)]
                }
                LayerKind::Maxpool2 => {
                    let Aux::Argmax(arg) = &cache.aux[i] else { unreachable!() };
                    vec![kernels::maxpool2_backward(input_of(&node.inputs[0]).shape(), arg, &dy)]
                }
                LayerKind::Upsample2 => vec![kernels::upsample2_backward(&dy)?],
                LayerKind::Concat => {
                    let Aux::ConcatChannels(ch) = &cache.aux[i] else { unreachable!() };
                    kernels::concat_backward(&dy, ch)?
                }
                LayerKind::Add => vec![dy.clone(); node.inputs.len()],
                LayerKind::Sigmoid => vec![kernels::sigmoid_backward(&cache.acts[i], &dy)],
                LayerKind::Softmax => vec![kernels::softmax_backward(&cache.acts[i], &dy)?],
            };
            for (name, g) in node.inputs.iter().zip(upstream) {
                match self.index.get(name) {
                    Some(&j) => accumulate(&mut grads[j], g),
                    None => match input_grads.get_mut(name) {
                        Some(acc) => add_into(acc.data_mut(), g.data()),
                        None => {
                            input_grads.insert(name.clone(), g);
                        }
                    },
                }
            }
        }
        Ok(input_grads)
    }

    /// Drops recorded activations.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

fn kernel_of(layer: &LayerKind) -> usize {
    match layer {
        LayerKind::Conv2d { kernel, .. } => *kernel,
        _ => 1,
    }
}

fn check_channels(node: &str, t: &Tensor, expected: usize) -> Result<()> {
    let dims = t.dims4()?;
    if dims[1] != expected {
        return Err(Error::Shape {
            location: format!("layer `{node}`"),
            expected: vec![dims[0], expected, dims[2], dims[3]],
            actual: dims.to_vec(),
        });
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        None => *slot = Some(g),
    }
}
