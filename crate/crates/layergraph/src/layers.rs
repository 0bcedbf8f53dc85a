//! Stateful layer building blocks.
//!
//! A [`LayerNode`] is simultaneously a stateful function over its inputs and
//! the end-node of the computation graph that produces those inputs. Nodes
//! own an ordered, immutable input list and a reference to a [`LayerState`]
//! record that may be shared with other nodes ([`LayerNode::reuse_with`]),
//! so mutating a weight is observed by every node aliasing that record.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::graph::{Feed, Graph};
use crate::tensor::rng::{derive_seed, SplitRng};
use crate::tensor::{DType, Tensor, UnaryOp};

static NODE_IDS: AtomicU64 = AtomicU64::new(1);
static STATE_IDS: AtomicU64 = AtomicU64::new(1);

/// Train or inference execution. The flag is threaded explicitly through
/// every execution path rather than kept in global state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Execution context: mode plus the RNG seed that stochastic layers fold
/// into their own derived seeds. Two executions with equal contexts and
/// equal state produce bitwise-equal results.
#[derive(Debug, Clone, Copy)]
pub struct ExecContext {
    pub mode: Mode,
    pub seed: u64,
}

impl ExecContext {
    pub fn infer() -> Self {
        ExecContext {
            mode: Mode::Infer,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        ExecContext {
            mode: Mode::Train,
            seed,
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

#[derive(Debug, Clone)]
struct Slot {
    value: Option<Tensor>,
    trainable: bool,
}

#[derive(Debug)]
struct StateInner {
    id: u64,
    slots: RwLock<BTreeMap<String, Slot>>,
}

/// Named-variable record owned separately from layer nodes, so any number
/// of nodes can alias one set of parameters.
#[derive(Debug, Clone)]
pub struct LayerState(Arc<StateInner>);

impl LayerState {
    fn new() -> Self {
        LayerState(Arc::new(StateInner {
            id: STATE_IDS.fetch_add(1, Ordering::Relaxed),
            slots: RwLock::new(BTreeMap::new()),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Two handles alias the same record.
    pub fn ptr_eq(&self, other: &LayerState) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn declare(&self, name: &str, value: Option<Tensor>, trainable: bool) {
        self.0
            .slots
            .write()
            .unwrap()
            .insert(name.to_string(), Slot { value, trainable });
    }

    pub fn slot(&self, name: &str) -> Option<Tensor> {
        self.0
            .slots
            .read()
            .unwrap()
            .get(name)
            .and_then(|s| s.value.clone())
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.0.slots.read().unwrap().contains_key(name)
    }

    pub fn slot_count(&self) -> usize {
        self.0.slots.read().unwrap().len()
    }

    /// Slot names with their trainable flag, in name order.
    pub fn slot_names(&self) -> Vec<(String, bool)> {
        self.0
            .slots
            .read()
            .unwrap()
            .iter()
            .map(|(k, s)| (k.clone(), s.trainable))
            .collect()
    }

    /// Replace a slot's tensor. Once a slot holds a value its shape is
    /// frozen; the replacement must match shape and dtype exactly.
    pub fn set_slot(&self, name: &str, value: Tensor) -> Result<()> {
        let mut slots = self.0.slots.write().unwrap();
        let slot = slots
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no slot `{name}` in state")))?;
        if let Some(existing) = &slot.value {
            if existing.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "slot `{name}` holds {}, replacement is {}",
                    existing.shape(),
                    value.shape()
                )));
            }
            if existing.dtype() != value.dtype() {
                return Err(Error::DtypeMismatch {
                    expected: existing.dtype().to_string(),
                    got: value.dtype().to_string(),
                });
            }
        }
        slot.value = Some(value);
        Ok(())
    }

    /// Unchecked overwrite, for the Input placeholder whose batch extent
    /// may change between computations.
    fn set_slot_raw(&self, name: &str, value: Tensor) {
        if let Some(slot) = self.0.slots.write().unwrap().get_mut(name) {
            slot.value = Some(value);
        }
    }

    /// Add `delta` to one element of a slot in place (finite differences).
    pub(crate) fn nudge_slot_element(&self, name: &str, idx: usize, delta: f64) -> Result<()> {
        let mut slots = self.0.slots.write().unwrap();
        let slot = slots
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no slot `{name}` in state")))?;
        let t = slot
            .value
            .as_mut()
            .ok_or_else(|| Error::Invalid(format!("slot `{name}` is unset")))?;
        let cur = t.get_f64(idx);
        t.set_f64(idx, cur + delta);
        Ok(())
    }
}

/// One-hot of the layer kinds this library builds.
#[derive(Debug, Clone)]
pub enum LayerKind {
    /// Stateful placeholder; stores the value fed to the graph.
    Input,
    /// `y = x W + b` over the trailing axis.
    Linear { bias: bool },
    /// Elementwise unary map, stateless.
    Activation(UnaryOp),
    /// N-ary same-shape sum, stateless.
    Add,
    /// Inverted dropout: zero with chance `probability` and scale survivors
    /// by `1/(1-probability)` in train mode; identity in inference mode.
    Dropout { probability: f64, seed: u64 },
    /// Embedding row gather from a trainable table.
    Lookup { vocab_size: usize },
    /// Encapsulated inner graph behaving as a single layer.
    Module(Arc<ModuleBody>),
    /// Scalar-producing loss over (prediction, target).
    Loss(LossKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug)]
pub struct ModuleBody {
    graph: Graph,
}

impl ModuleBody {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Activation(_) => "activation",
            LayerKind::Add => "add",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Lookup { .. } => "lookup",
            LayerKind::Module(_) => "module",
            LayerKind::Loss(LossKind::Mse) => "mse",
            LayerKind::Loss(LossKind::SoftmaxCrossEntropy) => "softmax_ce",
        }
    }
}

#[derive(Debug)]
struct NodeInner {
    id: u64,
    name: String,
    kind: LayerKind,
    inputs: Vec<LayerNode>,
    n_units: usize,
    dtype: DType,
    state: LayerState,
    reuse_counter: AtomicU64,
}

/// A node in a layer graph; cheap to clone (shared handle).
#[derive(Debug, Clone)]
pub struct LayerNode(Arc<NodeInner>);

/// Weight initialization schemes for layers with trainable state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
    Zeros,
    Uniform {
        low: f64,
        high: f64,
    },
}

impl WeightInit {
    fn sample(self, fan_in: usize, fan_out: usize, seed: u64, dtype: DType) -> Result<Tensor> {
        match self {
            WeightInit::Glorot => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::random_uniform([fan_in, fan_out], -limit, limit, seed, dtype)
            }
            WeightInit::Zeros => Ok(Tensor::zeros([fan_in, fan_out], dtype)),
            WeightInit::Uniform { low, high } => {
                Tensor::random_uniform([fan_in, fan_out], low, high, seed, dtype)
            }
        }
    }
}

/// Options for [`LayerNode::linear_with`].
#[derive(Debug, Clone)]
pub struct LinearOpts {
    pub bias: bool,
    pub init: WeightInit,
    pub seed: u64,
    pub name: Option<String>,
}

impl Default for LinearOpts {
    fn default() -> Self {
        LinearOpts {
            bias: true,
            init: WeightInit::Glorot,
            seed: 0,
            name: None,
        }
    }
}

fn fresh_id() -> u64 {
    NODE_IDS.fetch_add(1, Ordering::Relaxed)
}

fn auto_name(tag: &str, id: u64) -> String {
    format!("{tag}_{id}")
}

impl LayerNode {
    fn build_node(
        kind: LayerKind,
        inputs: Vec<LayerNode>,
        n_units: usize,
        dtype: DType,
        state: LayerState,
        name: Option<String>,
    ) -> LayerNode {
        let id = fresh_id();
        let name = name.unwrap_or_else(|| auto_name(kind.tag(), id));
        LayerNode(Arc::new(NodeInner {
            id,
            name,
            kind,
            inputs,
            n_units,
            dtype,
            state,
            reuse_counter: AtomicU64::new(0),
        }))
    }

    // ---- constructors ----

    /// Stateful placeholder with no inputs; its state holds a `value` slot,
    /// initially unset.
    pub fn input(n_units: usize) -> LayerNode {
        Self::input_typed(n_units, DType::F32, None)
    }

    pub fn input_named(n_units: usize, name: &str) -> LayerNode {
        Self::input_typed(n_units, DType::F32, Some(name.to_string()))
    }

    pub fn input_typed(n_units: usize, dtype: DType, name: Option<String>) -> LayerNode {
        let state = LayerState::new();
        state.declare("value", None, false);
        Self::build_node(LayerKind::Input, Vec::new(), n_units, dtype, state, name)
    }

    /// `y = x W + b`; weights `[input.n_units, n_units]`, bias `[n_units]`.
    pub fn linear(input: &LayerNode, n_units: usize, seed: u64) -> Result<LayerNode> {
        Self::linear_with(
            input,
            n_units,
            LinearOpts {
                seed,
                ..LinearOpts::default()
            },
        )
    }

    pub fn linear_with(input: &LayerNode, n_units: usize, opts: LinearOpts) -> Result<LayerNode> {
        if n_units == 0 {
            return Err(Error::Invalid("linear n_units must be positive".into()));
        }
        if !input.dtype().is_float() {
            return Err(Error::DtypeMismatch {
                expected: "float32 or float64".to_string(),
                got: input.dtype().to_string(),
            });
        }
        let dtype = input.dtype();
        let state = LayerState::new();
        let w = opts
            .init
            .sample(input.n_units(), n_units, opts.seed, dtype)?;
        state.declare("weights", Some(w), true);
        if opts.bias {
            state.declare("bias", Some(Tensor::zeros([n_units], dtype)), true);
        }
        Ok(Self::build_node(
            LayerKind::Linear { bias: opts.bias },
            vec![input.clone()],
            n_units,
            dtype,
            state,
            opts.name,
        ))
    }

    /// Stateless elementwise activation over one input.
    pub fn activation(input: &LayerNode, fn_: UnaryOp) -> LayerNode {
        Self::activation_named(input, fn_, None)
    }

    pub fn activation_named(input: &LayerNode, fn_: UnaryOp, name: Option<String>) -> LayerNode {
        Self::build_node(
            LayerKind::Activation(fn_),
            vec![input.clone()],
            input.n_units(),
            input.dtype(),
            LayerState::new(),
            name,
        )
    }

    /// Stateless sum of two or more same-width inputs.
    pub fn add(inputs: &[LayerNode]) -> Result<LayerNode> {
        Self::add_named(inputs, None)
    }

    pub fn add_named(inputs: &[LayerNode], name: Option<String>) -> Result<LayerNode> {
        if inputs.len() < 2 {
            return Err(Error::Invalid("add requires at least two inputs".into()));
        }
        let n = inputs[0].n_units();
        let dtype = inputs[0].dtype();
        for node in &inputs[1..] {
            if node.n_units() != n {
                return Err(Error::ShapeMismatch(format!(
                    "add inputs disagree on n_units: {} has {}, {} has {}",
                    inputs[0].name(),
                    n,
                    node.name(),
                    node.n_units()
                )));
            }
            if node.dtype() != dtype {
                return Err(Error::DtypeMismatch {
                    expected: dtype.to_string(),
                    got: node.dtype().to_string(),
                });
            }
        }
        Ok(Self::build_node(
            LayerKind::Add,
            inputs.to_vec(),
            n,
            dtype,
            LayerState::new(),
            name,
        ))
    }

    /// Inverted dropout over one input.
    pub fn dropout(input: &LayerNode, probability: f64, seed: u64) -> Result<LayerNode> {
        Self::dropout_named(input, probability, seed, None)
    }

    pub fn dropout_named(
        input: &LayerNode,
        probability: f64,
        seed: u64,
        name: Option<String>,
    ) -> Result<LayerNode> {
        if !(0.0..1.0).contains(&probability) {
            return Err(Error::InvalidProbability(probability));
        }
        Ok(Self::build_node(
            LayerKind::Dropout { probability, seed },
            vec![input.clone()],
            input.n_units(),
            input.dtype(),
            LayerState::new(),
            name,
        ))
    }

    /// Embedding lookup: state holds a trainable `table [vocab_size, n_units]`,
    /// compute gathers the rows named by the int64 indices input.
    pub fn lookup(
        indices_input: &LayerNode,
        vocab_size: usize,
        n_units: usize,
        seed: u64,
    ) -> Result<LayerNode> {
        Self::lookup_named(indices_input, vocab_size, n_units, seed, None, DType::F32)
    }

    pub fn lookup_named(
        indices_input: &LayerNode,
        vocab_size: usize,
        n_units: usize,
        seed: u64,
        name: Option<String>,
        dtype: DType,
    ) -> Result<LayerNode> {
        if vocab_size == 0 || n_units == 0 {
            return Err(Error::Invalid(
                "lookup vocab_size and n_units must be positive".into(),
            ));
        }
        if indices_input.dtype() != DType::I64 {
            return Err(Error::DtypeMismatch {
                expected: "int64".to_string(),
                got: indices_input.dtype().to_string(),
            });
        }
        let state = LayerState::new();
        let table = WeightInit::Glorot.sample(vocab_size, n_units, seed, dtype)?;
        state.declare("table", Some(table), true);
        Ok(Self::build_node(
            LayerKind::Lookup { vocab_size },
            vec![indices_input.clone()],
            n_units,
            dtype,
            state,
            name,
        ))
    }

    /// Consolidate the subgraph from `inputs` to `output` into one layer.
    /// The trace stops at the declared inputs, so a module can encapsulate
    /// a mid-graph segment.
    pub fn module(inputs: &[LayerNode], output: &LayerNode) -> Result<LayerNode> {
        Self::module_named(inputs, output, None)
    }

    pub fn module_named(
        inputs: &[LayerNode],
        output: &LayerNode,
        name: Option<String>,
    ) -> Result<LayerNode> {
        let graph =
            Graph::build(std::slice::from_ref(output), Some(inputs)).map_err(|e| match e {
                Error::UndeclaredInput(n) => Error::UnreachableDependency(n),
                Error::UnreachableDeclaredInput(n) => Error::DisconnectedInput(n),
                other => other,
            })?;
        Ok(Self::build_node(
            LayerKind::Module(Arc::new(ModuleBody { graph })),
            inputs.to_vec(),
            output.n_units(),
            output.dtype(),
            LayerState::new(),
            name,
        ))
    }

    /// Fresh node with identical kind and config over new inputs, aliasing
    /// this node's state record.
    pub fn reuse_with(&self, new_inputs: &[LayerNode]) -> Result<LayerNode> {
        if new_inputs.len() != self.inputs().len() {
            return Err(Error::ArityMismatch {
                layer: self.name().to_string(),
                expected: self.inputs().len(),
                got: new_inputs.len(),
            });
        }
        for (old, new) in self.inputs().iter().zip(new_inputs.iter()) {
            if old.n_units() != new.n_units() {
                return Err(Error::ShapeMismatch(format!(
                    "reuse_with input `{}` has {} units, original `{}` expects {}",
                    new.name(),
                    new.n_units(),
                    old.name(),
                    old.n_units()
                )));
            }
            if old.dtype() != new.dtype() {
                return Err(Error::DtypeMismatch {
                    expected: old.dtype().to_string(),
                    got: new.dtype().to_string(),
                });
            }
        }
        let n = self.0.reuse_counter.fetch_add(1, Ordering::Relaxed) + 1;
        let name = format!("{}_r{}", self.name(), n);
        Ok(Self::build_node(
            self.0.kind.clone(),
            new_inputs.to_vec(),
            self.n_units(),
            self.dtype(),
            self.state().clone(),
            Some(name),
        ))
    }

    // ---- accessors ----

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn kind(&self) -> &LayerKind {
        &self.0.kind
    }

    pub fn inputs(&self) -> &[LayerNode] {
        &self.0.inputs
    }

    pub fn n_units(&self) -> usize {
        self.0.n_units
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn state(&self) -> &LayerState {
        &self.0.state
    }

    /// Identity comparison: same underlying node.
    pub fn same_node(&self, other: &LayerNode) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn is_input(&self) -> bool {
        matches!(self.0.kind, LayerKind::Input)
    }

    /// Store a value in an Input placeholder. Only the trailing extent is
    /// constrained (to `n_units`); the batch extent may change between
    /// computations.
    pub fn set_value(&self, value: Tensor) -> Result<()> {
        if !self.is_input() {
            return Err(Error::Invalid(format!(
                "`{}` is not an input layer",
                self.name()
            )));
        }
        if value.shape().last_dim() != Some(self.n_units()) {
            return Err(Error::ShapeMismatch(format!(
                "input `{}` expects trailing extent {}, got {}",
                self.name(),
                self.n_units(),
                value.shape()
            )));
        }
        if value.dtype() != self.dtype() {
            return Err(Error::DtypeMismatch {
                expected: self.dtype().to_string(),
                got: value.dtype().to_string(),
            });
        }
        self.state().set_slot_raw("value", value);
        Ok(())
    }

    /// The stored value of an Input placeholder, if set.
    pub fn value(&self) -> Option<Tensor> {
        self.state().slot("value")
    }

    // ---- execution ----

    /// Apply only this layer's function to the given tensors; upstream graph
    /// nodes are not executed.
    pub fn compute(&self, inputs: &[&Tensor], ctx: &ExecContext) -> Result<Tensor> {
        if inputs.len() != self.inputs().len() {
            return Err(Error::ArityMismatch {
                layer: self.name().to_string(),
                expected: self.inputs().len(),
                got: inputs.len(),
            });
        }
        match &self.0.kind {
            LayerKind::Input => self
                .value()
                .ok_or_else(|| Error::MissingInput(self.name().to_string())),
            LayerKind::Linear { bias } => self.linear_forward(inputs[0], *bias),
            LayerKind::Activation(op) => inputs[0].unary(*op),
            LayerKind::Add => {
                let first = inputs[0];
                let mut acc = first.clone();
                for t in &inputs[1..] {
                    if t.shape() != first.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "add over mismatched shapes {} and {}",
                            first.shape(),
                            t.shape()
                        )));
                    }
                    acc = acc.add_broadcast(t)?;
                }
                Ok(acc)
            }
            LayerKind::Dropout { probability, seed } => {
                Ok(self.dropout_forward(inputs[0], *probability, *seed, ctx))
            }
            LayerKind::Lookup { .. } => {
                let table = self.state().slot("table").expect("lookup table is set");
                table.gather_rows(inputs[0])
            }
            LayerKind::Module(body) => {
                let mut feed = Feed::new();
                for (decl, value) in body.graph.inputs().iter().zip(inputs.iter()) {
                    feed.insert(decl.name(), (*value).clone());
                }
                let mut outs = body.graph.execute(&feed, ctx)?;
                Ok(outs.remove(0))
            }
            LayerKind::Loss(kind) => loss_forward(*kind, inputs[0], inputs[1]),
        }
    }

    fn linear_forward(&self, x: &Tensor, bias: bool) -> Result<Tensor> {
        let w = self.state().slot("weights").expect("weights are set");
        let in_units = w.dims()[0];
        if x.shape().last_dim() != Some(in_units) {
            return Err(Error::ShapeMismatch(format!(
                "linear `{}` expects trailing extent {}, got {}",
                self.name(),
                in_units,
                x.shape()
            )));
        }
        // Arbitrary leading batch extent: flatten to rank 2, multiply,
        // restore the leading dims.
        let rows = x.len() / in_units;
        let x2 = x.reshape([rows, in_units])?;
        let mut y = x2.matmul(&w)?;
        if bias {
            let b = self.state().slot("bias").expect("bias is set");
            y = y.add_broadcast(&b)?;
        }
        let mut out_dims = x.dims().to_vec();
        *out_dims.last_mut().unwrap() = self.n_units();
        y.reshape(out_dims)
    }

    fn dropout_forward(&self, x: &Tensor, p: f64, seed: u64, ctx: &ExecContext) -> Tensor {
        if ctx.mode == Mode::Infer || p == 0.0 {
            return x.clone();
        }
        apply_dropout_mask(x, p, derive_seed(seed, ctx.seed))
    }

    /// Execute the entire graph ending in this node, in inference mode.
    pub fn forward(&self) -> Result<Tensor> {
        let g = Graph::build(std::slice::from_ref(self), None)?;
        let mut outs = g.execute(&Feed::new(), &ExecContext::infer())?;
        Ok(outs.remove(0))
    }
}

/// Zero each element with chance `p` and scale survivors by `1/(1-p)`.
/// The mask is a pure function of (stream, element index), so forward and
/// backward regenerate the identical pattern.
pub(crate) fn apply_dropout_mask(x: &Tensor, p: f64, stream: u64) -> Tensor {
    let mut rng = SplitRng::new(stream);
    let inv = 1.0 / (1.0 - p);
    let scaled = x.scalar_mul(inv).expect("dropout over float tensor");
    let n = x.len();
    let keep: Vec<bool> = (0..n).map(|_| rng.next_f64() >= p).collect();
    let mut out = scaled;
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            out.set_f64(i, 0.0);
        }
    }
    out
}

fn loss_forward(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss over mismatched shapes {} and {}",
            pred.shape(),
            target.shape()
        )));
    }
    match kind {
        LossKind::Mse => {
            let diff = pred.sub(target)?;
            diff.mul_elementwise(&diff)?.reduce_mean(None)
        }
        LossKind::SoftmaxCrossEntropy => {
            if pred.rank() != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "softmax cross-entropy expects rank-2 logits, got {}",
                    pred.shape()
                )));
            }
            let ls = pred.log_softmax()?;
            let weighted = target.mul_elementwise(&ls)?;
            // mean over batch of -sum(target * log_softmax)
            weighted
                .reduce_sum(Some(1))?
                .reduce_mean(None)?
                .scalar_mul(-1.0)
        }
    }
}

/// Construct a scalar-producing loss node over (prediction, target).
pub(crate) fn loss_node(
    kind: LossKind,
    pred: &LayerNode,
    target: &LayerNode,
    name: Option<String>,
) -> Result<LayerNode> {
    if pred.n_units() != target.n_units() {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs disagree on n_units: {} vs {}",
            pred.n_units(),
            target.n_units()
        )));
    }
    Ok(LayerNode::build_node(
        LayerKind::Loss(kind),
        vec![pred.clone(), target.clone()],
        1,
        pred.dtype(),
        LayerState::new(),
        name,
    ))
}
