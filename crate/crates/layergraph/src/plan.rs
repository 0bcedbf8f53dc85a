//! Executable plans: a frozen, dependency-ordered schedule with argument
//! wiring, optionally optimized, callable on a feed of input tensors.
//!
//! Optimization applies, in order: dead-node elimination, duplicate merge
//! of stateless nodes (stateful nodes merge only when they share the state
//! record), and inference-mode dropout elision. None of the passes change
//! the outputs on any feed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Feed, Graph};
use crate::layers::{ExecContext, LayerKind, LayerNode, Mode};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct PlanStep {
    node: LayerNode,
    /// Indices of earlier steps whose values feed this one.
    args: Vec<usize>,
    /// `Some(i)`: the value comes from the i-th declared input.
    feed_slot: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExecutablePlan {
    steps: Vec<PlanStep>,
    input_names: Vec<String>,
    input_nodes: Vec<LayerNode>,
    output_steps: Vec<usize>,
    compiled: bool,
    mode: Mode,
}

impl ExecutablePlan {
    pub(crate) fn from_graph(graph: &Graph, mode: Mode) -> ExecutablePlan {
        let mut index: BTreeMap<u64, usize> = BTreeMap::new();
        let feed_slots: BTreeMap<u64, usize> = graph
            .inputs()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id(), i))
            .collect();
        let mut steps = Vec::with_capacity(graph.nodes().len());
        for node in graph.nodes() {
            let feed_slot = feed_slots.get(&node.id()).copied();
            let args = if feed_slot.is_some() {
                Vec::new()
            } else {
                node.inputs().iter().map(|i| index[&i.id()]).collect()
            };
            index.insert(node.id(), steps.len());
            steps.push(PlanStep {
                node: node.clone(),
                args,
                feed_slot,
            });
        }
        let output_steps = graph.outputs().iter().map(|n| index[&n.id()]).collect();
        ExecutablePlan {
            steps,
            input_names: graph
                .inputs()
                .iter()
                .map(|n| n.name().to_string())
                .collect(),
            input_nodes: graph.inputs().to_vec(),
            output_steps,
            compiled: false,
            mode,
        }
    }

    pub fn is_compiled(&self) -> bool {
        self.compiled
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of scheduled nodes.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.node.name()).collect()
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    /// Evaluate on a named feed with RNG seed 0.
    pub fn call(&self, feed: &Feed) -> Result<Vec<Tensor>> {
        self.call_seeded(feed, 0)
    }

    /// Evaluate with one tensor per declared input, in declaration order.
    pub fn call_positional(&self, args: &[Tensor]) -> Result<Vec<Tensor>> {
        if args.len() != self.input_names.len() {
            return Err(Error::FeedArityMismatch {
                expected: self.input_names.len(),
                got: args.len(),
            });
        }
        let mut feed = Feed::new();
        for (name, value) in self.input_names.iter().zip(args.iter()) {
            feed.insert(name, value.clone());
        }
        self.call_seeded(&feed, 0)
    }

    /// Evaluate on a named feed, folding `seed` into every stochastic
    /// layer's derived seed.
    pub fn call_seeded(&self, feed: &Feed, seed: u64) -> Result<Vec<Tensor>> {
        let values = self.run(feed, seed)?;
        Ok(self
            .output_steps
            .iter()
            .map(|&i| values[i].clone())
            .collect())
    }

    /// Run the schedule and keep every step's value (the forward capture
    /// the reverse sweep differentiates).
    pub(crate) fn run(&self, feed: &Feed, seed: u64) -> Result<Vec<Tensor>> {
        let ctx = ExecContext {
            mode: self.mode,
            seed,
        };
        let mut values: Vec<Tensor> = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let value = match step.feed_slot {
                Some(slot) => self.fetch_input(slot, feed)?,
                None => {
                    let args: Vec<&Tensor> = step.args.iter().map(|&i| &values[i]).collect();
                    step.node.compute(&args, &ctx)?
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    fn fetch_input(&self, slot: usize, feed: &Feed) -> Result<Tensor> {
        let node = &self.input_nodes[slot];
        let name = &self.input_names[slot];
        if let Some(t) = feed.get(name) {
            if t.shape().last_dim() != Some(node.n_units()) {
                return Err(Error::FeedShapeMismatch {
                    input: name.clone(),
                    detail: format!(
                        "expected trailing extent {}, got {}",
                        node.n_units(),
                        t.shape()
                    ),
                });
            }
            if t.dtype() != node.dtype() {
                return Err(Error::FeedShapeMismatch {
                    input: name.clone(),
                    detail: format!("expected dtype {}, got {}", node.dtype(), t.dtype()),
                });
            }
            return Ok(t.clone());
        }
        if node.is_input() {
            if let Some(v) = node.value() {
                return Ok(v);
            }
        }
        Err(Error::MissingInput(name.clone()))
    }

    pub(crate) fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub(crate) fn step_node(&self, i: usize) -> &LayerNode {
        &self.steps[i].node
    }

    pub(crate) fn step_args(&self, i: usize) -> &[usize] {
        &self.steps[i].args
    }

    pub(crate) fn step_is_fed(&self, i: usize) -> bool {
        self.steps[i].feed_slot.is_some()
    }

    /// Schedule position of a node, if scheduled.
    pub(crate) fn position_of(&self, node: &LayerNode) -> Option<usize> {
        self.steps.iter().position(|s| s.node.id() == node.id())
    }

    /// Render the schedule as the body of the function the plan stands
    /// for: one `name = layers["name"].compute(...)` line per node and a
    /// final `return`.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            let args: Vec<&str> = step
                .args
                .iter()
                .map(|&i| self.steps[i].node.name())
                .collect();
            out.push_str(&format!(
                "{} = layers[\"{}\"].compute({})\n",
                step.node.name(),
                step.node.name(),
                args.join(",")
            ));
        }
        let outs: Vec<&str> = self
            .output_steps
            .iter()
            .map(|&i| self.steps[i].node.name())
            .collect();
        out.push_str(&format!("return {}\n", outs.join(",")));
        out
    }

    /// Apply the optimization passes and freeze the schedule.
    pub fn optimize(&self) -> ExecutablePlan {
        let mut plan = self.clone();
        plan.eliminate_dead();
        plan.merge_duplicates();
        if plan.mode == Mode::Infer {
            plan.elide_dropout();
        }
        plan.compiled = true;
        plan
    }

    /// Rewrite steps through `index_map` (old index -> new index in the
    /// retained list) dropping unmapped steps.
    fn compact(&mut self, keep: &[bool], redirect: &BTreeMap<usize, usize>) {
        let mut new_index: BTreeMap<usize, usize> = BTreeMap::new();
        let mut steps = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            if keep[i] {
                new_index.insert(i, steps.len());
                steps.push(step.clone());
            }
        }
        let resolve = |mut i: usize| -> usize {
            while let Some(&r) = redirect.get(&i) {
                i = r;
            }
            new_index[&i]
        };
        for step in steps.iter_mut() {
            for a in step.args.iter_mut() {
                *a = resolve(*a);
            }
        }
        for o in self.output_steps.iter_mut() {
            *o = resolve(*o);
        }
        self.steps = steps;
    }

    /// Drop scheduled nodes not on any path to an output.
    fn eliminate_dead(&mut self) {
        let mut live = vec![false; self.steps.len()];
        let mut stack: Vec<usize> = self.output_steps.clone();
        while let Some(i) = stack.pop() {
            if live[i] {
                continue;
            }
            live[i] = true;
            stack.extend_from_slice(&self.steps[i].args);
        }
        self.compact(&live, &BTreeMap::new());
    }

    /// Collapse duplicate steps: equal kind, config, and source wiring, and
    /// (for kinds with state) the same state record. Fed steps never merge;
    /// their values arrive by name.
    fn merge_duplicates(&mut self) {
        let mut seen: BTreeMap<(String, Vec<usize>), usize> = BTreeMap::new();
        let mut redirect: BTreeMap<usize, usize> = BTreeMap::new();
        let mut keep = vec![true; self.steps.len()];
        for (i, step) in self.steps.iter().enumerate() {
            if step.feed_slot.is_some() {
                continue;
            }
            let args: Vec<usize> = step
                .args
                .iter()
                .map(|a| *redirect.get(a).unwrap_or(a))
                .collect();
            let key = (merge_key(&step.node), args);
            match seen.get(&key) {
                Some(&prior) => {
                    redirect.insert(i, prior);
                    keep[i] = false;
                }
                None => {
                    seen.insert(key, i);
                }
            }
        }
        self.compact(&keep, &redirect);
    }

    /// Remove Dropout steps, rewiring consumers to the dropout's source.
    fn elide_dropout(&mut self) {
        let mut redirect: BTreeMap<usize, usize> = BTreeMap::new();
        let mut keep = vec![true; self.steps.len()];
        for (i, step) in self.steps.iter().enumerate() {
            if step.feed_slot.is_none() && matches!(step.node.kind(), LayerKind::Dropout { .. }) {
                let mut src = step.args[0];
                while let Some(&r) = redirect.get(&src) {
                    src = r;
                }
                redirect.insert(i, src);
                keep[i] = false;
            }
        }
        self.compact(&keep, &redirect);
    }
}

/// Identity key for duplicate merging. Stateless nodes key on kind and
/// config; stateful nodes additionally on the state record's id, so two
/// value-equal but distinct states never merge.
fn merge_key(node: &LayerNode) -> String {
    let cfg = match node.kind() {
        LayerKind::Input => "input".to_string(),
        LayerKind::Linear { bias } => format!("linear:{bias}"),
        LayerKind::Activation(op) => format!("act:{}", op.name()),
        LayerKind::Add => "add".to_string(),
        LayerKind::Dropout { probability, seed } => {
            format!("drop:{}:{}", probability.to_bits(), seed)
        }
        LayerKind::Lookup { vocab_size } => format!("lookup:{vocab_size}"),
        LayerKind::Module(body) => format!("module:{:p}", std::sync::Arc::as_ptr(body)),
        LayerKind::Loss(kind) => format!("loss:{kind:?}"),
    };
    if node.state().slot_count() == 0 {
        cfg
    } else {
        format!("{cfg}#{}", node.state().id())
    }
}
