//! Automatic DAG construction from output nodes, validation, and
//! deterministic dependency ordering.
//!
//! A [`Graph`] is an immutable snapshot: the node set traced backward from
//! the outputs, the declared inputs, and a cached topological order with
//! ties broken by node creation id so schedules are reproducible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::error::{Error, Result};
use crate::layers::{ExecContext, LayerKind, LayerNode, LayerState, Mode};
use crate::plan::ExecutablePlan;
use crate::tensor::Tensor;

/// Named tensors for one execution: one entry per declared input (entries
/// for inputs with stored values may be omitted; a feed entry overrides the
/// stored value).
#[derive(Debug, Clone, Default)]
pub struct Feed {
    map: BTreeMap<String, Tensor>,
}

impl Feed {
    pub fn new() -> Self {
        Feed::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> &mut Self {
        self.map.insert(name.to_string(), value);
        self
    }

    pub fn with(mut self, name: &str, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    /// All member nodes in dependency order.
    nodes: Vec<LayerNode>,
    inputs: Vec<LayerNode>,
    outputs: Vec<LayerNode>,
}

impl Graph {
    /// Trace backward from `outputs`, collecting every reachable node. The
    /// trace stops at declared inputs, so a graph may start mid-way through
    /// a larger structure.
    ///
    /// With declared `inputs`, validation confirms that every source
    /// discovered is declared and every declared input was reached. Without
    /// them, the inputs are the discovered zero-input nodes in creation
    /// order.
    pub fn build(outputs: &[LayerNode], inputs: Option<&[LayerNode]>) -> Result<Graph> {
        if outputs.is_empty() {
            return Err(Error::Invalid("graph needs at least one output".into()));
        }
        let declared: Option<BTreeSet<u64>> =
            inputs.map(|ins| ins.iter().map(|n| n.id()).collect());

        // Iterative depth-first trace.
        let mut members: BTreeMap<u64, LayerNode> = BTreeMap::new();
        let mut stack: Vec<LayerNode> = outputs.to_vec();
        while let Some(node) = stack.pop() {
            if members.contains_key(&node.id()) {
                continue;
            }
            let stop_here = declared
                .as_ref()
                .map(|d| d.contains(&node.id()))
                .unwrap_or(false);
            if !stop_here {
                for input in node.inputs() {
                    stack.push(input.clone());
                }
            }
            members.insert(node.id(), node);
        }

        let inputs = match inputs {
            Some(declared_inputs) => {
                let reached: BTreeSet<u64> = members.keys().copied().collect();
                for node in members.values() {
                    let is_declared = declared
                        .as_ref()
                        .map(|d| d.contains(&node.id()))
                        .unwrap_or(false);
                    if node.inputs().is_empty() && !is_declared {
                        return Err(Error::UndeclaredInput(node.name().to_string()));
                    }
                }
                for node in declared_inputs {
                    if !reached.contains(&node.id()) {
                        return Err(Error::UnreachableDeclaredInput(node.name().to_string()));
                    }
                }
                declared_inputs.to_vec()
            }
            None => members
                .values()
                .filter(|n| n.inputs().is_empty())
                .cloned()
                .collect(),
        };

        Self::assemble(members, inputs, outputs.to_vec())
    }

    /// Construct a graph from an explicit member set (the declarative form
    /// used by graph spec files). Unlike [`Graph::build`], members need not
    /// lie on a path to an output; such nodes stay in the schedule until an
    /// optimization pass removes them.
    pub fn build_from_members(
        members: &[LayerNode],
        inputs: &[LayerNode],
        outputs: &[LayerNode],
    ) -> Result<Graph> {
        if outputs.is_empty() {
            return Err(Error::Invalid("graph needs at least one output".into()));
        }
        let mut map: BTreeMap<u64, LayerNode> = BTreeMap::new();
        for node in members {
            map.insert(node.id(), node.clone());
        }
        let declared: BTreeSet<u64> = inputs.iter().map(|n| n.id()).collect();
        for node in map.values() {
            if declared.contains(&node.id()) {
                continue;
            }
            if node.inputs().is_empty() {
                return Err(Error::UndeclaredInput(node.name().to_string()));
            }
            for input in node.inputs() {
                if !map.contains_key(&input.id()) {
                    return Err(Error::Invalid(format!(
                        "node `{}` consumes `{}`, which is not a member of the graph",
                        node.name(),
                        input.name()
                    )));
                }
            }
        }
        for node in outputs {
            if !map.contains_key(&node.id()) {
                return Err(Error::NotInGraph(node.name().to_string()));
            }
        }
        for node in inputs {
            if !map.contains_key(&node.id()) {
                return Err(Error::NotInGraph(node.name().to_string()));
            }
        }
        Self::assemble(map, inputs.to_vec(), outputs.to_vec())
    }

    fn assemble(
        members: BTreeMap<u64, LayerNode>,
        inputs: Vec<LayerNode>,
        outputs: Vec<LayerNode>,
    ) -> Result<Graph> {
        // Unique names within the graph.
        let mut seen = BTreeSet::new();
        for node in members.values() {
            if !seen.insert(node.name().to_string()) {
                return Err(Error::DuplicateName(node.name().to_string()));
            }
        }

        let order = Self::topo_order(&members, &inputs)?;
        Ok(Graph {
            nodes: order,
            inputs,
            outputs,
        })
    }

    /// Kahn's algorithm with a min-heap keyed by creation id: topological,
    /// deterministic, ties broken by ascending id. Declared inputs are
    /// sources (their values come from the feed, not from member edges).
    fn topo_order(
        members: &BTreeMap<u64, LayerNode>,
        inputs: &[LayerNode],
    ) -> Result<Vec<LayerNode>> {
        let declared: BTreeSet<u64> = inputs.iter().map(|n| n.id()).collect();
        let mut indegree: BTreeMap<u64, usize> = BTreeMap::new();
        let mut consumers: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for node in members.values() {
            indegree.entry(node.id()).or_insert(0);
            if declared.contains(&node.id()) {
                continue;
            }
            for input in node.inputs() {
                if members.contains_key(&input.id()) {
                    *indegree.entry(node.id()).or_insert(0) += 1;
                    consumers.entry(input.id()).or_default().push(node.id());
                }
            }
        }
        let mut ready: BinaryHeap<Reverse<u64>> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| Reverse(*id))
            .collect();
        let mut order = Vec::with_capacity(members.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(members[&id].clone());
            if let Some(next) = consumers.get(&id) {
                for c in next {
                    let d = indegree.get_mut(c).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.push(Reverse(*c));
                    }
                }
            }
        }
        if order.len() != members.len() {
            let stuck: Vec<&str> = members
                .values()
                .filter(|n| !order.iter().any(|o| o.id() == n.id()))
                .map(|n| n.name())
                .collect();
            return Err(Error::CycleDetected(stuck.join(" -> ")));
        }
        Ok(order)
    }

    /// Member nodes in dependency order.
    pub fn dependency_order(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn inputs(&self) -> &[LayerNode] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[LayerNode] {
        &self.outputs
    }

    pub fn find(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name() == name)
    }

    pub fn contains(&self, node: &LayerNode) -> bool {
        self.nodes.iter().any(|n| n.id() == node.id())
    }

    /// Convert the graph into a callable plan. With `compile` the
    /// optimization passes run first and the schedule is frozen; both paths
    /// produce identical results. Inference mode.
    pub fn as_function(&self, compile: bool) -> ExecutablePlan {
        self.as_function_mode(compile, Mode::Infer)
    }

    pub fn as_function_mode(&self, compile: bool, mode: Mode) -> ExecutablePlan {
        let plan = ExecutablePlan::from_graph(self, mode);
        if compile {
            plan.optimize()
        } else {
            plan
        }
    }

    /// Evaluate the graph on a feed: equivalent to the uncompiled plan.
    /// Input nodes take the feed value when present, else their stored
    /// value.
    pub fn execute(&self, feed: &Feed, ctx: &ExecContext) -> Result<Vec<Tensor>> {
        self.as_function_mode(false, ctx.mode)
            .call_seeded(feed, ctx.seed)
    }

    /// Every trainable slot reachable from this graph, including slots
    /// inside module bodies, labeled `node.slot` and deduplicated when a
    /// state record is shared. Deterministic order.
    pub fn trainable_slots(&self) -> Vec<(String, LayerState, String)> {
        let mut out = Vec::new();
        let mut seen: BTreeSet<(u64, String)> = BTreeSet::new();
        self.collect_trainable(&mut out, &mut seen);
        out
    }

    fn collect_trainable(
        &self,
        out: &mut Vec<(String, LayerState, String)>,
        seen: &mut BTreeSet<(u64, String)>,
    ) {
        for node in &self.nodes {
            if let LayerKind::Module(body) = node.kind() {
                body.graph().collect_trainable(out, seen);
            }
            let state = node.state();
            for (slot, trainable) in state.slot_names() {
                if !trainable {
                    continue;
                }
                if seen.insert((state.id(), slot.clone())) {
                    out.push((format!("{}.{}", node.name(), slot), state.clone(), slot));
                }
            }
        }
    }
}
