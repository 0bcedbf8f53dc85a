//! Shared helpers for integration tests: a seeded random layer-graph
//! generator and planted-defect variants for the optimizer-soundness runs.
#![allow(dead_code)] // not every test target uses every helper

use std::collections::BTreeSet;

use layergraph::tensor::rng::{derive_seed, SplitRng};
use layergraph::{DType, Feed, Graph, LayerNode, LinearOpts, Tensor, UnaryOp};

pub struct RandomGraph {
    pub graph: Graph,
    pub feed: Feed,
}

const ACTIVATIONS: [UnaryOp; 4] = [UnaryOp::Relu, UnaryOp::Tanh, UnaryOp::Sigmoid, UnaryOp::Neg];

struct Builder {
    rng: SplitRng,
    batch: usize,
    nodes: Vec<LayerNode>,
    feed: Feed,
    /// identity keys of stateless nodes, to keep the base graph free of
    /// accidental duplicates
    stateless_seen: BTreeSet<String>,
    counter: usize,
}

impl Builder {
    fn name(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{prefix}{}", self.counter)
    }

    fn pick(&mut self, len: usize) -> usize {
        (self.rng.next_u64() as usize) % len
    }

    fn float_nodes(&self) -> Vec<LayerNode> {
        self.nodes
            .iter()
            .filter(|n| n.dtype() == DType::F32)
            .cloned()
            .collect()
    }

    fn grow_one(&mut self, allow_dropout: bool) {
        let floats = self.float_nodes();
        let src = floats[self.pick(floats.len())].clone();
        let choice = self.rng.next_u64() % 100;
        let node = if choice < 25 {
            let units = 1 + self.pick(4);
            let name = self.name("lin");
            LayerNode::linear_with(
                &src,
                units,
                LinearOpts {
                    seed: self.rng.next_u64(),
                    name: Some(name),
                    ..Default::default()
                },
            )
            .unwrap()
        } else if choice < 50 {
            let fns = ACTIVATIONS[self.pick(ACTIVATIONS.len())];
            let key = format!("act:{}:{}", fns.name(), src.id());
            if !self.stateless_seen.insert(key) {
                return; // would duplicate an existing activation
            }
            let name = self.name("act");
            LayerNode::activation_named(&src, fns, Some(name))
        } else if choice < 70 {
            // add of two distinct same-width nodes
            let mates: Vec<LayerNode> = floats
                .iter()
                .filter(|n| n.n_units() == src.n_units() && n.id() != src.id())
                .cloned()
                .collect();
            if mates.is_empty() {
                return;
            }
            let other = mates[self.pick(mates.len())].clone();
            let key = format!("add:{}:{}", src.id(), other.id());
            if !self.stateless_seen.insert(key) {
                return;
            }
            let name = self.name("sum");
            LayerNode::add_named(&[src, other], Some(name)).unwrap()
        } else if choice < 82 && allow_dropout {
            let p = [0.2, 0.4, 0.6][self.pick(3)];
            let name = self.name("drop");
            LayerNode::dropout_named(&src, p, self.rng.next_u64(), Some(name)).unwrap()
        } else if choice < 91 {
            // lookup over a fresh index input with the graph's batch extent
            let idx_name = self.name("idx");
            let idx = LayerNode::input_typed(self.batch, DType::I64, Some(idx_name.clone()));
            let vocab = 4 + self.pick(5);
            let indices: Vec<i64> = (0..self.batch)
                .map(|_| (self.rng.next_u64() % vocab as u64) as i64)
                .collect();
            self.feed
                .insert(&idx_name, Tensor::from_i64([self.batch], indices).unwrap());
            let units = 1 + self.pick(4);
            let name = self.name("emb");
            let emb = LayerNode::lookup_named(
                &idx,
                vocab,
                units,
                self.rng.next_u64(),
                Some(name),
                DType::F32,
            )
            .unwrap();
            self.nodes.push(idx);
            emb
        } else {
            // module encapsulating linear -> tanh over src, or an
            // RNN-cell shape over two sources
            let units = 1 + self.pick(4);
            let hidden = LayerNode::linear_with(
                &src,
                units,
                LinearOpts {
                    seed: self.rng.next_u64(),
                    ..Default::default()
                },
            )
            .unwrap();
            let name = self.name("mod");
            if self.rng.next_u64().is_multiple_of(2) {
                let out = LayerNode::activation(&hidden, UnaryOp::Tanh);
                LayerNode::module_named(&[src], &out, Some(name)).unwrap()
            } else {
                let other = floats[self.pick(floats.len())].clone();
                if other.id() == src.id() {
                    let out = LayerNode::activation(&hidden, UnaryOp::Tanh);
                    LayerNode::module_named(&[src], &out, Some(name)).unwrap()
                } else {
                    let hidden2 = LayerNode::linear_with(
                        &other,
                        units,
                        LinearOpts {
                            seed: self.rng.next_u64(),
                            ..Default::default()
                        },
                    )
                    .unwrap();
                    let sum = LayerNode::add(&[hidden, hidden2]).unwrap();
                    let out = LayerNode::activation(&sum, UnaryOp::Tanh);
                    LayerNode::module_named(&[src, other], &out, Some(name)).unwrap()
                }
            }
        };
        self.nodes.push(node);
    }

    fn sinks(&self) -> Vec<LayerNode> {
        let consumed: BTreeSet<u64> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs().iter().map(|i| i.id()))
            .collect();
        self.nodes
            .iter()
            .filter(|n| !consumed.contains(&n.id()))
            .cloned()
            .collect()
    }
}

fn seed_builder(seed: u64, max_nodes: usize) -> Builder {
    let mut rng = SplitRng::new(seed);
    let batch = 1 + (rng.next_u64() % 3) as usize;
    let n_inputs = 1 + (rng.next_u64() % 2) as usize;
    let mut b = Builder {
        rng,
        batch,
        nodes: Vec::new(),
        feed: Feed::new(),
        stateless_seen: BTreeSet::new(),
        counter: 0,
    };
    for _ in 0..n_inputs {
        let units = 1 + b.pick(4);
        let name = b.name("in");
        let node = LayerNode::input_typed(units, DType::F32, Some(name.clone()));
        let data =
            Tensor::random_uniform([b.batch, units], -1.0, 1.0, b.rng.next_u64(), DType::F32)
                .unwrap();
        b.feed.insert(&name, data);
        b.nodes.push(node);
    }
    let grow = 2 + b.pick(max_nodes.saturating_sub(n_inputs + 1));
    for _ in 0..grow {
        if b.nodes.len() >= max_nodes {
            break;
        }
        b.grow_one(true);
    }
    b
}

/// A random valid layer graph of at most 10 nodes drawing on every
/// implemented kind, plus a feed covering its inputs.
pub fn random_graph(seed: u64) -> RandomGraph {
    let b = seed_builder(seed, 10);
    let outputs = b.sinks();
    let graph = Graph::build(&outputs, None).unwrap();
    RandomGraph {
        graph,
        feed: b.feed,
    }
}

pub struct PlantedGraph {
    pub graph: Graph,
    pub feed: Feed,
    pub planted: usize,
}

/// A random graph with injected dead nodes and duplicate stateless nodes.
/// `planted` counts exactly the members an optimize pass must remove.
pub fn random_graph_with_plants(seed: u64) -> PlantedGraph {
    let mut b = seed_builder(derive_seed(seed, 1), 8);
    let mut outputs = b.sinks();
    let mut members = b.nodes.clone();
    let mut planted = 0;

    // dead chains hanging off live float nodes, never consumed
    let dead_count = 1 + b.pick(2);
    for _ in 0..dead_count {
        let floats = b.float_nodes();
        let src = floats[b.pick(floats.len())].clone();
        let name = b.name("dead");
        let dead = LayerNode::linear_with(
            &src,
            1 + b.pick(3),
            LinearOpts {
                seed: b.rng.next_u64(),
                name: Some(name),
                ..Default::default()
            },
        )
        .unwrap();
        members.push(dead);
        planted += 1;
    }

    // duplicate stateless twins, each consumed through a fresh combiner
    let mut twinned: BTreeSet<u64> = BTreeSet::new();
    let twin_want = 1 + b.pick(2);
    let stateless: Vec<LayerNode> = b
        .nodes
        .iter()
        .filter(|n| n.state().slot_count() == 0 && !n.inputs().is_empty())
        .cloned()
        .collect();
    for _ in 0..twin_want {
        let candidates: Vec<&LayerNode> = stateless
            .iter()
            .filter(|n| !twinned.contains(&n.id()))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let orig = candidates[b.pick(candidates.len())].clone();
        twinned.insert(orig.id());
        let twin = match orig.kind() {
            layergraph::LayerKind::Activation(op) => {
                let name = b.name("twin");
                LayerNode::activation_named(&orig.inputs()[0], *op, Some(name))
            }
            layergraph::LayerKind::Add => {
                let name = b.name("twin");
                LayerNode::add_named(orig.inputs(), Some(name)).unwrap()
            }
            layergraph::LayerKind::Dropout { probability, seed } => {
                let name = b.name("twin");
                LayerNode::dropout_named(&orig.inputs()[0], *probability, *seed, Some(name))
                    .unwrap()
            }
            _ => continue,
        };
        let comb_name = b.name("comb");
        let comb = LayerNode::add_named(&[orig, twin.clone()], Some(comb_name)).unwrap();
        members.push(twin);
        members.push(comb.clone());
        outputs.push(comb);
        planted += 1;
    }

    let inputs: Vec<LayerNode> = members
        .iter()
        .filter(|n| n.inputs().is_empty())
        .cloned()
        .collect();
    let graph = Graph::build_from_members(&members, &inputs, &outputs).unwrap();
    PlantedGraph {
        graph,
        feed: b.feed,
        planted,
    }
}

pub fn tensors_bitwise_eq(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.bitwise_eq(y))
}
