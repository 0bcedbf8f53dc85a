//! Model abstraction and training harness: a model bundles inference,
//! training, and evaluation graphs that share their layer state records,
//! plus an SGD(-momentum) optimizer and fit/evaluate loops.

use std::collections::BTreeMap;

use crate::autodiff::backward;
use crate::error::{Error, Result};
use crate::graph::{Feed, Graph};
use crate::layers::{loss_node, ExecContext, LayerNode, LossKind, Mode};
use crate::plan::ExecutablePlan;
use crate::tensor::rng::derive_seed;
use crate::tensor::Tensor;

/// Mean over all elements of the squared difference; scalar output.
pub fn mse(pred: &LayerNode, target: &LayerNode) -> Result<LayerNode> {
    loss_node(LossKind::Mse, pred, target, None)
}

pub fn mse_named(pred: &LayerNode, target: &LayerNode, name: &str) -> Result<LayerNode> {
    loss_node(LossKind::Mse, pred, target, Some(name.to_string()))
}

/// Mean over the batch of `-sum(target * log softmax(logits))`, computed
/// via the log-sum-exp stabilized form; scalar output.
pub fn softmax_cross_entropy(logits: &LayerNode, onehot_target: &LayerNode) -> Result<LayerNode> {
    loss_node(LossKind::SoftmaxCrossEntropy, logits, onehot_target, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum OptimizerKind {
    Sgd,
    Momentum(f64),
}

/// Plain SGD, optionally with heavy-ball momentum:
/// `v <- momentum * v + grad; slot <- slot - lr * v`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    velocity: BTreeMap<(u64, String), Tensor>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            velocity: BTreeMap::new(),
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Result<Optimizer> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Invalid(format!(
                "momentum {momentum} must be in [0, 1)"
            )));
        }
        Ok(Optimizer {
            kind: OptimizerKind::Momentum(momentum),
            learning_rate,
            velocity: BTreeMap::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Apply one update to every trainable slot that received a gradient.
    fn apply(
        &mut self,
        slots: &[(String, crate::layers::LayerState, String)],
        grads: &crate::autodiff::AdjointMap,
    ) -> Result<()> {
        for (_, state, slot) in slots {
            let grad = match grads.slot_grad(state, slot) {
                Some(g) => g.clone(),
                None => continue,
            };
            let step = match self.kind {
                OptimizerKind::Sgd => grad,
                OptimizerKind::Momentum(m) => {
                    let key = (state.id(), slot.clone());
                    let v = match self.velocity.get(&key) {
                        Some(prev) => prev.scalar_mul(m)?.add_broadcast(&grad)?,
                        None => grad,
                    };
                    self.velocity.insert(key, v.clone());
                    v
                }
            };
            let current = state
                .slot(slot)
                .ok_or_else(|| Error::Invalid(format!("slot `{slot}` is unset")))?;
            let updated = current.sub(&step.scalar_mul(self.learning_rate)?)?;
            state.set_slot(slot, updated)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Accuracy => "accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// History export: one line per epoch, `epoch<TAB>mean_loss`.
pub fn render_history(history: &[EpochStats]) -> String {
    let mut out = String::new();
    for e in history {
        out.push_str(&format!("{}\t{:.16e}\n", e.epoch, e.mean_loss));
    }
    out
}

/// Inference, training, and evaluation graphs over one set of shared layer
/// states, with optimizer state and step counters.
#[derive(Debug)]
pub struct Model {
    inference: Graph,
    training: Graph,
    evaluation: Graph,
    loss: LayerNode,
    pred: LayerNode,
    target: LayerNode,
    optimizer: Optimizer,
    seed: u64,
    step: u64,
    epoch: u64,
    forward_plan: ExecutablePlan,
    forward_loss_pos: usize,
    infer_plan: ExecutablePlan,
    eval_plan: ExecutablePlan,
}

impl Model {
    /// `inputs` are the prediction path's inputs; `target` is the label
    /// placeholder the loss compares against. With `compile`, forward
    /// passes run through optimized plans (gradients always flow through
    /// the canonical schedule, so histories do not depend on the flag).
    pub fn new(
        inputs: &[LayerNode],
        pred: &LayerNode,
        target: &LayerNode,
        loss_kind: LossKind,
        optimizer: Optimizer,
        seed: u64,
        compile: bool,
    ) -> Result<Model> {
        let loss = loss_node(loss_kind, pred, target, None)?;
        let mut train_inputs = inputs.to_vec();
        train_inputs.push(target.clone());

        let inference = Graph::build(std::slice::from_ref(pred), Some(inputs))?;
        let training = Graph::build(&[loss.clone(), pred.clone()], Some(&train_inputs))?;
        let eval_mse = mse(pred, target)?;
        let evaluation = Graph::build(&[pred.clone(), eval_mse], Some(&train_inputs))?;

        let forward_plan = training.as_function_mode(compile, Mode::Train);
        let forward_loss_pos = 0; // loss is the training graph's first output
        let infer_plan = inference.as_function_mode(compile, Mode::Infer);
        let eval_plan = evaluation.as_function_mode(compile, Mode::Infer);
        Ok(Model {
            inference,
            training,
            evaluation,
            loss,
            pred: pred.clone(),
            target: target.clone(),
            optimizer,
            seed,
            step: 0,
            epoch: 0,
            forward_plan,
            forward_loss_pos,
            infer_plan,
            eval_plan,
        })
    }

    pub fn inference_graph(&self) -> &Graph {
        &self.inference
    }

    pub fn training_graph(&self) -> &Graph {
        &self.training
    }

    pub fn evaluation_graph(&self) -> &Graph {
        &self.evaluation
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch_count(&self) -> u64 {
        self.epoch
    }

    pub fn target_name(&self) -> &str {
        self.target.name()
    }

    pub fn prediction_node(&self) -> &LayerNode {
        &self.pred
    }

    pub fn loss_node(&self) -> &LayerNode {
        &self.loss
    }

    /// Inference-mode prediction on a feed.
    pub fn predict(&self, feed: &Feed) -> Result<Tensor> {
        let mut outs = self.infer_plan.call(feed)?;
        Ok(outs.remove(0))
    }

    /// One optimizer step: forward in train mode, backward, update. The
    /// returned loss is measured before the update. A non-finite loss
    /// aborts the step without touching state.
    pub fn train_step(&mut self, batch: &Feed) -> Result<f64> {
        let step_seed = derive_seed(self.seed, self.step);
        let outs = self.forward_plan.call_seeded(batch, step_seed)?;
        let loss_value = outs[self.forward_loss_pos].scalar_value()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss(self.step));
        }
        let ctx = ExecContext::train(step_seed);
        let grads = backward(&self.training, &self.loss, batch, &ctx)?;
        self.optimizer
            .apply(&self.training.trainable_slots(), &grads)?;
        self.step += 1;
        Ok(loss_value)
    }

    /// Run `epochs` passes over the dataset; returns per-epoch mean losses.
    /// Deterministic for a fixed model seed and dataset order.
    pub fn fit(&mut self, dataset: &[Feed], epochs: usize) -> Result<Vec<EpochStats>> {
        if epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut total = 0.0;
            for batch in dataset {
                total += self.train_step(batch)?;
            }
            self.epoch += 1;
            history.push(EpochStats {
                epoch: self.epoch as usize,
                mean_loss: total / dataset.len() as f64,
            });
        }
        Ok(history)
    }

    /// Inference-mode metrics over a dataset, weighted by example count.
    /// Never mutates state and never applies dropout.
    pub fn evaluate(&self, dataset: &[Feed], metrics: &[Metric]) -> Result<BTreeMap<String, f64>> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_examples = 0.0;
        for batch in dataset {
            let outs = self.eval_plan.call(batch)?;
            let pred = &outs[0];
            let batch_mse = outs[1].scalar_value()?;
            let examples = if pred.rank() >= 2 {
                pred.dims()[0] as f64
            } else {
                1.0
            };
            total_examples += examples;
            for m in metrics {
                let v = match m {
                    Metric::Mse => batch_mse,
                    Metric::Accuracy => {
                        let target = batch
                            .get(self.target.name())
                            .ok_or_else(|| Error::MissingInput(self.target.name().to_string()))?;
                        accuracy(pred, target)?
                    }
                };
                *sums.entry(m.name().to_string()).or_insert(0.0) += v * examples;
            }
        }
        Ok(sums
            .into_iter()
            .map(|(k, v)| (k, v / total_examples))
            .collect())
    }
}

/// Fraction of examples predicted correctly. Width-1 predictions threshold
/// at 0.5 against 0/1 targets; wider rows compare argmax positions
/// (one-hot targets).
pub fn accuracy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "accuracy over mismatched shapes {} and {}",
            pred.shape(),
            target.shape()
        )));
    }
    let units = pred.shape().last_dim().unwrap_or(1);
    let examples = pred.len() / units.max(1);
    if examples == 0 {
        return Err(Error::EmptyDataset);
    }
    let correct = if units == 1 {
        let p = pred.to_f64_vec();
        let t = target.to_f64_vec();
        p.iter()
            .zip(t.iter())
            .filter(|(p, t)| (**p >= 0.5) == (**t >= 0.5))
            .count()
    } else {
        let rows = pred.len() / units;
        let p = pred.reshape([rows, units])?.argmax(1)?;
        let t = target.reshape([rows, units])?.argmax(1)?;
        p.to_f64_vec()
            .iter()
            .zip(t.to_f64_vec().iter())
            .filter(|(a, b)| a == b)
            .count()
    };
    Ok(correct as f64 / examples as f64)
}
