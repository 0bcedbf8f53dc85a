//! Reverse-mode differentiation over a validated layer graph.
//!
//! [`backward`] sweeps the dependency order in reverse, seeding
//! d(loss)/d(loss) = 1 and propagating vector-Jacobian products per layer
//! kind. Fan-out contributions sum; slots shared between nodes
//! (`reuse_with`) accumulate one combined gradient. [`grad_check`] compares
//! the analytic gradients against central finite differences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Feed, Graph};
use crate::layers::{
    apply_dropout_mask, ExecContext, LayerKind, LayerNode, LayerState, LossKind, Mode,
};
use crate::plan::ExecutablePlan;
use crate::tensor::rng::{derive_seed, SplitRng};
use crate::tensor::{DType, Tensor, UnaryOp};

/// Gradients from one backward sweep: an adjoint per graph node (same shape
/// as the node's output) and a gradient per (state record, slot).
#[derive(Debug, Clone, Default)]
pub struct AdjointMap {
    node_adjoints: BTreeMap<u64, Tensor>,
    slot_grads: BTreeMap<(u64, String), Tensor>,
}

impl AdjointMap {
    pub fn node_adjoint(&self, node: &LayerNode) -> Option<&Tensor> {
        self.node_adjoints.get(&node.id())
    }

    pub fn slot_grad(&self, state: &LayerState, slot: &str) -> Option<&Tensor> {
        self.slot_grads.get(&(state.id(), slot.to_string()))
    }

    pub fn slot_grad_count(&self) -> usize {
        self.slot_grads.len()
    }

    fn accumulate_slot(&mut self, state: &LayerState, slot: &str, grad: Tensor) -> Result<()> {
        let key = (state.id(), slot.to_string());
        match self.slot_grads.remove(&key) {
            Some(prev) => {
                self.slot_grads.insert(key, prev.add_broadcast(&grad)?);
            }
            None => {
                self.slot_grads.insert(key, grad);
            }
        }
        Ok(())
    }

    /// Overwrite one slot gradient (test fixtures corrupt maps this way).
    pub fn set_slot_grad(&mut self, state: &LayerState, slot: &str, grad: Tensor) {
        self.slot_grads.insert((state.id(), slot.to_string()), grad);
    }
}

fn accumulate(dst: &mut Option<Tensor>, add: Tensor) -> Result<()> {
    *dst = Some(match dst.take() {
        Some(prev) => prev.add_broadcast(&add)?,
        None => add,
    });
    Ok(())
}

/// Reverse sweep from a scalar loss output. The loss node must be one of
/// the graph's outputs and evaluate to a single element.
pub fn backward(g: &Graph, loss: &LayerNode, feed: &Feed, ctx: &ExecContext) -> Result<AdjointMap> {
    if !g.outputs().iter().any(|o| o.id() == loss.id()) {
        return Err(Error::NotInGraph(loss.name().to_string()));
    }
    let plan = g.as_function_mode(false, ctx.mode);
    let values = plan.run(feed, ctx.seed)?;
    let loss_pos = plan
        .position_of(loss)
        .ok_or_else(|| Error::NotInGraph(loss.name().to_string()))?;
    if values[loss_pos].len() != 1 {
        return Err(Error::NonScalarLoss(loss.name().to_string()));
    }

    let mut adjoints: Vec<Option<Tensor>> = vec![None; values.len()];
    adjoints[loss_pos] = Some(Tensor::ones(
        values[loss_pos].shape().clone(),
        values[loss_pos].dtype(),
    ));

    let mut sink = AdjointMap::default();
    sweep(&plan, &values, &mut adjoints, ctx, &mut sink)?;

    for (i, adj) in adjoints.into_iter().enumerate() {
        if let Some(a) = adj {
            sink.node_adjoints.insert(plan.step_node(i).id(), a);
        }
    }
    Ok(sink)
}

fn sweep(
    plan: &ExecutablePlan,
    values: &[Tensor],
    adjoints: &mut [Option<Tensor>],
    ctx: &ExecContext,
    sink: &mut AdjointMap,
) -> Result<()> {
    for i in (0..plan.step_count()).rev() {
        let adj = match &adjoints[i] {
            Some(a) => a.clone(),
            None => continue,
        };
        if plan.step_is_fed(i) {
            continue; // sources: the adjoint itself is the result
        }
        let args = plan.step_args(i);
        let arg_values: Vec<&Tensor> = args.iter().map(|&j| &values[j]).collect();
        let arg_adjoints = vjp(plan.step_node(i), &arg_values, &values[i], &adj, ctx, sink)?;
        for (&j, g) in args.iter().zip(arg_adjoints) {
            if let Some(g) = g {
                accumulate(&mut adjoints[j], g)?;
            }
        }
    }
    Ok(())
}

/// Per-kind vector-Jacobian products. Returns one optional adjoint per
/// layer input (None for non-differentiable paths such as lookup indices);
/// slot gradients go straight into `sink`.
fn vjp(
    node: &LayerNode,
    args: &[&Tensor],
    out: &Tensor,
    adj: &Tensor,
    ctx: &ExecContext,
    sink: &mut AdjointMap,
) -> Result<Vec<Option<Tensor>>> {
    match node.kind() {
        LayerKind::Input => Ok(Vec::new()),
        LayerKind::Linear { bias } => {
            let x = args[0];
            let state = node.state();
            let w = state.slot("weights").expect("weights are set");
            let in_units = w.dims()[0];
            let rows = x.len() / in_units;
            let x2 = x.reshape([rows, in_units])?;
            let dy2 = adj.reshape([rows, node.n_units()])?;
            let dw = x2.transpose_2d()?.matmul(&dy2)?;
            sink.accumulate_slot(state, "weights", dw)?;
            if *bias {
                sink.accumulate_slot(state, "bias", dy2.reduce_sum(Some(0))?)?;
            }
            let dx = dy2.matmul(&w.transpose_2d()?)?.reshape(x.dims().to_vec())?;
            Ok(vec![Some(dx)])
        }
        LayerKind::Activation(op) => {
            let x = args[0];
            let dx = match op {
                UnaryOp::Relu => {
                    // derivative at exactly 0 is 0
                    let mut d = adj.clone();
                    for i in 0..x.len() {
                        if x.get_f64(i) <= 0.0 {
                            d.set_f64(i, 0.0);
                        }
                    }
                    d
                }
                UnaryOp::Tanh => {
                    let ones = Tensor::ones(out.shape().clone(), out.dtype());
                    adj.mul_elementwise(&ones.sub(&out.mul_elementwise(out)?)?)?
                }
                UnaryOp::Sigmoid => {
                    let ones = Tensor::ones(out.shape().clone(), out.dtype());
                    adj.mul_elementwise(&out.mul_elementwise(&ones.sub(out)?)?)?
                }
                UnaryOp::Exp => adj.mul_elementwise(out)?,
                UnaryOp::Log => adj.mul_elementwise(&x.recip()?)?,
                UnaryOp::Neg => adj.scalar_mul(-1.0)?,
            };
            Ok(vec![Some(dx)])
        }
        LayerKind::Add => Ok(args.iter().map(|_| Some(adj.clone())).collect()),
        LayerKind::Dropout { probability, seed } => {
            let dx = if ctx.mode == Mode::Infer || *probability == 0.0 {
                adj.clone()
            } else {
                // identical mask and scale as the forward pass
                apply_dropout_mask(adj, *probability, derive_seed(*seed, ctx.seed))
            };
            Ok(vec![Some(dx)])
        }
        LayerKind::Lookup { vocab_size } => {
            let state = node.state();
            let table = state.slot("table").expect("lookup table is set");
            let d = table.dims()[1];
            let dt = crate::tensor::scatter_add_rows(*vocab_size, d, args[0], adj, table.dtype())?;
            sink.accumulate_slot(state, "table", dt)?;
            Ok(vec![None])
        }
        LayerKind::Module(body) => {
            let inner = body.graph();
            let plan = inner.as_function_mode(false, ctx.mode);
            let mut feed = Feed::new();
            for (decl, value) in inner.inputs().iter().zip(args.iter()) {
                feed.insert(decl.name(), (*value).clone());
            }
            let values = plan.run(&feed, ctx.seed)?;
            let out_pos = plan
                .position_of(&inner.outputs()[0])
                .expect("module output is scheduled");
            let mut adjoints: Vec<Option<Tensor>> = vec![None; values.len()];
            adjoints[out_pos] = Some(adj.clone());
            sweep(&plan, &values, &mut adjoints, ctx, sink)?;
            let mut input_adjoints = Vec::with_capacity(args.len());
            for decl in inner.inputs() {
                let pos = plan.position_of(decl).expect("module input is scheduled");
                input_adjoints.push(adjoints[pos].clone());
            }
            Ok(input_adjoints)
        }
        LayerKind::Loss(kind) => loss_vjp(*kind, args[0], args[1], adj),
    }
}

fn loss_vjp(
    kind: LossKind,
    pred: &Tensor,
    target: &Tensor,
    adj: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    let upstream = adj.scalar_value()?;
    match kind {
        LossKind::Mse => {
            let n = pred.len() as f64;
            let dp = pred.sub(target)?.scalar_mul(2.0 / n * upstream)?;
            let dt = dp.scalar_mul(-1.0)?;
            Ok(vec![Some(dp), Some(dt)])
        }
        LossKind::SoftmaxCrossEntropy => {
            let batch = pred.dims()[0] as f64;
            let s = pred.softmax()?;
            let dl = s.sub(target)?.scalar_mul(upstream / batch)?;
            let dt = pred.log_softmax()?.scalar_mul(-upstream / batch)?;
            Ok(vec![Some(dl), Some(dt)])
        }
    }
}

const FD_STEP: f64 = 1e-6;
const FD_SUBSAMPLE_THRESHOLD: usize = 10_000;

/// One compared coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub slot: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Finite-difference comparison report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub checked: usize,
    pub max_relative_error: f64,
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Machine-readable lines: slot, coordinate, analytic, numeric,
    /// relative error — one per failing coordinate.
    pub fn render_failures(&self) -> String {
        let mut out = String::new();
        for e in &self.failures {
            out.push_str(&format!(
                "{}\t{}\t{:.16e}\t{:.16e}\t{:.16e}\n",
                e.slot, e.coordinate, e.analytic, e.numeric, e.relative_error
            ));
        }
        out
    }
}

/// Compare [`backward`] against central finite differences over every
/// trainable element (subsampled above 10,000 elements), in a train-mode
/// context so dropout masks are exercised. Requires float64 slots.
pub fn grad_check(
    g: &Graph,
    loss: &LayerNode,
    feed: &Feed,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let ctx = ExecContext::train(0);
    let analytic = backward(g, loss, feed, &ctx)?;
    grad_check_against(g, loss, feed, tolerance, &analytic, &ctx)
}

/// The finite-difference side of [`grad_check`], comparing against a given
/// adjoint map.
pub fn grad_check_against(
    g: &Graph,
    loss: &LayerNode,
    feed: &Feed,
    tolerance: f64,
    analytic: &AdjointMap,
    ctx: &ExecContext,
) -> Result<GradCheckReport> {
    let loss_out = g
        .outputs()
        .iter()
        .position(|o| o.id() == loss.id())
        .ok_or_else(|| Error::NotInGraph(loss.name().to_string()))?;
    let plan = g.as_function_mode(false, ctx.mode);
    let eval =
        |feed: &Feed| -> Result<f64> { plan.call_seeded(feed, ctx.seed)?[loss_out].scalar_value() };

    let mut report = GradCheckReport {
        tolerance,
        step: FD_STEP,
        checked: 0,
        max_relative_error: 0.0,
        failures: Vec::new(),
    };
    for (label, state, slot) in g.trainable_slots() {
        let value = state
            .slot(&slot)
            .ok_or_else(|| Error::Invalid(format!("slot `{label}` is unset")))?;
        if value.dtype() != DType::F64 {
            return Err(Error::Invalid(format!(
                "grad_check requires float64 state, `{label}` is {}",
                value.dtype()
            )));
        }
        let n = value.len();
        let coords: Vec<usize> = if n > FD_SUBSAMPLE_THRESHOLD {
            let mut rng = SplitRng::new(derive_seed(0xF1D0, state.id()));
            (0..FD_SUBSAMPLE_THRESHOLD)
                .map(|_| (rng.next_u64() as usize) % n)
                .collect()
        } else {
            (0..n).collect()
        };
        let grads = analytic.slot_grad(&state, &slot);
        for idx in coords {
            state.nudge_slot_element(&slot, idx, FD_STEP)?;
            let up = eval(feed)?;
            state.nudge_slot_element(&slot, idx, -2.0 * FD_STEP)?;
            let down = eval(feed)?;
            state.nudge_slot_element(&slot, idx, FD_STEP)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grads.map(|t| t.get_f64(idx)).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
            }
            if rel > tolerance {
                report.failures.push(GradCheckEntry {
                    slot: label.clone(),
                    coordinate: idx,
                    analytic: a,
                    numeric,
                    relative_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerNode;
    use crate::train;

    fn f64_input(n: usize, name: &str) -> LayerNode {
        LayerNode::input_typed(n, DType::F64, Some(name.to_string()))
    }

    fn mean_loss_graph(of: &LayerNode, inputs: &[LayerNode]) -> (Graph, LayerNode) {
        // mse against a zero target is a clean scalar head for tests
        let target = f64_input(of.n_units(), "__target");
        let loss = train::mse(of, &target).unwrap();
        let mut all: Vec<LayerNode> = inputs.to_vec();
        all.push(target);
        let g = Graph::build(std::slice::from_ref(&loss), Some(&all)).unwrap();
        (g, loss)
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let x = f64_input(3, "x");
        let l = LayerNode::linear(&x, 2, 5).unwrap();
        let (g, loss) = mean_loss_graph(&l, &[x]);
        let feed = Feed::new()
            .with(
                "x",
                Tensor::random_uniform([4, 3], -1.0, 1.0, 6, DType::F64).unwrap(),
            )
            .with("__target", Tensor::zeros([4, 2], DType::F64));
        let report = grad_check(&g, &loss, &feed, 1e-5).unwrap();
        assert!(
            report.passed(),
            "max rel err {}\n{}",
            report.max_relative_error,
            report.render_failures()
        );
        assert!(report.checked > 0);
    }

    #[test]
    fn loss_independent_slot_gets_zero_gradient() {
        let x = f64_input(2, "x");
        let used = LayerNode::linear(&x, 2, 7).unwrap();
        let unused = LayerNode::linear(&x, 2, 8).unwrap();
        let target = f64_input(2, "t");
        let loss = train::mse(&used, &target).unwrap();
        // Both linears are outputs so both are in the graph; loss only sees one.
        let g = Graph::build(
            &[loss.clone(), unused.clone()],
            Some(&[x.clone(), target.clone()]),
        )
        .unwrap();
        let feed = Feed::new()
            .with("x", Tensor::ones([1, 2], DType::F64))
            .with("t", Tensor::zeros([1, 2], DType::F64));
        let grads = backward(&g, &loss, &feed, &ExecContext::train(0)).unwrap();
        assert!(grads.slot_grad(unused.state(), "weights").is_none());
        assert!(grads.slot_grad(used.state(), "weights").is_some());
    }

    #[test]
    fn shared_state_gradient_is_the_sum_of_isolated_uses() {
        let xa = f64_input(2, "xa");
        let xb = f64_input(2, "xb");
        let l = LayerNode::linear(&xa, 3, 9).unwrap();
        let l2 = l.reuse_with(std::slice::from_ref(&xb)).unwrap();
        let both = LayerNode::add(&[l.clone(), l2.clone()]).unwrap();
        let target = f64_input(3, "t");
        let loss = train::mse(&both, &target).unwrap();
        let g = Graph::build(
            std::slice::from_ref(&loss),
            Some(&[xa.clone(), xb.clone(), target.clone()]),
        )
        .unwrap();
        let fa = Tensor::random_uniform([2, 2], -1.0, 1.0, 10, DType::F64).unwrap();
        let fb = Tensor::random_uniform([2, 2], -1.0, 1.0, 11, DType::F64).unwrap();
        let tv = Tensor::random_uniform([2, 3], -1.0, 1.0, 12, DType::F64).unwrap();
        let feed = Feed::new()
            .with("xa", fa.clone())
            .with("xb", fb.clone())
            .with("t", tv.clone());
        let combined = backward(&g, &loss, &feed, &ExecContext::train(0)).unwrap();
        let dw = combined.slot_grad(l.state(), "weights").unwrap().clone();

        // Isolated branches: d(loss)/dW through each use alone, summed.
        // loss = mean((l(xa)+l(xb) - t)^2); freezing one branch's
        // contribution is exactly backward over the same graph where the
        // other use is replaced by a constant input holding its value.
        let c = ExecContext::train(0);
        let la = l.compute(&[&fa], &c).unwrap();
        let lb = l.compute(&[&fb], &c).unwrap();

        let frozen_b = f64_input(3, "frozen_b");
        let sum_a = LayerNode::add(&[l.clone(), frozen_b.clone()]).unwrap();
        let t2 = f64_input(3, "t2");
        let loss_a = train::mse(&sum_a, &t2).unwrap();
        let ga = Graph::build(
            std::slice::from_ref(&loss_a),
            Some(&[xa.clone(), frozen_b.clone(), t2.clone()]),
        )
        .unwrap();
        let grads_a = backward(
            &ga,
            &loss_a,
            &Feed::new()
                .with("xa", fa.clone())
                .with("frozen_b", lb.clone())
                .with("t2", tv.clone()),
            &c,
        )
        .unwrap();

        let frozen_a = f64_input(3, "frozen_a");
        let l_b = l.reuse_with(std::slice::from_ref(&xb)).unwrap();
        let sum_b = LayerNode::add(&[frozen_a.clone(), l_b.clone()]).unwrap();
        let t3 = f64_input(3, "t3");
        let loss_b = train::mse(&sum_b, &t3).unwrap();
        let gb = Graph::build(
            std::slice::from_ref(&loss_b),
            Some(&[frozen_a.clone(), xb.clone(), t3.clone()]),
        )
        .unwrap();
        let grads_b = backward(
            &gb,
            &loss_b,
            &Feed::new()
                .with("frozen_a", la)
                .with("xb", fb)
                .with("t3", tv),
            &c,
        )
        .unwrap();

        let da = grads_a.slot_grad(l.state(), "weights").unwrap();
        let db = grads_b.slot_grad(l.state(), "weights").unwrap();
        let summed = da.add_broadcast(db).unwrap();
        for i in 0..dw.len() {
            assert!(
                (dw.get_f64(i) - summed.get_f64(i)).abs() < 1e-12,
                "coordinate {i}: {} vs {}",
                dw.get_f64(i),
                summed.get_f64(i)
            );
        }
    }

    #[test]
    fn stateless_graph_grad_check_passes_vacuously() {
        let x = f64_input(2, "x");
        let a = LayerNode::activation(&x, UnaryOp::Tanh);
        let t = f64_input(2, "t");
        let loss = train::mse(&a, &t).unwrap();
        let g = Graph::build(std::slice::from_ref(&loss), Some(&[x, t])).unwrap();
        let feed = Feed::new()
            .with("x", Tensor::ones([1, 2], DType::F64))
            .with("t", Tensor::zeros([1, 2], DType::F64));
        let report = grad_check(&g, &loss, &feed, 1e-6).unwrap();
        assert!(report.passed());
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn corrupted_gradient_is_localized() {
        let x = f64_input(2, "x");
        let l = LayerNode::linear(&x, 2, 13).unwrap();
        let t = f64_input(2, "t");
        let loss = train::mse(&l, &t).unwrap();
        let g = Graph::build(std::slice::from_ref(&loss), Some(&[x, t])).unwrap();
        let feed = Feed::new()
            .with(
                "x",
                Tensor::random_uniform([3, 2], -1.0, 1.0, 14, DType::F64).unwrap(),
            )
            .with("t", Tensor::zeros([3, 2], DType::F64));
        let ctx = ExecContext::train(0);
        let mut analytic = backward(&g, &loss, &feed, &ctx).unwrap();

        // Corrupt one weight coordinate's analytic gradient.
        let mut dw = analytic.slot_grad(l.state(), "weights").unwrap().clone();
        let poisoned = dw.get_f64(2) + 5.0;
        dw.set_f64(2, poisoned);
        analytic.set_slot_grad(l.state(), "weights", dw);

        let report = grad_check_against(&g, &loss, &feed, 1e-5, &analytic, &ctx).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].coordinate, 2);
        assert!(report.failures[0].slot.ends_with(".weights"));
    }

    #[test]
    fn dropout_backward_reuses_the_forward_mask() {
        let x = f64_input(6, "x");
        let d = LayerNode::dropout(&x, 0.5, 21).unwrap();
        let t = f64_input(6, "t");
        let loss = train::mse(&d, &t).unwrap();
        let g = Graph::build(&[loss.clone(), d.clone()], Some(&[x.clone(), t.clone()])).unwrap();
        let xv = Tensor::ones([20, 6], DType::F64);
        let feed = Feed::new()
            .with("x", xv)
            .with("t", Tensor::zeros([20, 6], DType::F64));
        let ctx = ExecContext::train(77);
        let outs = g.execute(&feed, &ctx).unwrap();
        let forward_out = &outs[1];
        let grads = backward(&g, &loss, &feed, &ctx).unwrap();
        let dx = grads.node_adjoint(&x).unwrap();
        // Exact zero-pattern match between the forward output and the
        // gradient that flowed back to x.
        for i in 0..forward_out.len() {
            assert_eq!(
                forward_out.get_f64(i) == 0.0,
                dx.get_f64(i) == 0.0,
                "mask mismatch at {i}"
            );
        }
    }

    #[test]
    fn lookup_gradient_is_row_sparse() {
        let idx = LayerNode::input_typed(2, DType::I64, Some("idx".into()));
        let emb = LayerNode::lookup_named(&idx, 5, 3, 22, Some("emb".into()), DType::F64).unwrap();
        let t = f64_input(3, "t");
        let loss = train::mse(&emb, &t).unwrap();
        let g = Graph::build(std::slice::from_ref(&loss), Some(&[idx.clone(), t.clone()])).unwrap();
        let feed = Feed::new()
            .with("idx", Tensor::from_i64([1, 2], vec![1, 3]).unwrap())
            .with("t", Tensor::zeros([1, 2, 3], DType::F64));
        let grads = backward(&g, &loss, &feed, &ExecContext::train(0)).unwrap();
        let dt = grads.slot_grad(emb.state(), "table").unwrap();
        for row in 0..5 {
            let touched = (0..3).any(|c| dt.get_f64(row * 3 + c) != 0.0);
            assert_eq!(touched, row == 1 || row == 3, "row {row}");
        }

        let report = grad_check(&g, &loss, &feed, 1e-5).unwrap();
        assert!(report.passed(), "max rel {}", report.max_relative_error);
    }

    #[test]
    fn module_backward_matches_flat_graph() {
        let x = f64_input(3, "x");
        let h = f64_input(4, "h");
        let w = LayerNode::linear(&x, 4, 31).unwrap();
        let u = LayerNode::linear(&h, 4, 32).unwrap();
        let s = LayerNode::add(&[w.clone(), u.clone()]).unwrap();
        let out = LayerNode::activation(&s, UnaryOp::Tanh);
        let cell = LayerNode::module(&[x.clone(), h.clone()], &out).unwrap();

        let t = f64_input(4, "t");
        let loss_m = train::mse(&cell, &t).unwrap();
        let gm = Graph::build(
            std::slice::from_ref(&loss_m),
            Some(&[x.clone(), h.clone(), t.clone()]),
        )
        .unwrap();

        let t2 = f64_input(4, "t2");
        let loss_f = train::mse(&out, &t2).unwrap();
        let gf = Graph::build(
            std::slice::from_ref(&loss_f),
            Some(&[x.clone(), h.clone(), t2.clone()]),
        )
        .unwrap();

        let xv = Tensor::random_uniform([2, 3], -1.0, 1.0, 33, DType::F64).unwrap();
        let hv = Tensor::random_uniform([2, 4], -1.0, 1.0, 34, DType::F64).unwrap();
        let tv = Tensor::random_uniform([2, 4], -1.0, 1.0, 35, DType::F64).unwrap();
        let ctx = ExecContext::train(0);

        let feed_m = Feed::new()
            .with("x", xv.clone())
            .with("h", hv.clone())
            .with("t", tv.clone());
        let feed_f = Feed::new().with("x", xv).with("h", hv).with("t2", tv);
        let grads_m = backward(&gm, &loss_m, &feed_m, &ctx).unwrap();
        let grads_f = backward(&gf, &loss_f, &feed_f, &ctx).unwrap();

        for (node, slot) in [(&w, "weights"), (&w, "bias"), (&u, "weights"), (&u, "bias")] {
            let a = grads_m.slot_grad(node.state(), slot).unwrap();
            let b = grads_f.slot_grad(node.state(), slot).unwrap();
            for i in 0..a.len() {
                assert!(
                    (a.get_f64(i) - b.get_f64(i)).abs() < 1e-12,
                    "{slot}[{i}]: {} vs {}",
                    a.get_f64(i),
                    b.get_f64(i)
                );
            }
        }
    }

    #[test]
    fn module_with_inner_dropout_grad_checks() {
        // the mask inside the module must replay identically for every
        // finite-difference evaluation and for the backward recursion
        let x = f64_input(3, "x");
        let l = LayerNode::linear(&x, 3, 61).unwrap();
        let d = LayerNode::dropout(&l, 0.5, 62).unwrap();
        let m = LayerNode::module(std::slice::from_ref(&x), &d).unwrap();
        let t = f64_input(3, "t");
        let loss = train::mse(&m, &t).unwrap();
        let g = Graph::build(std::slice::from_ref(&loss), Some(&[x, t])).unwrap();
        let feed = Feed::new()
            .with(
                "x",
                Tensor::random_uniform([4, 3], -1.0, 1.0, 63, DType::F64).unwrap(),
            )
            .with(
                "t",
                Tensor::random_uniform([4, 3], -1.0, 1.0, 64, DType::F64).unwrap(),
            );
        let report = grad_check(&g, &loss, &feed, 1e-4).unwrap();
        assert!(
            report.passed(),
            "max rel {}\n{}",
            report.max_relative_error,
            report.render_failures()
        );
    }

    #[test]
    fn nested_modules_differentiate_through_both_levels() {
        let x = f64_input(2, "x");
        let inner_lin = LayerNode::linear(&x, 3, 65).unwrap();
        let inner_out = LayerNode::activation(&inner_lin, UnaryOp::Tanh);
        let inner = LayerNode::module(std::slice::from_ref(&x), &inner_out).unwrap();

        let outer_lin = LayerNode::linear(&inner, 2, 66).unwrap();
        let outer = LayerNode::module(std::slice::from_ref(&x), &outer_lin).unwrap();

        let t = f64_input(2, "t");
        let loss = train::mse(&outer, &t).unwrap();
        let g = Graph::build(std::slice::from_ref(&loss), Some(&[x, t])).unwrap();
        let feed = Feed::new()
            .with(
                "x",
                Tensor::random_uniform([3, 2], -1.0, 1.0, 67, DType::F64).unwrap(),
            )
            .with(
                "t",
                Tensor::random_uniform([3, 2], -1.0, 1.0, 68, DType::F64).unwrap(),
            );
        let grads = backward(&g, &loss, &feed, &ExecContext::train(0)).unwrap();
        assert!(grads.slot_grad(inner_lin.state(), "weights").is_some());
        assert!(grads.slot_grad(outer_lin.state(), "weights").is_some());

        let report = grad_check(&g, &loss, &feed, 1e-4).unwrap();
        assert!(
            report.passed(),
            "max rel {}\n{}",
            report.max_relative_error,
            report.render_failures()
        );
    }

    #[test]
    fn accumulation_is_order_independent() {
        // add(a, b) vs add(b, a): consumer traversal order flips, the
        // shared-weight gradient must agree to 1e-12.
        let x = f64_input(2, "x");
        let l = LayerNode::linear(&x, 3, 41).unwrap();
        let r = l.reuse_with(std::slice::from_ref(&x)).unwrap();
        let t = f64_input(3, "t");
        let xv = Tensor::random_uniform([2, 2], -1.0, 1.0, 42, DType::F64).unwrap();
        let tv = Tensor::random_uniform([2, 3], -1.0, 1.0, 43, DType::F64).unwrap();

        let mut grads = Vec::new();
        for flip in [false, true] {
            let pair = if flip {
                [r.clone(), l.clone()]
            } else {
                [l.clone(), r.clone()]
            };
            let s = LayerNode::add(&pair).unwrap();
            let loss = train::mse(&s, &t).unwrap();
            let g =
                Graph::build(std::slice::from_ref(&loss), Some(&[x.clone(), t.clone()])).unwrap();
            let feed = Feed::new().with("x", xv.clone()).with("t", tv.clone());
            let gm = backward(&g, &loss, &feed, &ExecContext::train(0)).unwrap();
            grads.push(gm.slot_grad(l.state(), "weights").unwrap().clone());
        }
        for i in 0..grads[0].len() {
            assert!((grads[0].get_f64(i) - grads[1].get_f64(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = f64_input(2, "x");
        let l = LayerNode::linear(&x, 2, 51).unwrap();
        let g = Graph::build(std::slice::from_ref(&l), Some(std::slice::from_ref(&x))).unwrap();
        let feed = Feed::new().with("x", Tensor::ones([1, 2], DType::F64));
        assert!(matches!(
            backward(&g, &l, &feed, &ExecContext::train(0)),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn loss_not_among_outputs_rejected() {
        let x = f64_input(2, "x");
        let a = LayerNode::activation(&x, UnaryOp::Tanh);
        let t = f64_input(2, "t");
        let loss = train::mse(&a, &t).unwrap();
        let g = Graph::build(&[a], Some(&[x])).unwrap();
        let feed = Feed::new();
        assert!(matches!(
            backward(&g, &loss, &feed, &ExecContext::train(0)),
            Err(Error::NotInGraph(_))
        ));
    }
}
