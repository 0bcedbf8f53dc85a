//! Command implementations behind the `layergraph` binary: `describe`,
//! `train`, and `eval` over graph spec files and delimiter-separated data.
//!
//! Results go to stdout, diagnostics to stderr. Exit codes are stable:
//! 0 success, 1 I/O, 2 validation or parse failure, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use crate::error::{Error, Result};
use crate::graph::Feed;
use crate::layers::{LayerNode, LossKind};
use crate::spec::{materialize, parse_spec, BuiltSpec};
use crate::tensor::{write_tsr, Tensor};
use crate::train::{render_history, Metric, Model, Optimizer};

pub const SEED_ENV: &str = "LAYERGRAPH_SEED";

/// Name the train/eval commands give the generated label placeholder.
pub const TARGET_NAME: &str = "target";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    SoftmaxCe,
}

impl LossArg {
    fn kind(self) -> LossKind {
        match self {
            LossArg::Mse => LossKind::Mse,
            LossArg::SoftmaxCe => LossKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Mse,
    Accuracy,
}

impl MetricArg {
    fn metric(self) -> Metric {
        match self {
            MetricArg::Mse => Metric::Mse,
            MetricArg::Accuracy => Metric::Accuracy,
        }
    }
}

#[derive(Debug)]
pub struct TrainArgs {
    pub spec: PathBuf,
    pub data: PathBuf,
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossArg,
    pub seed: Option<u64>,
    pub compile: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct EvalArgs {
    pub spec: PathBuf,
    pub state_dir: PathBuf,
    pub data: PathBuf,
    pub metrics: Vec<MetricArg>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 1,
        Error::NonFiniteLoss(_) => 3,
        _ => 2,
    }
}

fn run(result: Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn default_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var(SEED_ENV)
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
    })
    .unwrap_or(0)
}

fn load_spec(path: &Path, seed: u64) -> Result<BuiltSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec = parse_spec(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    materialize(&spec, base, seed)
}

/// Rows of a data file: a `inputs=K targets=M` header, then one example
/// per line with K+M delimiter-separated values.
struct DataSet {
    input_cols: usize,
    target_cols: usize,
    rows: Vec<Vec<f64>>,
}

fn load_data(path: &Path) -> Result<DataSet> {
    let text = std::fs::read_to_string(path)?;
    let mut header: Option<(usize, usize)> = None;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        match header {
            None => {
                let mut inputs = None;
                let mut targets = None;
                for f in &fields {
                    if let Some(v) = f.strip_prefix("inputs=") {
                        inputs = v.parse::<usize>().ok();
                    } else if let Some(v) = f.strip_prefix("targets=") {
                        targets = v.parse::<usize>().ok();
                    }
                }
                match (inputs, targets) {
                    (Some(i), Some(t)) if i > 0 && t > 0 => header = Some((i, t)),
                    _ => {
                        return Err(Error::ParseError {
                            line: line_no,
                            column: 1,
                            message: "data header wants `inputs=<k> targets=<m>`".to_string(),
                        })
                    }
                }
            }
            Some((i, t)) => {
                if fields.len() != i + t {
                    return Err(Error::ParseError {
                        line: line_no,
                        column: 1,
                        message: format!("expected {} values, got {}", i + t, fields.len()),
                    });
                }
                let mut row = Vec::with_capacity(i + t);
                for f in fields {
                    row.push(f.parse::<f64>().map_err(|_| Error::ParseError {
                        line: line_no,
                        column: 1,
                        message: format!("bad value `{f}`"),
                    })?);
                }
                rows.push(row);
            }
        }
    }
    let (input_cols, target_cols) = header.ok_or_else(|| Error::ParseError {
        line: 1,
        column: 1,
        message: "data file is missing its header".to_string(),
    })?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(DataSet {
        input_cols,
        target_cols,
        rows,
    })
}

/// Split data columns across the graph's declared inputs (in order) and
/// the generated target placeholder.
fn build_feed(built: &BuiltSpec, data: &DataSet, target: &LayerNode) -> Result<Feed> {
    let declared: usize = built.graph.inputs().iter().map(|n| n.n_units()).sum();
    if declared != data.input_cols {
        return Err(Error::Invalid(format!(
            "spec inputs take {} columns, data file provides {}",
            declared, data.input_cols
        )));
    }
    let n = data.rows.len();
    let mut feed = Feed::new();
    let mut col = 0usize;
    for node in built.graph.inputs() {
        let units = node.n_units();
        let mut values = Vec::with_capacity(n * units);
        for row in &data.rows {
            values.extend_from_slice(&row[col..col + units]);
        }
        let t = Tensor::from_f64([n, units], values)?.cast(node.dtype());
        feed.insert(node.name(), t);
        col += units;
    }
    let mut tvals = Vec::with_capacity(n * data.target_cols);
    for row in &data.rows {
        tvals.extend_from_slice(&row[data.input_cols..]);
    }
    let t = Tensor::from_f64([n, data.target_cols], tvals)?.cast(target.dtype());
    feed.insert(target.name(), t);
    Ok(feed)
}

fn single_output(built: &BuiltSpec) -> Result<LayerNode> {
    match built.graph.outputs() {
        [only] => Ok(only.clone()),
        outs => Err(Error::Invalid(format!(
            "training needs exactly one spec output, found {}",
            outs.len()
        ))),
    }
}

pub fn cmd_describe(spec: &Path) -> i32 {
    run((|| {
        let built = load_spec(spec, default_seed(None))?;
        let plan = built.graph.as_function(false);
        print!("{}", plan.describe());
        Ok(())
    })())
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    run((|| {
        if args.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if !(args.lr.is_finite() && args.lr >= 0.0) {
            return Err(Error::Invalid(format!("bad learning rate {}", args.lr)));
        }
        let seed = default_seed(args.seed);
        let built = load_spec(&args.spec, seed)?;
        let pred = single_output(&built)?;
        let data = load_data(&args.data)?;
        let target = LayerNode::input_typed(
            data.target_cols,
            pred.dtype(),
            Some(TARGET_NAME.to_string()),
        );
        let feed = build_feed(&built, &data, &target)?;
        let mut model = Model::new(
            built.graph.inputs(),
            &pred,
            &target,
            args.loss.kind(),
            Optimizer::sgd(args.lr),
            seed,
            args.compile,
        )?;
        let history = model.fit(&[feed], args.epochs)?;
        let final_loss = history.last().expect("epochs >= 1").mean_loss;
        println!("final_loss\t{final_loss:.16e}");

        if let Some(out) = &args.out {
            let state_dir = out.join("state");
            std::fs::create_dir_all(&state_dir)?;
            std::fs::write(out.join("history.tsv"), render_history(&history))?;
            for (label, state, slot) in model.training_graph().trainable_slots() {
                let tensor = state
                    .slot(&slot)
                    .ok_or_else(|| Error::Invalid(format!("slot `{label}` is unset")))?;
                write_tsr(&tensor, &state_dir.join(format!("{label}.tsr")))?;
            }
        }
        Ok(())
    })())
}

pub fn cmd_eval(args: &EvalArgs) -> i32 {
    run((|| {
        let seed = default_seed(None);
        let built = load_spec(&args.spec, seed)?;
        let pred = single_output(&built)?;
        load_state_dir(&built, &args.state_dir)?;
        let data = load_data(&args.data)?;
        let target = LayerNode::input_typed(
            data.target_cols,
            pred.dtype(),
            Some(TARGET_NAME.to_string()),
        );
        let feed = build_feed(&built, &data, &target)?;
        let model = Model::new(
            built.graph.inputs(),
            &pred,
            &target,
            LossKind::Mse,
            Optimizer::sgd(0.0),
            seed,
            false,
        )?;
        let metrics: Vec<Metric> = if args.metrics.is_empty() {
            vec![Metric::Mse]
        } else {
            args.metrics.iter().map(|m| m.metric()).collect()
        };
        let values = model.evaluate(&[feed], &metrics)?;
        for (name, value) in &values {
            println!("{name}\t{value}");
        }
        Ok(())
    })())
}

/// Apply every `<node>.<slot>.tsr` blob found in a state directory. Blobs
/// never change shape or dtype of a slot; incompatible files fail with a
/// validation error.
fn load_state_dir(built: &BuiltSpec, dir: &Path) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "tsr").unwrap_or(false))
        .collect();
    entries.sort();
    for path in entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let (node, slot) = stem.split_once('.').ok_or_else(|| {
            Error::Invalid(format!("state blob `{stem}.tsr` wants <node>.<slot>.tsr"))
        })?;
        crate::spec::apply_state_blob(&built.nodes, node, slot, &path)?;
    }
    Ok(())
}

/// Name-to-node map helper for tests and tooling.
pub fn node_map(built: &BuiltSpec) -> &BTreeMap<String, LayerNode> {
    &built.nodes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_parsing_and_column_split() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("d.tsv");
        std::fs::write(
            &data_path,
            "inputs=2 targets=1\n0 0 0\n0 1 1\n1 0 1\n1 1 0\n",
        )
        .unwrap();
        let data = load_data(&data_path).unwrap();
        assert_eq!((data.input_cols, data.target_cols), (2, 1));
        assert_eq!(data.rows.len(), 4);
        assert_eq!(data.rows[2], vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn comma_separated_rows_parse_too() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("d.csv");
        std::fs::write(&data_path, "inputs=1 targets=1\n0.5, 1.5\n").unwrap();
        let data = load_data(&data_path).unwrap();
        assert_eq!(data.rows[0], vec![0.5, 1.5]);
    }

    #[test]
    fn row_width_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("d.tsv");
        std::fs::write(&data_path, "inputs=2 targets=1\n0 0\n").unwrap();
        assert!(matches!(
            load_data(&data_path),
            Err(Error::ParseError { line: 2, .. })
        ));
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Io("gone".into())), 1);
        assert_eq!(exit_code(&Error::NonFiniteLoss(3)), 3);
        assert_eq!(exit_code(&Error::DuplicateName("x".into())), 2);
        assert_eq!(
            exit_code(&Error::ParseError {
                line: 1,
                column: 1,
                message: "bad".into()
            }),
            2
        );
    }
}
