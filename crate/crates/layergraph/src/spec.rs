//! Graph spec files: a line-oriented, versioned text format declaring a
//! layer graph (inputs, nodes, outputs and optional initial state blobs),
//! with a canonical renderer so `parse(render(spec)) == spec`.
//!
//! ```text
//! version: 1
//! input x1 units=2
//! input x2 units=4
//! node l1 linear inputs=x1 units=4
//! node l2 add inputs=l1,x2
//! node l3 linear inputs=l2 units=2
//! output l3
//! ```
//!
//! Node seeds may be given explicitly (`seed=13`); absent that, they derive
//! from the graph-level seed and the node's name, so a whole spec is
//! reproducible from one seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{LayerNode, LinearOpts};
use crate::tensor::rng::{derive_seed, hash_name};
use crate::tensor::{read_tsr, DType, UnaryOp};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputDecl {
    pub name: String,
    pub n_units: usize,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDecl {
    pub name: String,
    pub kind: String,
    pub inputs: Vec<String>,
    /// Kind-specific attributes, canonically sorted by key.
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDecl {
    pub node: String,
    pub slot: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    pub version: u32,
    pub inputs: Vec<InputDecl>,
    pub nodes: Vec<NodeDecl>,
    pub outputs: Vec<String>,
    pub states: Vec<StateDecl>,
}

const KINDS: &[&str] = &["linear", "activation", "add", "dropout", "lookup"];

fn perr(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::ParseError {
        line,
        column,
        message: message.into(),
    }
}

fn column_of(raw: &str, token: &str) -> usize {
    raw.find(token).map(|o| o + 1).unwrap_or(1)
}

fn parse_attr_list(
    tokens: &[&str],
    allowed: &[&str],
    line_no: usize,
    raw: &str,
) -> Result<BTreeMap<String, String>> {
    let mut attrs = BTreeMap::new();
    for tok in tokens {
        let col = column_of(raw, tok);
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| perr(line_no, col, format!("expected key=value, got `{tok}`")))?;
        if !allowed.contains(&key) {
            return Err(perr(line_no, col, format!("unknown attribute `{key}`")));
        }
        if attrs.insert(key.to_string(), value.to_string()).is_some() {
            return Err(perr(line_no, col, format!("duplicate attribute `{key}`")));
        }
    }
    Ok(attrs)
}

fn attr_usize(
    attrs: &BTreeMap<String, String>,
    key: &str,
    line_no: usize,
) -> Result<Option<usize>> {
    match attrs.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<usize>().map(Some).map_err(|_| {
            perr(
                line_no,
                1,
                format!("attribute `{key}` wants an integer, got `{v}`"),
            )
        }),
    }
}

fn attr_f64(attrs: &BTreeMap<String, String>, key: &str, line_no: usize) -> Result<Option<f64>> {
    match attrs.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<f64>().map(Some).map_err(|_| {
            perr(
                line_no,
                1,
                format!("attribute `{key}` wants a number, got `{v}`"),
            )
        }),
    }
}

fn attr_u64(attrs: &BTreeMap<String, String>, key: &str, line_no: usize) -> Result<Option<u64>> {
    match attrs.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<u64>().map(Some).map_err(|_| {
            perr(
                line_no,
                1,
                format!("attribute `{key}` wants an integer, got `{v}`"),
            )
        }),
    }
}

fn attr_bool(attrs: &BTreeMap<String, String>, key: &str, line_no: usize) -> Result<Option<bool>> {
    match attrs.get(key) {
        None => Ok(None),
        Some(v) => match v.as_str() {
            "true" => Ok(Some(true)),
            "false" => Ok(Some(false)),
            other => Err(perr(
                line_no,
                1,
                format!("attribute `{key}` wants true/false, got `{other}`"),
            )),
        },
    }
}

fn parse_dtype(s: &str, line_no: usize) -> Result<DType> {
    match s {
        "float32" => Ok(DType::F32),
        "float64" => Ok(DType::F64),
        "int64" => Ok(DType::I64),
        other => Err(perr(line_no, 1, format!("unknown dtype `{other}`"))),
    }
}

fn dtype_str(d: DType) -> &'static str {
    match d {
        DType::F32 => "float32",
        DType::F64 => "float64",
        DType::I64 => "int64",
    }
}

/// Per-kind attribute validation, shared by parse and materialize.
fn validate_node(decl: &NodeDecl, line_no: usize) -> Result<()> {
    let arity_ok = match decl.kind.as_str() {
        "add" => decl.inputs.len() >= 2,
        _ => decl.inputs.len() == 1,
    };
    if !arity_ok {
        return Err(perr(
            line_no,
            1,
            format!(
                "kind `{}` cannot take {} inputs",
                decl.kind,
                decl.inputs.len()
            ),
        ));
    }
    match decl.kind.as_str() {
        "linear" => {
            if attr_usize(&decl.attrs, "units", line_no)?.is_none() {
                return Err(perr(line_no, 1, "linear requires units=<n>"));
            }
            attr_bool(&decl.attrs, "bias", line_no)?;
            attr_u64(&decl.attrs, "seed", line_no)?;
        }
        "activation" => {
            let f = decl
                .attrs
                .get("fn")
                .ok_or_else(|| perr(line_no, 1, "activation requires fn=<name>"))?;
            UnaryOp::parse(f)?;
        }
        "add" => {}
        "dropout" => {
            let p = attr_f64(&decl.attrs, "p", line_no)?
                .ok_or_else(|| perr(line_no, 1, "dropout requires p=<probability>"))?;
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidProbability(p));
            }
            attr_u64(&decl.attrs, "seed", line_no)?;
        }
        "lookup" => {
            if attr_usize(&decl.attrs, "vocab", line_no)?.is_none() {
                return Err(perr(line_no, 1, "lookup requires vocab=<n>"));
            }
            if attr_usize(&decl.attrs, "units", line_no)?.is_none() {
                return Err(perr(line_no, 1, "lookup requires units=<n>"));
            }
            attr_u64(&decl.attrs, "seed", line_no)?;
        }
        other => return Err(Error::UnknownKind(other.to_string())),
    }
    Ok(())
}

fn allowed_attrs(kind: &str) -> &'static [&'static str] {
    match kind {
        "linear" => &["units", "bias", "seed"],
        "activation" => &["fn"],
        "add" => &[],
        "dropout" => &["p", "seed"],
        "lookup" => &["vocab", "units", "seed"],
        _ => &[],
    }
}

/// Parse a spec document. Forward references are allowed; cycles are
/// rejected when the graph is materialized.
pub fn parse_spec(text: &str) -> Result<GraphSpec> {
    let mut spec = GraphSpec {
        version: 0,
        inputs: Vec::new(),
        nodes: Vec::new(),
        outputs: Vec::new(),
        states: Vec::new(),
    };
    let mut saw_version = false;
    let mut saw_output = false;
    let mut names: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_version {
            let v = line
                .strip_prefix("version:")
                .map(str::trim)
                .ok_or_else(|| perr(line_no, 1, "expected `version: 1` header"))?;
            let v: u32 = v
                .parse()
                .map_err(|_| perr(line_no, 1, format!("bad version `{v}`")))?;
            if v != SPEC_VERSION {
                return Err(perr(line_no, 1, format!("unsupported version {v}")));
            }
            spec.version = v;
            saw_version = true;
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "input" => {
                if tokens.len() < 3 {
                    return Err(perr(line_no, 1, "input wants: input <name> units=<n>"));
                }
                let name = tokens[1].to_string();
                if !names.insert(name.clone()) {
                    return Err(Error::DuplicateName(name));
                }
                let attrs = parse_attr_list(&tokens[2..], &["units", "dtype"], line_no, raw)?;
                let n_units = attr_usize(&attrs, "units", line_no)?
                    .ok_or_else(|| perr(line_no, 1, "input requires units=<n>"))?;
                if n_units == 0 {
                    return Err(perr(line_no, 1, "input units must be positive"));
                }
                let dtype = match attrs.get("dtype") {
                    Some(d) => parse_dtype(d, line_no)?,
                    None => DType::F32,
                };
                spec.inputs.push(InputDecl {
                    name,
                    n_units,
                    dtype,
                });
            }
            "node" => {
                if tokens.len() < 4 {
                    return Err(perr(
                        line_no,
                        1,
                        "node wants: node <name> <kind> inputs=<a,b> [attrs]",
                    ));
                }
                let name = tokens[1].to_string();
                if !names.insert(name.clone()) {
                    return Err(Error::DuplicateName(name));
                }
                let kind = tokens[2].to_string();
                if !KINDS.contains(&kind.as_str()) {
                    return Err(Error::UnknownKind(kind));
                }
                let mut inputs = Vec::new();
                let mut attr_tokens = Vec::new();
                for tok in &tokens[3..] {
                    if let Some(list) = tok.strip_prefix("inputs=") {
                        inputs = list.split(',').map(str::to_string).collect();
                    } else {
                        attr_tokens.push(*tok);
                    }
                }
                if inputs.is_empty() {
                    return Err(perr(line_no, 1, "node requires inputs=<a,b,...>"));
                }
                let attrs = parse_attr_list(&attr_tokens, allowed_attrs(&kind), line_no, raw)?;
                let decl = NodeDecl {
                    name,
                    kind,
                    inputs,
                    attrs,
                };
                validate_node(&decl, line_no)?;
                spec.nodes.push(decl);
            }
            "output" => {
                if saw_output {
                    return Err(perr(line_no, 1, "duplicate output line"));
                }
                if tokens.len() < 2 {
                    return Err(perr(line_no, 1, "output wants at least one name"));
                }
                spec.outputs = tokens[1..].iter().map(|s| s.to_string()).collect();
                saw_output = true;
            }
            "state" => {
                if tokens.len() != 3 {
                    return Err(perr(line_no, 1, "state wants: state <node>.<slot> <path>"));
                }
                let (node, slot) = tokens[1]
                    .split_once('.')
                    .ok_or_else(|| perr(line_no, 1, "state target wants <node>.<slot>"))?;
                spec.states.push(StateDecl {
                    node: node.to_string(),
                    slot: slot.to_string(),
                    path: tokens[2].to_string(),
                });
            }
            other => {
                return Err(perr(line_no, 1, format!("unknown directive `{other}`")));
            }
        }
    }

    if !saw_version {
        return Err(perr(1, 1, "missing `version: 1` header"));
    }
    if spec.outputs.is_empty() {
        return Err(perr(1, 1, "spec declares no outputs"));
    }

    // Every referenced name must be declared somewhere (forward refs fine).
    for node in &spec.nodes {
        for input in &node.inputs {
            if !names.contains(input) {
                return Err(perr(
                    1,
                    1,
                    format!("node `{}` references undeclared `{input}`", node.name),
                ));
            }
        }
    }
    for out in &spec.outputs {
        if !names.contains(out) {
            return Err(perr(1, 1, format!("output references undeclared `{out}`")));
        }
    }
    for st in &spec.states {
        if !names.contains(&st.node) {
            return Err(perr(
                1,
                1,
                format!("state references undeclared `{}`", st.node),
            ));
        }
    }
    Ok(spec)
}

/// Canonical rendering: fixed field order, attributes sorted by key.
pub fn render_spec(spec: &GraphSpec) -> String {
    let mut out = format!("version: {}\n", spec.version);
    for input in &spec.inputs {
        out.push_str(&format!("input {} units={}", input.name, input.n_units));
        if input.dtype != DType::F32 {
            out.push_str(&format!(" dtype={}", dtype_str(input.dtype)));
        }
        out.push('\n');
    }
    for node in &spec.nodes {
        out.push_str(&format!(
            "node {} {} inputs={}",
            node.name,
            node.kind,
            node.inputs.join(",")
        ));
        for (k, v) in &node.attrs {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("output {}\n", spec.outputs.join(" ")));
    for st in &spec.states {
        out.push_str(&format!("state {}.{} {}\n", st.node, st.slot, st.path));
    }
    out
}

/// Materialized spec: the graph plus a name-to-node index.
#[derive(Debug)]
pub struct BuiltSpec {
    pub graph: Graph,
    pub nodes: BTreeMap<String, LayerNode>,
}

/// Construct the layer graph a spec declares. Node seeds not given in the
/// file derive from `graph_seed` and the node name. `base_dir` anchors
/// relative state blob paths.
pub fn materialize(spec: &GraphSpec, base_dir: &Path, graph_seed: u64) -> Result<BuiltSpec> {
    // Dependency order over name references; cycles surface here.
    let mut order: Vec<&NodeDecl> = Vec::new();
    let mut placed: BTreeSet<&str> = spec.inputs.iter().map(|i| i.name.as_str()).collect();
    let mut pending: Vec<&NodeDecl> = spec.nodes.iter().collect();
    while !pending.is_empty() {
        let mut progressed = false;
        let mut rest = Vec::new();
        for decl in pending {
            if decl.inputs.iter().all(|i| placed.contains(i.as_str())) {
                placed.insert(decl.name.as_str());
                order.push(decl);
                progressed = true;
            } else {
                rest.push(decl);
            }
        }
        if !progressed {
            let stuck: Vec<&str> = rest.iter().map(|d| d.name.as_str()).collect();
            return Err(Error::CycleDetected(stuck.join(" -> ")));
        }
        pending = rest;
    }

    let mut nodes: BTreeMap<String, LayerNode> = BTreeMap::new();
    for input in &spec.inputs {
        nodes.insert(
            input.name.clone(),
            LayerNode::input_typed(input.n_units, input.dtype, Some(input.name.clone())),
        );
    }
    for decl in order {
        let seed = attr_u64(&decl.attrs, "seed", 1)?
            .unwrap_or_else(|| derive_seed(graph_seed, hash_name(&decl.name)));
        let ins: Vec<LayerNode> = decl.inputs.iter().map(|n| nodes[n].clone()).collect();
        let node = match decl.kind.as_str() {
            "linear" => LayerNode::linear_with(
                &ins[0],
                attr_usize(&decl.attrs, "units", 1)?.unwrap(),
                LinearOpts {
                    bias: attr_bool(&decl.attrs, "bias", 1)?.unwrap_or(true),
                    seed,
                    name: Some(decl.name.clone()),
                    ..Default::default()
                },
            )?,
            "activation" => LayerNode::activation_named(
                &ins[0],
                UnaryOp::parse(decl.attrs.get("fn").unwrap())?,
                Some(decl.name.clone()),
            ),
            "add" => LayerNode::add_named(&ins, Some(decl.name.clone()))?,
            "dropout" => LayerNode::dropout_named(
                &ins[0],
                attr_f64(&decl.attrs, "p", 1)?.unwrap(),
                seed,
                Some(decl.name.clone()),
            )?,
            "lookup" => LayerNode::lookup_named(
                &ins[0],
                attr_usize(&decl.attrs, "vocab", 1)?.unwrap(),
                attr_usize(&decl.attrs, "units", 1)?.unwrap(),
                seed,
                Some(decl.name.clone()),
                DType::F32,
            )?,
            other => return Err(Error::UnknownKind(other.to_string())),
        };
        nodes.insert(decl.name.clone(), node);
    }

    let members: Vec<LayerNode> = spec
        .inputs
        .iter()
        .map(|i| nodes[&i.name].clone())
        .chain(spec.nodes.iter().map(|n| nodes[&n.name].clone()))
        .collect();
    let inputs: Vec<LayerNode> = spec.inputs.iter().map(|i| nodes[&i.name].clone()).collect();
    let outputs: Vec<LayerNode> = spec.outputs.iter().map(|o| nodes[o].clone()).collect();
    let graph = Graph::build_from_members(&members, &inputs, &outputs)?;

    for st in &spec.states {
        apply_state_blob(&nodes, &st.node, &st.slot, &base_dir.join(&st.path))?;
    }
    Ok(BuiltSpec { graph, nodes })
}

/// Load a `.tsr` blob into a node's state slot, cast to the slot's dtype.
/// The slot's frozen shape makes incompatible blobs fail fast.
pub fn apply_state_blob(
    nodes: &BTreeMap<String, LayerNode>,
    node_name: &str,
    slot: &str,
    path: &Path,
) -> Result<()> {
    let node = nodes
        .get(node_name)
        .ok_or_else(|| Error::Invalid(format!("state blob targets unknown node `{node_name}`")))?;
    let existing = node
        .state()
        .slot(slot)
        .ok_or_else(|| Error::Invalid(format!("node `{node_name}` has no slot `{slot}`")))?;
    let loaded = read_tsr(path)?.cast(existing.dtype());
    node.state().set_slot(slot, loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const FIG_SPEC: &str = "\
version: 1
input x1 units=2
input x2 units=4
node l1 linear inputs=x1 units=4
node l2 add inputs=l1,x2
node l3 linear inputs=l2 units=2
output l3
";

    #[test]
    fn parses_the_five_node_topology() {
        let spec = parse_spec(FIG_SPEC).unwrap();
        assert_eq!(spec.inputs.len(), 2);
        assert_eq!(spec.nodes.len(), 3);
        assert_eq!(spec.outputs, vec!["l3"]);
        let built = materialize(&spec, Path::new("."), 0).unwrap();
        let names: Vec<&str> = built
            .graph
            .dependency_order()
            .iter()
            .map(|n| n.name())
            .collect();
        assert_eq!(names, vec!["x1", "x2", "l1", "l2", "l3"]);
    }

    #[test]
    fn round_trip_is_identity() {
        let spec = parse_spec(FIG_SPEC).unwrap();
        let rendered = render_spec(&spec);
        assert_eq!(parse_spec(&rendered).unwrap(), spec);
    }

    #[test]
    fn undeclared_reference_is_named() {
        let bad = "version: 1\ninput x units=2\nnode l linear inputs=zz units=3\noutput l\n";
        match parse_spec(bad) {
            Err(Error::ParseError { message, .. }) => assert!(message.contains("zz")),
            other => panic!("expected ParseError naming zz, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let bad = "version: 1\ninput x units=2\nnode x linear inputs=x units=3\noutput x\n";
        assert!(matches!(parse_spec(bad), Err(Error::DuplicateName(n)) if n == "x"));
    }

    #[test]
    fn unknown_kind_rejected() {
        let bad = "version: 1\ninput x units=2\nnode l conv inputs=x units=3\noutput l\n";
        assert!(matches!(parse_spec(bad), Err(Error::UnknownKind(k)) if k == "conv"));
    }

    #[test]
    fn cycle_detected_at_materialize() {
        let cyclic = "\
version: 1
input x units=2
node a add inputs=b,x
node b add inputs=a,x
output b
";
        let spec = parse_spec(cyclic).unwrap();
        match materialize(&spec, Path::new("."), 0) {
            Err(Error::CycleDetected(path)) => {
                assert!(path.contains('a') && path.contains('b'));
            }
            other => panic!("expected CycleDetected, got {other:?}"),
        }
    }

    #[test]
    fn node_seeds_derive_from_graph_seed() {
        let spec = parse_spec(FIG_SPEC).unwrap();
        let a = materialize(&spec, Path::new("."), 7).unwrap();
        let b = materialize(&spec, Path::new("."), 7).unwrap();
        let c = materialize(&spec, Path::new("."), 8).unwrap();
        let wa = a.nodes["l1"].state().slot("weights").unwrap();
        let wb = b.nodes["l1"].state().slot("weights").unwrap();
        let wc = c.nodes["l1"].state().slot("weights").unwrap();
        assert!(wa.bitwise_eq(&wb));
        assert!(!wa.bitwise_eq(&wc));
    }

    #[test]
    fn state_lines_load_initial_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let w = crate::Tensor::from_f32([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        crate::tensor::write_tsr(&w, &dir.path().join("w.tsr")).unwrap();
        let text = "\
version: 1
input x units=2
node l linear inputs=x units=3
output l
state l.weights w.tsr
";
        let spec = parse_spec(text).unwrap();
        assert_eq!(render_spec(&spec), text);
        let built = materialize(&spec, dir.path(), 0).unwrap();
        let loaded = built.nodes["l"].state().slot("weights").unwrap();
        assert!(loaded.bitwise_eq(&w));
    }

    #[test]
    fn wrong_shape_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let w = crate::Tensor::zeros([4, 4], crate::DType::F32);
        crate::tensor::write_tsr(&w, &dir.path().join("w.tsr")).unwrap();
        let text = "\
version: 1
input x units=2
node l linear inputs=x units=3
output l
state l.weights w.tsr
";
        let spec = parse_spec(text).unwrap();
        assert!(matches!(
            materialize(&spec, dir.path(), 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn lookup_spec_materializes_and_executes() {
        let text = "\
version: 1
input ids units=4 dtype=int64
node emb lookup inputs=ids units=3 vocab=10
node proj linear inputs=emb units=2
output proj
";
        let spec = parse_spec(text).unwrap();
        assert_eq!(render_spec(&spec), text);
        let built = materialize(&spec, Path::new("."), 5).unwrap();
        let feed = crate::Feed::new().with(
            "ids",
            crate::Tensor::from_i64([4], vec![0, 9, 3, 3]).unwrap(),
        );
        let out = built
            .graph
            .execute(&feed, &crate::ExecContext::infer())
            .unwrap();
        assert_eq!(out[0].dims(), &[4, 2]);
        // rows 2 and 3 looked up the same table row
        let v = out[0].to_f64_vec();
        assert_eq!(&v[4..6], &v[6..8]);
    }

    #[test]
    fn explicit_seed_wins_over_derivation() {
        let text = "\
version: 1
input x units=2
node l linear inputs=x seed=42 units=3
output l
";
        let spec = parse_spec(text).unwrap();
        let a = materialize(&spec, Path::new("."), 1).unwrap();
        let b = materialize(&spec, Path::new("."), 2).unwrap();
        let wa = a.nodes["l"].state().slot("weights").unwrap();
        let wb = b.nodes["l"].state().slot("weights").unwrap();
        assert!(wa.bitwise_eq(&wb));
    }
}
