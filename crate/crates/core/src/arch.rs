//! From factor graph to recurrent mixture: one unit per factor, edge units
//! wired into the node units of their neighbouring node factors.
//!
//! Units here are specifications only. [`UnitSpec::plan`] resolves the
//! per-layer input widths (including skip connections) so that parameter
//! counting and materialization in [`crate::layers`] agree by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrnnError};
use crate::stgraph::{FactorGraph, FactorId, StGraph};

pub const DEFAULT_EDGE_ARCH: &str = "FC(256)-FC(256)-LSTM(512)";
pub const DEFAULT_NODE_ARCH: &str = "LSTM(512)-FC(256)-FC(100)-FC(·)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Fc,
    Rnn,
    Lstm,
    Softmax,
}

impl LayerKind {
    pub fn is_recurrent(self) -> bool {
        matches!(self, LayerKind::Rnn | LayerKind::Lstm)
    }

    fn canonical(self) -> &'static str {
        match self {
            LayerKind::Fc => "FC",
            LayerKind::Rnn => "RNN",
            LayerKind::Lstm => "LSTM",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Width {
    Fixed(usize),
    /// Resolved from the partition's label dimensions.
    Placeholder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: Width,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.width {
            Width::Fixed(n) => write!(f, "{}({n})", self.kind.canonical()),
            Width::Placeholder => write!(f, "{}(·)", self.kind.canonical()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = SrnnError;

    fn from_str(s: &str) -> Result<Self> {
        match parse_arch_spec(s)?.as_slice() {
            [one] => Ok(*one),
            _ => Err(SrnnError::ArchSyntax {
                offset: 0,
                message: "expected exactly one layer".into(),
            }),
        }
    }
}

impl Serialize for LayerSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses `KIND(width)` layers joined by `-`, e.g. `FC(256)-LSTM(512)`.
///
/// Kinds are case-insensitive; a width of `·` or `.` is a placeholder.
pub fn parse_arch_spec(text: &str) -> Result<Vec<LayerSpec>> {
    let err = |offset: usize, message: String| SrnnError::ArchSyntax { offset, message };
    let bytes = text.as_bytes();
    let mut pos = 0;
    let mut layers = Vec::new();
    loop {
        let kind_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_alphabetic() {
            pos += 1;
        }
        if pos == kind_start {
            return Err(err(pos, "expected a layer kind".into()));
        }
        let kind = match text[kind_start..pos].to_ascii_uppercase().as_str() {
            "FC" => LayerKind::Fc,
            "RNN" => LayerKind::Rnn,
            "LSTM" => LayerKind::Lstm,
            "SOFTMAX" => LayerKind::Softmax,
            other => {
                return Err(err(kind_start, format!("unknown layer kind {other:?}")));
            }
        };
        if bytes.get(pos) != Some(&b'(') {
            return Err(err(pos, "expected '('".into()));
        }
        pos += 1;
        let width_start = pos;
        let width = if text[pos..].starts_with('·') {
            pos += '·'.len_utf8();
            Width::Placeholder
        } else if bytes.get(pos) == Some(&b'.') {
            pos += 1;
            Width::Placeholder
        } else {
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if pos == width_start {
                return Err(err(pos, "expected a width".into()));
            }
            let n: usize = text[width_start..pos]
                .parse()
                .map_err(|_| err(width_start, "width out of range".into()))?;
            if n == 0 {
                return Err(err(width_start, "width must be positive".into()));
            }
            Width::Fixed(n)
        };
        if bytes.get(pos) != Some(&b')') {
            return Err(err(pos, "expected ')'".into()));
        }
        pos += 1;
        layers.push(LayerSpec { kind, width });
        match bytes.get(pos) {
            None => return Ok(layers),
            Some(b'-') => pos += 1,
            Some(_) => return Err(err(pos, "expected '-' or end of input".into())),
        }
    }
}

/// Canonical rendering; `parse_arch_spec(render_arch_spec(l)) == l`.
pub fn render_arch_spec(layers: &[LayerSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join("-")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Identity output trained with the Euclidean loss.
    Regression,
    /// Softmax output trained with cross entropy.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Where a body layer sits relative to the skip-connected stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    /// FC layers transforming the raw input before the stack.
    Pre,
    /// Member of the skip-connected stack (position within it).
    Stack(usize),
    /// FC layers after the stack.
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedLayer {
    pub kind: LayerKind,
    pub width: usize,
    pub input_dim: usize,
    pub activation: Activation,
    pub role: LayerRole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedHead {
    pub kind: HeadKind,
    pub width: usize,
    pub input_dim: usize,
}

/// Fully resolved layer layout of one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPlan {
    pub layers: Vec<PlannedLayer>,
    pub heads: Vec<PlannedHead>,
    /// Skip connections are active only for stacks of depth two or more.
    pub skip_active: bool,
    /// Width of the pre-stack output (the input the stack sees).
    pub stack_input_dim: usize,
    /// Width of the body output (head input, or unit output without heads).
    pub body_output_dim: usize,
}

impl UnitPlan {
    pub fn parameter_count(&self) -> Result<usize> {
        let mut total = 0usize;
        for l in &self.layers {
            total = total
                .checked_add(layer_parameters(l.kind, l.input_dim, l.width)?)
                .ok_or_else(overflow)?;
        }
        for h in &self.heads {
            total = total
                .checked_add(layer_parameters(LayerKind::Fc, h.input_dim, h.width)?)
                .ok_or_else(overflow)?;
        }
        Ok(total)
    }
}

fn overflow() -> SrnnError {
    SrnnError::Compile("dimension overflow".into())
}

/// Weight and bias element count of one layer.
pub fn layer_parameters(kind: LayerKind, input: usize, width: usize) -> Result<usize> {
    let dense = |i: usize, n: usize| i.checked_mul(n).and_then(|w| w.checked_add(n));
    let rec = |i: usize, n: usize| dense(i, n).and_then(|d| n.checked_mul(n).and_then(|u| d.checked_add(u)));
    match kind {
        LayerKind::Fc | LayerKind::Softmax => dense(input, width),
        LayerKind::Rnn => rec(input, width),
        LayerKind::Lstm => rec(input, width).and_then(|p| p.checked_mul(4)),
    }
    .ok_or_else(overflow)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub factor: FactorId,
    pub layers: Vec<LayerSpec>,
    pub skip_connections: bool,
    pub input_dim: usize,
    pub output_dims: Vec<usize>,
    /// Output heads; empty for edge units and unlabelled node partitions.
    pub heads: Vec<HeadKind>,
}

impl UnitSpec {
    /// Builds and checks a unit. `head_dims` is empty for units without
    /// heads; otherwise the final layer is replicated once per entry.
    pub fn new(
        factor: FactorId,
        layers: Vec<LayerSpec>,
        skip_connections: bool,
        input_dim: usize,
        head_dims: &[usize],
    ) -> Result<Self> {
        let mut unit = UnitSpec {
            factor,
            layers,
            skip_connections,
            input_dim,
            output_dims: Vec::new(),
            heads: Vec::new(),
        };
        if let (false, Some(last)) = (head_dims.is_empty(), unit.layers.last()) {
            let kind = match last.kind {
                LayerKind::Fc => HeadKind::Regression,
                LayerKind::Softmax => HeadKind::Classification,
                _ => {
                    return Err(SrnnError::Compile(format!(
                        "{}: final layer {last} cannot be an output head",
                        unit.factor
                    )))
                }
            };
            unit.heads = vec![kind; head_dims.len()];
        }
        let plan = unit.plan_with(head_dims)?;
        unit.output_dims = if plan.heads.is_empty() {
            vec![plan.body_output_dim]
        } else {
            plan.heads.iter().map(|h| h.width).collect()
        };
        Ok(unit)
    }

    pub fn arch_string(&self) -> String {
        render_arch_spec(&self.layers)
    }

    /// Total output width: sum over heads, or the body width.
    pub fn output_width(&self) -> usize {
        self.output_dims.iter().sum()
    }

    pub fn plan(&self) -> Result<UnitPlan> {
        let head_dims = if self.heads.is_empty() {
            Vec::new()
        } else {
            self.output_dims.clone()
        };
        self.plan_with(&head_dims)
    }

    fn plan_with(&self, head_dims: &[usize]) -> Result<UnitPlan> {
        let fid = &self.factor;
        let cerr = |m: String| SrnnError::Compile(format!("{fid}: {m}"));
        if self.layers.is_empty() {
            return Err(cerr("empty architecture".into()));
        }
        let has_heads = !head_dims.is_empty();
        let (body, head) = if has_heads {
            let (last, body) = self.layers.split_last().expect("non-empty");
            (body, Some(last))
        } else {
            (self.layers.as_slice(), None)
        };

        for l in body {
            if l.kind == LayerKind::Softmax {
                return Err(cerr("softmax is only allowed as the final head layer".into()));
            }
            if l.width == Width::Placeholder {
                return Err(cerr(format!(
                    "unresolvable placeholder in {l}: only a head layer of a labelled partition may use it"
                )));
            }
        }
        let rec: Vec<usize> = body
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_recurrent())
            .map(|(i, _)| i)
            .collect();
        if let (Some(&first), Some(&last)) = (rec.first(), rec.last()) {
            if last - first + 1 != rec.len() {
                return Err(cerr("recurrent layers must form a single contiguous stack".into()));
            }
        }
        let (stack_start, stack_end) = match (rec.first(), rec.last()) {
            (Some(&a), Some(&b)) => (a, b + 1),
            _ => (0, body.len()),
        };
        let skip_active = self.skip_connections && stack_end - stack_start >= 2;

        let width = |l: &LayerSpec| match l.width {
            Width::Fixed(n) => n,
            Width::Placeholder => unreachable!("checked above"),
        };
        // The FC layer directly feeding the output is linear.
        let last_body = body.len().checked_sub(1);
        let activation = |i: usize, l: &LayerSpec| {
            if l.kind == LayerKind::Fc && Some(i) == last_body {
                Activation::Identity
            } else {
                Activation::Tanh
            }
        };

        let mut layers = Vec::with_capacity(body.len());
        let mut dim = self.input_dim;
        for (i, l) in body[..stack_start].iter().enumerate() {
            layers.push(PlannedLayer {
                kind: l.kind,
                width: width(l),
                input_dim: dim,
                activation: activation(i, l),
                role: LayerRole::Pre,
            });
            dim = width(l);
        }
        let stack_input_dim = dim;
        let mut prev = dim;
        let mut concat_width = if skip_active { stack_input_dim } else { 0 };
        for (j, l) in body[stack_start..stack_end].iter().enumerate() {
            let input_dim = if skip_active && j > 0 {
                stack_input_dim.checked_add(prev).ok_or_else(overflow)?
            } else {
                prev
            };
            layers.push(PlannedLayer {
                kind: l.kind,
                width: width(l),
                input_dim,
                activation: activation(stack_start + j, l),
                role: LayerRole::Stack(j),
            });
            prev = width(l);
            if skip_active {
                concat_width = concat_width.checked_add(prev).ok_or_else(overflow)?;
            }
        }
        dim = if skip_active { concat_width } else { prev };
        for (i, l) in body.iter().enumerate().skip(stack_end) {
            layers.push(PlannedLayer {
                kind: l.kind,
                width: width(l),
                input_dim: dim,
                activation: activation(i, l),
                role: LayerRole::Post,
            });
            dim = width(l);
        }
        let body_output_dim = if body.is_empty() { self.input_dim } else { dim };

        let mut heads = Vec::with_capacity(head_dims.len());
        if let Some(head) = head {
            let kind = match head.kind {
                LayerKind::Fc => HeadKind::Regression,
                LayerKind::Softmax => HeadKind::Classification,
                _ => return Err(cerr(format!("final layer {head} cannot be an output head"))),
            };
            for &d in head_dims {
                if d == 0 {
                    return Err(cerr("head dimension must be positive".into()));
                }
                if let Width::Fixed(n) = head.width {
                    if n != d {
                        return Err(cerr(format!("head layer {head} disagrees with label dimension {d}")));
                    }
                }
                heads.push(PlannedHead {
                    kind,
                    width: d,
                    input_dim: body_output_dim,
                });
            }
        }
        Ok(UnitPlan {
            layers,
            heads,
            skip_active,
            stack_input_dim,
            body_output_dim,
        })
    }
}

/// Architecture strings per factor, with role defaults.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpecs {
    pub per_factor: BTreeMap<FactorId, String>,
    pub node_default: Option<String>,
    pub edge_default: Option<String>,
    pub skip_connections: bool,
}

impl Default for ArchSpecs {
    /// Motion-forecasting defaults.
    fn default() -> Self {
        ArchSpecs {
            per_factor: BTreeMap::new(),
            node_default: Some(DEFAULT_NODE_ARCH.to_string()),
            edge_default: Some(DEFAULT_EDGE_ARCH.to_string()),
            skip_connections: true,
        }
    }
}

impl ArchSpecs {
    pub fn uniform(node: &str, edge: &str) -> Self {
        ArchSpecs {
            node_default: Some(node.to_string()),
            edge_default: Some(edge.to_string()),
            ..Default::default()
        }
    }

    /// No defaults: every factor needs an explicit entry.
    pub fn explicit() -> Self {
        ArchSpecs {
            per_factor: BTreeMap::new(),
            node_default: None,
            edge_default: None,
            skip_connections: true,
        }
    }

    pub fn with(mut self, factor: FactorId, arch: &str) -> Self {
        self.per_factor.insert(factor, arch.to_string());
        self
    }

    fn lookup(&self, factor: &FactorId) -> Result<&str> {
        let default = if factor.is_node() {
            &self.node_default
        } else {
            &self.edge_default
        };
        self.per_factor
            .get(factor)
            .or(default.as_ref())
            .map(String::as_str)
            .ok_or_else(|| SrnnError::Compile(format!("missing architecture for {factor}")))
    }
}

/// The compiled mixture of recurrent units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub edge_units: BTreeMap<FactorId, UnitSpec>,
    pub node_units: BTreeMap<FactorId, UnitSpec>,
    pub wiring: BTreeSet<(FactorId, FactorId)>,
}

impl ArchGraph {
    pub fn empty() -> Self {
        ArchGraph {
            edge_units: BTreeMap::new(),
            node_units: BTreeMap::new(),
            wiring: BTreeSet::new(),
        }
    }

    pub fn unit(&self, id: &FactorId) -> Option<&UnitSpec> {
        self.node_units.get(id).or_else(|| self.edge_units.get(id))
    }

    /// Every unit, edge units first, each group in factor-id order.
    pub fn units(&self) -> impl Iterator<Item = &UnitSpec> {
        self.edge_units.values().chain(self.node_units.values())
    }

    /// Edge units wired into `node_factor`, in factor-id order.
    pub fn edges_into(&self, node_factor: &FactorId) -> Vec<&FactorId> {
        self.wiring
            .iter()
            .filter(|(_, n)| n == node_factor)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch graph serializes") + "\n"
    }
}

/// Instantiates one unit per factor and wires edge units into node units
/// for every neighbouring (edge factor, node factor) pair.
pub fn compile(fg: &FactorGraph, g: &StGraph, specs: &ArchSpecs) -> Result<ArchGraph> {
    let mut edge_units = BTreeMap::new();
    for ef in &fg.edge_factors {
        let layers = parse_arch_spec(specs.lookup(&ef.id)?)?;
        let unit = UnitSpec::new(
            ef.id.clone(),
            layers,
            specs.skip_connections,
            ef.partition.feature_dim,
            &[],
        )?;
        edge_units.insert(ef.id.clone(), unit);
    }
    let wiring = fg.neighbor_pairs.clone();
    let mut node_units = BTreeMap::new();
    for nf in &fg.node_factors {
        let layers = parse_arch_spec(specs.lookup(&nf.id)?)?;
        let mut input_dim = g
            .feature_dim(&nf.label)
            .ok_or_else(|| SrnnError::Compile(format!("no feature dim for {}", nf.label)))?;
        for (e, n) in &wiring {
            if n == &nf.id {
                input_dim = input_dim
                    .checked_add(edge_units[e].output_width())
                    .ok_or_else(overflow)?;
            }
        }
        let unit = UnitSpec::new(
            nf.id.clone(),
            layers,
            specs.skip_connections,
            input_dim,
            g.label_dims(&nf.label),
        )?;
        node_units.insert(nf.id.clone(), unit);
    }
    let arch = ArchGraph {
        edge_units,
        node_units,
        wiring,
    };
    count_parameters(&arch)?;
    Ok(arch)
}

/// Sum of weight and bias element counts over all units.
pub fn count_parameters(a: &ArchGraph) -> Result<usize> {
    a.units().try_fold(0usize, |acc, u| {
        acc.checked_add(u.plan()?.parameter_count()?).ok_or_else(overflow)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub factor: Option<FactorId>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.factor {
            Some(id) => write!(f, "{id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks every structural invariant of `a` against its sources. Returns
/// one diagnostic per violation; an empty list means the graph is sound.
pub fn validate(a: &ArchGraph, fg: &FactorGraph, g: &StGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |factor: Option<&FactorId>, message: String| {
        out.push(Diagnostic {
            factor: factor.cloned(),
            message,
        })
    };

    for nf in &fg.node_factors {
        if !a.node_units.contains_key(&nf.id) {
            diag(Some(&nf.id), "no node unit for node factor".into());
        }
    }
    for ef in &fg.edge_factors {
        match a.edge_units.get(&ef.id) {
            None => diag(Some(&ef.id), "no edge unit for edge factor".into()),
            Some(u) if u.input_dim != ef.partition.feature_dim => diag(
                Some(&ef.id),
                format!(
                    "input_dim {} but partition feature dim is {}",
                    u.input_dim, ef.partition.feature_dim
                ),
            ),
            Some(_) => {}
        }
    }
    for id in a.node_units.keys() {
        if !fg.node_factors.iter().any(|nf| &nf.id == id) {
            diag(Some(id), "node unit without a node factor".into());
        }
    }
    for id in a.edge_units.keys() {
        if fg.edge_factor(id).is_none() {
            diag(Some(id), "edge unit without an edge factor".into());
        }
    }
    for pair in &a.wiring {
        if !fg.neighbor_pairs.contains(pair) {
            diag(Some(&pair.1), format!("spurious wiring from {}", pair.0));
        }
    }
    for pair in &fg.neighbor_pairs {
        if !a.wiring.contains(pair) {
            diag(Some(&pair.1), format!("missing wiring from {}", pair.0));
        }
    }
    for (id, unit) in &a.node_units {
        let FactorId::Node(label) = id else {
            diag(Some(id), "node unit keyed by an edge factor".into());
            continue;
        };
        let mut expected = g.feature_dim(label).unwrap_or(0);
        for e in a.edges_into(id) {
            expected += a.edge_units.get(e).map_or(0, UnitSpec::output_width);
        }
        if unit.input_dim != expected {
            diag(
                Some(id),
                format!(
                    "input_dim {} but node features plus wired edge outputs give {expected}",
                    unit.input_dim
                ),
            );
        }
        let head_dims = g.label_dims(label);
        if !head_dims.is_empty() && unit.output_dims != head_dims {
            diag(
                Some(id),
                format!("output dims {:?} but label dims are {head_dims:?}", unit.output_dims),
            );
        }
    }
    for unit in a.units() {
        if let Err(e) = unit.plan() {
            diag(Some(&unit.factor), e.to_string());
        }
    }
    out
}

/// Graphviz rendering: node units as boxes, edge units as ellipses, one
/// arrow per wiring pair.
pub fn export_dot(a: &ArchGraph) -> String {
    let mut s = String::from("digraph srnn {\n  rankdir=LR;\n");
    for (id, u) in &a.edge_units {
        s.push_str(&format!(
            "  \"{id}\" [shape=ellipse, label=\"{id}\\n{}\"];\n",
            u.arch_string()
        ));
    }
    for (id, u) in &a.node_units {
        s.push_str(&format!(
            "  \"{id}\" [shape=box, label=\"{id}\\n{}\"];\n",
            u.arch_string()
        ));
    }
    for (e, n) in &a.wiring {
        s.push_str(&format!("  \"{e}\" -> \"{n}\";\n"));
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stgraph::fixtures::activity_graph;
    use crate::stgraph::{derive_factor_graph, EdgeKind, EdgePartitionKey};

    fn fixed(kind: LayerKind, n: usize) -> LayerSpec {
        LayerSpec {
            kind,
            width: Width::Fixed(n),
        }
    }

    #[test]
    fn parse_motion_edge_arch() {
        let l = parse_arch_spec("FC(256)-FC(256)-LSTM(512)").unwrap();
        assert_eq!(
            l,
            vec![
                fixed(LayerKind::Fc, 256),
                fixed(LayerKind::Fc, 256),
                fixed(LayerKind::Lstm, 512)
            ]
        );
    }

    #[test]
    fn parse_placeholder() {
        for text in ["LSTM(512)-FC(256)-FC(100)-FC(·)", "LSTM(512)-FC(256)-FC(100)-FC(.)"] {
            let l = parse_arch_spec(text).unwrap();
            assert_eq!(l.len(), 4);
            assert_eq!(l[3].width, Width::Placeholder);
        }
    }

    #[test]
    fn parse_errors() {
        let e = parse_arch_spec("FC(0)").unwrap_err();
        assert!(matches!(e, SrnnError::ArchSyntax { offset: 3, .. }), "{e}");
        let e = parse_arch_spec("FC(8)-GRU(4)").unwrap_err();
        assert!(matches!(e, SrnnError::ArchSyntax { offset: 6, .. }), "{e}");
        let e = parse_arch_spec("FC(8)LSTM(4)").unwrap_err();
        assert!(matches!(e, SrnnError::ArchSyntax { offset: 5, .. }), "{e}");
        assert!(parse_arch_spec("").is_err());
        assert!(parse_arch_spec("FC(8)-").is_err());
        assert!(parse_arch_spec("fc(8").is_err());
    }

    #[test]
    fn case_insensitive_kinds_render_canonically() {
        let l = parse_arch_spec("rnn(64)-Softmax(5)").unwrap();
        assert_eq!(render_arch_spec(&l), "RNN(64)-softmax(5)");
    }

    #[test]
    fn activity_compile_counts() {
        let g = activity_graph();
        let fg = derive_factor_graph(&g);
        let arch = compile(&fg, &g, &ArchSpecs::uniform("LSTM(8)-softmax(·)", "LSTM(4)")).unwrap();
        assert_eq!(arch.node_units.len(), 2);
        assert_eq!(arch.edge_units.len(), 4);
        assert_eq!(arch.wiring.len(), 5);
        // human: 3 features + human~object (4) + temporal human (4)
        assert_eq!(arch.node_units[&FactorId::Node("human".into())].input_dim, 3 + 4 + 4);
        // object: 2 + three wired edge units
        assert_eq!(arch.node_units[&FactorId::Node("object".into())].input_dim, 2 + 12);
        assert!(validate(&arch, &fg, &g).is_empty());
    }

    #[test]
    fn single_node_compile() {
        let g = StGraph::builder()
            .node("a", "x")
            .feature_dim("x", 5)
            .label_dims("x", vec![5])
            .build()
            .unwrap();
        let fg = derive_factor_graph(&g);
        let arch = compile(&fg, &g, &ArchSpecs::default()).unwrap();
        assert_eq!(arch.node_units.len(), 1);
        assert!(arch.edge_units.is_empty());
        assert_eq!(arch.node_units.values().next().unwrap().input_dim, 5);
    }

    #[test]
    fn driver_graph_input_dim() {
        let g = StGraph::builder()
            .node("driver", "driver")
            .node("inside", "inside")
            .node("outside", "outside")
            .spatial("driver", "inside")
            .spatial("driver", "outside")
            .feature_dim("driver", 6)
            .feature_dim("inside", 10)
            .feature_dim("outside", 4)
            .label_dims("driver", vec![5])
            .build()
            .unwrap();
        let fg = derive_factor_graph(&g);
        let specs = ArchSpecs::uniform("RNN(64)-softmax(5)", "LSTM(64)")
            .with(FactorId::Node("inside".into()), "LSTM(8)")
            .with(FactorId::Node("outside".into()), "LSTM(8)");
        let arch = compile(&fg, &g, &specs).unwrap();
        assert_eq!(arch.node_units[&FactorId::Node("driver".into())].input_dim, 6 + 64 + 64);
    }

    #[test]
    fn unresolvable_placeholder() {
        let g = StGraph::builder().node("a", "x").feature_dim("x", 5).build().unwrap();
        let fg = derive_factor_graph(&g);
        let e = compile(&fg, &g, &ArchSpecs::default()).unwrap_err();
        assert!(e.to_string().contains("placeholder"), "{e}");
    }

    #[test]
    fn missing_spec() {
        let g = activity_graph();
        let fg = derive_factor_graph(&g);
        let e = compile(&fg, &g, &ArchSpecs::explicit()).unwrap_err();
        assert!(e.to_string().contains("missing architecture"));
    }

    #[test]
    fn dense_parameter_count() {
        assert_eq!(layer_parameters(LayerKind::Fc, 2, 3).unwrap(), 9);
        assert_eq!(count_parameters(&ArchGraph::empty()).unwrap(), 0);
        assert_eq!(layer_parameters(LayerKind::Lstm, 3, 2).unwrap(), 4 * (6 + 4 + 2));
        assert_eq!(layer_parameters(LayerKind::Rnn, 3, 2).unwrap(), 6 + 4 + 2);
    }

    #[test]
    fn skip_widths() {
        let fid = FactorId::Node("x".into());
        // FC(2)-FC(2) stack with a head: head input is [x ; s1 ; s2]
        let layers = parse_arch_spec("FC(2)-FC(2)-FC(·)").unwrap();
        let u = UnitSpec::new(fid.clone(), layers.clone(), true, 3, &[1]).unwrap();
        let plan = u.plan().unwrap();
        assert!(plan.skip_active);
        assert_eq!(plan.layers[1].input_dim, 3 + 2);
        assert_eq!(plan.heads[0].input_dim, 4 + 3);
        let off = UnitSpec::new(fid.clone(), layers, false, 3, &[1]).unwrap();
        assert_eq!(off.plan().unwrap().heads[0].input_dim, 2);
        // single recurrent layer: skip is inert
        let single = UnitSpec::new(fid, parse_arch_spec("LSTM(4)-FC(·)").unwrap(), true, 3, &[2]).unwrap();
        assert!(!single.plan().unwrap().skip_active);
    }

    #[test]
    fn multi_head_replicates_final_layer() {
        let fid = FactorId::Node("x".into());
        let u = UnitSpec::new(fid, parse_arch_spec("LSTM(4)-softmax(·)").unwrap(), true, 3, &[5, 5]).unwrap();
        assert_eq!(u.output_dims, vec![5, 5]);
        assert_eq!(u.heads, vec![HeadKind::Classification; 2]);
        assert_eq!(u.plan().unwrap().parameter_count().unwrap(), 4 * (12 + 16 + 4) + 2 * 25);
    }

    #[test]
    fn validate_flags_violations() {
        let g = activity_graph();
        let fg = derive_factor_graph(&g);
        let good = compile(&fg, &g, &ArchSpecs::uniform("LSTM(8)-softmax(·)", "LSTM(4)")).unwrap();

        let mut bad_dim = good.clone();
        let human = FactorId::Node("human".into());
        bad_dim.node_units.get_mut(&human).unwrap().input_dim -= 4;
        let d = validate(&bad_dim, &fg, &g);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].factor.as_ref(), Some(&human));

        let mut spurious = good.clone();
        spurious.wiring.insert((
            FactorId::Edge(EdgePartitionKey::new(EdgeKind::Spatial, "object", "object")),
            human.clone(),
        ));
        let d = validate(&spurious, &fg, &g);
        assert!(d.iter().any(|x| x.message.contains("spurious wiring")), "{d:?}");
    }

    #[test]
    fn dot_output() {
        let g = activity_graph();
        let fg = derive_factor_graph(&g);
        let arch = compile(&fg, &g, &ArchSpecs::uniform("LSTM(8)-softmax(·)", "LSTM(4)")).unwrap();
        let dot = export_dot(&arch);
        assert_eq!(dot.matches("shape=box").count(), 2);
        assert_eq!(dot.matches("shape=ellipse").count(), 4);
        assert_eq!(dot.matches(" -> ").count(), 5);
        assert_eq!(dot, export_dot(&arch));
        assert_eq!(export_dot(&ArchGraph::empty()), "digraph srnn {\n  rankdir=LR;\n}\n");
    }

    #[test]
    fn arch_graph_json_round_trip() {
        let g = activity_graph();
        let fg = derive_factor_graph(&g);
        let arch = compile(&fg, &g, &ArchSpecs::uniform("LSTM(8)-softmax(·)", "LSTM(4)")).unwrap();
        let back: ArchGraph = serde_json::from_str(&arch.to_json()).unwrap();
        assert_eq!(back, arch);
    }
}
