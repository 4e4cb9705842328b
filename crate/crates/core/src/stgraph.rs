//! Spatio-temporal graphs, their semantic edge partitions, and the shared
//! factor structure derived from them.
//!
//! Nodes carry a partition label; nodes with the same label share one node
//! factor. Edges are grouped by the (sorted) label pair of their endpoints
//! and by kind, so spatial and temporal edges between the same labels
//! never share a factor. Every collection is kept in lexicographic order so
//! that everything downstream is reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrnnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Spatial,
    Temporal,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Spatial => "spatial",
            EdgeKind::Temporal => "temporal",
        })
    }
}

/// An edge of the st-graph. Spatial edges are stored with `a <= b`;
/// temporal edges keep their direction (`a` at t, `b` at t+1).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub kind: EdgeKind,
    pub a: String,
    pub b: String,
}

impl Edge {
    pub fn spatial(a: &str, b: &str) -> Self {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Edge {
            kind: EdgeKind::Spatial,
            a: a.to_string(),
            b: b.to_string(),
        }
    }

    pub fn temporal(from: &str, to: &str) -> Self {
        Edge {
            kind: EdgeKind::Temporal,
            a: from.to_string(),
            b: to.to_string(),
        }
    }

    pub fn touches(&self, v: &str) -> bool {
        self.a == v || self.b == v
    }

    /// The endpoint opposite `v` (or `v` itself for a self edge).
    pub fn counterpart(&self, v: &str) -> &str {
        if self.a == v {
            &self.b
        } else {
            &self.a
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EdgeKind::Spatial => write!(f, "spatial:{}~{}", self.a, self.b),
            EdgeKind::Temporal => write!(f, "temporal:{}>{}", self.a, self.b),
        }
    }
}

impl FromStr for Edge {
    type Err = SrnnError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SrnnError::Input(format!("malformed edge id {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "spatial" => {
                let (a, b) = rest.split_once('~').ok_or_else(bad)?;
                Ok(Edge::spatial(a, b))
            }
            "temporal" => {
                let (a, b) = rest.split_once('>').ok_or_else(bad)?;
                Ok(Edge::temporal(a, b))
            }
            _ => Err(bad()),
        }
    }
}

/// Identifies an edge partition: edge kind plus the sorted endpoint labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgePartitionKey {
    pub kind: EdgeKind,
    pub labels: (String, String),
}

impl EdgePartitionKey {
    pub fn new(kind: EdgeKind, a: &str, b: &str) -> Self {
        let labels = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        EdgePartitionKey { kind, labels }
    }

    pub fn involves(&self, label: &str) -> bool {
        self.labels.0 == label || self.labels.1 == label
    }
}

impl fmt::Display for EdgePartitionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}~{}", self.kind, self.labels.0, self.labels.1)
    }
}

impl FromStr for EdgePartitionKey {
    type Err = SrnnError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SrnnError::Input(format!("malformed edge partition key {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let kind = match kind {
            "spatial" => EdgeKind::Spatial,
            "temporal" => EdgeKind::Temporal,
            _ => return Err(bad()),
        };
        let (a, b) = rest.split_once('~').ok_or_else(bad)?;
        Ok(EdgePartitionKey::new(kind, a, b))
    }
}

impl Ord for EdgePartitionKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

impl PartialOrd for EdgePartitionKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// How edge features are rebuilt from node features when only node
/// frames are available (closed-loop forecasting, noise injection).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivationRule {
    /// `[x_first ; x_second]`, endpoints ordered by (label, id); for
    /// temporal edges `[x_from^{t-1} ; x_to^t]`.
    ConcatEndpoints,
    /// `x_second − x_first` with the same ordering; equal dims required.
    Difference,
    /// Features come from data only and cannot be derived.
    CustomPassthrough,
}

impl DerivationRule {
    pub fn name(self) -> &'static str {
        match self {
            DerivationRule::ConcatEndpoints => "concat-endpoints",
            DerivationRule::Difference => "difference",
            DerivationRule::CustomPassthrough => "custom-passthrough",
        }
    }
}

/// Declared properties of one edge partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeAttrs {
    pub feature_dim: usize,
    pub derivation: DerivationRule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StGraph {
    nodes: BTreeMap<String, String>,
    spatial_edges: BTreeSet<Edge>,
    temporal_edges: BTreeSet<Edge>,
    node_feature_dims: BTreeMap<String, usize>,
    label_dims: BTreeMap<String, Vec<usize>>,
    edge_attrs: BTreeMap<EdgePartitionKey, EdgeAttrs>,
}

#[derive(Debug, Default, Clone)]
pub struct StGraphBuilder {
    nodes: Vec<(String, String)>,
    spatial: Vec<(String, String)>,
    temporal: Vec<(String, String)>,
    node_feature_dims: BTreeMap<String, usize>,
    label_dims: BTreeMap<String, Vec<usize>>,
    edge_attrs: BTreeMap<EdgePartitionKey, EdgeAttrs>,
}

impl StGraphBuilder {
    pub fn node(mut self, id: &str, label: &str) -> Self {
        self.nodes.push((id.into(), label.into()));
        self
    }

    pub fn spatial(mut self, a: &str, b: &str) -> Self {
        self.spatial.push((a.into(), b.into()));
        self
    }

    pub fn temporal(mut self, from: &str, to: &str) -> Self {
        self.temporal.push((from.into(), to.into()));
        self
    }

    /// Dimension of the node features of every node labelled `label`.
    pub fn feature_dim(mut self, label: &str, dim: usize) -> Self {
        self.node_feature_dims.insert(label.into(), dim);
        self
    }

    /// Output head dimensions for nodes labelled `label`.
    pub fn label_dims(mut self, label: &str, dims: Vec<usize>) -> Self {
        self.label_dims.insert(label.into(), dims);
        self
    }

    pub fn edge_attrs(mut self, key: EdgePartitionKey, attrs: EdgeAttrs) -> Self {
        self.edge_attrs.insert(key, attrs);
        self
    }

    pub fn build(self) -> Result<StGraph> {
        let mut nodes = BTreeMap::new();
        for (id, label) in &self.nodes {
            if nodes.insert(id.clone(), label.clone()).is_some() {
                return Err(SrnnError::Graph(format!("duplicate node id {id}")));
            }
        }
        let check = |id: &String| -> Result<()> {
            if nodes.contains_key(id) {
                Ok(())
            } else {
                Err(SrnnError::Graph(format!("edge references unknown node {id}")))
            }
        };
        let mut spatial_edges = BTreeSet::new();
        for (a, b) in &self.spatial {
            check(a)?;
            check(b)?;
            if a == b {
                return Err(SrnnError::Graph(format!("spatial self edge on {a}")));
            }
            if !spatial_edges.insert(Edge::spatial(a, b)) {
                return Err(SrnnError::Graph(format!("duplicate spatial edge {a}~{b}")));
            }
        }
        let mut temporal_edges = BTreeSet::new();
        for (a, b) in &self.temporal {
            check(a)?;
            check(b)?;
            if !temporal_edges.insert(Edge::temporal(a, b)) {
                return Err(SrnnError::Graph(format!("duplicate temporal edge {a}>{b}")));
            }
        }
        let labels: BTreeSet<&String> = nodes.values().collect();
        for label in &labels {
            if !self.node_feature_dims.contains_key(*label) {
                return Err(SrnnError::Graph(format!(
                    "no feature dimension declared for partition {label}"
                )));
            }
        }
        for label in self.node_feature_dims.keys().chain(self.label_dims.keys()) {
            if !labels.contains(label) {
                return Err(SrnnError::Graph(format!(
                    "dimensions declared for unknown partition {label}"
                )));
            }
        }
        let g = StGraph {
            nodes,
            spatial_edges,
            temporal_edges,
            node_feature_dims: self.node_feature_dims,
            label_dims: self.label_dims,
            edge_attrs: BTreeMap::new(),
        };
        let present: BTreeSet<EdgePartitionKey> = g.edges().map(|e| g.partition_key(e)).collect();
        for key in self.edge_attrs.keys() {
            if !present.contains(key) {
                return Err(SrnnError::Graph(format!(
                    "attributes declared for edge partition {key} which has no edges"
                )));
            }
        }
        let mut edge_attrs = BTreeMap::new();
        for key in present {
            let attrs = match self.edge_attrs.get(&key) {
                Some(a) => a.clone(),
                None => EdgeAttrs {
                    feature_dim: g.node_feature_dims[&key.labels.0] + g.node_feature_dims[&key.labels.1],
                    derivation: DerivationRule::ConcatEndpoints,
                },
            };
            edge_attrs.insert(key, attrs);
        }
        Ok(StGraph { edge_attrs, ..g })
    }
}

impl StGraph {
    pub fn builder() -> StGraphBuilder {
        StGraphBuilder::default()
    }

    /// `(id, label)` pairs in id order.
    pub fn nodes(&self) -> impl Iterator<Item = (&str, &str)> {
        self.nodes.iter().map(|(i, l)| (i.as_str(), l.as_str()))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.nodes.get(id).map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    /// Distinct partition labels, sorted.
    pub fn labels(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.nodes.values().map(String::as_str).collect();
        set.into_iter().collect()
    }

    pub fn members_of(&self, label: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, l)| l.as_str() == label)
            .map(|(i, _)| i.as_str())
            .collect()
    }

    pub fn spatial_edges(&self) -> impl Iterator<Item = &Edge> {
        self.spatial_edges.iter()
    }

    pub fn temporal_edges(&self) -> impl Iterator<Item = &Edge> {
        self.temporal_edges.iter()
    }

    /// Spatial edges first, then temporal, each sorted.
    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.spatial_edges.iter().chain(self.temporal_edges.iter())
    }

    pub fn feature_dim(&self, label: &str) -> Option<usize> {
        self.node_feature_dims.get(label).copied()
    }

    pub fn node_feature_dim(&self, id: &str) -> Option<usize> {
        self.label_of(id).and_then(|l| self.feature_dim(l))
    }

    pub fn label_dims(&self, label: &str) -> &[usize] {
        self.label_dims.get(label).map_or(&[], Vec::as_slice)
    }

    pub fn edge_attrs(&self, key: &EdgePartitionKey) -> Option<&EdgeAttrs> {
        self.edge_attrs.get(key)
    }

    pub fn partition_key(&self, e: &Edge) -> EdgePartitionKey {
        EdgePartitionKey::new(e.kind, &self.nodes[&e.a], &self.nodes[&e.b])
    }

    /// Copy of the graph with every edge removed, keeping node partitions
    /// and dimensions. Compiling it yields the edge-ablated architecture.
    pub fn without_edges(&self) -> StGraph {
        StGraph {
            spatial_edges: BTreeSet::new(),
            temporal_edges: BTreeSet::new(),
            edge_attrs: BTreeMap::new(),
            ..self.clone()
        }
    }

    /// Endpoint order used by edge-feature derivation: by (label, id).
    pub fn ordered_endpoints<'a>(&self, e: &'a Edge) -> (&'a str, &'a str) {
        if e.kind == EdgeKind::Temporal {
            return (&e.a, &e.b);
        }
        let ka = (&self.nodes[&e.a], &e.a);
        let kb = (&self.nodes[&e.b], &e.b);
        if ka <= kb {
            (&e.a, &e.b)
        } else {
            (&e.b, &e.a)
        }
    }
}

/// A group of edges sharing one edge factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgePartition {
    pub key: EdgePartitionKey,
    pub members: Vec<Edge>,
    pub feature_dim: usize,
}

/// Groups every edge by (kind, sorted endpoint labels). Output is sorted by
/// key and members are sorted within each partition.
pub fn partition_edges(g: &StGraph) -> Vec<EdgePartition> {
    let mut groups: BTreeMap<EdgePartitionKey, Vec<Edge>> = BTreeMap::new();
    for e in g.edges() {
        groups.entry(g.partition_key(e)).or_default().push(e.clone());
    }
    groups
        .into_iter()
        .map(|(key, mut members)| {
            members.sort();
            let feature_dim = g.edge_attrs[&key].feature_dim;
            EdgePartition {
                key,
                members,
                feature_dim,
            }
        })
        .collect()
}

/// Identity of a factor, and therefore of the recurrent unit compiled for
/// it. Renders as `node:<label>` or `<kind>:<label>~<label>`; ordering is
/// lexicographic on that rendering.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FactorId {
    Node(String),
    Edge(EdgePartitionKey),
}

impl FactorId {
    pub fn is_node(&self) -> bool {
        matches!(self, FactorId::Node(_))
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorId::Node(label) => write!(f, "node:{label}"),
            FactorId::Edge(key) => key.fmt(f),
        }
    }
}

impl FromStr for FactorId {
    type Err = SrnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("node:") {
            Some(label) if !label.is_empty() => Ok(FactorId::Node(label.to_string())),
            Some(_) => Err(SrnnError::Input(format!("malformed factor id {s:?}"))),
            None => Ok(FactorId::Edge(s.parse()?)),
        }
    }
}

impl Ord for FactorId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

impl PartialOrd for FactorId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for FactorId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FactorId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeFactor {
    pub id: FactorId,
    pub label: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeFactor {
    pub id: FactorId,
    pub partition: EdgePartition,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorGraph {
    pub node_factors: Vec<NodeFactor>,
    pub edge_factors: Vec<EdgeFactor>,
    /// `(edge factor, node factor)` pairs that jointly affect some node.
    pub neighbor_pairs: BTreeSet<(FactorId, FactorId)>,
}

impl FactorGraph {
    pub fn factor_count(&self) -> usize {
        self.node_factors.len() + self.edge_factors.len()
    }

    pub fn edge_factor(&self, id: &FactorId) -> Option<&EdgeFactor> {
        self.edge_factors.iter().find(|f| &f.id == id)
    }
}

pub fn derive_factor_graph(g: &StGraph) -> FactorGraph {
    let node_factors = g
        .labels()
        .into_iter()
        .map(|label| NodeFactor {
            id: FactorId::Node(label.to_string()),
            label: label.to_string(),
            members: g.members_of(label).into_iter().map(String::from).collect(),
        })
        .collect();
    let mut edge_factors = Vec::new();
    let mut neighbor_pairs = BTreeSet::new();
    for partition in partition_edges(g) {
        let id = FactorId::Edge(partition.key.clone());
        for e in &partition.members {
            for end in [&e.a, &e.b] {
                let label = g.label_of(end).expect("validated endpoint");
                neighbor_pairs.insert((id.clone(), FactorId::Node(label.to_string())));
            }
        }
        edge_factors.push(EdgeFactor { id, partition });
    }
    FactorGraph {
        node_factors,
        edge_factors,
        neighbor_pairs,
    }
}

/// Edges of partition `key` touching `v`, ordered by counterpart id.
pub fn incident_edges(g: &StGraph, v: &str, key: &EdgePartitionKey) -> Result<Vec<Edge>> {
    if !g.contains(v) {
        return Err(SrnnError::Input(format!("unknown node {v}")));
    }
    if g.edge_attrs(key).is_none() {
        return Err(SrnnError::Input(format!("unknown edge partition {key}")));
    }
    let mut out: Vec<Edge> = g
        .edges()
        .filter(|e| e.touches(v) && &g.partition_key(e) == key)
        .cloned()
        .collect();
    out.sort_by(|x, y| x.counterpart(v).cmp(y.counterpart(v)).then_with(|| x.cmp(y)));
    Ok(out)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// One human `h` and two objects `u`, `w`: spatial h–u, h–w, u–w and a
    /// temporal self edge on every node.
    pub fn activity_graph() -> StGraph {
        StGraph::builder()
            .node("h", "human")
            .node("u", "object")
            .node("w", "object")
            .spatial("h", "u")
            .spatial("h", "w")
            .spatial("u", "w")
            .temporal("h", "h")
            .temporal("u", "u")
            .temporal("w", "w")
            .feature_dim("human", 3)
            .feature_dim("object", 2)
            .label_dims("human", vec![4])
            .label_dims("object", vec![3])
            .build()
            .unwrap()
    }
}
