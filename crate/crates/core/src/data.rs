//! Time-major sequences bound to an st-graph, and minibatches of them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SrnnError};
use crate::stgraph::{DerivationRule, Edge, EdgeKind, StGraph};
use crate::tensor::Tensor;

/// Targets of one output head over a sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// One class index per timestep.
    Classes(Vec<usize>),
    /// `[T × d]` regression targets.
    Values(Tensor),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Classes(c) => c.len(),
            Target::Values(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self, start: usize, len: usize) -> Result<Target> {
        match self {
            Target::Classes(c) => c
                .get(start..start + len)
                .map(|s| Target::Classes(s.to_vec()))
                .ok_or_else(|| SrnnError::Data(format!("window {start}+{len} past {}", c.len()))),
            Target::Values(t) => Ok(Target::Values(t.slice(0, start, len)?)),
        }
    }
}

/// One sequence: node features `[T × d_v]`, edge features `[T × d_e]` and
/// per-head targets for labelled nodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceBatch {
    pub len: usize,
    pub node_features: BTreeMap<String, Tensor>,
    pub edge_features: BTreeMap<Edge, Tensor>,
    pub targets: BTreeMap<String, Vec<Target>>,
}

impl SequenceBatch {
    pub fn new(len: usize) -> Self {
        SequenceBatch {
            len,
            ..Default::default()
        }
    }

    /// Checks every stream against the graph's declared dims and `len`.
    pub fn validate(&self, g: &StGraph) -> Result<()> {
        let check = |what: String, t: &Tensor, dim: usize| {
            if t.rank() != 2 || t.shape()[0] != self.len || t.shape()[1] != dim {
                return Err(SrnnError::Data(format!(
                    "{what}: expected [{} × {dim}], got {:?}",
                    self.len,
                    t.shape()
                )));
            }
            Ok(())
        };
        for (v, _) in g.nodes() {
            let x = self
                .node_features
                .get(v)
                .ok_or_else(|| SrnnError::Data(format!("missing features for node {v}")))?;
            check(format!("node {v}"), x, g.node_feature_dim(v).unwrap_or(0))?;
        }
        for e in g.edges() {
            let x = self
                .edge_features
                .get(e)
                .ok_or_else(|| SrnnError::Data(format!("missing features for edge {e}")))?;
            let dim = g.edge_attrs(&g.partition_key(e)).map_or(0, |a| a.feature_dim);
            check(format!("edge {e}"), x, dim)?;
        }
        for (v, heads) in &self.targets {
            for (k, t) in heads.iter().enumerate() {
                if t.len() != self.len {
                    return Err(SrnnError::Data(format!(
                        "node {v} head {k}: {} target steps for a sequence of {}",
                        t.len(),
                        self.len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fills in features for every edge lacking them, using its partition's
    /// derivation rule over the node features.
    pub fn derive_missing_edges(&mut self, g: &StGraph) -> Result<()> {
        for e in g.edges() {
            if self.edge_features.contains_key(e) {
                continue;
            }
            let x = derive_edge_sequence(g, e, &self.node_features)?;
            self.edge_features.insert(e.clone(), x);
        }
        Ok(())
    }

    /// Adds i.i.d. Gaussian noise of the given std to every node and edge
    /// feature; targets are left untouched.
    pub fn add_input_noise<R: Rng>(&mut self, std: f64, rng: &mut R) {
        if std <= 0.0 {
            return;
        }
        let normal = Normal::new(0.0, std).expect("finite std");
        for x in self.node_features.values_mut().chain(self.edge_features.values_mut()) {
            for v in x.data_mut() {
                *v += normal.sample(rng);
            }
        }
    }

    /// Timesteps `start .. start + len` of every stream.
    pub fn window(&self, start: usize, len: usize) -> Result<SequenceBatch> {
        if start + len > self.len {
            return Err(SrnnError::Data(format!(
                "window {start}+{len} past sequence length {}",
                self.len
            )));
        }
        let mut out = SequenceBatch::new(len);
        for (v, x) in &self.node_features {
            out.node_features.insert(v.clone(), x.slice(0, start, len)?);
        }
        for (e, x) in &self.edge_features {
            out.edge_features.insert(e.clone(), x.slice(0, start, len)?);
        }
        for (v, heads) in &self.targets {
            let w = heads.iter().map(|t| t.window(start, len)).collect::<Result<_>>()?;
            out.targets.insert(v.clone(), w);
        }
        Ok(out)
    }
}

/// Sequences split for training, validation and testing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<SequenceBatch>,
    pub val: Vec<SequenceBatch>,
    pub test: Vec<SequenceBatch>,
}

impl Dataset {
    pub fn validate(&self, g: &StGraph) -> Result<()> {
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            s.validate(g)?;
        }
        Ok(())
    }
}

/// Features of edge `e` at every timestep: rows of `prev` hold the frame
/// before the rows of `cur` (used by temporal edges).
pub fn derive_edge_features(
    g: &StGraph,
    e: &Edge,
    prev: &BTreeMap<String, Tensor>,
    cur: &BTreeMap<String, Tensor>,
) -> Result<Tensor> {
    let key = g.partition_key(e);
    let attrs = g
        .edge_attrs(&key)
        .ok_or_else(|| SrnnError::Data(format!("no attributes for partition {key}")))?;
    let (first, second) = g.ordered_endpoints(e);
    let a = match e.kind {
        EdgeKind::Temporal => frame_of(prev, first)?,
        EdgeKind::Spatial => frame_of(cur, first)?,
    };
    let b = frame_of(cur, second)?;
    let out = match attrs.derivation {
        DerivationRule::ConcatEndpoints => Tensor::concat(&[a, b], 1)?,
        DerivationRule::Difference => b.sub(a)?,
        DerivationRule::CustomPassthrough => {
            return Err(SrnnError::Data(format!(
                "edge {e}: custom-passthrough features cannot be derived"
            )))
        }
    };
    if out.shape()[1] != attrs.feature_dim {
        return Err(SrnnError::Data(format!(
            "edge {e}: derived width {} but partition declares {}",
            out.shape()[1],
            attrs.feature_dim
        )));
    }
    Ok(out)
}

fn frame_of<'a>(frames: &'a BTreeMap<String, Tensor>, v: &str) -> Result<&'a Tensor> {
    frames
        .get(v)
        .ok_or_else(|| SrnnError::Data(format!("missing features for node {v}")))
}

/// Sequence version of [`derive_edge_features`]; the frame before the first
/// is the first frame itself.
pub fn derive_edge_sequence(g: &StGraph, e: &Edge, nodes: &BTreeMap<String, Tensor>) -> Result<Tensor> {
    let mut prev = BTreeMap::new();
    if e.kind == EdgeKind::Temporal {
        let x = nodes
            .get(&e.a)
            .ok_or_else(|| SrnnError::Data(format!("missing features for node {}", e.a)))?;
        let t = x.shape()[0];
        let shifted = if t == 0 {
            x.clone()
        } else {
            Tensor::concat(&[&x.slice(0, 0, 1)?, &x.slice(0, 0, t - 1)?], 0)?
        };
        prev.insert(e.a.clone(), shifted);
    }
    derive_edge_features(g, e, &prev, nodes)
}

/// Per-timestep targets of one head across the rows of a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub enum StepTargets {
    Classes(Vec<Vec<usize>>),
    Values(Vec<Tensor>),
}

/// Equal-length sequences stacked row-wise: every stream is a list over
/// time of `[rows × d]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub len: usize,
    pub rows: usize,
    pub nodes: BTreeMap<String, Vec<Tensor>>,
    pub edges: BTreeMap<Edge, Vec<Tensor>>,
    pub targets: BTreeMap<String, Vec<StepTargets>>,
}

fn per_step(seqs: &[&Tensor], len: usize) -> Result<Vec<Tensor>> {
    (0..len)
        .map(|t| {
            let rows = seqs.iter().map(|x| x.slice(0, t, 1)).collect::<Result<Vec<_>>>()?;
            Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)
        })
        .collect()
}

impl Minibatch {
    pub fn stack(batches: &[&SequenceBatch]) -> Result<Minibatch> {
        let first = batches
            .first()
            .ok_or_else(|| SrnnError::Data("empty minibatch".into()))?;
        let len = first.len;
        if batches.iter().any(|b| b.len != len) {
            return Err(SrnnError::Data("minibatch sequences differ in length".into()));
        }
        let collect = |get: &dyn Fn(&SequenceBatch) -> Option<&Tensor>, what: &str| {
            let seqs = batches
                .iter()
                .map(|b| get(b).ok_or_else(|| SrnnError::Data(format!("missing stream {what}"))))
                .collect::<Result<Vec<_>>>()?;
            per_step(&seqs, len)
        };
        let mut nodes = BTreeMap::new();
        for v in first.node_features.keys() {
            nodes.insert(v.clone(), collect(&|b| b.node_features.get(v), v)?);
        }
        let mut edges = BTreeMap::new();
        for e in first.edge_features.keys() {
            edges.insert(e.clone(), collect(&|b| b.edge_features.get(e), &e.to_string())?);
        }
        let mut targets = BTreeMap::new();
        for (v, heads) in &first.targets {
            let mut per_head = Vec::with_capacity(heads.len());
            for k in 0..heads.len() {
                let of = |b: &SequenceBatch| -> Result<Target> {
                    b.targets
                        .get(v)
                        .and_then(|h| h.get(k))
                        .cloned()
                        .ok_or_else(|| SrnnError::Data(format!("missing targets for {v}")))
                };
                per_head.push(match &heads[k] {
                    Target::Classes(_) => {
                        let mut steps = vec![Vec::with_capacity(batches.len()); len];
                        for b in batches {
                            let Target::Classes(c) = of(b)? else {
                                return Err(SrnnError::Data(format!("mixed target kinds for {v}")));
                            };
                            for (t, &class) in c.iter().enumerate().take(len) {
                                steps[t].push(class);
                            }
                        }
                        StepTargets::Classes(steps)
                    }
                    Target::Values(_) => {
                        let owned = batches
                            .iter()
                            .map(|b| match of(b)? {
                                Target::Values(t) => Ok(t),
                                Target::Classes(_) => Err(SrnnError::Data(format!("mixed target kinds for {v}"))),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        StepTargets::Values(per_step(&owned.iter().collect::<Vec<_>>(), len)?)
                    }
                });
            }
            targets.insert(v.clone(), per_head);
        }
        Ok(Minibatch {
            len,
            rows: batches.len(),
            nodes,
            edges,
            targets,
        })
    }
}
