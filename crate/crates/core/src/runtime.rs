//! Executes a compiled architecture: edge-feature aggregation, per-node
//! forward passes, losses, closed-loop forecasting, unit swapping and cell
//! tracing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::arch::{compile, validate, ArchGraph, ArchSpecs, HeadKind, LayerKind};
use crate::autodiff::{Tape, Var};
use crate::data::{derive_edge_features, Minibatch, SequenceBatch, StepTargets};
use crate::error::{Result, SrnnError};
use crate::layers::{LayerState, RecurrentState, StackedUnit, StepState};
use crate::params::ParamStore;
use crate::stgraph::{derive_factor_graph, Edge, EdgePartitionKey, FactorGraph, FactorId, StGraph};
use crate::tensor::Tensor;

/// How the features of several incident edges are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    /// Labels of the current timestep.
    Detection,
    /// Labels of the next timestep.
    Anticipation,
    /// Euclidean loss against regression targets.
    Regression,
    /// Detection heads then anticipation heads, weighted equally.
    MultiTask,
}

impl FromStr for TaskMode {
    type Err = SrnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(TaskMode::Detection),
            "anticipation" => Ok(TaskMode::Anticipation),
            "regression" => Ok(TaskMode::Regression),
            "multitask" | "multi-task" => Ok(TaskMode::MultiTask),
            other => Err(SrnnError::Input(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Detection => "detection",
            TaskMode::Anticipation => "anticipation",
            TaskMode::Regression => "regression",
            TaskMode::MultiTask => "multitask",
        })
    }
}

/// Ground-truth frames consumed before closed-loop forecasting.
pub const DEFAULT_SEED_FRAMES: usize = 50;
/// Frames predicted by a default forecast.
pub const DEFAULT_HORIZON: usize = 100;

/// Recurrent state of the units serving one node, as tape variables.
#[derive(Debug, Clone)]
pub struct NodeTapeState {
    pub edges: BTreeMap<FactorId, StepState>,
    pub node: StepState,
}

/// Recurrent state of the units serving one node, as values.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub edges: BTreeMap<FactorId, RecurrentState>,
    pub node: RecurrentState,
}

/// Values of every node's recurrent state, carried between tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub nodes: BTreeMap<String, NodeState>,
}

/// Node and edge features at one timestep, `[rows × d]` each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub nodes: BTreeMap<String, Tensor>,
    pub edges: BTreeMap<Edge, Tensor>,
}

/// Number of steps each unit executed.
pub type Invocations = BTreeMap<FactorId, usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutput {
    /// One `[T × width]` tensor per head.
    pub heads: Vec<Tensor>,
    pub invocations: Invocations,
}

/// Joint loss of a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// Scalar to differentiate: ½Σ(pred − target)² plus Σ −ln p.
    pub loss: Var,
    /// Sum of per-term losses without the ½ on Euclidean terms.
    pub reported_sum: f64,
    /// Number of (node, timestep, row) terms.
    pub count: usize,
}

impl LossTerms {
    /// Mean per-frame loss, as written to training logs.
    pub fn reported(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.reported_sum / self.count as f64
        }
    }
}

/// Memory-cell values of one LSTM cell over a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTrace {
    pub unit: FactorId,
    /// Node whose instance of the unit was traced.
    pub node: String,
    pub layer: usize,
    pub cell: usize,
    pub activations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `[H × d]` predicted features per node.
    pub frames: BTreeMap<String, Tensor>,
    /// State after the last consumed frame.
    pub state: ModelState,
}

/// A compiled, parameterized S-RNN bound to its st-graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SrnnModel {
    graph: StGraph,
    factors: FactorGraph,
    arch: ArchGraph,
    store: ParamStore,
    units: BTreeMap<FactorId, StackedUnit>,
    aggregation: Aggregation,
    /// Per node: wired edge factors with incident member edges in
    /// partition-member order.
    wiring: BTreeMap<String, Vec<(FactorId, Vec<Edge>)>>,
}

impl SrnnModel {
    /// Compiles `graph` with `specs` and initializes parameters from `seed`.
    pub fn new(graph: StGraph, specs: &ArchSpecs, seed: u64) -> Result<Self> {
        let fg = derive_factor_graph(&graph);
        let arch = compile(&fg, &graph, specs)?;
        Self::from_arch(graph, arch, seed)
    }

    pub fn from_arch(graph: StGraph, arch: ArchGraph, seed: u64) -> Result<Self> {
        let factors = derive_factor_graph(&graph);
        let diags = validate(&arch, &factors, &graph);
        if let Some(d) = diags.first() {
            return Err(SrnnError::Compile(format!(
                "architecture does not match graph: {d} ({} problems)",
                diags.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut units = BTreeMap::new();
        for spec in arch.units() {
            units.insert(spec.factor.clone(), StackedUnit::materialize(spec, &mut store)?);
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        for unit in units.values() {
            unit.init_params(&mut store, &mut rng);
        }
        let members: BTreeMap<&FactorId, &Vec<Edge>> = factors
            .edge_factors
            .iter()
            .map(|ef| (&ef.id, &ef.partition.members))
            .collect();
        let mut wiring = BTreeMap::new();
        for (v, label) in graph.nodes() {
            let nf = FactorId::Node(label.to_string());
            let wired = arch
                .edges_into(&nf)
                .into_iter()
                .map(|ef| {
                    let inc = members[ef].iter().filter(|e| e.touches(v)).cloned().collect();
                    (ef.clone(), inc)
                })
                .collect();
            wiring.insert(v.to_string(), wired);
        }
        Ok(SrnnModel {
            graph,
            factors,
            arch,
            store,
            units,
            aggregation: Aggregation::Sum,
            wiring,
        })
    }

    pub fn graph(&self) -> &StGraph {
        &self.graph
    }

    pub fn arch(&self) -> &ArchGraph {
        &self.arch
    }

    pub fn factors(&self) -> &FactorGraph {
        &self.factors
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn unit(&self, id: &FactorId) -> Option<&StackedUnit> {
        self.units.get(id)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.element_count()
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn set_aggregation(&mut self, aggregation: Aggregation) {
        self.aggregation = aggregation;
    }

    fn node_factor(&self, v: &str) -> Result<FactorId> {
        self.graph
            .label_of(v)
            .map(|l| FactorId::Node(l.to_string()))
            .ok_or_else(|| SrnnError::Input(format!("unknown node {v}")))
    }

    fn wired(&self, v: &str) -> Result<&[(FactorId, Vec<Edge>)]> {
        self.wiring
            .get(v)
            .map(Vec::as_slice)
            .ok_or_else(|| SrnnError::Input(format!("unknown node {v}")))
    }

    fn incident(&self, v: &str, key: &EdgePartitionKey) -> Result<&[Edge]> {
        let id = FactorId::Edge(key.clone());
        self.wired(v)?
            .iter()
            .find(|(f, _)| f == &id)
            .map(|(_, edges)| edges.as_slice())
            .ok_or_else(|| SrnnError::Input(format!("partition {key} is not wired to node {v}")))
    }

    /// Binary selector over the members of `key`: 1 where the member edge
    /// touches `v`.
    pub fn selector(&self, v: &str, key: &EdgePartitionKey) -> Result<Vec<f64>> {
        self.incident(v, key)?;
        let ef = self
            .factors
            .edge_factor(&FactorId::Edge(key.clone()))
            .expect("wired partitions have factors");
        Ok(ef
            .partition
            .members
            .iter()
            .map(|e| if e.touches(v) { 1.0 } else { 0.0 })
            .collect())
    }

    /// Pooled features of the edges of `key` incident to `v`, `[T × d_e]`.
    pub fn edge_input(&self, v: &str, key: &EdgePartitionKey, batch: &SequenceBatch) -> Result<Tensor> {
        let edges = self.incident(v, key)?;
        let dim = self.graph.edge_attrs(key).map_or(0, |a| a.feature_dim);
        let mut acc = Tensor::zeros(&[batch.len, dim]);
        for e in edges {
            let x = batch
                .edge_features
                .get(e)
                .ok_or_else(|| SrnnError::Data(format!("missing features for edge {e}")))?;
            acc = acc.add(x)?;
        }
        if self.aggregation == Aggregation::Mean && edges.len() > 1 {
            acc = acc.scale(1.0 / edges.len() as f64);
        }
        Ok(acc)
    }

    fn edge_input_var(
        &self,
        tape: &mut Tape,
        edges: &[Edge],
        dim: usize,
        rows: usize,
        feature: &mut dyn FnMut(&mut Tape, &Edge) -> Result<Var>,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(edges.len() + 1);
        parts.push(tape.constant(Tensor::zeros(&[rows, dim])));
        for e in edges {
            parts.push(feature(tape, e)?);
        }
        let sum = tape.sum_list(&parts)?;
        Ok(match self.aggregation {
            Aggregation::Mean if edges.len() > 1 => tape.scale(sum, 1.0 / edges.len() as f64),
            _ => sum,
        })
    }

    pub fn zero_node_state(&self, tape: &mut Tape, v: &str, rows: usize) -> Result<NodeTapeState> {
        let mut edges = BTreeMap::new();
        for (ef, _) in self.wired(v)? {
            edges.insert(ef.clone(), self.units[ef].zero_state(tape, rows));
        }
        let node = self.units[&self.node_factor(v)?].zero_state(tape, rows);
        Ok(NodeTapeState { edges, node })
    }

    /// One timestep for node `v`: every wired edge unit consumes its pooled
    /// edge features, then the node unit consumes
    /// `[x_v ; edge outputs in factor-id order]`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_node(
        &self,
        tape: &mut Tape,
        v: &str,
        x_v: Var,
        rows: usize,
        feature: &mut dyn FnMut(&mut Tape, &Edge) -> Result<Var>,
        state: &mut NodeTapeState,
        invocations: Option<&mut Invocations>,
    ) -> Result<Vec<Var>> {
        let mut counts = invocations;
        let mut inputs = vec![x_v];
        for (ef, edges) in self.wired(v)? {
            let FactorId::Edge(key) = ef else {
                unreachable!("wiring sources are edge factors")
            };
            let dim = self.graph.edge_attrs(key).map_or(0, |a| a.feature_dim);
            let pooled = self.edge_input_var(tape, edges, dim, rows, feature)?;
            let unit = &self.units[ef];
            let st = state
                .edges
                .get(ef)
                .ok_or_else(|| SrnnError::Input(format!("no state for {ef} at node {v}")))?;
            let out = unit.step(tape, &self.store, pooled, st)?;
            if let Some(c) = counts.as_deref_mut() {
                *c.entry(ef.clone()).or_default() += 1;
            }
            inputs.push(out.outputs[0]);
            state.edges.insert(ef.clone(), out.state);
        }
        let nf = self.node_factor(v)?;
        let x = if inputs.len() == 1 {
            x_v
        } else {
            tape.concat(&inputs, 1)?
        };
        let out = self.units[&nf].step(tape, &self.store, x, &state.node)?;
        if let Some(c) = counts.as_mut() {
            *c.entry(nf).or_default() += 1;
        }
        state.node = out.state;
        Ok(out.outputs)
    }

    /// Forward pass of the listed nodes over a minibatch. Returns, per node,
    /// per timestep, the head outputs.
    pub fn forward_minibatch(
        &self,
        tape: &mut Tape,
        mb: &Minibatch,
        nodes: &[String],
        mut invocations: Option<&mut Invocations>,
    ) -> Result<BTreeMap<String, Vec<Vec<Var>>>> {
        let mut states = BTreeMap::new();
        for v in nodes {
            states.insert(v.clone(), self.zero_node_state(tape, v, mb.rows)?);
        }
        let mut outputs: BTreeMap<String, Vec<Vec<Var>>> = BTreeMap::new();
        for t in 0..mb.len {
            // edge features at t are shared by every node that reads them
            let mut edge_vars: BTreeMap<&Edge, Var> = BTreeMap::new();
            for v in nodes {
                let x = mb
                    .nodes
                    .get(v)
                    .ok_or_else(|| SrnnError::Data(format!("missing features for node {v}")))?;
                let x_v = tape.constant(x[t].clone());
                let mut feature = |tape: &mut Tape, e: &Edge| -> Result<Var> {
                    if let Some(&var) = edge_vars.get(e) {
                        return Ok(var);
                    }
                    let (key, x) = mb
                        .edges
                        .get_key_value(e)
                        .ok_or_else(|| SrnnError::Data(format!("missing features for edge {e}")))?;
                    let var = tape.constant(x[t].clone());
                    edge_vars.insert(key, var);
                    Ok(var)
                };
                let st = states.get_mut(v).expect("initialized above");
                let out = self.step_node(tape, v, x_v, mb.rows, &mut feature, st, invocations.as_deref_mut())?;
                outputs.entry(v.clone()).or_default().push(out);
            }
        }
        Ok(outputs)
    }

    /// Nodes whose partition declares output heads, in id order.
    pub fn labeled_nodes(&self) -> Vec<String> {
        self.graph
            .nodes()
            .filter(|(_, l)| !self.graph.label_dims(l).is_empty())
            .map(|(v, _)| v.to_string())
            .collect()
    }

    /// Forward pass of a single node over one sequence.
    pub fn forward_node(&self, v: &str, batch: &SequenceBatch) -> Result<NodeOutput> {
        self.node_factor(v)?;
        let mb = Minibatch::stack(&[batch])?;
        let mut tape = Tape::new();
        let mut invocations = Invocations::new();
        let out = self.forward_minibatch(&mut tape, &mb, &[v.to_string()], Some(&mut invocations))?;
        let steps = &out[v];
        let n_heads = steps.first().map_or(0, Vec::len);
        let heads = (0..n_heads)
            .map(|k| {
                let rows: Vec<&Tensor> = steps.iter().map(|s| tape.value(s[k])).collect();
                Tensor::concat(&rows, 0)
            })
            .collect::<Result<_>>()?;
        Ok(NodeOutput { heads, invocations })
    }

    /// Head outputs of every labelled node over one sequence.
    pub fn predict(&self, batch: &SequenceBatch) -> Result<BTreeMap<String, Vec<Tensor>>> {
        let mut out = BTreeMap::new();
        for v in self.labeled_nodes() {
            let heads = self.forward_node(&v, batch)?.heads;
            out.insert(v, heads);
        }
        Ok(out)
    }

    /// Sum over labelled nodes, timesteps and rows of per-head losses.
    pub fn joint_loss(&self, tape: &mut Tape, mb: &Minibatch, mode: TaskMode) -> Result<LossTerms> {
        let nodes = self.labeled_nodes();
        let outputs = self.forward_minibatch(tape, mb, &nodes, None)?;
        let mut terms = Vec::new();
        let mut reported_sum = 0.0;
        let mut count = 0usize;
        for v in &nodes {
            let targets = mb
                .targets
                .get(v)
                .ok_or_else(|| SrnnError::Data(format!("missing targets for labelled node {v}")))?;
            let steps = &outputs[v];
            let n_heads = steps.first().map_or(0, Vec::len);
            // (head, target, shift) triples
            let pairs: Vec<(usize, usize, usize)> = match mode {
                TaskMode::Regression | TaskMode::Detection => (0..n_heads).map(|k| (k, k, 0)).collect(),
                TaskMode::Anticipation => (0..n_heads).map(|k| (k, k, 1)).collect(),
                TaskMode::MultiTask => {
                    if n_heads % 2 != 0 {
                        return Err(SrnnError::Data(format!(
                            "multi-task node {v} needs detection and anticipation heads, has {n_heads}"
                        )));
                    }
                    let m = n_heads / 2;
                    (0..m).map(|k| (k, k, 0)).chain((0..m).map(|k| (m + k, k, 1))).collect()
                }
            };
            let needed = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
            if targets.len() < needed {
                return Err(SrnnError::Data(format!(
                    "node {v}: {} target heads, task needs {needed}",
                    targets.len()
                )));
            }
            let frames = mb.len.saturating_sub(pairs.iter().map(|p| p.2).max().unwrap_or(0));
            count += frames * mb.rows;
            for (head, target, shift) in pairs {
                let kind = self.units[&self.node_factor(v)?].heads[head].kind;
                for t in 0..mb.len.saturating_sub(shift) {
                    let pred = steps[t][head];
                    let term = match (&targets[target], kind) {
                        (StepTargets::Values(y), HeadKind::Regression) => {
                            let l = tape.euclidean_loss(pred, &y[t + shift])?;
                            reported_sum += 2.0 * tape.value(l).item();
                            l
                        }
                        (StepTargets::Classes(c), HeadKind::Classification) => {
                            let l = tape.cross_entropy_loss(pred, &c[t + shift])?;
                            reported_sum += tape.value(l).item();
                            l
                        }
                        _ => {
                            return Err(SrnnError::Data(format!(
                                "node {v} head {head}: target kind does not match head"
                            )))
                        }
                    };
                    terms.push(term);
                }
            }
        }
        let loss = if terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            tape.sum_list(&terms)?
        };
        Ok(LossTerms {
            loss,
            reported_sum,
            count,
        })
    }

    /// Zero recurrent state for every node, `rows` rows each.
    pub fn zero_state(&self, rows: usize) -> ModelState {
        let mut nodes = BTreeMap::new();
        for (v, label) in self.graph.nodes() {
            let edges = self.wiring[v]
                .iter()
                .map(|(ef, _)| (ef.clone(), self.units[ef].zero_values(rows)))
                .collect();
            let node = self.units[&FactorId::Node(label.to_string())].zero_values(rows);
            nodes.insert(v.to_string(), NodeState { edges, node });
        }
        ModelState { nodes }
    }

    /// Advances every node by one frame on a fresh tape and returns each
    /// node's head outputs.
    pub fn step_frame(&self, state: &mut ModelState, frame: &Frame) -> Result<BTreeMap<String, Vec<Tensor>>> {
        let mut tape = Tape::new();
        let mut out = BTreeMap::new();
        let mut edge_vars: BTreeMap<&Edge, Var> = BTreeMap::new();
        for (v, label) in self.graph.nodes() {
            let ns = state
                .nodes
                .get_mut(v)
                .ok_or_else(|| SrnnError::Input(format!("no state for node {v}")))?;
            let x = frame
                .nodes
                .get(v)
                .ok_or_else(|| SrnnError::Data(format!("missing features for node {v}")))?;
            let rows = x.shape()[0];
            let x_v = tape.constant(x.clone());
            let mut ts = NodeTapeState {
                edges: ns
                    .edges
                    .iter()
                    .map(|(ef, s)| (ef.clone(), self.units[ef].state_to_tape(&mut tape, s)))
                    .collect(),
                node: self.units[&FactorId::Node(label.to_string())].state_to_tape(&mut tape, &ns.node),
            };
            let mut feature = |tape: &mut Tape, e: &Edge| -> Result<Var> {
                if let Some(&var) = edge_vars.get(e) {
                    return Ok(var);
                }
                let (key, x) = frame
                    .edges
                    .get_key_value(e)
                    .ok_or_else(|| SrnnError::Data(format!("missing features for edge {e}")))?;
                let var = tape.constant(x.clone());
                edge_vars.insert(key, var);
                Ok(var)
            };
            let heads = self.step_node(&mut tape, v, x_v, rows, &mut feature, &mut ts, None)?;
            ns.node = StackedUnit::state_from_tape(&tape, &ts.node);
            for (ef, s) in &ts.edges {
                ns.edges.insert(ef.clone(), StackedUnit::state_from_tape(&tape, s));
            }
            out.insert(v.to_string(), heads.iter().map(|&h| tape.value(h).clone()).collect());
        }
        Ok(out)
    }

    /// Consumes the `seed` frames, then predicts `horizon` frames in closed
    /// loop, rebuilding edge features from each prediction. Edges whose
    /// features cannot be derived keep their last seed value.
    pub fn forecast(&self, seed: &SequenceBatch, horizon: usize) -> Result<Forecast> {
        for (v, label) in self.graph.nodes() {
            let unit = &self.units[&FactorId::Node(label.to_string())];
            let dim = self.graph.node_feature_dim(v).unwrap_or(0);
            if unit.heads.len() != 1 || unit.heads[0].kind != HeadKind::Regression || unit.heads[0].width != dim {
                return Err(SrnnError::Incompatible(format!(
                    "node {v}: forecasting needs one regression head of width {dim}, unit outputs {:?}",
                    unit.spec.output_dims
                )));
            }
        }
        if seed.len == 0 {
            return Err(SrnnError::Data("forecast needs at least one seed frame".into()));
        }
        let mut seed = seed.clone();
        for e in self.graph.edges() {
            if !seed.edge_features.contains_key(e) {
                let x = crate::data::derive_edge_sequence(&self.graph, e, &seed.node_features)?;
                seed.edge_features.insert(e.clone(), x);
            }
        }
        seed.validate(&self.graph)?;

        let mut state = self.zero_state(1);
        let row = |x: &Tensor, t: usize| x.slice(0, t, 1);
        let mut prev = Frame::default();
        let mut pred = BTreeMap::new();
        for t in 0..seed.len {
            let mut frame = Frame::default();
            for (v, x) in &seed.node_features {
                frame.nodes.insert(v.clone(), row(x, t)?);
            }
            for (e, x) in &seed.edge_features {
                frame.edges.insert(e.clone(), row(x, t)?);
            }
            pred = self.step_frame(&mut state, &frame)?;
            prev = frame;
        }

        let mut frames: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
        for h in 0..horizon {
            let cur: BTreeMap<String, Tensor> = pred.iter().map(|(v, heads)| (v.clone(), heads[0].clone())).collect();
            for (v, x) in &cur {
                frames.entry(v.clone()).or_default().push(x.clone());
            }
            if h + 1 == horizon {
                break;
            }
            let mut frame = Frame {
                nodes: cur,
                edges: BTreeMap::new(),
            };
            for e in self.graph.edges() {
                let x = match derive_edge_features(&self.graph, e, &prev.nodes, &frame.nodes) {
                    Ok(x) => x,
                    Err(_) => prev.edges[e].clone(),
                };
                frame.edges.insert(e.clone(), x);
            }
            pred = self.step_frame(&mut state, &frame)?;
            prev = frame;
        }
        let frames = self
            .graph
            .nodes()
            .map(|(v, _)| {
                let dim = self.graph.node_feature_dim(v).unwrap_or(0);
                let x = match frames.get(v) {
                    Some(rows) => Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)?,
                    None => Tensor::zeros(&[0, dim]),
                };
                Ok((v.to_string(), x))
            })
            .collect::<Result<_>>()?;
        Ok(Forecast { frames, state })
    }

    /// Records memory-cell values of `cells` in LSTM layer `layer` of `unit`
    /// for every node instance of that unit, alongside the forward outputs.
    pub fn trace_cells_with_outputs(
        &self,
        batch: &SequenceBatch,
        unit: &FactorId,
        layer: usize,
        cells: &[usize],
    ) -> Result<(Vec<CellTrace>, BTreeMap<String, Vec<Tensor>>)> {
        let u = self
            .units
            .get(unit)
            .ok_or_else(|| SrnnError::Input(format!("no unit {unit}")))?;
        let l = u
            .layers
            .get(layer)
            .ok_or_else(|| SrnnError::Input(format!("{unit} has {} layers, no layer {layer}", u.layers.len())))?;
        if l.plan.kind != LayerKind::Lstm {
            return Err(SrnnError::Input(format!(
                "{unit} layer {layer} is {:?}, not an LSTM",
                l.plan.kind
            )));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= l.plan.width) {
            return Err(SrnnError::Input(format!(
                "cell {bad} out of range for {unit} layer {layer} of width {}",
                l.plan.width
            )));
        }
        let instances: Vec<String> = self
            .graph
            .nodes()
            .filter(|(v, label)| match unit {
                FactorId::Node(l) => l == label,
                FactorId::Edge(_) => self.wiring[*v].iter().any(|(ef, _)| ef == unit),
            })
            .map(|(v, _)| v.to_string())
            .collect();

        let nodes: Vec<String> = self.graph.nodes().map(|(v, _)| v.to_string()).collect();
        let mb = Minibatch::stack(&[batch])?;
        let mut tape = Tape::new();
        let mut states = BTreeMap::new();
        for v in &nodes {
            states.insert(v.clone(), self.zero_node_state(&mut tape, v, 1)?);
        }
        let mut traces: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        let mut outputs: BTreeMap<String, Vec<Vec<Tensor>>> = BTreeMap::new();
        for t in 0..mb.len {
            for v in &nodes {
                let x_v = tape.constant(mb.nodes[v][t].clone());
                let mut feature = |tape: &mut Tape, e: &Edge| -> Result<Var> {
                    let x = mb
                        .edges
                        .get(e)
                        .ok_or_else(|| SrnnError::Data(format!("missing features for edge {e}")))?;
                    Ok(tape.constant(x[t].clone()))
                };
                let st = states.get_mut(v).expect("initialized above");
                let out = self.step_node(&mut tape, v, x_v, 1, &mut feature, st, None)?;
                outputs
                    .entry(v.clone())
                    .or_default()
                    .push(out.iter().map(|&o| tape.value(o).clone()).collect());
                if instances.contains(v) {
                    let step = match unit {
                        FactorId::Node(_) => &st.node,
                        FactorId::Edge(_) => &st.edges[unit],
                    };
                    let LayerState::Lstm { c, .. } = step.layers[layer] else {
                        unreachable!("checked to be an LSTM layer")
                    };
                    for &cell in cells {
                        traces
                            .entry((v.clone(), cell))
                            .or_default()
                            .push(tape.value(c).data()[cell]);
                    }
                }
            }
        }
        let traces = instances
            .iter()
            .flat_map(|v| cells.iter().map(move |&c| (v, c)))
            .map(|(v, c)| CellTrace {
                unit: unit.clone(),
                node: v.clone(),
                layer,
                cell: c,
                activations: traces.remove(&(v.clone(), c)).unwrap_or_default(),
            })
            .collect();
        let outputs = outputs
            .into_iter()
            .filter(|(v, _)| !self.graph.label_dims(self.graph.label_of(v).unwrap_or("")).is_empty())
            .map(|(v, steps)| {
                let n = steps.first().map_or(0, Vec::len);
                let heads = (0..n)
                    .map(|k| Tensor::concat(&steps.iter().map(|s| &s[k]).collect::<Vec<_>>(), 0))
                    .collect::<Result<Vec<_>>>()?;
                Ok((v, heads))
            })
            .collect::<Result<_>>()?;
        Ok((traces, outputs))
    }

    pub fn trace_cells(
        &self,
        batch: &SequenceBatch,
        unit: &FactorId,
        layer: usize,
        cells: &[usize],
    ) -> Result<Vec<CellTrace>> {
        Ok(self.trace_cells_with_outputs(batch, unit, layer, cells)?.0)
    }
}

/// Returns `target` with the parameters of unit `factor` copied from
/// `donor`. Both units must have identical specs.
pub fn swap_unit(target: &SrnnModel, donor: &SrnnModel, factor: &FactorId) -> Result<SrnnModel> {
    let t = target
        .unit(factor)
        .ok_or_else(|| SrnnError::Incompatible(format!("target has no unit {factor}")))?;
    let d = donor
        .unit(factor)
        .ok_or_else(|| SrnnError::Incompatible(format!("donor has no unit {factor}")))?;
    let report = unit_differences(&t.spec, &d.spec);
    if !report.is_empty() {
        return Err(SrnnError::Incompatible(format!("{factor}: {}", report.join("; "))));
    }
    let mut out = target.clone();
    for (tid, did) in t.param_ids().into_iter().zip(d.param_ids()) {
        out.store.get_mut(tid).value = donor.store.get(did).value.clone();
    }
    Ok(out)
}

/// Human-readable differences between two unit specs.
pub fn unit_differences(a: &crate::arch::UnitSpec, b: &crate::arch::UnitSpec) -> Vec<String> {
    let mut out = Vec::new();
    if a.layers.len() != b.layers.len() {
        out.push(format!("{} layers vs {}", a.layers.len(), b.layers.len()));
    }
    for (i, (x, y)) in a.layers.iter().zip(&b.layers).enumerate() {
        if x != y {
            out.push(format!("layer {i}: {x} vs {y}"));
        }
    }
    if a.input_dim != b.input_dim {
        out.push(format!("input_dim {} vs {}", a.input_dim, b.input_dim));
    }
    if a.output_dims != b.output_dims {
        out.push(format!("output_dims {:?} vs {:?}", a.output_dims, b.output_dims));
    }
    if a.skip_connections != b.skip_connections {
        out.push(format!(
            "skip_connections {} vs {}",
            a.skip_connections, b.skip_connections
        ));
    }
    if a.heads != b.heads {
        out.push(format!("heads {:?} vs {:?}", a.heads, b.heads));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Target;
    use crate::gradcheck::gradcheck_store;
    use crate::stgraph::fixtures::activity_graph;
    use crate::stgraph::EdgeKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(g: &StGraph, len: usize, seed: u64) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = SequenceBatch::new(len);
        for (v, _) in g.nodes() {
            let d = g.node_feature_dim(v).unwrap();
            let data = (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.node_features
                .insert(v.into(), Tensor::new(vec![len, d], data).unwrap());
        }
        for e in g.edges() {
            let d = g.edge_attrs(&g.partition_key(e)).unwrap().feature_dim;
            let data = (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.edge_features
                .insert(e.clone(), Tensor::new(vec![len, d], data).unwrap());
        }
        b
    }

    fn activity_model() -> SrnnModel {
        SrnnModel::new(
            activity_graph(),
            &ArchSpecs::uniform("LSTM(4)-softmax(·)", "LSTM(3)"),
            1,
        )
        .unwrap()
    }

    fn key(kind: EdgeKind, a: &str, b: &str) -> EdgePartitionKey {
        EdgePartitionKey::new(kind, a, b)
    }

    #[test]
    fn edge_input_sums_incident_edges() {
        let m = activity_model();
        let b = random_batch(m.graph(), 2, 3);
        let ho = key(EdgeKind::Spatial, "human", "object");
        let hu = &b.edge_features[&Edge::spatial("h", "u")];
        let hw = &b.edge_features[&Edge::spatial("h", "w")];
        assert_eq!(
            m.edge_input("h", &ho, &b).unwrap(),
            Tensor::zeros(&[2, 5]).add(hu).unwrap().add(hw).unwrap()
        );
        assert_eq!(m.selector("h", &ho).unwrap(), vec![1.0, 1.0]);
        assert_eq!(
            m.edge_input("u", &ho, &b).unwrap(),
            Tensor::zeros(&[2, 5]).add(hu).unwrap()
        );
        assert_eq!(m.selector("u", &ho).unwrap(), vec![1.0, 0.0]);
        let oo = key(EdgeKind::Spatial, "object", "object");
        assert!(m.edge_input("h", &oo, &b).is_err());
    }

    #[test]
    fn zero_incident_edges_give_zero_input() {
        // a second human without object edges still has the partition wired
        let g = StGraph::builder()
            .node("h", "human")
            .node("k", "human")
            .node("u", "object")
            .spatial("h", "u")
            .feature_dim("human", 2)
            .feature_dim("object", 1)
            .build()
            .unwrap();
        let m = SrnnModel::new(g, &ArchSpecs::uniform("LSTM(2)", "LSTM(2)"), 0).unwrap();
        let b = random_batch(m.graph(), 3, 1);
        let ho = key(EdgeKind::Spatial, "human", "object");
        assert_eq!(m.edge_input("k", &ho, &b).unwrap(), Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn mean_aggregation_divides_by_count() {
        let mut m = activity_model();
        let b = random_batch(m.graph(), 2, 3);
        let ho = key(EdgeKind::Spatial, "human", "object");
        let sum = m.edge_input("h", &ho, &b).unwrap();
        m.set_aggregation(Aggregation::Mean);
        assert_eq!(m.edge_input("h", &ho, &b).unwrap(), sum.scale(0.5));
    }

    #[test]
    fn forward_node_touches_expected_units() {
        let m = activity_model();
        let b = random_batch(m.graph(), 4, 2);
        let human = m.forward_node("h", &b).unwrap();
        let ids: Vec<String> = human.invocations.keys().map(ToString::to_string).collect();
        assert_eq!(ids, ["node:human", "spatial:human~object", "temporal:human~human"]);
        assert!(human.invocations.values().all(|&n| n == 4));
        assert_eq!(human.heads[0].shape(), &[4, 4]);
        let object = m.forward_node("w", &b).unwrap();
        let ids: Vec<String> = object.invocations.keys().map(ToString::to_string).collect();
        assert_eq!(
            ids,
            [
                "node:object",
                "spatial:human~object",
                "spatial:object~object",
                "temporal:object~object"
            ]
        );
    }

    #[test]
    fn isolated_node_reads_only_its_features() {
        let g = StGraph::builder()
            .node("a", "x")
            .feature_dim("x", 3)
            .label_dims("x", vec![2])
            .build()
            .unwrap();
        let m = SrnnModel::new(g, &ArchSpecs::uniform("LSTM(4)-FC(·)", "LSTM(2)"), 0).unwrap();
        let b = random_batch(m.graph(), 2, 0);
        let out = m.forward_node("a", &b).unwrap();
        assert_eq!(out.invocations.len(), 1);
        assert_eq!(m.unit(&FactorId::Node("x".into())).unwrap().input_dim(), 3);
    }

    fn regression_pair() -> (SrnnModel, SequenceBatch) {
        let g = StGraph::builder()
            .node("a", "x")
            .node("b", "x")
            .spatial("a", "b")
            .feature_dim("x", 2)
            .label_dims("x", vec![2])
            .build()
            .unwrap();
        let m = SrnnModel::new(g, &ArchSpecs::uniform("LSTM(8)-FC(·)", "LSTM(8)"), 4).unwrap();
        let mut b = random_batch(m.graph(), 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in ["a", "b"] {
            let data = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.targets
                .insert(v.into(), vec![Target::Values(Tensor::new(vec![3, 2], data).unwrap())]);
        }
        (m, b)
    }

    #[test]
    fn perfect_regression_has_zero_loss() {
        let (m, mut b) = regression_pair();
        let pred = m.predict(&b).unwrap();
        for (v, heads) in pred {
            b.targets.insert(v, vec![Target::Values(heads[0].clone())]);
        }
        let mb = Minibatch::stack(&[&b]).unwrap();
        let mut tape = Tape::new();
        let l = m.joint_loss(&mut tape, &mb, TaskMode::Regression).unwrap();
        assert_eq!(tape.value(l.loss).item(), 0.0);
        assert_eq!(l.count, 6);
    }

    #[test]
    fn joint_loss_gradcheck() {
        let (m, b) = regression_pair();
        let mb = Minibatch::stack(&[&b]).unwrap();
        let err = gradcheck_store(
            m.store(),
            |tape, store| {
                let mut probe = m.clone();
                *probe.store_mut() = store.clone();
                Ok(probe.joint_loss(tape, &mb, TaskMode::Regression)?.loss)
            },
            1e-5,
            Some(6),
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn shared_unit_gradient_is_sum_over_nodes() {
        let (m, b) = regression_pair();
        let full = {
            let mb = Minibatch::stack(&[&b]).unwrap();
            let mut tape = Tape::new();
            let l = m.joint_loss(&mut tape, &mb, TaskMode::Regression).unwrap();
            let mut g = crate::params::Gradients::new(m.store().len());
            tape.backward(l.loss, &mut g).unwrap();
            g
        };
        let mut summed = crate::params::Gradients::new(m.store().len());
        for v in ["a", "b"] {
            let mut one = b.clone();
            one.targets.retain(|k, _| k == v);
            let mb = Minibatch::stack(&[&one]).unwrap();
            let mut tape = Tape::new();
            let out = m.forward_minibatch(&mut tape, &mb, &[v.to_string()], None).unwrap();
            let Target::Values(y) = &one.targets[v][0] else {
                unreachable!()
            };
            let terms: Vec<Var> = (0..3)
                .map(|t| tape.euclidean_loss(out[v][t][0], &y.slice(0, t, 1).unwrap()).unwrap())
                .collect();
            let loss = tape.sum_list(&terms).unwrap();
            let mut g = crate::params::Gradients::new(m.store().len());
            tape.backward(loss, &mut g).unwrap();
            summed.merge(&g).unwrap();
        }
        for (id, p) in m.store().iter() {
            let (a, b) = (full.get(id).unwrap(), summed.get(id).unwrap());
            assert!(a.max_abs_diff(b).unwrap() < 1e-12, "{}", p.name);
        }
    }

    #[test]
    fn anticipation_uses_next_step_labels() {
        let m = activity_model();
        let mut b = random_batch(m.graph(), 2, 6);
        b.targets.insert("h".into(), vec![Target::Classes(vec![0, 3])]);
        for v in ["u", "w"] {
            b.targets.insert(v.into(), vec![Target::Classes(vec![1, 2])]);
        }
        let pred = m.predict(&b).unwrap();
        let mb = Minibatch::stack(&[&b]).unwrap();
        let mut tape = Tape::new();
        let l = m.joint_loss(&mut tape, &mb, TaskMode::Anticipation).unwrap();
        assert_eq!(l.count, 3);
        let expect = -(pred["h"][0].data()[3] + 1e-12).ln()
            - (pred["u"][0].data()[2] + 1e-12).ln()
            - (pred["w"][0].data()[2] + 1e-12).ln();
        assert!((tape.value(l.loss).item() - expect).abs() < 1e-12);

        let mut missing = b.clone();
        missing.targets.remove("u");
        let mb = Minibatch::stack(&[&missing]).unwrap();
        assert!(m.joint_loss(&mut Tape::new(), &mb, TaskMode::Detection).is_err());
    }

    #[test]
    fn multitask_sums_detection_and_anticipation() {
        let g = StGraph::builder()
            .node("a", "x")
            .feature_dim("x", 2)
            .label_dims("x", vec![3, 3])
            .build()
            .unwrap();
        let m = SrnnModel::new(g, &ArchSpecs::uniform("LSTM(4)-softmax(·)", "LSTM(2)"), 0).unwrap();
        let mut b = random_batch(m.graph(), 3, 0);
        b.targets.insert("a".into(), vec![Target::Classes(vec![0, 1, 2])]);
        let p = m.predict(&b).unwrap();
        let mb = Minibatch::stack(&[&b]).unwrap();
        let mut tape = Tape::new();
        let l = m.joint_loss(&mut tape, &mb, TaskMode::MultiTask).unwrap();
        let ce = |head: usize, t: usize, c: usize| -(p["a"][head].data()[t * 3 + c] + 1e-12).ln();
        let expect = ce(0, 0, 0) + ce(0, 1, 1) + ce(0, 2, 2) + ce(1, 0, 1) + ce(1, 1, 2);
        assert!((tape.value(l.loss).item() - expect).abs() < 1e-12);
    }

    fn motion_pair(seed: u64) -> SrnnModel {
        let g = StGraph::builder()
            .node("a", "x")
            .node("b", "y")
            .spatial("a", "b")
            .temporal("a", "a")
            .temporal("b", "b")
            .feature_dim("x", 2)
            .feature_dim("y", 2)
            .label_dims("x", vec![2])
            .label_dims("y", vec![2])
            .build()
            .unwrap();
        SrnnModel::new(g, &ArchSpecs::uniform("LSTM(6)-FC(·)", "LSTM(4)"), seed).unwrap()
    }

    fn seed_batch(m: &SrnnModel, len: usize) -> SequenceBatch {
        let mut b = random_batch(m.graph(), len, 11);
        b.edge_features.clear();
        b.derive_missing_edges(m.graph()).unwrap();
        b
    }

    #[test]
    fn forecast_zero_horizon_keeps_post_seed_state() {
        let m = motion_pair(1);
        let seed = seed_batch(&m, 5);
        let f = m.forecast(&seed, 0).unwrap();
        assert_eq!(f.frames["a"].shape(), &[0, 2]);
        let longer = m.forecast(&seed, 1).unwrap();
        assert_eq!(f.state, longer.state);
        assert_eq!(longer.frames["b"].shape(), &[1, 2]);
    }

    #[test]
    fn forecast_first_frame_matches_prediction_after_seed() {
        let m = motion_pair(2);
        let seed = seed_batch(&m, 4);
        let f = m.forecast(&seed, 3).unwrap();
        let pred = m.predict(&seed).unwrap();
        assert_eq!(
            f.frames["a"].slice(0, 0, 1).unwrap(),
            pred["a"][0].slice(0, 3, 1).unwrap()
        );
    }

    #[test]
    fn forecast_rejects_mismatched_outputs() {
        let m = activity_model();
        let b = random_batch(m.graph(), 2, 0);
        assert!(matches!(m.forecast(&b, 3), Err(SrnnError::Incompatible(_))));
    }

    #[test]
    fn swap_with_self_is_identity() {
        let m = motion_pair(3);
        let s = swap_unit(&m, &m, &FactorId::Node("x".into())).unwrap();
        assert_eq!(s.store(), m.store());
    }

    #[test]
    fn swap_copies_only_the_named_unit() {
        let target = motion_pair(3);
        let donor = motion_pair(4);
        let fid = FactorId::Node("x".into());
        let s = swap_unit(&target, &donor, &fid).unwrap();
        for (id, p) in s.store().iter() {
            let expect = if p.name.starts_with("node:x/") {
                donor.store()
            } else {
                target.store()
            };
            assert_eq!(p.value, expect.get(id).value, "{}", p.name);
        }
    }

    #[test]
    fn swap_reports_width_mismatch() {
        let target = motion_pair(3);
        let donor = SrnnModel::new(
            target.graph().clone(),
            &ArchSpecs::uniform("LSTM(7)-FC(·)", "LSTM(4)"),
            0,
        )
        .unwrap();
        let e = swap_unit(&target, &donor, &FactorId::Node("x".into())).unwrap_err();
        assert!(matches!(e, SrnnError::Incompatible(_)));
        assert!(e.to_string().contains("LSTM(6) vs LSTM(7)"), "{e}");
    }

    #[test]
    fn trace_zero_model_is_zero() {
        let mut m = motion_pair(0);
        for p in m.store_mut().iter_mut() {
            p.value.fill_zero();
        }
        let mut b = seed_batch(&m, 5);
        for x in b.node_features.values_mut().chain(b.edge_features.values_mut()) {
            x.fill_zero();
        }
        let tr = m.trace_cells(&b, &FactorId::Node("x".into()), 0, &[0, 5]).unwrap();
        assert_eq!(tr.len(), 2);
        assert!(tr.iter().all(|t| t.activations == vec![0.0; 5]));
    }

    #[test]
    fn tracing_does_not_change_outputs() {
        let m = motion_pair(6);
        let b = seed_batch(&m, 6);
        let unit = FactorId::Edge(key(EdgeKind::Spatial, "x", "y"));
        let (tr, outputs) = m.trace_cells_with_outputs(&b, &unit, 0, &[1]).unwrap();
        assert_eq!(tr.len(), 2);
        assert!(tr.iter().all(|t| t.activations.len() == 6));
        assert_eq!(outputs, m.predict(&b).unwrap());
    }

    #[test]
    fn trace_rejects_bad_requests() {
        let m = motion_pair(6);
        let b = seed_batch(&m, 2);
        let x = FactorId::Node("x".into());
        assert!(m.trace_cells(&b, &x, 1, &[0]).is_err());
        assert!(m.trace_cells(&b, &x, 0, &[6]).is_err());
        assert!(m.trace_cells(&b, &FactorId::Node("z".into()), 0, &[0]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let a = motion_pair(9);
        let b = motion_pair(9);
        let s = seed_batch(&a, 4);
        assert_eq!(a.predict(&s).unwrap(), b.predict(&s).unwrap());
    }
}
