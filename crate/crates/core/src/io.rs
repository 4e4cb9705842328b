//! File formats: graph specs (JSON), checkpoints (binary), sequence data
//! (CSV plus manifest), and the CSV outputs of training and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchGraph, ArchSpecs};
use crate::data::{Dataset, SequenceBatch, Target};
use crate::error::{Result, SrnnError};
use crate::params::ParamStore;
use crate::runtime::{CellTrace, SrnnModel};
use crate::stgraph::{partition_edges, DerivationRule, Edge, EdgeAttrs, EdgePartitionKey, FactorId, StGraph};
use crate::tasks::{ManeuverEvent, ManeuverTrack, MetricResult};
use crate::tensor::{DType, Scalar, Tensor};
use crate::trainer::TrainLog;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SrnnError::io(path, e))
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SrnnError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| SrnnError::io(path, e))
}

// ---------------------------------------------------------------- graph spec

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: String,
    pub partition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionEntry {
    pub feature_dim: usize,
    #[serde(default)]
    pub label_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgePartitionEntry {
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivation_rule: Option<DerivationRule>,
}

/// The JSON graph description read by `load_graph_spec`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpecFile {
    pub nodes: Vec<NodeEntry>,
    #[serde(default)]
    pub spatial_edges: Vec<EdgeEntry>,
    #[serde(default)]
    pub temporal_edges: Vec<EdgeEntry>,
    pub partitions: BTreeMap<String, PartitionEntry>,
    #[serde(default)]
    pub edge_partitions: BTreeMap<String, EdgePartitionEntry>,
}

/// A parsed graph with its architecture choices.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub graph: StGraph,
    pub specs: ArchSpecs,
}

impl GraphSpecFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SrnnError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph spec serializes") + "\n"
    }

    /// Builds and validates the graph; partitions without an `arch` fall
    /// back to the motion defaults.
    pub fn resolve(&self) -> Result<GraphSpec> {
        if self.nodes.is_empty() {
            return Err(SrnnError::Graph("graph has no nodes".into()));
        }
        let mut b = StGraph::builder();
        for n in &self.nodes {
            b = b.node(&n.id, &n.partition);
        }
        for e in &self.spatial_edges {
            b = b.spatial(&e.a, &e.b);
        }
        for e in &self.temporal_edges {
            b = b.temporal(&e.a, &e.b);
        }
        let mut specs = ArchSpecs::default();
        for (label, p) in &self.partitions {
            b = b.feature_dim(label, p.feature_dim);
            if !p.label_dims.is_empty() {
                b = b.label_dims(label, p.label_dims.clone());
            }
            if let Some(a) = &p.arch {
                specs = specs.with(FactorId::Node(label.clone()), a);
            }
        }
        let mut declared = BTreeMap::new();
        for (key, p) in &self.edge_partitions {
            let key: EdgePartitionKey = key
                .parse()
                .map_err(|_| SrnnError::Graph(format!("malformed edge partition key {key:?}")))?;
            let partial = b.clone().build()?;
            let dims = |l: &str| {
                partial
                    .feature_dim(l)
                    .ok_or_else(|| SrnnError::Graph(format!("edge partition {key} names unknown partition {l}")))
            };
            let rule = p.derivation_rule.unwrap_or(DerivationRule::ConcatEndpoints);
            let (d0, d1) = (dims(&key.labels.0)?, dims(&key.labels.1)?);
            let expected = match rule {
                DerivationRule::ConcatEndpoints => Some(d0 + d1),
                DerivationRule::Difference => Some(d0),
                DerivationRule::CustomPassthrough => None,
            };
            if let Some(want) = expected.filter(|&w| w != p.feature_dim) {
                return Err(SrnnError::Graph(format!(
                    "edge partition {key}: {} features declared but {} derives {want}",
                    p.feature_dim,
                    rule.name()
                )));
            }
            if let Some(a) = &p.arch {
                specs = specs.with(FactorId::Edge(key.clone()), a);
            }
            declared.insert(
                key,
                EdgeAttrs {
                    feature_dim: p.feature_dim,
                    derivation: rule,
                },
            );
        }
        for (key, attrs) in declared {
            b = b.edge_attrs(key, attrs);
        }
        Ok(GraphSpec {
            graph: b.build()?,
            specs,
        })
    }

    /// Describes `g`, with each factor's architecture taken from `arch`.
    pub fn from_graph(g: &StGraph, arch: Option<&ArchGraph>) -> Self {
        let edge = |e: &Edge| EdgeEntry {
            a: e.a.clone(),
            b: e.b.clone(),
        };
        let arch_of = |f: FactorId| arch.and_then(|a| a.unit(&f)).map(|u| u.arch_string());
        GraphSpecFile {
            nodes: g
                .nodes()
                .map(|(id, p)| NodeEntry {
                    id: id.into(),
                    partition: p.into(),
                })
                .collect(),
            spatial_edges: g.spatial_edges().map(edge).collect(),
            temporal_edges: g.temporal_edges().map(edge).collect(),
            partitions: g
                .labels()
                .into_iter()
                .map(|l| {
                    let entry = PartitionEntry {
                        feature_dim: g.feature_dim(l).unwrap_or(0),
                        label_dims: g.label_dims(l).to_vec(),
                        arch: arch_of(FactorId::Node(l.into())),
                    };
                    (l.to_string(), entry)
                })
                .collect(),
            edge_partitions: partition_edges(g)
                .into_iter()
                .map(|p| {
                    let attrs = g.edge_attrs(&p.key).expect("partition has attributes");
                    let entry = EdgePartitionEntry {
                        feature_dim: attrs.feature_dim,
                        arch: arch_of(FactorId::Edge(p.key.clone())),
                        derivation_rule: Some(attrs.derivation),
                    };
                    (p.key.to_string(), entry)
                })
                .collect(),
        }
    }
}

pub fn parse_graph_spec(text: &str) -> Result<GraphSpec> {
    GraphSpecFile::parse(text)?.resolve()
}

pub fn load_graph_spec(path: &Path) -> Result<GraphSpec> {
    parse_graph_spec(&read_text(path)?)
}

// ---------------------------------------------------------------- checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SRNN1";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Tensor payload of a checkpoint record.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordValue {
    F64(Tensor<f64>),
    F32(Tensor<f32>),
}

impl RecordValue {
    pub fn shape(&self) -> &[usize] {
        match self {
            RecordValue::F64(t) => t.shape(),
            RecordValue::F32(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub value: RecordValue,
}

/// Serializes every parameter of `store`, in store order.
pub fn encode_checkpoint<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(S::DTYPE as u8);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            x.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SrnnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_payload<S: Scalar>(c: &mut Cursor<'_>, shape: Vec<usize>) -> Result<Tensor<S>> {
    let n: usize = shape.iter().product();
    let size = S::DTYPE.size();
    let bytes = c.take(
        n.checked_mul(size)
            .ok_or_else(|| SrnnError::Checkpoint("record too large".into()))?,
    )?;
    let data = bytes.chunks_exact(size).map(S::read_le).collect();
    Tensor::new(shape, data)
}

/// Parses a checkpoint, verifying magic, version and CRC before reading
/// any record.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(SrnnError::Checkpoint("bad magic, not an SRNN1 checkpoint".into()));
    }
    if bytes.len() < 5 + 2 + 4 + 4 {
        return Err(SrnnError::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(SrnnError::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut c = Cursor { bytes: body, pos: 5 };
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(SrnnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| SrnnError::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let tag = c.u8()?;
        let dtype =
            DType::from_tag(tag).ok_or_else(|| SrnnError::Checkpoint(format!("{name}: unknown dtype {tag}")))?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let value = match dtype {
            DType::F64 => RecordValue::F64(read_payload(&mut c, shape)?),
            DType::F32 => RecordValue::F32(read_payload(&mut c, shape)?),
        };
        records.push(Record { name, value });
    }
    if c.pos != body.len() {
        return Err(SrnnError::Checkpoint(format!(
            "{} trailing bytes after {count} records",
            body.len() - c.pos
        )));
    }
    Ok(records)
}

/// Copies `records` into `store`. Every missing, unexpected or misshapen
/// name is reported together; nothing is written unless all match.
pub fn apply_records(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    let mut diffs = Vec::new();
    let by_name: BTreeMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    for (_, p) in store.iter() {
        match by_name.get(p.name.as_str()) {
            None => diffs.push(format!("missing {}", p.name)),
            Some(r) if r.value.shape() != p.value.shape() => diffs.push(format!(
                "{}: shape {:?} in file, {:?} expected",
                p.name,
                r.value.shape(),
                p.value.shape()
            )),
            Some(_) => {}
        }
    }
    for r in records {
        if store.find(&r.name).is_none() {
            diffs.push(format!("unexpected {}", r.name));
        }
    }
    if !diffs.is_empty() {
        return Err(SrnnError::Checkpoint(format!(
            "checkpoint does not match architecture: {}",
            diffs.join("; ")
        )));
    }
    for r in records {
        let id = store.find(&r.name).expect("checked above");
        store.get_mut(id).value = match &r.value {
            RecordValue::F64(t) => t.clone(),
            RecordValue::F32(t) => t.to_f64(),
        };
    }
    Ok(())
}

pub fn save_checkpoint(model: &SrnnModel, path: &Path) -> Result<()> {
    write_file(path, encode_checkpoint(model.store()))
}

/// Rebuilds a model for `graph`/`arch` and fills it from `path`.
pub fn load_checkpoint(path: &Path, graph: StGraph, arch: ArchGraph) -> Result<SrnnModel> {
    let bytes = fs::read(path).map_err(|e| SrnnError::io(path, e))?;
    let records = decode_checkpoint(&bytes)?;
    let mut model = SrnnModel::from_arch(graph, arch, 0)?;
    apply_records(model.store_mut(), &records)?;
    Ok(model)
}

/// Graph, architecture and normalization stored beside a checkpoint, so a
/// checkpoint can be used without its original graph spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub graph: GraphSpecFile,
    pub arch: ArchGraph,
    #[serde(default)]
    pub normalization: Option<NormStats>,
    #[serde(default)]
    pub task: Option<String>,
}

/// `<checkpoint>.json`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the checkpoint and its sidecar.
pub fn save_model(model: &SrnnModel, path: &Path, normalization: Option<&NormStats>, task: Option<&str>) -> Result<()> {
    save_checkpoint(model, path)?;
    let meta = ModelMeta {
        graph: GraphSpecFile::from_graph(model.graph(), Some(model.arch())),
        arch: model.arch().clone(),
        normalization: normalization.cloned(),
        task: task.map(str::to_string),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write_file(&sidecar_path(path), json)
}

pub fn load_meta(ckpt: &Path) -> Result<ModelMeta> {
    let path = sidecar_path(ckpt);
    if !path.exists() {
        return Err(SrnnError::Checkpoint(format!(
            "no sidecar {} next to {}",
            path.display(),
            ckpt.display()
        )));
    }
    serde_json::from_str(&read_text(&path)?).map_err(|e| SrnnError::Parse {
        line: e.line(),
        column: e.column(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Loads a checkpoint written by [`save_model`].
pub fn load_model(ckpt: &Path) -> Result<(SrnnModel, ModelMeta)> {
    let meta = load_meta(ckpt)?;
    let graph = meta.graph.resolve()?.graph;
    let model = load_checkpoint(ckpt, graph, meta.arch.clone())?;
    Ok((model, meta))
}

// ---------------------------------------------------------------- normalization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column mean and population std of the stacked rows; a constant
    /// column gets std 1.
    pub fn fit(parts: &[&Tensor], dim: usize) -> Self {
        let rows: usize = parts.iter().map(|x| x.shape()[0]).sum();
        if rows == 0 {
            return Self::identity(dim);
        }
        let mut mean = vec![0.0; dim];
        for x in parts {
            for row in x.data().chunks(dim) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; dim];
        for x in parts {
            for row in x.data().chunks(dim) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / rows as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        FeatureStats { mean, std }
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *m, *s);
            }
        }
        out
    }
}

/// Per-feature statistics of the training split, keyed `node:<label>` for
/// node features and by partition key for supplied edge features.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormStats {
    pub groups: BTreeMap<String, FeatureStats>,
}

impl NormStats {
    pub fn fit(g: &StGraph, train: &[SequenceBatch]) -> Self {
        let mut groups = BTreeMap::new();
        for label in g.labels() {
            let dim = g.feature_dim(label).unwrap_or(0);
            let members = g.members_of(label);
            let parts: Vec<&Tensor> = train
                .iter()
                .flat_map(|s| members.iter().filter_map(|v| s.node_features.get(*v)))
                .collect();
            groups.insert(format!("node:{label}"), FeatureStats::fit(&parts, dim));
        }
        for p in partition_edges(g) {
            let parts: Vec<&Tensor> = train
                .iter()
                .flat_map(|s| p.members.iter().filter_map(|e| s.edge_features.get(e)))
                .collect();
            if !parts.is_empty() {
                groups.insert(p.key.to_string(), FeatureStats::fit(&parts, p.feature_dim));
            }
        }
        NormStats { groups }
    }

    pub fn node(&self, label: &str) -> Option<&FeatureStats> {
        self.groups.get(&format!("node:{label}"))
    }

    /// Normalizes node and supplied edge features, and regression targets
    /// as wide as their node's features (next-frame targets).
    pub fn normalize(&self, g: &StGraph, s: &SequenceBatch) -> SequenceBatch {
        let mut out = s.clone();
        for (v, x) in out.node_features.iter_mut() {
            if let Some(st) = g.label_of(v).and_then(|l| self.node(l)) {
                *x = st.normalize(x);
            }
        }
        for (e, x) in out.edge_features.iter_mut() {
            if let Some(st) = self.groups.get(&g.partition_key(e).to_string()) {
                *x = st.normalize(x);
            }
        }
        for (v, heads) in out.targets.iter_mut() {
            let Some(st) = g.label_of(v).and_then(|l| self.node(l)) else {
                continue;
            };
            for t in heads.iter_mut() {
                if let Target::Values(x) = t {
                    if x.shape().get(1) == Some(&st.mean.len()) {
                        *x = st.normalize(x);
                    }
                }
            }
        }
        out
    }

    pub fn denormalize_node(&self, g: &StGraph, v: &str, x: &Tensor) -> Tensor {
        match g.label_of(v).and_then(|l| self.node(l)) {
            Some(st) => st.denormalize(x),
            None => x.clone(),
        }
    }
}

// ---------------------------------------------------------------- CSV data

/// A numeric CSV: header names and `[rows × columns]` values.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(SrnnError::Data(format!(
                "{} line {line}: {} cells for {} columns",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        for (cell, name) in rec.iter().zip(&header) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                SrnnError::Data(format!(
                    "{} line {line}, column {name}: non-numeric cell {cell:?}",
                    path.display()
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((header.clone(), Tensor::new(vec![rows, header.len()], data)?))
}

fn csv_error(path: &Path, e: csv::Error) -> SrnnError {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => return SrnnError::io(path, io),
            _ => unreachable!(),
        }
    }
    SrnnError::Data(format!("{}: {e}", path.display()))
}

/// Integer class labels from a CSV with the single column `class`.
pub fn read_classes(path: &Path) -> Result<Vec<usize>> {
    let (header, x) = read_matrix(path)?;
    if header != ["class"] {
        return Err(SrnnError::Data(format!(
            "{}: expected a single `class` column, found {header:?}",
            path.display()
        )));
    }
    x.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(SrnnError::Data(format!(
                    "{}: class {v} is not a non-negative integer",
                    path.display()
                )))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sequence: String,
    /// `node/<id>`, `edge/<edge>` or `target/<id>/<head>`.
    pub stream: String,
    pub split: Split,
    pub path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["sequence", "stream", "split", "path"] {
        return Err(SrnnError::Data(format!(
            "{}: manifest header must be sequence,stream,split,path",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let split = Split::parse(&rec[2])
            .ok_or_else(|| SrnnError::Data(format!("{} line {line}: unknown split {:?}", path.display(), &rec[2])))?;
        rows.push(ManifestRow {
            sequence: rec[0].to_string(),
            stream: rec[1].to_string(),
            split,
            path: rec[3].to_string(),
        });
    }
    Ok(rows)
}

/// Reads every sequence of a manifest without normalization. Edge streams
/// missing from the manifest are derived from the node features.
pub fn load_dataset_raw(manifest: &Path, g: &StGraph) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&ManifestRow>> = BTreeMap::new();
    for r in &rows {
        if !groups.contains_key(&r.sequence) {
            order.push(r.sequence.clone());
        }
        groups.entry(r.sequence.clone()).or_default().push(r);
    }
    let mut ds = Dataset::default();
    for name in order {
        let members = &groups[&name];
        let split = members[0].split;
        if members.iter().any(|r| r.split != split) {
            return Err(SrnnError::Data(format!(
                "sequence {name} is listed under several splits"
            )));
        }
        let seq = load_sequence(&name, members, base, g)?;
        match split {
            Split::Train => ds.train.push(seq),
            Split::Val => ds.val.push(seq),
            Split::Test => ds.test.push(seq),
        }
    }
    Ok(ds)
}

fn load_sequence(name: &str, rows: &[&ManifestRow], base: &Path, g: &StGraph) -> Result<SequenceBatch> {
    let mut nodes = BTreeMap::new();
    let mut edges = BTreeMap::new();
    let mut targets: BTreeMap<String, BTreeMap<usize, Target>> = BTreeMap::new();
    let mut len: Option<(usize, String)> = None;
    for r in rows {
        let path = base.join(&r.path);
        let (header, x) = read_matrix(&path)?;
        let steps = x.shape()[0];
        match &len {
            Some((n, first)) if *n != steps => {
                return Err(SrnnError::Data(format!(
                    "sequence {name}: stream {} has {steps} rows but {first} has {n}",
                    r.stream
                )))
            }
            Some(_) => {}
            None => len = Some((steps, r.stream.clone())),
        }
        let columns = |want: usize| {
            if header.len() != want {
                Err(SrnnError::Data(format!(
                    "sequence {name}, stream {}: expected {want} columns, found {}",
                    r.stream,
                    header.len()
                )))
            } else {
                Ok(())
            }
        };
        let bad = || SrnnError::Data(format!("sequence {name}: malformed stream id {:?}", r.stream));
        let (kind, rest) = r.stream.split_once('/').ok_or_else(bad)?;
        match kind {
            "node" => {
                let dim = g
                    .node_feature_dim(rest)
                    .ok_or_else(|| SrnnError::Data(format!("sequence {name}: unknown node {rest}")))?;
                columns(dim)?;
                nodes.insert(rest.to_string(), x);
            }
            "edge" => {
                let e: Edge = rest.parse()?;
                let e = g
                    .edges()
                    .find(|x| **x == e)
                    .cloned()
                    .ok_or_else(|| SrnnError::Data(format!("sequence {name}: unknown edge {rest}")))?;
                let dim = g.edge_attrs(&g.partition_key(&e)).map_or(0, |a| a.feature_dim);
                columns(dim)?;
                edges.insert(e, x);
            }
            "target" => {
                let (v, head) = rest.rsplit_once('/').ok_or_else(bad)?;
                let head: usize = head.parse().map_err(|_| bad())?;
                let label = g
                    .label_of(v)
                    .ok_or_else(|| SrnnError::Data(format!("sequence {name}: unknown node {v}")))?;
                let dims = g.label_dims(label);
                let width = *dims
                    .get(head)
                    .ok_or_else(|| SrnnError::Data(format!("sequence {name}: node {v} has no head {head}")))?;
                let t = if header == ["class"] {
                    let classes = read_classes(&path)?;
                    if let Some(c) = classes.iter().find(|&&c| c >= width) {
                        return Err(SrnnError::Data(format!(
                            "sequence {name}, stream {}: class {c} out of range for {width} classes",
                            r.stream
                        )));
                    }
                    Target::Classes(classes)
                } else {
                    columns(width)?;
                    Target::Values(x)
                };
                targets.entry(v.to_string()).or_default().insert(head, t);
            }
            _ => return Err(bad()),
        }
    }
    let mut s = SequenceBatch::new(len.map_or(0, |(n, _)| n));
    s.node_features = nodes;
    s.edge_features = edges;
    for (v, heads) in targets {
        if heads.keys().copied().ne(0..heads.len()) {
            return Err(SrnnError::Data(format!(
                "sequence {name}: node {v} has gaps in its target heads"
            )));
        }
        s.targets.insert(v, heads.into_values().collect());
    }
    for (v, _) in g.nodes() {
        if !s.node_features.contains_key(v) {
            return Err(SrnnError::Data(format!("sequence {name}: no stream for node {v}")));
        }
    }
    Ok(s)
}

/// Normalized dataset and the statistics used.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub stats: NormStats,
}

/// Reads a manifest and normalizes every split with training-split
/// statistics. Pass `stats` to reuse statistics saved with a model.
pub fn load_dataset(manifest: &Path, g: &StGraph, stats: Option<&NormStats>) -> Result<LoadedData> {
    let raw = load_dataset_raw(manifest, g)?;
    let stats = stats.cloned().unwrap_or_else(|| NormStats::fit(g, &raw.train));
    let norm = |v: &[SequenceBatch]| -> Result<Vec<SequenceBatch>> {
        v.iter()
            .map(|s| {
                let mut n = stats.normalize(g, s);
                n.derive_missing_edges(g)?;
                n.validate(g)?;
                Ok(n)
            })
            .collect()
    };
    let dataset = Dataset {
        train: norm(&raw.train)?,
        val: norm(&raw.val)?,
        test: norm(&raw.test)?,
    };
    Ok(LoadedData { dataset, stats })
}

fn stream_file(stream: &str) -> String {
    stream.replace([':', '/', '~', '>'], "_") + ".csv"
}

fn matrix_csv(header: &[String], x: &Tensor) -> String {
    let mut out = header.join(",") + "\n";
    let w = header.len().max(1);
    for row in x.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out += &cells.join(",");
        out.push('\n');
    }
    out
}

/// Writes `[rows × d]` values under the header `f0..f{d-1}`.
pub fn write_matrix(path: &Path, x: &Tensor) -> Result<()> {
    let header: Vec<String> = (0..x.shape().get(1).copied().unwrap_or(0))
        .map(|k| format!("f{k}"))
        .collect();
    write_file(path, matrix_csv(&header, x))
}

/// Writes a dataset as per-stream CSVs and a `manifest.csv` under `dir`.
/// Edge streams are written only for partitions whose features cannot be
/// derived from node features. Returns the manifest path.
pub fn export_dataset(dir: &Path, g: &StGraph, ds: &Dataset) -> Result<PathBuf> {
    let mut manifest = String::from("sequence,stream,split,path\n");
    let splits = [
        (Split::Train, &ds.train),
        (Split::Val, &ds.val),
        (Split::Test, &ds.test),
    ];
    for (split, seqs) in splits {
        for (i, s) in seqs.iter().enumerate() {
            let seq = format!("{}{i:03}", split.name());
            let mut streams: Vec<(String, Option<Tensor>, Option<Vec<usize>>)> = Vec::new();
            for (v, x) in &s.node_features {
                streams.push((format!("node/{v}"), Some(x.clone()), None));
            }
            for (e, x) in &s.edge_features {
                let rule = g.edge_attrs(&g.partition_key(e)).map(|a| a.derivation);
                if rule == Some(DerivationRule::CustomPassthrough) {
                    streams.push((format!("edge/{e}"), Some(x.clone()), None));
                }
            }
            for (v, heads) in &s.targets {
                for (k, t) in heads.iter().enumerate() {
                    let stream = format!("target/{v}/{k}");
                    match t {
                        Target::Values(x) => streams.push((stream, Some(x.clone()), None)),
                        Target::Classes(c) => streams.push((stream, None, Some(c.clone()))),
                    }
                }
            }
            for (stream, values, classes) in streams {
                let rel = format!("{seq}/{}", stream_file(&stream));
                let path = dir.join(&rel);
                match (values, classes) {
                    (Some(x), _) => write_matrix(&path, &x)?,
                    (None, Some(c)) => {
                        let body: String = c.iter().map(|k| format!("{k}\n")).collect();
                        write_file(&path, format!("class\n{body}"))?
                    }
                    (None, None) => unreachable!(),
                }
                manifest += &format!("{seq},{stream},{},{rel}\n", split.name());
            }
        }
    }
    let path = dir.join("manifest.csv");
    write_file(&path, manifest)?;
    Ok(path)
}

// ---------------------------------------------------------------- outputs

pub fn log_csv(log: &TrainLog) -> String {
    let mut out = String::from("iteration,train_loss,val_loss,lr,noise_std\n");
    for r in &log.rows {
        out += &format!(
            "{},{},{},{},{}\n",
            r.iteration, r.train_loss, r.val_loss, r.lr, r.noise_std
        );
    }
    out
}

pub fn metrics_csv(results: &[MetricResult]) -> String {
    let mut out = String::from("metric,class,value\n");
    for r in results {
        for (m, c, v) in r.rows() {
            out += &format!("{m},{c},{v}\n");
        }
    }
    out
}

pub fn traces_csv(traces: &[CellTrace]) -> String {
    let mut out = String::from("unit,node,layer,cell,t,value\n");
    for tr in traces {
        for (t, v) in tr.activations.iter().enumerate() {
            out += &format!("{},{},{},{},{t},{v}\n", tr.unit, tr.node, tr.layer, tr.cell);
        }
    }
    out
}

/// Forecast frames side by side, one row per predicted step, columns
/// `<node>/<k>` in node order.
pub fn forecast_csv(frames: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut header = Vec::new();
    let mut parts = Vec::new();
    for (v, x) in frames {
        header.extend((0..x.shape()[1]).map(|k| format!("{v}/{k}")));
        parts.push(x);
    }
    let x = Tensor::concat(&parts, 1)?;
    Ok(matrix_csv(&header, &x))
}

/// Maneuver tracks from a prediction CSV (`track,time,p0..pK`) and an
/// event CSV (`track,class,start`); tracks without an event are straight
/// driving.
pub fn read_maneuver_tracks(pred: &Path, events: &Path) -> Result<Vec<ManeuverTrack>> {
    let (header, x) = read_matrix(pred)?;
    if header.len() < 3 || header[0] != "track" || header[1] != "time" {
        return Err(SrnnError::Data(format!(
            "{}: expected columns track,time,p0,...",
            pred.display()
        )));
    }
    let w = header.len();
    let mut tracks: BTreeMap<u64, ManeuverTrack> = BTreeMap::new();
    for row in x.data().chunks(w) {
        let tr = tracks.entry(row[0] as u64).or_insert_with(|| ManeuverTrack {
            times: Vec::new(),
            probs: Vec::new(),
            event: None,
        });
        tr.times.push(row[1]);
        tr.probs.push(row[2..].to_vec());
    }
    let (eh, ex) = read_matrix(events)?;
    if eh != ["track", "class", "start"] {
        return Err(SrnnError::Data(format!(
            "{}: expected columns track,class,start",
            events.display()
        )));
    }
    for row in ex.data().chunks(3) {
        let id = row[0] as u64;
        let tr = tracks
            .get_mut(&id)
            .ok_or_else(|| SrnnError::Data(format!("event for unknown track {id}")))?;
        if row[1] < 0.0 || row[1].fract() != 0.0 {
            return Err(SrnnError::Data(format!(
                "track {id}: class {} is not an integer",
                row[1]
            )));
        }
        tr.event = Some(ManeuverEvent {
            class: row[1] as usize,
            start: row[2],
        });
    }
    Ok(tracks.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_OBJECTS: &str = r#"{
      "nodes": [
        {"id": "h", "partition": "human"},
        {"id": "u", "partition": "object"},
        {"id": "w", "partition": "object"}
      ],
      "spatial_edges": [{"a": "h", "b": "u"}, {"a": "h", "b": "w"}, {"a": "u", "b": "w"}],
      "temporal_edges": [{"a": "h", "b": "h"}, {"a": "u", "b": "u"}, {"a": "w", "b": "w"}],
      "partitions": {
        "human": {"feature_dim": 4, "label_dims": [10], "arch": "LSTM(8)-softmax(·)"},
        "object": {"feature_dim": 3, "label_dims": [12], "arch": "LSTM(8)-softmax(·)"}
      },
      "edge_partitions": {
        "spatial:human~object": {"feature_dim": 7, "arch": "LSTM(4)"}
      }
    }"#;

    #[test]
    fn parses_two_objects() {
        let spec = parse_graph_spec(TWO_OBJECTS).unwrap();
        assert_eq!(spec.graph.node_count(), 3);
        assert_eq!(spec.graph.spatial_edges().count(), 3);
        assert_eq!(spec.graph.temporal_edges().count(), 3);
        assert_eq!(spec.specs.per_factor.len(), 3);
    }

    #[test]
    fn graph_spec_errors() {
        let e = parse_graph_spec(r#"{"nodes": [], "partitions": {}}"#).unwrap_err();
        assert_eq!(e.to_string(), "graph: graph has no nodes");
        let e =
            parse_graph_spec(&TWO_OBJECTS.replace(r#"{"a": "u", "b": "w"}"#, r#"{"a": "u", "b": "zz"}"#)).unwrap_err();
        assert_eq!(e.category(), "graph");
        assert!(e.to_string().contains("zz"));
        let e = parse_graph_spec(&TWO_OBJECTS.replace("\"nodes\"", "\"nodez\"")).unwrap_err();
        assert!(matches!(e, SrnnError::Parse { line: 2, .. }), "{e}");
        let e = parse_graph_spec("{\n  \"nodes\": [,]\n}").unwrap_err();
        assert!(
            matches!(
                e,
                SrnnError::Parse {
                    line: 2,
                    column: 13,
                    ..
                }
            ),
            "{e}"
        );
        let dup = TWO_OBJECTS.replace(r#""id": "w""#, r#""id": "u""#);
        assert!(parse_graph_spec(&dup)
            .unwrap_err()
            .to_string()
            .contains("duplicate node id u"));
    }

    #[test]
    fn graph_spec_round_trips() {
        let spec = parse_graph_spec(TWO_OBJECTS).unwrap();
        let file = GraphSpecFile::from_graph(&spec.graph, None);
        let again = GraphSpecFile::parse(&file.to_json()).unwrap().resolve().unwrap();
        assert_eq!(again.graph, spec.graph);
    }

    fn toy_model(seed: u64) -> SrnnModel {
        let spec = parse_graph_spec(TWO_OBJECTS).unwrap();
        SrnnModel::new(spec.graph, &spec.specs, seed).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = toy_model(3);
        let bytes = encode_checkpoint(m.store());
        let mut other = toy_model(4);
        apply_records(other.store_mut(), &decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(other.store(), m.store());
        assert_eq!(encode_checkpoint(other.store()), bytes);
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let bytes = encode_checkpoint(toy_model(1).store());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert_eq!(decode_checkpoint(&bytes[..cut]).unwrap_err().category(), "checkpoint");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(decode_checkpoint(&flipped).unwrap_err().to_string().contains("CRC"));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn mismatch_lists_every_difference() {
        let spec = parse_graph_spec(&TWO_OBJECTS.replace("\"arch\": \"LSTM(4)\"", "\"arch\": \"LSTM(5)\"")).unwrap();
        let mut other = SrnnModel::new(spec.graph, &spec.specs, 0).unwrap();
        let records = decode_checkpoint(&encode_checkpoint(toy_model(0).store())).unwrap();
        let before = other.store().clone();
        let e = apply_records(other.store_mut(), &records).unwrap_err().to_string();
        assert!(e.matches("shape").count() >= 8, "{e}");
        assert_eq!(other.store(), &before);
        let e = apply_records(other.store_mut(), &records[1..]).unwrap_err().to_string();
        assert!(e.contains("missing"));
    }

    #[test]
    fn f32_checkpoint_layout() {
        let mut store = ParamStore::<f32>::new();
        store
            .add("a", Tensor::new(vec![2], vec![1.5f32, -2.0]).unwrap())
            .unwrap();
        let bytes = encode_checkpoint(&store);
        assert_eq!(&bytes[..11], b"SRNN1\x01\x00\x01\x00\x00\x00");
        assert_eq!(&bytes[11..18], b"\x01\x00a\x01\x01\x02\x00");
        let recs = decode_checkpoint(&bytes).unwrap();
        assert_eq!(
            recs[0].value,
            RecordValue::F32(store.get(crate::params::ParamId(0)).value.clone())
        );
    }

    #[test]
    fn constant_columns_get_unit_std() {
        let x = Tensor::from_rows(&[vec![2.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let st = FeatureStats::fit(&[&x], 2);
        assert_eq!(st.std, vec![1.0, 1.0]);
        assert_eq!(st.mean, vec![2.0, 2.0]);
        let back = st.denormalize(&st.normalize(&x));
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
    }
}
