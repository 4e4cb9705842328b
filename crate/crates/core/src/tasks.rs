//! Synthetic motion data, the three application setups, and evaluation
//! metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchSpecs;
use crate::data::{Dataset, SequenceBatch, Target};
use crate::error::{Result, SrnnError};
use crate::stgraph::{FactorId, StGraph};
use crate::tensor::Tensor;

/// Coupled sinusoids over a chain of body parts.
///
/// Part `i`, dim `d` of sequence `s` follows
/// `b = A sin(2π f_i t dt + φ_i + ψ_si + dπ/D)`, with `ψ_si` a random phase per
/// sequence, and is observed as `(1 − c) b_i + c · mean_j b_j` over its chain
/// neighbours `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMotionConfig {
    pub parts: usize,
    pub dims_per_part: usize,
    /// Per part; shorter lists repeat their last entry.
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    pub coupling: f64,
    /// Peak value of each sinusoid, in radians like an exponential-map
    /// joint angle.
    pub amplitude: f64,
    /// Seconds per frame.
    pub dt: f64,
    /// Frames per sequence.
    pub len: usize,
    pub sequences: usize,
    pub seed: u64,
}

impl Default for SynthMotionConfig {
    fn default() -> Self {
        SynthMotionConfig {
            parts: 2,
            dims_per_part: 6,
            frequencies: vec![0.5, 0.8],
            phases: vec![0.0, 1.0],
            coupling: 0.3,
            amplitude: 0.5,
            dt: 0.04,
            len: 500,
            sequences: 4,
            seed: 0,
        }
    }
}

impl SynthMotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 || self.dims_per_part == 0 || self.len < 2 || self.sequences == 0 {
            return Err(SrnnError::Input(
                "synthetic motion needs parts, dims, sequences > 0 and len >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(SrnnError::Input(format!("coupling {} outside [0, 1]", self.coupling)));
        }
        if self.frequencies.is_empty() || self.phases.is_empty() {
            return Err(SrnnError::Input("frequencies and phases must be non-empty".into()));
        }
        if !(self.dt > 0.0) || !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(SrnnError::Input("dt and amplitude must be positive".into()));
        }
        Ok(())
    }

    fn frequency(&self, part: usize) -> f64 {
        self.frequencies[part.min(self.frequencies.len() - 1)]
    }

    fn phase(&self, part: usize) -> f64 {
        self.phases[part.min(self.phases.len() - 1)]
    }
}

/// Output of [`synth_motion`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMotion {
    pub graph: StGraph,
    /// Raw frames per sequence per node, `[len × dims]`.
    pub frames: Vec<BTreeMap<String, Tensor>>,
    /// Per-sequence, per-part random phase offsets.
    pub offsets: Vec<Vec<f64>>,
    /// Next-frame regression sequences of `len − 1` steps.
    pub sequences: Vec<SequenceBatch>,
}

impl SynthMotion {
    /// Every sequence in the training split.
    pub fn dataset(&self) -> Dataset {
        Dataset {
            train: self.sequences.clone(),
            ..Default::default()
        }
    }
}

pub fn part_id(i: usize) -> String {
    format!("p{i}")
}

pub fn part_label(i: usize) -> String {
    format!("part{i}")
}

/// St-graph of a chain of parts: spatial edges between neighbours, a
/// temporal self edge on every part, one partition per part.
pub fn chain_graph(parts: usize, dims: usize) -> Result<StGraph> {
    let mut b = StGraph::builder();
    for i in 0..parts {
        b = b
            .node(&part_id(i), &part_label(i))
            .temporal(&part_id(i), &part_id(i))
            .feature_dim(&part_label(i), dims)
            .label_dims(&part_label(i), vec![dims]);
        if i > 0 {
            b = b.spatial(&part_id(i - 1), &part_id(i));
        }
    }
    b.build()
}

pub fn synth_motion(cfg: &SynthMotionConfig) -> Result<SynthMotion> {
    cfg.validate()?;
    let graph = chain_graph(cfg.parts, cfg.dims_per_part)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p, d, n) = (cfg.parts, cfg.dims_per_part, cfg.len);
    let mut frames = Vec::with_capacity(cfg.sequences);
    let mut offsets = Vec::with_capacity(cfg.sequences);
    let mut sequences = Vec::with_capacity(cfg.sequences);
    for _ in 0..cfg.sequences {
        let psi: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let base = |i: usize, k: usize, t: usize| {
            cfg.amplitude
                * (2.0 * PI * cfg.frequency(i) * t as f64 * cfg.dt + cfg.phase(i) + psi[i] + k as f64 * PI / d as f64)
                    .sin()
        };
        let mut per_node = BTreeMap::new();
        for i in 0..p {
            let neighbours: Vec<usize> = [i.checked_sub(1), (i + 1 < p).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            let mut data = Vec::with_capacity(n * d);
            for t in 0..n {
                for k in 0..d {
                    let own = base(i, k, t);
                    data.push(if neighbours.is_empty() || cfg.coupling == 0.0 {
                        own
                    } else {
                        let m = neighbours.iter().map(|&j| base(j, k, t)).sum::<f64>() / neighbours.len() as f64;
                        (1.0 - cfg.coupling) * own + cfg.coupling * m
                    });
                }
            }
            per_node.insert(part_id(i), Tensor::new(vec![n, d], data)?);
        }
        sequences.push(next_frame_sequence(&graph, &per_node)?);
        frames.push(per_node);
        offsets.push(psi);
    }
    Ok(SynthMotion {
        graph,
        frames,
        offsets,
        sequences,
    })
}

/// Features are frames `0..T−1`, regression targets frames `1..T`; edge
/// features derived by each partition's rule.
pub fn next_frame_sequence(g: &StGraph, frames: &BTreeMap<String, Tensor>) -> Result<SequenceBatch> {
    let len = frames
        .values()
        .next()
        .map(|x| x.shape()[0])
        .ok_or_else(|| SrnnError::Data("no frames".into()))?;
    if len < 2 {
        return Err(SrnnError::Data("need at least two frames".into()));
    }
    let mut s = SequenceBatch::new(len - 1);
    for (v, x) in frames {
        s.node_features.insert(v.clone(), x.slice(0, 0, len - 1)?);
        s.targets
            .insert(v.clone(), vec![Target::Values(x.slice(0, 1, len - 1)?)]);
    }
    s.derive_missing_edges(g)?;
    s.validate(g)?;
    Ok(s)
}

/// Default unit architectures for motion forecasting.
pub fn motion_specs() -> ArchSpecs {
    ArchSpecs::default()
}

/// Human-object interaction graph: one human, `objects` objects, spatial
/// human–object and object–object edges, temporal self edges.
/// `multi_task` doubles each label head for detection plus anticipation.
pub fn activity_graph(objects: usize, human_dim: usize, object_dim: usize, multi_task: bool) -> Result<StGraph> {
    let heads = |n: usize| if multi_task { vec![n, n] } else { vec![n] };
    let mut b = StGraph::builder()
        .node("human", "human")
        .temporal("human", "human")
        .feature_dim("human", human_dim)
        .feature_dim("object", object_dim)
        .label_dims("human", heads(ACTIVITY_SUB_ACTIVITIES))
        .label_dims("object", heads(ACTIVITY_AFFORDANCES));
    for i in 0..objects {
        let id = format!("object{i}");
        b = b.node(&id, "object").spatial("human", &id).temporal(&id, &id);
        for j in 0..i {
            b = b.spatial(&format!("object{j}"), &id);
        }
    }
    b.build()
}

pub const ACTIVITY_SUB_ACTIVITIES: usize = 10;
pub const ACTIVITY_AFFORDANCES: usize = 12;

/// Edge units LSTM(128), node units LSTM(256)-softmax(·).
pub fn activity_specs() -> ArchSpecs {
    ArchSpecs::uniform("LSTM(256)-softmax(·)", "LSTM(128)")
}

pub const MANEUVERS: [&str; 5] = [
    "left-lane-change",
    "right-lane-change",
    "left-turn",
    "right-turn",
    "straight",
];
pub const STRAIGHT: usize = 4;

/// Driver node with unlabelled inside and outside observation nodes.
pub fn driving_graph(driver_dim: usize, inside_dim: usize, outside_dim: usize) -> Result<StGraph> {
    StGraph::builder()
        .node("driver", "driver")
        .node("inside", "inside")
        .node("outside", "outside")
        .spatial("driver", "inside")
        .spatial("driver", "outside")
        .feature_dim("driver", driver_dim)
        .feature_dim("inside", inside_dim)
        .feature_dim("outside", outside_dim)
        .label_dims("driver", vec![MANEUVERS.len()])
        .build()
}

/// Driver unit RNN(64)-softmax(5), edge units LSTM(64). The observation
/// nodes carry no labels; their units are single FC layers.
pub fn driving_specs() -> ArchSpecs {
    ArchSpecs::uniform("RNN(64)-softmax(5)", "LSTM(64)")
        .with(FactorId::Node("inside".into()), "FC(1)")
        .with(FactorId::Node("outside".into()), "FC(1)")
}

/// Euclidean norm of `pred − truth` over the whole frame.
pub fn angle_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(SrnnError::shape("angle_error", &[pred.len()], &[truth.len()]));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt())
}

/// Mean angle error at each horizon step over several forecasts, each
/// `[H × d]`.
pub fn angle_error_by_horizon(preds: &[Tensor], truths: &[Tensor]) -> Result<Vec<f64>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(SrnnError::Input(
            "need equally many non-zero predictions and truths".into(),
        ));
    }
    let h = preds[0].shape()[0];
    let mut sums = vec![0.0; h];
    for (p, t) in preds.iter().zip(truths) {
        if p.shape() != t.shape() || p.shape()[0] != h {
            return Err(SrnnError::shape("angle_error_by_horizon", p.shape(), t.shape()));
        }
        for (k, s) in sums.iter_mut().enumerate() {
            *s += angle_error(p.slice(0, k, 1)?.data(), t.slice(0, k, 1)?.data())?;
        }
    }
    Ok(sums.into_iter().map(|s| s / preds.len() as f64).collect())
}

/// Frame index (0-based into the forecast) for each horizon in
/// milliseconds at `fps` frames per second.
pub fn horizon_frames(millis: &[f64], fps: f64) -> Vec<usize> {
    millis
        .iter()
        .map(|ms| ((ms / 1000.0 * fps).round() as usize).saturating_sub(1))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub metric: String,
    pub per_class: Vec<(String, f64)>,
    pub aggregate: f64,
}

impl MetricResult {
    /// Rows of `(metric, class, value)`; the aggregate has class `all`.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        self.per_class
            .iter()
            .map(|(c, v)| (self.metric.clone(), c.clone(), *v))
            .chain(std::iter::once((self.metric.clone(), "all".into(), self.aggregate)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    /// `(class, F1)` for every class in the predictions or the truth.
    pub per_class: Vec<(usize, f64)>,
    /// Unweighted mean of `per_class`.
    pub macro_f1: f64,
}

impl F1Scores {
    pub fn to_result(&self) -> MetricResult {
        MetricResult {
            metric: "f1".into(),
            per_class: self.per_class.iter().map(|(c, f)| (c.to_string(), *f)).collect(),
            aggregate: self.macro_f1,
        }
    }
}

/// Per-class F1 and their unweighted mean over classes appearing in either
/// the predictions or the truth.
pub fn f1_macro(preds: &[usize], truth: &[usize]) -> Result<F1Scores> {
    if preds.len() != truth.len() {
        return Err(SrnnError::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let k = preds.iter().chain(truth).max().map_or(0, |m| m + 1);
    // per class: true positives, predicted, actual
    let mut small = [[0usize; 3]; 16];
    let mut large = Vec::new();
    let counts: &mut [[usize; 3]] = if k <= small.len() {
        &mut small[..k]
    } else {
        large.resize(k, [0; 3]);
        &mut large
    };
    for (&p, &t) in preds.iter().zip(truth) {
        counts[p][1] += 1;
        counts[t][2] += 1;
        if p == t {
            counts[p][0] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(k);
    for (c, &[tp, predicted, actual]) in counts.iter().enumerate() {
        if predicted + actual == 0 {
            continue;
        }
        // 2PR/(P+R) reduces to 2tp/(predicted+actual)
        per_class.push((c, 2.0 * tp as f64 / (predicted + actual) as f64));
    }
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, f)| f).sum::<f64>() / per_class.len() as f64
    };
    Ok(F1Scores { per_class, macro_f1 })
}

/// Argmax per row, lowest index on ties.
pub fn predict_classes(probs: &Tensor) -> Vec<usize> {
    let k = probs.shape().last().copied().unwrap_or(0);
    if k == 0 {
        return Vec::new();
    }
    probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Targets advanced by one step: features `0..T−1`, targets `1..T`.
pub fn anticipation_shift(batch: &SequenceBatch) -> Result<SequenceBatch> {
    if batch.len < 2 {
        return Err(SrnnError::Data(format!(
            "anticipation needs at least two steps, got {}",
            batch.len
        )));
    }
    let n = batch.len - 1;
    let mut out = batch.window(0, n)?;
    for (v, heads) in &batch.targets {
        let shifted = heads.iter().map(|t| t.window(1, n)).collect::<Result<_>>()?;
        out.targets.insert(v.clone(), shifted);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManeuverEvent {
    pub class: usize,
    /// Time the maneuver starts.
    pub start: f64,
}

/// Per-timestep class probabilities of one drive segment, with the
/// maneuver that followed it (`None` for straight driving).
#[derive(Debug, Clone, PartialEq)]
pub struct ManeuverTrack {
    pub times: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
    pub event: Option<ManeuverEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManeuverConfig {
    pub default_class: usize,
    /// A maneuver is predicted once its probability exceeds this and stays
    /// above it until the event start (or the end of the track).
    pub threshold: f64,
}

impl Default for ManeuverConfig {
    fn default() -> Self {
        ManeuverConfig {
            default_class: STRAIGHT,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManeuverMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Mean of `start − prediction time` over correct predictions.
    pub time_to_maneuver: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ManeuverMetrics {
    pub fn to_result(&self) -> Vec<MetricResult> {
        let one = |name: &str, v: f64| MetricResult {
            metric: name.into(),
            per_class: Vec::new(),
            aggregate: v,
        };
        vec![
            one("precision", self.precision),
            one("recall", self.recall),
            one("time-to-maneuver", self.time_to_maneuver),
        ]
    }
}

/// Earliest `(class, time)` at which a non-default class crosses the
/// threshold and stays above it through the cutoff.
fn predicted_maneuver(track: &ManeuverTrack, cfg: &ManeuverConfig) -> Option<(usize, f64)> {
    let cutoff = track.event.map_or(f64::INFINITY, |e| e.start);
    let idx: Vec<usize> = (0..track.times.len()).filter(|&i| track.times[i] <= cutoff).collect();
    let k = track.probs.first().map_or(0, Vec::len);
    let mut best: Option<(usize, f64)> = None;
    for class in (0..k).filter(|&c| c != cfg.default_class) {
        // walk back from the cutoff while the class stays above threshold
        let mut first = None;
        for &i in idx.iter().rev() {
            if track.probs[i][class] > cfg.threshold {
                first = Some(i);
            } else {
                break;
            }
        }
        if let Some(i) = first {
            let t = track.times[i];
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((class, t));
            }
        }
    }
    best
}

pub fn maneuver_metrics(tracks: &[ManeuverTrack], cfg: &ManeuverConfig) -> Result<ManeuverMetrics> {
    for (n, tr) in tracks.iter().enumerate() {
        if tr.times.len() != tr.probs.len() {
            return Err(SrnnError::Data(format!(
                "track {n}: times and probabilities differ in length"
            )));
        }
        if tr.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SrnnError::Data(format!("track {n}: times must increase")));
        }
        let k = tr.probs.first().map_or(0, Vec::len);
        if tr.probs.iter().any(|p| p.len() != k) || cfg.default_class >= k.max(1) && k > 0 {
            return Err(SrnnError::Data(format!("track {n}: inconsistent class count")));
        }
        if let Some(e) = tr.event {
            if e.class == cfg.default_class || (k > 0 && e.class >= k) || !e.start.is_finite() {
                return Err(SrnnError::Data(format!("track {n}: malformed event {e:?}")));
            }
        }
    }
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    let mut lead = 0.0;
    for tr in tracks {
        let pred = predicted_maneuver(tr, cfg);
        match (tr.event, pred) {
            (Some(e), Some((c, t))) if c == e.class => {
                tp += 1;
                lead += e.start - t;
            }
            (Some(_), Some(_)) => {
                fp += 1;
                fneg += 1;
            }
            (Some(_), None) => fneg += 1,
            (None, Some(_)) => fp += 1,
            (None, None) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ManeuverMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        time_to_maneuver: if tp == 0 { 0.0 } else { lead / tp as f64 },
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}
