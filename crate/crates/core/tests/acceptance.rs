//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or overruns its time budget.
//!
//! `SRNN_BLESS=1` rewrites the golden files instead of comparing them.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srnn::arch::{compile, count_parameters, ArchSpecs};
use srnn::data::{derive_edge_features, Minibatch, SequenceBatch, Target};
use srnn::gradcheck::gradcheck_store;
use srnn::io::{self, EdgeEntry, NodeEntry};
use srnn::runtime::{swap_unit, Frame, SrnnModel, TaskMode, DEFAULT_HORIZON, DEFAULT_SEED_FRAMES};
use srnn::stgraph::{derive_factor_graph, partition_edges, EdgeKind, FactorId, StGraph};
use srnn::tasks::{
    angle_error, f1_macro, maneuver_metrics, synth_motion, ManeuverConfig, ManeuverEvent, ManeuverTrack,
    SynthMotionConfig, STRAIGHT,
};
use srnn::tensor::Tensor;
use srnn::trainer::{clip_gradients, evaluate, train, train_until, NoiseSchedule, TrainConfig};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn blessing() -> bool {
    std::env::var_os("SRNN_BLESS").is_some()
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_batch(g: &StGraph, len: usize, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let mut b = SequenceBatch::new(len);
    for (v, _) in g.nodes() {
        let d = g.node_feature_dim(v).unwrap();
        b.node_features.insert(v.into(), random_tensor(rng, len, d));
    }
    for e in g.edges() {
        let d = g.edge_attrs(&g.partition_key(e)).unwrap().feature_dim;
        b.edge_features.insert(e.clone(), random_tensor(rng, len, d));
    }
    b
}

fn two_objects() -> std::result::Result<io::GraphSpec, String> {
    ok(io::load_graph_spec(&golden("two_objects_graph.json")))
}

fn two_objects_model(seed: u64) -> std::result::Result<SrnnModel, String> {
    let spec = two_objects()?;
    ok(SrnnModel::new(spec.graph, &spec.specs, seed))
}

fn algorithm_fidelity() -> Outcome {
    let spec = two_objects()?;
    let fg = derive_factor_graph(&spec.graph);
    let arch = ok(compile(&fg, &spec.graph, &spec.specs))?;
    ensure!(arch.node_units.len() == 2, "{} node units", arch.node_units.len());
    ensure!(arch.edge_units.len() == 4, "{} edge units", arch.edge_units.len());
    let pairs: Vec<(String, String)> = arch
        .wiring
        .iter()
        .map(|(e, n)| (e.to_string(), n.to_string()))
        .collect();
    let expected = [
        ("spatial:human~object", "node:human"),
        ("spatial:human~object", "node:object"),
        ("spatial:object~object", "node:object"),
        ("temporal:human~human", "node:human"),
        ("temporal:object~object", "node:object"),
    ];
    ensure!(
        pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).eq(expected),
        "wiring {pairs:?}"
    );
    let path = golden("two_objects_arch.json");
    if blessing() {
        ok(io::write_file(&path, arch.to_json()))?;
    }
    let want = ok(std::fs::read_to_string(&path))?;
    ensure!(
        arch.to_json() == want,
        "compiled architecture differs from {}",
        path.display()
    );
    Ok("2 node units, 4 edge units, 5 wiring pairs, golden JSON identical".into())
}

/// A random graph with up to three labels and at most six members per
/// edge partition.
fn random_graph(rng: &mut ChaCha8Rng) -> StGraph {
    let labels = ["a", "b", "c"];
    let n_labels = rng.random_range(1..=3);
    let n_nodes = rng.random_range(1..=7);
    let mut b = StGraph::builder();
    let mut nodes = Vec::new();
    for i in 0..n_nodes {
        let label = labels[rng.random_range(0..n_labels)];
        let id = format!("v{i}");
        b = b.node(&id, label);
        nodes.push((id, label));
    }
    for (k, l) in labels.iter().enumerate() {
        if nodes.iter().any(|(_, x)| x == l) {
            b = b.feature_dim(l, k + 1).label_dims(l, vec![1]);
        }
    }
    let mut per_partition: BTreeMap<(bool, &str, &str), usize> = BTreeMap::new();
    let mut room = |kind, x: &'static str, y: &'static str| {
        let key = (kind == EdgeKind::Spatial, x.min(y), x.max(y));
        let n = per_partition.entry(key).or_default();
        *n += 1;
        *n <= 6
    };
    for i in 0..n_nodes {
        for j in i + 1..n_nodes {
            if rng.random_bool(0.5) && room(EdgeKind::Spatial, nodes[i].1, nodes[j].1) {
                b = b.spatial(&nodes[i].0, &nodes[j].0);
            }
        }
        if rng.random_bool(0.7) && room(EdgeKind::Temporal, nodes[i].1, nodes[i].1) {
            b = b.temporal(&nodes[i].0, &nodes[i].0);
        }
    }
    b.build().unwrap()
}

fn structured_feature_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    for _ in 0..200 {
        let g = random_graph(&mut rng);
        let model = ok(SrnnModel::new(g.clone(), &ArchSpecs::uniform("FC(·)", "FC(1)"), 0))?;
        let batch = random_batch(&g, 3, &mut rng);
        for p in partition_edges(&g) {
            ensure!(
                p.members.len() <= 6,
                "partition {} has {} members",
                p.key,
                p.members.len()
            );
            for (v, _) in g.nodes().filter(|(_, l)| p.key.involves(l)) {
                let s: Vec<f64> = p
                    .members
                    .iter()
                    .map(|e| if e.a == v || e.b == v { 1.0 } else { 0.0 })
                    .collect();
                ensure!(ok(model.selector(v, &p.key))? == s, "selector of {v} in {}", p.key);
                // sᵀF summed member by member from zero
                let mut acc = vec![0.0; batch.len * p.feature_dim];
                for (sm, e) in s.iter().zip(&p.members) {
                    for (a, x) in acc.iter_mut().zip(batch.edge_features[e].data()) {
                        *a += sm * x;
                    }
                }
                let brute = ok(Tensor::new(vec![batch.len, p.feature_dim], acc))?;
                let got = ok(model.edge_input(v, &p.key, &batch))?;
                ensure!(
                    same_bits(&got, &brute),
                    "edge_input of {v} in {} differs from sᵀF",
                    p.key
                );
                checked += 1;
            }
        }
    }
    Ok(format!("200 graphs, {checked} (node, partition) inputs bit-identical"))
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for (head, mode) in [("FC(·)", TaskMode::Regression), ("softmax(·)", TaskMode::Detection)] {
        let g = ok(StGraph::builder()
            .node("a", "x")
            .node("b", "x")
            .spatial("a", "b")
            .temporal("a", "a")
            .temporal("b", "b")
            .feature_dim("x", 2)
            .label_dims("x", vec![3])
            .build())?;
        let model = ok(SrnnModel::new(
            g.clone(),
            &ArchSpecs::uniform(&format!("LSTM(8)-{head}"), "LSTM(8)"),
            4,
        ))?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = random_batch(&g, 4, &mut rng);
        for v in ["a", "b"] {
            let t = match mode {
                TaskMode::Regression => Target::Values(random_tensor(&mut rng, 4, 3)),
                _ => Target::Classes((0..4).map(|_| rng.random_range(0..3)).collect()),
            };
            b.targets.insert(v.into(), vec![t]);
        }
        let mb = ok(Minibatch::stack(&[&b]))?;
        let err = ok(gradcheck_store(
            model.store(),
            |tape, store| {
                let mut probe = model.clone();
                *probe.store_mut() = store.clone();
                Ok(probe.joint_loss(tape, &mb, mode)?.loss)
            },
            1e-4,
            None,
        ))?;
        worst = worst.max(err);
    }
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.2e} over every parameter element"))
}

fn parameter_sharing() -> Outcome {
    let spec = two_objects()?;
    let base = ok(compile(&derive_factor_graph(&spec.graph), &spec.graph, &spec.specs))?;
    let mut file = io::GraphSpecFile::from_graph(&spec.graph, Some(&base));
    file.nodes.push(NodeEntry {
        id: "z".into(),
        partition: "object".into(),
    });
    for other in ["h", "u", "w"] {
        file.spatial_edges.push(EdgeEntry {
            a: other.into(),
            b: "z".into(),
        });
    }
    file.temporal_edges.push(EdgeEntry {
        a: "z".into(),
        b: "z".into(),
    });
    let bigger = ok(file.resolve())?;
    ensure!(bigger.graph.node_count() == 4, "third object was not added");
    let arch = ok(compile(
        &derive_factor_graph(&bigger.graph),
        &bigger.graph,
        &bigger.specs,
    ))?;
    let (before, after) = (ok(count_parameters(&base))?, ok(count_parameters(&arch))?);
    ensure!(before == after, "{before} parameters became {after}");
    let m3 = ok(SrnnModel::from_arch(spec.graph, base, 0))?;
    let m4 = ok(SrnnModel::from_arch(bigger.graph, arch, 0))?;
    ensure!(
        m3.parameter_count() == m4.parameter_count(),
        "instantiated {} vs {}",
        m3.parameter_count(),
        m4.parameter_count()
    );
    Ok(format!("{before} parameters with 2 or 3 objects"))
}

fn training_recipe() -> Outcome {
    let s = NoiseSchedule::default();
    for (iter, want) in [(0, 0.0), (249, 0.0), (250, 0.01), (3300, 0.7)] {
        ensure!(s.noise_std(iter) == want, "noise_std({iter}) = {}", s.noise_std(iter));
    }
    // norm 50 → scaled to 25, then every element capped at 5
    let mut a = [30.0, 40.0];
    let n = clip_gradients(&mut [&mut a[..]], 25.0, 5.0);
    ensure!(n == 50.0 && a == [5.0, 5.0], "norm {n}, clipped {a:?}");
    let mut b = [3.0, -4.0];
    let mut c = [12.0];
    clip_gradients(&mut [&mut b[..], &mut c[..]], 6.5, 5.0);
    ensure!(b == [1.5, -2.0] && c == [5.0], "joint clip gave {b:?} {c:?}");
    let mut d = [1.0, -2.0];
    clip_gradients(&mut [&mut d[..]], 25.0, 5.0);
    ensure!(d == [1.0, -2.0], "small gradient changed to {d:?}");
    let mut e = [-9.0, 0.5];
    clip_gradients(&mut [&mut e[..]], 25.0, 5.0);
    ensure!(e == [-5.0, 0.5], "elementwise clip gave {e:?}");
    Ok("schedule 249→0, 250→0.01, 3300→0.7; norm 25 then ±5 exact".into())
}

const MOTION_NODE: &str = "LSTM(16)-LSTM(16)-FC(·)";
const MOTION_EDGE: &str = "LSTM(8)";

fn motion_data(seed: u64, sequences: usize) -> std::result::Result<srnn::tasks::SynthMotion, String> {
    ok(synth_motion(&SynthMotionConfig {
        sequences,
        seed,
        ..Default::default()
    }))
}

fn convergence() -> Outcome {
    let data = motion_data(0, 2)?;
    let ds = data.dataset();
    let specs = ArchSpecs::uniform(MOTION_NODE, MOTION_EDGE);
    let config = TrainConfig::default();

    let short = TrainConfig {
        max_iterations: 3,
        ..config.clone()
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut m = ok(SrnnModel::new(data.graph.clone(), &specs, config.rng_seed))?;
        let log = ok(train(&mut m, &ds, &short, &NoiseSchedule::none(), TaskMode::Regression))?;
        runs.push((m, log));
    }
    ensure!(runs[0] == runs[1], "two runs with the same seed differ");

    let mut m = ok(SrnnModel::new(data.graph.clone(), &specs, config.rng_seed))?;
    let log = ok(train_until(
        &mut m,
        &ds,
        &config,
        &NoiseSchedule::none(),
        TaskMode::Regression,
        |row| row.val_loss < 1e-3,
    ))?;
    let last = log.last().ok_or("no log rows")?;
    let loss = ok(evaluate(&m, &ds.train, config.bptt_len, TaskMode::Regression))?;
    ensure!(
        loss < 1e-3 && last.iteration <= 2000,
        "train loss {loss:.3e} after {} iterations",
        last.iteration
    );
    // predicting "no motion" for reference
    let (mut sum, mut frames) = (0.0, 0usize);
    for seq in &ds.train {
        for (v, x) in &seq.node_features {
            let Target::Values(y) = &seq.targets[v][0] else {
                return Err("regression targets expected".into());
            };
            sum += x
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            frames += seq.len;
        }
    }
    Ok(format!(
        "train loss {loss:.3e} after {} iterations (copy-last-frame baseline {:.3e})",
        last.iteration,
        sum / frames as f64
    ))
}

fn forecast_protocol() -> Outcome {
    let data = motion_data(1, 1)?;
    let g = data.graph.clone();
    let model = ok(SrnnModel::new(
        g.clone(),
        &ArchSpecs::uniform("LSTM(8)-FC(·)", "LSTM(4)"),
        3,
    ))?;
    let seed = ok(data.sequences[0].window(0, DEFAULT_SEED_FRAMES))?;
    let fc = ok(model.forecast(&seed, DEFAULT_HORIZON))?;
    for (v, x) in &fc.frames {
        ensure!(x.shape() == [DEFAULT_HORIZON, 6], "{v}: forecast shape {:?}", x.shape());
    }

    // oracle: feed the seed frames one at a time, then feed predictions back
    let mut state = model.zero_state(1);
    let mut prev = Frame::default();
    let mut out = BTreeMap::new();
    for t in 0..seed.len {
        let mut frame = Frame::default();
        for (v, x) in &seed.node_features {
            frame.nodes.insert(v.clone(), ok(x.slice(0, t, 1))?);
        }
        for (e, x) in &seed.edge_features {
            frame.edges.insert(e.clone(), ok(x.slice(0, t, 1))?);
        }
        out = ok(model.step_frame(&mut state, &frame))?;
        prev = frame;
    }
    let mut predicted: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for _ in 0..DEFAULT_HORIZON {
        let mut frame = Frame::default();
        for (v, heads) in &out {
            predicted.entry(v.clone()).or_default().push(heads[0].clone());
            frame.nodes.insert(v.clone(), heads[0].clone());
        }
        for e in g.edges() {
            frame
                .edges
                .insert(e.clone(), ok(derive_edge_features(&g, e, &prev.nodes, &frame.nodes))?);
        }
        out = ok(model.step_frame(&mut state, &frame))?;
        prev = frame;
    }
    for (v, rows) in &predicted {
        let oracle = ok(Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0))?;
        ensure!(
            same_bits(&fc.frames[v], &oracle),
            "{v}: forecast differs from step oracle"
        );
    }
    Ok(format!(
        "{DEFAULT_SEED_FRAMES} seed frames → {DEFAULT_HORIZON} frames per node, bit-identical to step oracle"
    ))
}

fn ablation() -> Outcome {
    let specs = ArchSpecs::uniform(MOTION_NODE, MOTION_EDGE);
    let config = TrainConfig {
        max_iterations: 300,
        ..Default::default()
    };
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let data = motion_data(seed, 2)?;
        let ds = data.dataset();
        let config = TrainConfig {
            rng_seed: seed,
            ..config.clone()
        };
        let mut losses = Vec::new();
        for g in [data.graph.clone(), data.graph.without_edges()] {
            let ds = srnn::data::Dataset {
                train: ds
                    .train
                    .iter()
                    .map(|s| {
                        let mut s = s.clone();
                        s.edge_features.retain(|e, _| g.edges().any(|x| x == e));
                        s
                    })
                    .collect(),
                ..Default::default()
            };
            let mut m = ok(SrnnModel::new(g, &specs, seed))?;
            ok(train(
                &mut m,
                &ds,
                &config,
                &NoiseSchedule::none(),
                TaskMode::Regression,
            ))?;
            losses.push(ok(evaluate(&m, &ds.train, config.bptt_len, TaskMode::Regression))?);
        }
        lines.push(format!("seed {seed}: {:.3e} vs {:.3e}", losses[0], losses[1]));
        ensure!(
            losses[0] <= losses[1],
            "full model worse than w/o edges: {}",
            lines.join(", ")
        );
    }
    Ok(lines.join(", "))
}

fn modularity() -> Outcome {
    let specs = ArchSpecs::uniform("LSTM(8)-FC(·)", "LSTM(4)");
    let config = TrainConfig {
        max_iterations: 40,
        batch_size: 10,
        bptt_len: 50,
        ..Default::default()
    };
    let mut models = Vec::new();
    for seed in [10u64, 11] {
        let data = motion_data(seed, 1)?;
        let mut m = ok(SrnnModel::new(data.graph.clone(), &specs, seed))?;
        let config = TrainConfig {
            rng_seed: seed,
            ..config.clone()
        };
        ok(train(
            &mut m,
            &data.dataset(),
            &config,
            &NoiseSchedule::none(),
            TaskMode::Regression,
        ))?;
        models.push(m);
    }
    let factor = FactorId::Node("part0".into());
    let hybrid = ok(swap_unit(&models[0], &models[1], &factor))?;
    let probe = ok(motion_data(99, 1)?.sequences[0].window(0, 60))?;
    let outs: Vec<_> = [&models[0], &models[1], &hybrid]
        .iter()
        .map(|m| m.predict(&probe))
        .collect::<srnn::Result<_>>()
        .map_err(|e| e.to_string())?;
    for (v, heads) in &outs[2] {
        let y = &heads[0];
        ensure!(y.shape() == [60, 6], "{v}: output shape {:?}", y.shape());
        ensure!(y.data().iter().all(|x| x.is_finite()), "{v}: non-finite output");
    }
    ensure!(outs[2] != outs[0], "hybrid equals the target");
    ensure!(outs[2] != outs[1], "hybrid equals the donor");
    Ok(format!(
        "swapped {factor}: finite [60 × 6] outputs, distinct from both donors"
    ))
}

fn persistence() -> Outcome {
    let model = two_objects_model(7)?;
    let bytes = io::encode_checkpoint(model.store());
    let path = golden("two_objects.ckpt");
    if blessing() {
        ok(io::write_file(&path, &bytes))?;
    }
    let want = ok(std::fs::read(&path))?;
    ensure!(bytes == want, "encoded checkpoint differs from {}", path.display());
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    ensure!(
        crc == crc32fast::hash(body).to_le_bytes(),
        "trailing CRC32 does not cover the body"
    );

    let dir = ok(tempfile::tempdir())?;
    let file = dir.path().join("m.ckpt");
    ok(io::save_checkpoint(&model, &file))?;
    ensure!(ok(std::fs::read(&file))? == bytes, "saved file differs from encoding");
    let back = ok(io::load_checkpoint(&file, model.graph().clone(), model.arch().clone()))?;
    ensure!(back.store() == model.store(), "loaded parameters differ");
    ensure!(io::encode_checkpoint(back.store()) == bytes, "re-encoding differs");
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 1;
    ensure!(io::decode_checkpoint(&bad).is_err(), "flipped bit went undetected");
    Ok(format!(
        "{} bytes, golden layout and CRC match, round trip bit-exact",
        bytes.len()
    ))
}

/// Macro F1 from a 3×3 confusion matrix, over classes that occur.
fn f1_from_confusion(c: &[[usize; 3]; 3]) -> f64 {
    let mut sum = 0.0;
    let mut classes = 0;
    for k in 0..3 {
        let tp = c[k][k];
        let actual: usize = c[k].iter().sum();
        let predicted: usize = (0..3).map(|r| c[r][k]).sum();
        if actual + predicted == 0 {
            continue;
        }
        classes += 1;
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if actual > 0 { tp as f64 / actual as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

fn advance(v: &mut [usize]) {
    for x in v.iter_mut() {
        *x += 1;
        if *x < 3 {
            return;
        }
        *x = 0;
    }
}

fn metric_oracles() -> Outcome {
    let mut pairs = 0u64;
    for n in 0..=8u32 {
        let count = 3usize.pow(n);
        let mut truth = vec![0usize; n as usize];
        for _ in 0..count {
            let mut pred = vec![0usize; n as usize];
            for _ in 0..count {
                let mut c = [[0usize; 3]; 3];
                for (&t, &p) in truth.iter().zip(&pred) {
                    c[t][p] += 1;
                }
                let got = ok(f1_macro(&pred, &truth))?.macro_f1;
                let want = f1_from_confusion(&c);
                ensure!((got - want).abs() <= 1e-12, "f1 {pred:?} vs {truth:?}: {got} != {want}");
                pairs += 1;
                advance(&mut pred);
            }
            advance(&mut truth);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let d = rng.random_range(1..=12);
        let mut v = || -> Vec<f64> { (0..d).map(|_| rng.random_range(-3.0..3.0)).collect() };
        let (x, y, z) = (v(), v(), v());
        let e = |a: &[f64], b: &[f64]| angle_error(a, b).unwrap();
        ensure!(e(&x, &x) == 0.0, "d(x, x) != 0");
        ensure!(e(&x, &y) > 0.0 && e(&x, &y) == e(&y, &x), "positivity or symmetry");
        ensure!(e(&x, &z) <= e(&x, &y) + e(&y, &z) + 1e-12, "triangle inequality");
    }

    let cfg = ManeuverConfig::default();
    let p = |class: usize, prob: f64| {
        let mut v = vec![0.0; 5];
        v[class] = prob;
        v[STRAIGHT] += 1.0 - prob;
        v
    };
    let track = |times: &[f64], class: usize, probs: &[f64], event: Option<(usize, f64)>| ManeuverTrack {
        times: times.to_vec(),
        probs: probs.iter().map(|&q| p(class, q)).collect(),
        event: event.map(|(class, start)| ManeuverEvent { class, start }),
    };
    let tracks = [
        // sustained from t=3 through the start at 4: 1 s ahead
        track(
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            0,
            &[0.1, 0.6, 0.3, 0.7, 0.8, 0.9],
            Some((0, 4.0)),
        ),
        // sustained from t=6 through the start at 10: 4 s ahead
        track(
            &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            1,
            &[0.6, 0.7, 0.2, 0.9, 0.95, 0.99, 0.99],
            Some((1, 10.0)),
        ),
        // no event but a confident prediction
        track(&[0.0, 1.0, 2.0], 2, &[0.2, 0.6, 0.7], None),
        // event never predicted
        track(&[0.0, 1.0, 2.0], 3, &[0.2, 0.3, 0.4], Some((3, 2.0))),
    ];
    let m = ok(maneuver_metrics(&tracks, &cfg))?;
    ensure!(
        (m.true_positives, m.false_positives, m.false_negatives) == (2, 1, 1),
        "counts {m:?}"
    );
    ensure!(m.time_to_maneuver == 2.5, "time to maneuver {}", m.time_to_maneuver);
    ensure!(
        m.precision == 2.0 / 3.0 && m.recall == 2.0 / 3.0,
        "precision/recall {m:?}"
    );
    let wrong = [track(&[0.0, 1.0], 1, &[0.9, 0.9], Some((0, 1.0)))];
    let m = ok(maneuver_metrics(&wrong, &cfg))?;
    ensure!(
        (
            m.true_positives,
            m.false_positives,
            m.false_negatives,
            m.time_to_maneuver
        ) == (0, 1, 1, 0.0),
        "wrong class {m:?}"
    );
    Ok(format!("{pairs} F1 label pairs, 1000 angle triples, maneuver fixtures"))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Outcome); 11] = [
        ("algorithm fidelity", 1, algorithm_fidelity),
        ("structured-feature equivalence", 5, structured_feature_equivalence),
        ("gradient correctness", 30, gradient_correctness),
        ("parameter sharing", 1, parameter_sharing),
        ("training recipe", 1, training_recipe),
        ("convergence", 300, convergence),
        ("forecast protocol", 10, forecast_protocol),
        ("ablation direction", 900, ablation),
        ("modularity", 60, modularity),
        ("persistence", 1, persistence),
        ("metric oracles", 10, metric_oracles),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, (name, budget, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(_) if took > Duration::from_secs(*budget) => {
                Err(format!("took {:.1}s, budget {budget}s", took.as_secs_f64()))
            }
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({:.2}s): {detail}", n + 1, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({:.2}s): {detail}", n + 1, took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
