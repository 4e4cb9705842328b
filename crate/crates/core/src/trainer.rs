//! Joint SGD over every unit: windowed BPTT, norm-then-elementwise gradient
//! clipping, step decay on validation plateaus and a curriculum of input
//! noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, Minibatch, SequenceBatch};
use crate::error::{Result, SrnnError};
use crate::params::{Gradients, ParamStore};
use crate::runtime::{SrnnModel, TaskMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub step_size: f64,
    pub bptt_len: usize,
    pub batch_size: usize,
    pub norm_clip: f64,
    pub dim_clip: f64,
    pub decay_factor: f64,
    /// Evaluations without a new best validation loss before decaying.
    pub plateau_window: usize,
    /// Iterations between validation evaluations (and log rows).
    pub eval_every: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
    /// Minibatch shards processed on separate tapes. The shard layout,
    /// and therefore the result, does not depend on the thread count.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 1e-3,
            bptt_len: 100,
            batch_size: 100,
            norm_clip: 25.0,
            dim_clip: 5.0,
            decay_factor: 0.1,
            plateau_window: 5,
            eval_every: 100,
            max_iterations: 2000,
            rng_seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size", self.step_size),
            ("norm_clip", self.norm_clip),
            ("dim_clip", self.dim_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SrnnError::Input(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("bptt_len", self.bptt_len),
            ("batch_size", self.batch_size),
            ("plateau_window", self.plateau_window),
            ("eval_every", self.eval_every),
            ("workers", self.workers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SrnnError::Input(format!("{name} must be positive")));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(SrnnError::Input(format!(
                "decay_factor must lie in (0, 1), got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant input-noise std: zero before the first threshold,
/// then the std of the largest threshold not exceeding the iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: Vec<(usize, f64)>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            steps: vec![
                (250, 0.01),
                (500, 0.05),
                (1000, 0.1),
                (1300, 0.2),
                (2000, 0.3),
                (2500, 0.5),
                (3300, 0.7),
            ],
        }
    }
}

impl NoiseSchedule {
    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(SrnnError::Input("noise thresholds must increase strictly".into()));
        }
        if steps.iter().any(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
            return Err(SrnnError::Input("noise stds must be non-negative".into()));
        }
        Ok(NoiseSchedule { steps })
    }

    /// No noise at any iteration.
    pub fn none() -> Self {
        NoiseSchedule { steps: Vec::new() }
    }

    pub fn steps(&self) -> &[(usize, f64)] {
        &self.steps
    }

    pub fn noise_std(&self, iteration: usize) -> f64 {
        self.steps
            .iter()
            .take_while(|(threshold, _)| *threshold <= iteration)
            .last()
            .map_or(0.0, |s| s.1)
    }
}

/// Treats `grads` as one flattened vector: rescales it to `norm_clip` if its
/// L2 norm exceeds that, then clamps each element to `±dim_clip`. Returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut [f64]], norm_clip: f64, dim_clip: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > norm_clip { norm_clip / norm } else { 1.0 };
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v = (*v * scale).clamp(-dim_clip, dim_clip);
        }
    }
    norm
}

/// `p ← p − step_size · clip(g)` for every parameter, then zeroes the
/// accumulators. Returns the pre-clip gradient norm.
pub fn sgd_step(store: &mut ParamStore, step_size: f64, norm_clip: f64, dim_clip: f64) -> f64 {
    let norm = {
        let mut grads: Vec<&mut [f64]> = store.iter_mut().map(|p| p.grad.data_mut()).collect();
        clip_gradients(&mut grads, norm_clip, dim_clip)
    };
    for p in store.iter_mut() {
        let g = p.grad.data().to_vec();
        for (v, g) in p.value.data_mut().iter_mut().zip(g) {
            *v -= step_size * g;
        }
    }
    store.zero_grad();
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean reported loss over the iterations since the previous row.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

fn group_by_len(windows: Vec<SequenceBatch>) -> BTreeMap<usize, Vec<SequenceBatch>> {
    let mut groups: BTreeMap<usize, Vec<SequenceBatch>> = BTreeMap::new();
    for w in windows {
        groups.entry(w.len).or_default().push(w);
    }
    groups
}

/// Splits every equal-length group into at most `workers` contiguous shards.
fn shard(groups: BTreeMap<usize, Vec<SequenceBatch>>, workers: usize) -> Result<Vec<Minibatch>> {
    let mut out = Vec::new();
    for (_, seqs) in groups {
        let per = seqs.len().div_ceil(workers).max(1);
        for chunk in seqs.chunks(per) {
            out.push(Minibatch::stack(&chunk.iter().collect::<Vec<_>>())?);
        }
    }
    Ok(out)
}

struct ShardResult {
    grads: Gradients,
    reported_sum: f64,
    count: usize,
}

fn run_shards(model: &SrnnModel, shards: &[Minibatch], mode: TaskMode, backward: bool) -> Result<Vec<ShardResult>> {
    let run = |mb: &Minibatch| -> Result<ShardResult> {
        let mut tape = Tape::new();
        let terms = model.joint_loss(&mut tape, mb, mode)?;
        let mut grads = Gradients::new(model.store().len());
        if backward {
            tape.backward(terms.loss, &mut grads)?;
        }
        Ok(ShardResult {
            grads,
            reported_sum: terms.reported_sum,
            count: terms.count,
        })
    };
    if shards.len() > 1 {
        shards.par_iter().map(run).collect()
    } else {
        shards.iter().map(run).collect()
    }
}

/// Mean reported loss over `seqs`, each cut into consecutive windows of at
/// most `bptt_len` frames that start from zero state. No noise is added.
pub fn evaluate(model: &SrnnModel, seqs: &[SequenceBatch], bptt_len: usize, mode: TaskMode) -> Result<f64> {
    let mut windows = Vec::new();
    for s in seqs {
        let mut start = 0;
        while start < s.len {
            let len = bptt_len.min(s.len - start);
            windows.push(s.window(start, len)?);
            start += len;
        }
    }
    if windows.is_empty() {
        return Err(SrnnError::Data("nothing to evaluate".into()));
    }
    let shards = shard(group_by_len(windows), 1)?;
    let results = run_shards(model, &shards, mode, false)?;
    let sum: f64 = results.iter().map(|r| r.reported_sum).sum();
    let count: usize = results.iter().map(|r| r.count).sum();
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Trains `model` in place and returns one log row per evaluation.
pub fn train(
    model: &mut SrnnModel,
    data: &Dataset,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    mode: TaskMode,
) -> Result<TrainLog> {
    train_until(model, data, config, schedule, mode, |_| false)
}

/// Like [`train`], but stops after the first log row for which `stop`
/// returns true.
pub fn train_until(
    model: &mut SrnnModel,
    data: &Dataset,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    mode: TaskMode,
    mut stop: impl FnMut(&LogRow) -> bool,
) -> Result<TrainLog> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(SrnnError::Data("empty training set".into()));
    }
    if data.train.iter().all(|s| s.len == 0) {
        return Err(SrnnError::Data("every training sequence is empty".into()));
    }
    let usable: Vec<&SequenceBatch> = data.train.iter().filter(|s| s.len > 0).collect();
    let val_set = if data.val.is_empty() { &data.train } else { &data.val };

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut lr = config.step_size;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut log = TrainLog::default();
    let (mut acc_sum, mut acc_count) = (0.0, 0usize);
    model.store_mut().zero_grad();

    for iter in 0..config.max_iterations {
        let std = schedule.noise_std(iter);
        let mut windows = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let seq = usable[rng.random_range(0..usable.len())];
            let len = config.bptt_len.min(seq.len);
            let start = rng.random_range(0..=seq.len - len);
            let mut w = seq.window(start, len)?;
            w.add_input_noise(std, &mut rng);
            windows.push(w);
        }
        let shards = shard(group_by_len(windows), config.workers)?;
        let results = run_shards(model, &shards, mode, true)?;
        let mut total = Gradients::new(model.store().len());
        for r in &results {
            total.merge(&r.grads)?;
            acc_sum += r.reported_sum;
            acc_count += r.count;
        }
        model.store_mut().accumulate(&total)?;
        sgd_step(model.store_mut(), lr, config.norm_clip, config.dim_clip);

        let done = iter + 1;
        if done % config.eval_every == 0 || done == config.max_iterations {
            let val = evaluate(model, val_set, config.bptt_len, mode)?;
            log.rows.push(LogRow {
                iteration: done,
                train_loss: if acc_count == 0 {
                    0.0
                } else {
                    acc_sum / acc_count as f64
                },
                val_loss: val,
                lr,
                noise_std: std,
            });
            (acc_sum, acc_count) = (0.0, 0);
            if stop(log.rows.last().expect("row just pushed")) {
                break;
            }
            if val < best {
                best = val;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.plateau_window {
                    lr *= config.decay_factor;
                    since_best = 0;
                }
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpecs;
    use crate::data::Target;
    use crate::stgraph::StGraph;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_boundaries() {
        let s = NoiseSchedule::default();
        assert_eq!(s.noise_std(0), 0.0);
        assert_eq!(s.noise_std(100), 0.0);
        assert_eq!(s.noise_std(249), 0.0);
        assert_eq!(s.noise_std(250), 0.01);
        assert_eq!(s.noise_std(1299), 0.1);
        assert_eq!(s.noise_std(1300), 0.2);
        assert_eq!(s.noise_std(3300), 0.7);
        assert_eq!(s.noise_std(1_000_000), 0.7);
        assert!(NoiseSchedule::new(vec![(5, 0.1), (5, 0.2)]).is_err());
        assert!(NoiseSchedule::new(vec![(5, -0.1)]).is_err());
    }

    #[test]
    fn clip_examples() {
        // norm 50 → scaled by one half
        let mut a = [30.0, 40.0];
        let n = clip_gradients(&mut [&mut a[..]], 25.0, 100.0);
        assert_eq!(n, 50.0);
        assert_eq!(a, [15.0, 20.0]);
        let mut b = [1.0, -2.0];
        clip_gradients(&mut [&mut b[..]], 25.0, 5.0);
        assert_eq!(b, [1.0, -2.0]);
        let mut c = [30.0];
        clip_gradients(&mut [&mut c[..]], 25.0, 5.0);
        assert_eq!(c, [5.0]);
    }

    #[test]
    fn clip_spans_parameters() {
        let mut a = [3.0];
        let mut b = [4.0];
        clip_gradients(&mut [&mut a[..], &mut b[..]], 2.5, 5.0);
        assert_eq!((a[0], b[0]), (1.5, 2.0));
    }

    #[test]
    fn sgd_examples() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, 1.0])).unwrap();
        store.get_mut(id).grad = Tensor::vector(vec![2.0, 0.0]);
        sgd_step(&mut store, 0.1, 25.0, 5.0);
        assert!((store.get(id).value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(store.get(id).value.data()[1], 1.0);
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
    }

    fn toy() -> (SrnnModel, Dataset) {
        let g = StGraph::builder()
            .node("a", "x")
            .node("b", "x")
            .spatial("a", "b")
            .feature_dim("x", 1)
            .label_dims("x", vec![1])
            .build()
            .unwrap();
        let m = SrnnModel::new(g.clone(), &ArchSpecs::uniform("LSTM(4)-FC(·)", "LSTM(3)"), 1).unwrap();
        let mut s = SequenceBatch::new(12);
        for (v, phase) in [("a", 0.0), ("b", 1.0)] {
            let x: Vec<f64> = (0..13).map(|t| (0.5 * t as f64 + phase).sin()).collect();
            s.node_features
                .insert(v.into(), Tensor::new(vec![12, 1], x[..12].to_vec()).unwrap());
            s.targets.insert(
                v.into(),
                vec![Target::Values(Tensor::new(vec![12, 1], x[1..].to_vec()).unwrap())],
            );
        }
        s.derive_missing_edges(&g).unwrap();
        (
            m,
            Dataset {
                train: vec![s],
                ..Default::default()
            },
        )
    }

    fn cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 1,
            bptt_len: 12,
            max_iterations: iters,
            eval_every: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_leave_parameters() {
        let (mut m, d) = toy();
        let before = m.store().clone();
        let log = train(&mut m, &d, &cfg(0), &NoiseSchedule::default(), TaskMode::Regression).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(m.store(), &before);
    }

    #[test]
    fn one_step_descends() {
        let (mut m, d) = toy();
        let before = evaluate(&m, &d.train, 12, TaskMode::Regression).unwrap();
        let mut c = cfg(1);
        c.step_size = 1e-4;
        train(&mut m, &d, &c, &NoiseSchedule::none(), TaskMode::Regression).unwrap();
        let after = evaluate(&m, &d.train, 12, TaskMode::Regression).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn training_is_deterministic_and_shard_invariant() {
        let (m0, d) = toy();
        let mut c = cfg(6);
        c.batch_size = 4;
        c.bptt_len = 5;
        let run = |workers: usize| {
            let mut m = m0.clone();
            let mut c = c.clone();
            c.workers = workers;
            let log = train(
                &mut m,
                &d,
                &c,
                &NoiseSchedule::new(vec![(2, 0.1)]).unwrap(),
                TaskMode::Regression,
            )
            .unwrap();
            (m, log)
        };
        let (a, la) = run(1);
        let (b, lb) = run(1);
        assert_eq!(la, lb);
        assert_eq!(a.store(), b.store());
        let (p, _) = run(2);
        for ((_, x), (_, y)) in a.store().iter().zip(p.store().iter()) {
            assert!(x.value.max_abs_diff(&y.value).unwrap() < 1e-10);
        }
    }

    #[test]
    fn plateau_decays_step_size() {
        let (mut m, d) = toy();
        let mut c = cfg(12);
        c.step_size = 1e-30;
        c.plateau_window = 2;
        let log = train(&mut m, &d, &c, &NoiseSchedule::none(), TaskMode::Regression).unwrap();
        assert!(log.rows.last().unwrap().lr < 1e-30);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut m, _) = toy();
        let e = train(
            &mut m,
            &Dataset::default(),
            &cfg(1),
            &NoiseSchedule::none(),
            TaskMode::Regression,
        );
        assert!(matches!(e, Err(SrnnError::Data(_))));
    }
}
