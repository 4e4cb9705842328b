//! Detection on a toy human-object activity graph: the human node labels
//! sub-activities, object nodes label affordances. Features are noisy
//! one-hot codes of piecewise-constant latent labels.
//!
//! cargo run --release --example activity_classification

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srnn::arch::ArchSpecs;
use srnn::data::{Dataset, SequenceBatch, Target};
use srnn::runtime::{SrnnModel, TaskMode};
use srnn::stgraph::StGraph;
use srnn::tasks::{activity_graph, f1_macro, predict_classes, ACTIVITY_AFFORDANCES, ACTIVITY_SUB_ACTIVITIES};
use srnn::tensor::Tensor;
use srnn::trainer::{train, NoiseSchedule, TrainConfig};

const OBJECTS: usize = 2;
const LEN: usize = 60;

/// Labels that hold for 5 to 15 steps, and features that show them through
/// noise.
fn latent(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> (Vec<usize>, Tensor) {
    let mut labels = Vec::with_capacity(LEN);
    while labels.len() < LEN {
        let c = rng.random_range(0..classes);
        let run = rng.random_range(5..=15);
        labels.extend(std::iter::repeat_n(c, run.min(LEN - labels.len())));
    }
    let mut x = vec![0.0; LEN * dim];
    for (t, &c) in labels.iter().enumerate() {
        for k in 0..dim {
            let hot = if k == c { 1.0 } else { 0.0 };
            x[t * dim + k] = hot + rng.random_range(-0.4..0.4);
        }
    }
    (labels, Tensor::new(vec![LEN, dim], x).unwrap())
}

fn sequence(g: &StGraph, rng: &mut ChaCha8Rng) -> srnn::Result<SequenceBatch> {
    let mut s = SequenceBatch::new(LEN);
    let (labels, x) = latent(rng, ACTIVITY_SUB_ACTIVITIES, ACTIVITY_SUB_ACTIVITIES);
    s.node_features.insert("human".into(), x);
    s.targets.insert("human".into(), vec![Target::Classes(labels)]);
    for i in 0..OBJECTS {
        let (labels, x) = latent(rng, ACTIVITY_AFFORDANCES, ACTIVITY_AFFORDANCES);
        s.node_features.insert(format!("object{i}"), x);
        s.targets.insert(format!("object{i}"), vec![Target::Classes(labels)]);
    }
    s.derive_missing_edges(g)?;
    s.validate(g)?;
    Ok(s)
}

fn main() -> srnn::Result<()> {
    let g = activity_graph(OBJECTS, ACTIVITY_SUB_ACTIVITIES, ACTIVITY_AFFORDANCES, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: Vec<SequenceBatch> = (0..12).map(|_| sequence(&g, &mut rng)).collect::<srnn::Result<_>>()?;
    let ds = Dataset {
        train: seqs[..8].to_vec(),
        val: seqs[8..10].to_vec(),
        test: seqs[10..].to_vec(),
    };

    // the full-size setup is activity_specs(); a narrow one trains in seconds
    let specs = ArchSpecs::uniform("LSTM(32)-softmax(·)", "LSTM(16)");
    let mut model = SrnnModel::new(g, &specs, 0)?;
    let config = TrainConfig {
        step_size: 1e-2,
        max_iterations: 400,
        batch_size: 8,
        bptt_len: 30,
        eval_every: 100,
        ..Default::default()
    };
    let log = train(&mut model, &ds, &config, &NoiseSchedule::none(), TaskMode::Detection)?;
    for row in &log.rows {
        println!(
            "iter {:>4}  train {:.3}  val {:.3}",
            row.iteration, row.train_loss, row.val_loss
        );
    }

    let (mut human, mut human_truth) = (Vec::new(), Vec::new());
    let (mut object, mut object_truth) = (Vec::new(), Vec::new());
    for s in &ds.test {
        let out = model.predict(s)?;
        for (v, heads) in out {
            let Target::Classes(truth) = &s.targets[&v][0] else {
                unreachable!()
            };
            let (p, t) = if v == "human" {
                (&mut human, &mut human_truth)
            } else {
                (&mut object, &mut object_truth)
            };
            p.extend(predict_classes(&heads[0]));
            t.extend(truth);
        }
    }
    println!("sub-activity F1 {:.3}", f1_macro(&human, &human_truth)?.macro_f1);
    println!("affordance F1   {:.3}", f1_macro(&object, &object_truth)?.macro_f1);
    Ok(())
}
