//! Maneuver anticipation on synthetic drives. Each segment ends in one of
//! five maneuvers; the driver's head turns toward it and the outside scene
//! hints at it well before it starts. The model is trained to predict the
//! next step's label and scored on how early it commits.
//!
//! cargo run --release --example driving_maneuver

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srnn::data::{Dataset, SequenceBatch, Target};
use srnn::runtime::{SrnnModel, TaskMode};
use srnn::stgraph::StGraph;
use srnn::tasks::{
    driving_graph, driving_specs, maneuver_metrics, ManeuverConfig, ManeuverEvent, ManeuverTrack, MANEUVERS, STRAIGHT,
};
use srnn::tensor::Tensor;
use srnn::trainer::{train, NoiseSchedule, TrainConfig};

const LEN: usize = 40;
const DT: f64 = 0.125;
const DRIVER: usize = 4;
const INSIDE: usize = 3;
const OUTSIDE: usize = 4;

fn noisy(rng: &mut ChaCha8Rng, dim: usize, cue: impl Fn(usize, usize) -> f64) -> Tensor {
    let data = (0..LEN * dim)
        .map(|i| cue(i / dim, i % dim) + rng.random_range(-0.3..0.3))
        .collect();
    Tensor::new(vec![LEN, dim], data).unwrap()
}

fn segment(g: &StGraph, rng: &mut ChaCha8Rng, class: usize) -> srnn::Result<SequenceBatch> {
    let mut s = SequenceBatch::new(LEN);
    // head turns ramp up over the second half of the segment
    let driver = noisy(rng, DRIVER, |t, k| {
        let ramp = (2.0 * t as f64 / LEN as f64 - 1.0).max(0.0);
        if k == class {
            ramp
        } else {
            0.0
        }
    });
    let outside = noisy(rng, OUTSIDE, |_, k| if k == class { 0.3 } else { 0.0 });
    let inside = noisy(rng, INSIDE, |_, _| 0.0);
    s.node_features.insert("driver".into(), driver);
    s.node_features.insert("inside".into(), inside);
    s.node_features.insert("outside".into(), outside);
    s.targets
        .insert("driver".into(), vec![Target::Classes(vec![class; LEN])]);
    s.derive_missing_edges(g)?;
    s.validate(g)?;
    Ok(s)
}

fn main() -> srnn::Result<()> {
    let g = driving_graph(DRIVER, INSIDE, OUTSIDE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut make = |n: usize| -> srnn::Result<Vec<SequenceBatch>> {
        (0..n).map(|i| segment(&g, &mut rng, i % MANEUVERS.len())).collect()
    };
    let ds = Dataset {
        train: make(40)?,
        val: make(10)?,
        test: make(20)?,
    };

    let mut model = SrnnModel::new(g.clone(), &driving_specs(), 0)?;
    println!("{} parameters", model.parameter_count());
    let config = TrainConfig {
        step_size: 1e-2,
        max_iterations: 300,
        batch_size: 10,
        bptt_len: LEN,
        eval_every: 100,
        ..Default::default()
    };
    let log = train(&mut model, &ds, &config, &NoiseSchedule::none(), TaskMode::Anticipation)?;
    for row in &log.rows {
        println!(
            "iter {:>4}  train {:.3}  val {:.3}",
            row.iteration, row.train_loss, row.val_loss
        );
    }

    let mut tracks = Vec::new();
    for s in &ds.test {
        let Target::Classes(labels) = &s.targets["driver"][0] else {
            unreachable!()
        };
        let probs = &model.predict(s)?["driver"][0];
        let k = MANEUVERS.len();
        tracks.push(ManeuverTrack {
            times: (0..LEN).map(|t| t as f64 * DT).collect(),
            probs: probs.data().chunks(k).map(<[f64]>::to_vec).collect(),
            // the maneuver begins right after the segment
            event: (labels[0] != STRAIGHT).then_some(ManeuverEvent {
                class: labels[0],
                start: LEN as f64 * DT,
            }),
        });
    }
    let m = maneuver_metrics(&tracks, &ManeuverConfig::default())?;
    println!(
        "precision {:.2}  recall {:.2}  time-to-maneuver {:.2} s  (tp {} fp {} fn {})",
        m.precision, m.recall, m.time_to_maneuver, m.true_positives, m.false_positives, m.false_negatives
    );
    Ok(())
}
