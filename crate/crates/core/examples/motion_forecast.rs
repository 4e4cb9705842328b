//! Train an S-RNN on synthetic coupled motion, then forecast 100 frames in
//! closed loop from 50 seed frames of a held-out sequence.
//!
//! cargo run --release --example motion_forecast [-- iterations]

use srnn::arch::ArchSpecs;
use srnn::data::Dataset;
use srnn::runtime::{SrnnModel, TaskMode, DEFAULT_HORIZON, DEFAULT_SEED_FRAMES};
use srnn::tasks::{angle_error_by_horizon, horizon_frames, synth_motion, SynthMotionConfig};
use srnn::trainer::{evaluate, train, NoiseSchedule, TrainConfig};

fn main() -> srnn::Result<()> {
    let iterations = std::env::args()
        .nth(1)
        .map_or(Ok(200), |s| s.parse())
        .expect("iterations");
    let data = synth_motion(&SynthMotionConfig {
        sequences: 3,
        ..Default::default()
    })?;
    let ds = Dataset {
        train: data.sequences[..2].to_vec(),
        test: data.sequences[2..].to_vec(),
        ..Default::default()
    };

    let specs = ArchSpecs::uniform("LSTM(16)-LSTM(16)-FC(·)", "LSTM(8)");
    let mut model = SrnnModel::new(data.graph.clone(), &specs, 0)?;
    println!("{} parameters", model.parameter_count());

    let config = TrainConfig {
        max_iterations: iterations,
        eval_every: 50,
        ..Default::default()
    };
    // the curriculum starts at iteration 250; a short run trains clean
    let log = train(
        &mut model,
        &ds,
        &config,
        &NoiseSchedule::default(),
        TaskMode::Regression,
    )?;
    for row in &log.rows {
        println!(
            "iter {:>5}  train {:.3e}  val {:.3e}  noise {}",
            row.iteration, row.train_loss, row.val_loss, row.noise_std
        );
    }
    println!(
        "test loss {:.3e}",
        evaluate(&model, &ds.test, 100, TaskMode::Regression)?
    );

    let test = &ds.test[0];
    let seed = test.window(0, DEFAULT_SEED_FRAMES)?;
    let fc = model.forecast(&seed, DEFAULT_HORIZON)?;
    let truth = &data.frames[2];
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for (v, x) in &fc.frames {
        // the seed covers frames 0..50, so prediction k is frame 51 + k
        preds.push(x.clone());
        truths.push(truth[v].slice(0, DEFAULT_SEED_FRAMES + 1, DEFAULT_HORIZON)?);
    }
    let errors = angle_error_by_horizon(&preds, &truths)?;
    let ms = [80.0, 160.0, 320.0, 560.0, 1000.0];
    for (m, k) in ms.iter().zip(horizon_frames(&ms, 25.0)) {
        println!("{m:>6} ms  error {:.4}", errors[k]);
    }
    Ok(())
}
