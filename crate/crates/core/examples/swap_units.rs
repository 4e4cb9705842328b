//! Train two models on the same motion graph with different seeds, then
//! transplant one node unit from the second into the first. Units with the
//! same spec are interchangeable; mismatched specs are refused.
//!
//! cargo run --release --example swap_units

use srnn::arch::ArchSpecs;
use srnn::runtime::{swap_unit, SrnnModel, TaskMode};
use srnn::stgraph::FactorId;
use srnn::tasks::{synth_motion, SynthMotionConfig};
use srnn::trainer::{evaluate, train, NoiseSchedule, TrainConfig};

fn main() -> srnn::Result<()> {
    let data = synth_motion(&SynthMotionConfig {
        sequences: 3,
        ..Default::default()
    })?;
    let ds = data.dataset();
    let specs = ArchSpecs::uniform("LSTM(16)-FC(·)", "LSTM(8)");
    let config = TrainConfig {
        max_iterations: 60,
        batch_size: 10,
        bptt_len: 50,
        eval_every: 60,
        ..Default::default()
    };

    let mut models = Vec::new();
    for seed in [10, 11] {
        let mut m = SrnnModel::new(data.graph.clone(), &specs, seed)?;
        train(
            &mut m,
            &ds,
            &TrainConfig {
                rng_seed: seed,
                ..config.clone()
            },
            &NoiseSchedule::none(),
            TaskMode::Regression,
        )?;
        models.push(m);
    }
    let loss = |m: &SrnnModel| evaluate(m, &ds.train, 100, TaskMode::Regression);
    println!("model a loss {:.3e}", loss(&models[0])?);
    println!("model b loss {:.3e}", loss(&models[1])?);

    let part0 = FactorId::Node("part0".into());
    let hybrid = swap_unit(&models[0], &models[1], &part0)?;
    println!("a with b's {part0} unit: loss {:.3e}", loss(&hybrid)?);

    // a unit with a different width cannot be swapped in
    let wide = SrnnModel::new(data.graph.clone(), &ArchSpecs::uniform("LSTM(32)-FC(·)", "LSTM(8)"), 0)?;
    match swap_unit(&models[0], &wide, &part0) {
        Err(e) => println!("refused: {e}"),
        Ok(_) => unreachable!("widths differ"),
    }
    Ok(())
}
