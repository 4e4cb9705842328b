//! Record LSTM memory-cell values of a node unit over a sequence and write
//! them as CSV, one row per time step.
//!
//! cargo run --release --example trace_cells [-- traces.csv]

use srnn::arch::ArchSpecs;
use srnn::io::{traces_csv, write_file};
use srnn::runtime::{SrnnModel, TaskMode};
use srnn::stgraph::FactorId;
use srnn::tasks::{synth_motion, SynthMotionConfig};
use srnn::trainer::{train, NoiseSchedule, TrainConfig};

fn main() -> srnn::Result<()> {
    let data = synth_motion(&SynthMotionConfig {
        sequences: 2,
        ..Default::default()
    })?;
    let specs = ArchSpecs::uniform("LSTM(16)-FC(·)", "LSTM(8)");
    let mut model = SrnnModel::new(data.graph.clone(), &specs, 0)?;
    let config = TrainConfig {
        max_iterations: 40,
        batch_size: 10,
        bptt_len: 50,
        eval_every: 40,
        ..Default::default()
    };
    train(
        &mut model,
        &data.dataset(),
        &config,
        &NoiseSchedule::none(),
        TaskMode::Regression,
    )?;

    let unit = FactorId::Node("part1".into());
    let seq = data.sequences[0].window(0, 100)?;
    let traces = model.trace_cells(&seq, &unit, 0, &[0, 1, 2])?;
    for tr in &traces {
        let (lo, hi) = tr
            .activations
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| {
                (lo.min(c), hi.max(c))
            });
        println!(
            "{} {} layer {} cell {}: {} steps in [{lo:+.3}, {hi:+.3}]",
            tr.unit,
            tr.node,
            tr.layer,
            tr.cell,
            tr.activations.len()
        );
    }
    if let Some(path) = std::env::args().nth(1) {
        write_file(path.as_ref(), traces_csv(&traces))?;
        println!("wrote {path}");
    }
    Ok(())
}
